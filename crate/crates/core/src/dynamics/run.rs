//! Time loops, diagnostics series and run artifacts (CSV snapshots, JSON manifest).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::*;

/// One record of the per-run diagnostics series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesRecord {
    pub step: usize,
    pub t: f64,
    /// `sum (|v|^2/2 + Psi) dx`; equilibrium runs use `sigma_E`.
    pub entropy: f64,
    /// `int_0^t sum D/eps dx dt`.
    pub dissipation: f64,
    pub total_v: [f64; 3],
    pub total_f1: [f64; 3],
    pub stress_gap: f64,
    pub constraint_defect: f64,
    pub min_det: f64,
    pub max_speed: f64,
}

impl SeriesRecord {
    /// `entropy + dissipation`; non-increasing up to discretization error.
    pub fn h_total(&self) -> f64 {
        self.entropy + self.dissipation
    }

    pub const CSV_HEADER: &'static str =
        "step,t,entropy,dissipation,h_total,total_v1,total_v2,total_v3,total_F11,total_F21,total_F31,stress_gap,constraint_defect,min_det,max_speed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.step,
            self.t,
            self.entropy,
            self.dissipation,
            self.h_total(),
            self.total_v[0],
            self.total_v[1],
            self.total_v[2],
            self.total_f1[0],
            self.total_f1[1],
            self.total_f1[2],
            self.stress_gap,
            self.constraint_defect,
            self.min_det,
            self.max_speed
        )
    }
}

/// Summary statistics of an H-theorem series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HTheoremStats {
    /// `sum_n max(0, H_{n+1} - H_n)`.
    pub positive_variation: f64,
    /// `H_0 - H_N >= 0`: entropy removed by the scheme beyond the physical dissipation.
    pub defect: f64,
    /// `positive_variation + |defect|`.
    pub tolerance: f64,
}

pub fn h_theorem_stats(series: &[SeriesRecord]) -> HTheoremStats {
    h_stats_of(&series.iter().map(SeriesRecord::h_total).collect::<Vec<_>>())
}

/// [`HTheoremStats`] of a sequence of `H + int D` values.
pub fn h_stats_of(h: &[f64]) -> HTheoremStats {
    let mut pv = 0.0;
    for w in h.windows(2) {
        pv += (w[1] - w[0]).max(0.0);
    }
    let defect = match (h.first(), h.last()) {
        (Some(a), Some(b)) => a - b,
        _ => 0.0,
    };
    HTheoremStats { positive_variation: pv, defect, tolerance: pv + defect.abs() }
}

fn record_relax(
    model: &ConstitutiveModel,
    structure: Option<&EntropyStructure>,
    s: &RelaxState,
    step: usize,
    dissipation: f64,
) -> Result<SeriesRecord> {
    let entropy = match structure {
        Some(st) => total_entropy(st, s)?,
        None => f64::NAN,
    };
    let (tv, tf) = s.totals();
    Ok(SeriesRecord {
        step,
        t: s.t,
        entropy,
        dissipation,
        total_v: tv,
        total_f1: tf,
        stress_gap: stress_gap(model, s),
        constraint_defect: 0.0,
        min_det: s.min_det(),
        max_speed: max_wave_speed(model, s)?,
    })
}

fn record_equilibrium(model: &ConstitutiveModel, s: &EquilState, step: usize) -> Result<SeriesRecord> {
    let (tv, tf) = s.totals();
    Ok(SeriesRecord {
        step,
        t: s.t,
        entropy: total_energy_equilibrium(model, s),
        dissipation: 0.0,
        total_v: tv,
        total_f1: tf,
        stress_gap: 0.0,
        constraint_defect: 0.0,
        min_det: s.min_det(),
        max_speed: max_wave_speed_equilibrium(model, s)?,
    })
}

fn record_augmented(
    model: &ConstitutiveModel,
    structure: Option<&EntropyStructure>,
    s: &AugmentedState,
    step: usize,
    dissipation: f64,
) -> Result<SeriesRecord> {
    let dx = s.grid.dx();
    let mut entropy = f64::NAN;
    if let Some(st) = structure {
        entropy = 0.0;
        for j in 0..s.grid.n_cells {
            let v = s.v[j];
            entropy += (0.5 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) + st.psi(&s.xi[j], &s.tau[j], Some(&s.xi[j]))?) * dx;
        }
    }
    let (tv, tf) = s.totals();
    let gap = (0..s.grid.n_cells)
        .map(|j| (model.project_active(&s.tau[j]) - model.project_active(&model.tau_eq(&s.xi[j]))).max_abs())
        .fold(0.0, f64::max);
    Ok(SeriesRecord {
        step,
        t: s.t,
        entropy,
        dissipation,
        total_v: tv,
        total_f1: tf,
        stress_gap: gap,
        constraint_defect: constraint_defect(s),
        min_det: s.min_det(),
        max_speed: max_wave_speed_augmented(model, s)?,
    })
}

/// Time-loop parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopSpec {
    pub t_end: f64,
    pub eps: f64,
    pub stride: usize,
    pub numerics: Numerics,
}

fn reached(t: f64, t_end: f64) -> bool {
    t_end - t <= 1e-13 * t_end.abs().max(1.0)
}

/// Advances a relaxation state to `t_end` with clipped final step; `observe` sees the state at
/// step 0, every `stride` steps and at the end. Returns the series, final state and step count.
pub fn run_relax(
    model: &ConstitutiveModel,
    structure: Option<&EntropyStructure>,
    init: RelaxState,
    spec: &LoopSpec,
    observe: &mut dyn FnMut(&RelaxState, usize) -> Result<()>,
) -> Result<(Vec<SeriesRecord>, RelaxState, usize)> {
    let mut s = init;
    let mut diss = 0.0;
    let mut step = 0;
    let mut series = vec![record_relax(model, structure, &s, 0, 0.0)?];
    observe(&s, 0)?;
    while !reached(s.t, spec.t_end) {
        let lam = max_wave_speed(model, &s)?;
        let dt = stable_dt(lam, s.grid.dx(), spec.numerics.cfl).min(spec.t_end - s.t);
        let (next, info) = step_relax(&s, model, structure, dt, spec.eps, &spec.numerics)?;
        s = next;
        diss += info.dissipation;
        step += 1;
        let last = reached(s.t, spec.t_end);
        if step % spec.stride == 0 || last {
            series.push(record_relax(model, structure, &s, step, diss)?);
            observe(&s, step)?;
        }
    }
    Ok((series, s, step))
}

pub fn run_equilibrium(
    model: &ConstitutiveModel,
    init: EquilState,
    spec: &LoopSpec,
    observe: &mut dyn FnMut(&EquilState, usize) -> Result<()>,
) -> Result<(Vec<SeriesRecord>, EquilState, usize)> {
    let mut s = init;
    let mut step = 0;
    let mut series = vec![record_equilibrium(model, &s, 0)?];
    observe(&s, 0)?;
    while !reached(s.t, spec.t_end) {
        let lam = max_wave_speed_equilibrium(model, &s)?;
        let dt = stable_dt(lam, s.grid.dx(), spec.numerics.cfl).min(spec.t_end - s.t);
        s = step_equilibrium(&s, model, dt, &spec.numerics)?.0;
        step += 1;
        let last = reached(s.t, spec.t_end);
        if step % spec.stride == 0 || last {
            series.push(record_equilibrium(model, &s, step)?);
            observe(&s, step)?;
        }
    }
    Ok((series, s, step))
}

pub fn run_augmented(
    model: &ConstitutiveModel,
    structure: Option<&EntropyStructure>,
    init: AugmentedState,
    spec: &LoopSpec,
    observe: &mut dyn FnMut(&AugmentedState, usize) -> Result<()>,
) -> Result<(Vec<SeriesRecord>, AugmentedState, usize)> {
    let mut s = init;
    let mut diss = 0.0;
    let mut step = 0;
    let mut series = vec![record_augmented(model, structure, &s, 0, 0.0)?];
    observe(&s, 0)?;
    while !reached(s.t, spec.t_end) {
        let lam = max_wave_speed_augmented(model, &s)?;
        let dt = stable_dt(lam, s.grid.dx(), spec.numerics.cfl).min(spec.t_end - s.t);
        let (next, info) = step_augmented(&s, model, structure, dt, spec.eps, &spec.numerics)?;
        s = next;
        diss += info.dissipation;
        step += 1;
        let last = reached(s.t, spec.t_end);
        if step % spec.stride == 0 || last {
            series.push(record_augmented(model, structure, &s, step, diss)?);
            observe(&s, step)?;
        }
    }
    Ok((series, s, step))
}

/// Advances a relaxation state exactly to `t_target`; returns the accumulated dissipation.
pub fn advance_relax_to(
    model: &ConstitutiveModel,
    structure: Option<&EntropyStructure>,
    state: RelaxState,
    t_target: f64,
    eps: f64,
    numerics: &Numerics,
) -> Result<(RelaxState, f64, usize)> {
    let mut s = state;
    let mut diss = 0.0;
    let mut steps = 0;
    while !reached(s.t, t_target) {
        let lam = max_wave_speed(model, &s)?;
        let dt = stable_dt(lam, s.grid.dx(), numerics.cfl).min(t_target - s.t);
        let (next, info) = step_relax(&s, model, structure, dt, eps, numerics)?;
        s = next;
        diss += info.dissipation;
        steps += 1;
    }
    s.t = t_target;
    Ok((s, diss, steps))
}

/// Advances an equilibrium state exactly to `t_target`.
pub fn advance_equilibrium_to(
    model: &ConstitutiveModel,
    state: EquilState,
    t_target: f64,
    numerics: &Numerics,
) -> Result<(EquilState, usize)> {
    let mut s = state;
    let mut steps = 0;
    while !reached(s.t, t_target) {
        let lam = max_wave_speed_equilibrium(model, &s)?;
        let dt = stable_dt(lam, s.grid.dx(), numerics.cfl).min(t_target - s.t);
        s = step_equilibrium(&s, model, dt, numerics)?.0;
        steps += 1;
    }
    s.t = t_target;
    Ok((s, steps))
}

/// Snapshot CSV: one row per cell with `x`, `v_i`, every `F_ia` and every `tau` (or `Xi`) slot.
pub fn snapshot_csv(
    grid: &SlabGrid,
    background: &Mat,
    v: &[[f64; 3]],
    f1: &[[f64; 3]],
    extra: &[(&str, &[Minors])],
) -> String {
    let d = background.dim().d();
    let mut header = vec!["x".to_string()];
    for i in 0..d {
        header.push(format!("v{}", i + 1));
    }
    for i in 0..d {
        for a in 0..d {
            header.push(format!("F{}{}", i + 1, a + 1));
        }
    }
    for (name, vals) in extra {
        if let Some(first) = vals.first() {
            for k in 0..first.len() {
                header.push(format!("{name}{k}"));
            }
        }
    }
    let mut out = header.join(",");
    out.push('\n');
    for j in 0..grid.n_cells {
        let f = with_column(background, &f1[j]);
        let mut row = vec![format!("{:.17e}", grid.center(j))];
        row.extend(v[j][..d].iter().map(|x| format!("{x:.17e}")));
        for i in 0..d {
            for a in 0..d {
                row.push(format!("{:.17e}", f.get(i, a)));
            }
        }
        for (_, vals) in extra {
            row.extend(vals[j].as_slice().iter().map(|x| format!("{x:.17e}")));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn series_csv(series: &[SeriesRecord]) -> String {
    let mut s = String::from(SeriesRecord::CSV_HEADER);
    s.push('\n');
    for r in series {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Run manifest; written before any computation and rewritten on completion or abort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub status: String,
    pub abort_reason: Option<String>,
    pub steps: usize,
    pub t_final: f64,
    pub wall_clock_s: f64,
    pub files: Vec<String>,
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, config_hash: &str, config: serde_json::Value) -> Manifest {
        Manifest {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            config,
            status: "running".into(),
            abort_reason: None,
            steps: 0,
            t_final: 0.0,
            wall_clock_s: 0.0,
            files: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| DynamicsError::Io(e.to_string()))?;
        write_file(&dir.join("manifest.json"), &text)
    }
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| DynamicsError::Io(format!("{}: {e}", p.display())))?;
    }
    let mut f = fs::File::create(path).map_err(|e| DynamicsError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(text.as_bytes()).map_err(|e| DynamicsError::Io(format!("{}: {e}", path.display())))
}

/// Artifact sink of a `simulate` run.
pub struct RunArtifacts {
    pub dir: Option<PathBuf>,
    pub csv: bool,
    pub files: Vec<String>,
}

impl RunArtifacts {
    fn snapshot(&mut self, step: usize, text: impl FnOnce() -> String) -> Result<()> {
        if let (Some(dir), true) = (&self.dir, self.csv) {
            let name = format!("snapshot_{step:07}.csv");
            write_file(&dir.join(&name), &text())?;
            self.files.push(name);
        }
        Ok(())
    }
}

/// Result of [`run`].
#[derive(Debug, Clone)]
pub struct RunReport {
    pub series: Vec<SeriesRecord>,
    pub steps: usize,
    pub t_final: f64,
    pub h_stats: Option<HTheoremStats>,
    pub files: Vec<String>,
    pub wall_clock_s: f64,
}

/// Runs the configured slab system from the configured initial data. Snapshots go to
/// `artifacts.dir` when set; on abort the partial series is returned with the error.
pub fn run(
    config: &crate::config::RunConfig,
    model: &ConstitutiveModel,
    structure: Option<&EntropyStructure>,
    artifacts: &mut RunArtifacts,
) -> std::result::Result<RunReport, (DynamicsError, usize)> {
    use crate::config::SystemKind;
    let start = Instant::now();
    let fail = |e: DynamicsError| (e, 0usize);
    let grid = SlabGrid::new(config.grid.n_cells, config.grid.x_min, config.grid.x_max).map_err(fail)?;
    let motion = config.motion(model.dim()).map_err(|e| fail(DynamicsError::Config(e.to_string())))?;
    let numerics = config.numerics();
    let init = init_from_motion(&grid, &motion, model, config.tau_init(), numerics.w_min).map_err(fail)?;
    let spec = LoopSpec { t_end: config.time.t_end, eps: config.relax.epsilon, stride: config.time.snapshot_stride, numerics };
    let mut last_step = 0usize;
    let result = match config.relax.system {
        SystemKind::Relax => run_relax(model, structure, init, &spec, &mut |s, k| {
            last_step = k;
            artifacts.snapshot(k, || snapshot_csv(&s.grid, &s.background, &s.v, &s.f1, &[("tau", &s.tau)]))
        })
        .map(|(a, s, n)| (a, s.t, n)),
        SystemKind::Equilibrium => run_equilibrium(model, init.to_equilibrium(), &spec, &mut |s, k| {
            last_step = k;
            artifacts.snapshot(k, || snapshot_csv(&s.grid, &s.background, &s.v, &s.f1, &[]))
        })
        .map(|(a, s, n)| (a, s.t, n)),
        SystemKind::Augmented => run_augmented(model, structure, init.to_augmented(), &spec, &mut |s, k| {
            last_step = k;
            artifacts.snapshot(k, || snapshot_csv(&s.grid, &s.background, &s.v, &s.f1, &[("xi", &s.xi), ("tau", &s.tau)]))
        })
        .map(|(a, s, n)| (a, s.t, n)),
    };
    let (series, t_final, steps) = result.map_err(|e| (e, last_step))?;
    if let (Some(dir), true) = (&artifacts.dir, artifacts.csv) {
        write_file(&dir.join("series.csv"), &series_csv(&series)).map_err(fail)?;
        artifacts.files.push("series.csv".into());
    }
    let h_stats = if series.iter().all(|r| r.entropy.is_finite()) { Some(h_theorem_stats(&series)) } else { None };
    Ok(RunReport {
        series,
        steps,
        t_final,
        h_stats,
        files: artifacts.files.clone(),
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

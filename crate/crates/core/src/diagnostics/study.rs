//! Reference solutions on a refined grid, the `eps`-convergence study and the refinement studies
//! of the balance residuals.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    equilibrium_balance_residual, equilibrium_relative_entropy, hat_derivatives, l2_gaps, pair_snapshot,
    relen_balance_residual, relative_entropy, BalanceReport, HatDerivatives, PairSnapshot, Summation,
};
use crate::config::ConvergeConfig;
use crate::constitutive::ConstitutiveModel;
use crate::dynamics::{
    advance_equilibrium_to, advance_relax_to, init_from_motion, max_gradient, DynamicsError, EquilState, Numerics,
    RelaxState, SlabGrid, SlabMotion, TauInit,
};
use crate::entropy::EntropyStructure;

/// The smooth solution restricted to the coarse grid at one time.
#[derive(Debug, Clone)]
pub struct HatSample {
    pub state: EquilState,
    pub deriv: HatDerivatives,
}

/// Runs the equilibrium system on `grid` refined by `refinement` from prepared data and returns the
/// restricted states at the (increasing) `times`. Aborts when `max |dF/dx|` grows by more than
/// `blowup_factor` over its initial value.
pub fn reference_at_times(
    model: &ConstitutiveModel,
    grid: &SlabGrid,
    motion: &SlabMotion,
    refinement: usize,
    times: &[f64],
    numerics: &Numerics,
    blowup_factor: f64,
) -> Result<Vec<HatSample>, DynamicsError> {
    let fine_grid = grid.refined(refinement);
    let mut fine = init_from_motion(&fine_grid, motion, model, TauInit::Prepared, numerics.w_min)?.to_equilibrium();
    let g0 = max_gradient(&fine.f1, fine_grid.dx()).max(1e-12);
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        if t < fine.t {
            return Err(DynamicsError::Config(format!("reference times must increase, got {t} after {}", fine.t)));
        }
        fine = advance_equilibrium_to(model, fine, t, numerics)?.0;
        let factor = max_gradient(&fine.f1, fine_grid.dx()) / g0;
        if factor > blowup_factor {
            return Err(DynamicsError::BlowUp { factor, limit: blowup_factor, t });
        }
        out.push(HatSample { state: fine.restrict(refinement)?, deriv: hat_derivatives(model, &fine, refinement)? });
    }
    Ok(out)
}

/// Everything the study needs besides the list of `eps`.
#[derive(Clone, Copy)]
pub struct StudySetup<'a> {
    pub model: &'a ConstitutiveModel,
    pub structure: &'a EntropyStructure,
    pub grid: SlabGrid,
    pub motion: &'a SlabMotion,
    pub tau_init: TauInit,
    pub t_end: f64,
    pub numerics: Numerics,
    pub converge: &'a ConvergeConfig,
    pub summation: Summation,
}

impl StudySetup<'_> {
    /// `t_k = k t_end / K`, `k = 0..=K`.
    pub fn snapshot_times(&self) -> Vec<f64> {
        let k = self.converge.snapshots.max(2);
        (0..=k).map(|i| self.t_end * i as f64 / k as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowStatus {
    Ok,
    FloorLimited,
    Aborted,
}

impl RowStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RowStatus::Ok => "ok",
            RowStatus::FloorLimited => "floor-limited",
            RowStatus::Aborted => "aborted",
        }
    }
}

/// One `eps` of the study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub eps: f64,
    pub status: RowStatus,
    pub abort_reason: Option<String>,
    /// `sup_k int e_r(t_k)`.
    pub sup_e_r: f64,
    pub e_r_final: f64,
    /// L2 gaps `(v, F, tau - tau_inf(F_hat))` at `t_end`.
    pub gap_v: f64,
    pub gap_f: f64,
    pub gap_tau: f64,
    /// `sup_k |Q1|_1`, ..., `sup_k |L|_1`.
    pub q_norms: [f64; 4],
    pub balance_residual: f64,
    pub steps: usize,
    /// `int e_r(t_k)` at every snapshot time.
    pub e_r_series: Vec<f64>,
}

impl ConvergenceRow {
    pub const CSV_HEADER: &'static str =
        "eps,status,sup_e_r_total,e_r_total_final,l2_gap_v,l2_gap_F,l2_gap_tau,Q1_L1,Q2_L1,Q3_L1,L_L1,balance_residual,steps";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.17e},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}",
            self.eps,
            self.status.as_str(),
            self.sup_e_r,
            self.e_r_final,
            self.gap_v,
            self.gap_f,
            self.gap_tau,
            self.q_norms[0],
            self.q_norms[1],
            self.q_norms[2],
            self.q_norms[3],
            self.balance_residual,
            self.steps
        )
    }
}

/// Least-squares line `y = a + b x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    /// Standard error of the slope; NaN with two points.
    pub slope_se: f64,
    pub n_points: usize,
}

impl LineFit {
    /// `slope -/+ 2 SE`.
    pub fn band(&self) -> (f64, f64) {
        (self.slope - 2.0 * self.slope_se, self.slope + 2.0 * self.slope_se)
    }
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if n > 2 {
        let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        (rss / (n - 2) as f64 / sxx).sqrt()
    } else {
        f64::NAN
    };
    Some(LineFit { intercept, slope, slope_se, n_points: n })
}

/// Observed order `log2(e_k / e_{k+1})` between successive halvings, and the least-squares order
/// of `log e` against `log h`.
pub fn observed_orders(h: &[f64], e: &[f64]) -> (Vec<f64>, Option<f64>) {
    let pair = e.windows(2).zip(h.windows(2)).map(|(ew, hw)| (ew[0] / ew[1]).ln() / (hw[0] / hw[1]).ln()).collect();
    let lx: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = e.iter().map(|v| v.ln()).collect();
    (pair, fit_line(&lx, &ly).map(|f| f.slope))
}

/// `int e_r(t) <= C1 eps exp(C2 t)` fitted on the envelope `max_eps int e_r(t) / eps`; `C1` is
/// raised until the bound holds at every snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GronwallFit {
    pub c1: f64,
    pub c2: f64,
}

pub fn fit_gronwall(times: &[f64], rows: &[ConvergenceRow]) -> Option<GronwallFit> {
    let ok: Vec<&ConvergenceRow> = rows.iter().filter(|r| r.status != RowStatus::Aborted && r.eps > 0.0).collect();
    if ok.is_empty() {
        return None;
    }
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    for (k, &t) in times.iter().enumerate() {
        let env = ok.iter().map(|r| r.e_r_series[k] / r.eps).fold(0.0, f64::max);
        if env > 0.0 && t > 0.0 {
            ts.push(t);
            ys.push(env);
        }
    }
    let c2 = match fit_line(&ts, &ys.iter().map(|y| y.ln()).collect::<Vec<_>>()) {
        Some(f) => f.slope.max(0.0),
        None if !ts.is_empty() => 0.0,
        None => return None,
    };
    let c1 = ts.iter().zip(&ys).map(|(t, y)| y * (-c2 * t).exp()).fold(0.0, f64::max);
    Some(GronwallFit { c1, c2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub rows: Vec<ConvergenceRow>,
    pub times: Vec<f64>,
    /// `sup_t int e_r` of the `eps = 0` (projection) run.
    pub floor: f64,
    pub floor_factor: f64,
    pub fit: Option<LineFit>,
    pub threshold: f64,
    pub slope_pass: Option<bool>,
    /// `None` with fewer than two usable rows.
    pub gaps_monotone: Option<bool>,
    pub gronwall: Option<GronwallFit>,
    pub n_cells: usize,
    pub refinement: usize,
    pub tau_init: String,
    pub notes: Vec<String>,
}

impl ConvergenceSummary {
    pub fn csv(&self) -> String {
        let mut s = String::from(ConvergenceRow::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    /// `t` then one `e_r_total` column per `eps`.
    pub fn series_csv(&self) -> String {
        let mut s = String::from("t");
        for r in &self.rows {
            s.push_str(&format!(",e_r_total_eps_{:e}", r.eps));
        }
        s.push('\n');
        for (k, t) in self.times.iter().enumerate() {
            s.push_str(&format!("{t:.17e}"));
            for r in &self.rows {
                match r.e_r_series.get(k) {
                    Some(v) => s.push_str(&format!(",{v:.17e}")),
                    None => s.push_str(",nan"),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Whether every criterion of the study holds: slope at or above the threshold and
    /// monotone gaps.
    pub fn pass(&self) -> bool {
        self.slope_pass == Some(true) && self.gaps_monotone != Some(false)
    }
}

struct EpsRun {
    e_r: Vec<f64>,
    pairs: Vec<PairSnapshot>,
    gaps: [f64; 3],
    steps: usize,
}

fn run_eps(setup: &StudySetup, eps: f64, times: &[f64], hats: &[HatSample]) -> Result<EpsRun, DynamicsError> {
    let mut s = init_from_motion(&setup.grid, setup.motion, setup.model, setup.tau_init, setup.numerics.w_min)?;
    let mut steps = 0;
    let mut e_r = Vec::with_capacity(times.len());
    let mut pairs = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        let (next, _, n) = advance_relax_to(setup.model, Some(setup.structure), s, t, eps, &setup.numerics)?;
        s = next;
        steps += n;
        let p = pair_snapshot(setup.structure, &s, &hats[k].state, &hats[k].deriv, setup.summation)?;
        e_r.push(p.total_e_r);
        pairs.push(p);
    }
    let gaps = l2_gaps(setup.model, &s, &hats[times.len() - 1].state)?;
    Ok(EpsRun { e_r, pairs, gaps, steps })
}

fn row_from(eps: f64, r: Result<EpsRun, DynamicsError>) -> ConvergenceRow {
    match r {
        Ok(run) => {
            let mut q = [0.0f64; 4];
            for p in &run.pairs {
                for i in 0..4 {
                    q[i] = q[i].max(p.error_norms[i]);
                }
            }
            let balance = if eps > 0.0 { relen_balance_residual(&run.pairs, eps).map(|b| b.max_abs).unwrap_or(f64::NAN) } else { f64::NAN };
            ConvergenceRow {
                eps,
                status: RowStatus::Ok,
                abort_reason: None,
                sup_e_r: run.e_r.iter().cloned().fold(0.0, f64::max),
                e_r_final: *run.e_r.last().unwrap_or(&f64::NAN),
                gap_v: run.gaps[0],
                gap_f: run.gaps[1],
                gap_tau: run.gaps[2],
                q_norms: q,
                balance_residual: balance,
                steps: run.steps,
                e_r_series: run.e_r,
            }
        }
        Err(e) => ConvergenceRow {
            eps,
            status: RowStatus::Aborted,
            abort_reason: Some(e.to_string()),
            sup_e_r: f64::NAN,
            e_r_final: f64::NAN,
            gap_v: f64::NAN,
            gap_f: f64::NAN,
            gap_tau: f64::NAN,
            q_norms: [f64::NAN; 4],
            balance_residual: f64::NAN,
            steps: 0,
            e_r_series: Vec::new(),
        },
    }
}

/// Runs the relaxation system for every `eps` against one refined equilibrium reference.
///
/// The discretization floor is `sup_t int e_r` of the `eps = 0` run; rows below
/// `floor_factor * floor` are flagged floor-limited and left out of the slope. Independent `eps`
/// runs execute in parallel; each row depends only on its own run.
pub fn convergence_study(setup: &StudySetup, eps_list: &[f64]) -> Result<ConvergenceSummary, DynamicsError> {
    if eps_list.is_empty() || eps_list.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(DynamicsError::Config("eps_list must hold finite positive values".into()));
    }
    if eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(DynamicsError::Config("eps_list must be strictly decreasing".into()));
    }
    let times = setup.snapshot_times();
    let cfg = setup.converge;
    let hats = reference_at_times(setup.model, &setup.grid, setup.motion, cfg.refinement, &times, &setup.numerics, cfg.blowup_factor)?;
    let floor_run = run_eps(setup, 0.0, &times, &hats)?;
    let floor = floor_run.e_r.iter().cloned().fold(0.0, f64::max);
    let mut rows: Vec<ConvergenceRow> =
        eps_list.par_iter().map(|&eps| row_from(eps, run_eps(setup, eps, &times, &hats))).collect();
    for r in &mut rows {
        if r.status == RowStatus::Ok && r.sup_e_r < cfg.floor_factor * floor {
            r.status = RowStatus::FloorLimited;
        }
    }
    let usable: Vec<&ConvergenceRow> = rows.iter().filter(|r| r.status == RowStatus::Ok && r.sup_e_r > 0.0).collect();
    let fit = if eps_list.len() >= 2 {
        fit_line(&usable.iter().map(|r| r.eps.ln()).collect::<Vec<_>>(), &usable.iter().map(|r| r.sup_e_r.ln()).collect::<Vec<_>>())
    } else {
        None
    };
    let completed: Vec<&ConvergenceRow> = rows.iter().filter(|r| r.status != RowStatus::Aborted).collect();
    let gaps_monotone = if completed.len() >= 2 {
        Some(completed.windows(2).all(|w| w[1].gap_v < w[0].gap_v && w[1].gap_f < w[0].gap_f && w[1].gap_tau < w[0].gap_tau))
    } else {
        None
    };
    let gronwall = fit_gronwall(&times, &rows);
    let tau_init = match setup.tau_init {
        TauInit::Prepared => "prepared".to_string(),
        TauInit::Offset(s) => format!("unprepared (offset {s})"),
    };
    let mut notes = vec![
        "sup over t is taken at uniformly spaced snapshot times".to_string(),
        "the theorem's constant s has no operational role; only C1, C2 are fitted".to_string(),
    ];
    if rows.iter().any(|r| r.status == RowStatus::FloorLimited) {
        notes.push(format!("rows with sup e_r below {} x floor are excluded from the fit", cfg.floor_factor));
    }
    if rows.iter().any(|r| r.status == RowStatus::Aborted) {
        notes.push("aborted rows invalidate their table entries".to_string());
    }
    Ok(ConvergenceSummary {
        slope_pass: fit.map(|f| f.slope >= cfg.threshold),
        rows,
        times,
        floor,
        floor_factor: cfg.floor_factor,
        fit,
        threshold: cfg.threshold,
        gaps_monotone,
        gronwall,
        n_cells: setup.grid.n_cells,
        refinement: cfg.refinement,
        tau_init,
        notes,
    })
}

/// Three snapshots `t_c - delta, t_c, t_c + delta` around every center, with `delta = dx`.
fn centered_triples(centers: &[f64], dx: f64) -> Vec<f64> {
    centers.iter().flat_map(|&c| [c - dx, c, c + dx]).collect()
}

/// Relative-entropy balance residual at `n_cells` (max over the `centers`).
pub fn relax_balance_at(setup: &StudySetup, n_cells: usize, eps: f64, centers: &[f64]) -> Result<f64, DynamicsError> {
    let grid = super::grid_like(&setup.grid, n_cells)?;
    let times = centered_triples(centers, grid.dx());
    let cfg = setup.converge;
    let hats = reference_at_times(setup.model, &grid, setup.motion, cfg.refinement, &times, &setup.numerics, cfg.blowup_factor)?;
    let mut s = init_from_motion(&grid, setup.motion, setup.model, setup.tau_init, setup.numerics.w_min)?;
    let mut worst = 0.0f64;
    for (c, chunk) in times.chunks(3).enumerate() {
        let mut pairs = Vec::with_capacity(3);
        for (i, &t) in chunk.iter().enumerate() {
            s = advance_relax_to(setup.model, Some(setup.structure), s, t, eps, &setup.numerics)?.0;
            let h = &hats[3 * c + i];
            pairs.push(pair_snapshot(setup.structure, &s, &h.state, &h.deriv, setup.summation)?);
        }
        worst = worst.max(relen_balance_residual(&pairs, eps)?.max_abs);
    }
    Ok(worst)
}

/// Equilibrium relative-energy balance residual between a coarse equilibrium run from `motion_a`
/// and the refined reference from `setup.motion`.
pub fn equilibrium_balance_at(
    setup: &StudySetup,
    motion_a: &SlabMotion,
    n_cells: usize,
    centers: &[f64],
) -> Result<f64, DynamicsError> {
    let grid = super::grid_like(&setup.grid, n_cells)?;
    let times = centered_triples(centers, grid.dx());
    let cfg = setup.converge;
    let hats = reference_at_times(setup.model, &grid, setup.motion, cfg.refinement, &times, &setup.numerics, cfg.blowup_factor)?;
    let mut a = init_from_motion(&grid, motion_a, setup.model, TauInit::Prepared, setup.numerics.w_min)?.to_equilibrium();
    let mut worst = 0.0f64;
    for (c, chunk) in times.chunks(3).enumerate() {
        let mut snaps = Vec::with_capacity(3);
        for (i, &t) in chunk.iter().enumerate() {
            a = advance_equilibrium_to(setup.model, a, t, &setup.numerics)?.0;
            let h = &hats[3 * c + i];
            let r = equilibrium_relative_entropy(setup.model, &a, &h.state, &h.deriv, setup.summation)?;
            snaps.push((t, r.eta_total, r.q_total));
        }
        let b: BalanceReport = equilibrium_balance_residual(&snaps)?;
        worst = worst.max(b.max_abs);
    }
    Ok(worst)
}

/// `min_j e_r_j - c (|v - v_hat|^2 + |Xi - Xi_hat|^2 + |tau - tau_inf(F_hat)|^2)_j`; nonnegative
/// when the pointwise lower bound holds with constant `c`.
pub fn e_r_lower_bound_margin(
    structure: &EntropyStructure,
    state: &RelaxState,
    hat: &EquilState,
    c: f64,
) -> Result<f64, DynamicsError> {
    let model = structure.model();
    let rep = relative_entropy(structure, state, hat, Summation::Ordered)?;
    let mut worst = f64::INFINITY;
    for j in 0..state.grid.n_cells {
        let (xi, xh) = (crate::minors::phi(&state.f(j)), crate::minors::phi(&hat.f(j)));
        let dv: f64 = (0..3).map(|i| (state.v[j][i] - hat.v[j][i]).powi(2)).sum();
        let tinf = model.project_active(&model.tau_eq(&xh));
        let q = dv + (xi - xh).norm_sq() + (model.project_active(&state.tau[j]) - tinf).norm_sq();
        worst = worst.min(rep.e_r_field[j] - c * q);
    }
    Ok(worst)
}

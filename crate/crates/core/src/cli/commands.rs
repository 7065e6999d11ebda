use std::io::Write;

use serde_json::json;

use super::{CliError, CommonArgs, Session, EXIT_ABORT, EXIT_FAIL, EXIT_PASS};
use crate::constitutive::{check_h0, check_h1, check_h2, ConstitutiveModel, SampleBox};
use crate::diagnostics::{check_ellipticity, convergence_study, StudySetup, Summation};
use crate::dynamics::{run, RunArtifacts};
use crate::entropy::{build_g, check_char, check_dissipation_bound, check_equilibrium, convexity_margin, EntropyStructure};
use crate::gasdyn::{
    builtin_gas, check_a_conditions, cross_check_refinement, euler_eps_study, euler_h_stats, euler_init_from_motion,
    euler_series_csv, euler_snapshot_csv, run_euler, CrossCheckSpec, EulerNumerics, GasError, GasModel,
};
use crate::minors::Dim;

/// Sampled deformations for the ellipticity check: `F = I + H`, `|H_ia| <= 0.3`, `det F >= 0.5`.
const ELLIPTICITY_SPREAD: f64 = 0.3;
const ELLIPTICITY_W_MIN: f64 = 0.5;
/// Tolerance of the sampled dissipation lower bound.
const DISSIPATION_TOL: f64 = 1e-10;
/// Minimum observed order of the Lagrangean/Eulerian density gap.
const CROSSCHECK_MIN_ORDER: f64 = 0.9;

fn to_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn model_of(s: &Session) -> Result<(ConstitutiveModel, SampleBox, usize), CliError> {
    let mc = s.cfg.model.as_ref().ok_or_else(|| CliError::usage("config has no [model] table"))?;
    mc.build().map_err(|e| CliError::usage(format!("model: {e}")))
}

fn gas_of(s: &Session) -> Result<GasModel, CliError> {
    let gc = s.cfg.gas.as_ref().ok_or_else(|| CliError::usage("config has no [gas] table"))?;
    builtin_gas(&gc.family, &gc.params).map_err(|e| CliError::usage(format!("gas: {e}")))
}

fn summation(s: &Session) -> Summation {
    if s.cfg.numerics.deterministic_reduction {
        Summation::Ordered
    } else {
        Summation::Pairwise
    }
}

fn abort(s: &mut Session, out: &mut dyn Write, reason: String, summary: serde_json::Value) -> Result<i32, CliError> {
    s.close("aborted", Some(reason.clone()), summary)?;
    let _ = writeln!(out, "aborted: {reason}");
    Ok(EXIT_ABORT)
}

fn finish(s: &mut Session, pass: bool, summary: serde_json::Value) -> Result<i32, CliError> {
    s.close(if pass { "pass" } else { "fail" }, None, summary)?;
    Ok(if pass { EXIT_PASS } else { EXIT_FAIL })
}

pub(super) fn check_model(args: &CommonArgs, threads: Option<usize>, out: &mut dyn Write) -> Result<i32, CliError> {
    let mut s = Session::open("check-model", args, threads)?;
    if s.cfg.model.is_none() && s.cfg.gas.is_some() {
        return gas_certificate(&mut s, out);
    }
    let (model, sample_box, n) = model_of(&s)?;
    let seed = s.cfg.check.seed;
    let h0 = check_h0(&model, &sample_box, n, seed);
    let h1 = check_h1(&model, &sample_box, n, seed);
    let h2 = check_h2(&model, &sample_box, n, seed);
    let delta_declared = convexity_margin(model.declared.gamma_i, model.declared.gamma_v);
    let delta_est = convexity_margin(h1.gamma_i_est, h1.gamma_v_est);
    let ellipticity = check_ellipticity(&model, n, seed, ELLIPTICITY_SPREAD, ELLIPTICITY_W_MIN);
    let mut violated: Vec<String> = Vec::new();
    for (name, pass) in [("h0", h0.pass), ("h1", h1.pass), ("h2", h2.pass), ("ellipticity", ellipticity.pass)] {
        if !pass {
            violated.push(name.to_string());
        }
    }
    if !(delta_declared > 0.0) {
        violated.push("delta".into());
    }
    let entropy = match build_g(&model, &sample_box, &model.reference()) {
        Ok(st) => {
            let ch = check_char(&st, n, seed);
            let eq = check_equilibrium(&st, n, seed);
            let di = check_dissipation_bound(&st, h1.gamma_v_est, n, seed, DISSIPATION_TOL);
            for (name, pass) in [("char", ch.pass), ("equilibrium", eq.pass), ("dissipation", di.pass)] {
                if !pass {
                    violated.push(name.to_string());
                }
            }
            json!({ "normalization": st.normalization(), "char": to_value(&ch), "equilibrium": to_value(&eq), "dissipation": to_value(&di) })
        }
        Err(e) => {
            violated.push("entropy".into());
            json!({ "error": e.to_string() })
        }
    };
    let pass = violated.is_empty();
    let cert = json!({
        "family": model.family,
        "dim": model.dim().d(),
        "box": to_value(&sample_box.to_report()),
        "w_min": s.cfg.numerics.w_min,
        "n_samples": n,
        "seed": seed,
        "declared": { "gamma_i": model.declared.gamma_i, "gamma_v": model.declared.gamma_v, "m": model.declared.m },
        "h0": to_value(&h0),
        "h1": to_value(&h1),
        "h2": to_value(&h2),
        "delta_declared": delta_declared,
        "delta_estimated": delta_est,
        "ellipticity": to_value(&ellipticity),
        "entropy": entropy,
        "violated": violated,
        "pass": pass,
    });
    s.write_json("certificate.json", &cert)?;
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(&cert).unwrap_or_default());
    if !pass {
        let _ = writeln!(out, "violated hypotheses: {}", violated.join(", "));
    }
    finish(&mut s, pass, json!({ "pass": pass, "violated": violated }))
}

fn gas_certificate(s: &mut Session, out: &mut dyn Write) -> Result<i32, CliError> {
    let gas = gas_of(s)?;
    let cert = check_a_conditions(&gas, s.cfg.check.samples, s.cfg.check.seed);
    let violated: Vec<String> = cert.conditions().iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect();
    let value = json!({ "gas": to_value(&gas), "certificate": to_value(&cert), "violated": violated, "pass": cert.pass });
    s.write_json("certificate.json", &value)?;
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(&value).unwrap_or_default());
    if !cert.pass {
        let _ = writeln!(out, "violated conditions: {}", violated.join(", "));
    }
    finish(s, cert.pass, json!({ "pass": cert.pass, "violated": violated }))
}

pub(super) fn simulate(args: &CommonArgs, threads: Option<usize>, out: &mut dyn Write) -> Result<i32, CliError> {
    let mut s = Session::open("simulate", args, threads)?;
    if s.cfg.model.is_none() && s.cfg.gas.is_some() {
        return euler_simulate(&mut s, out);
    }
    let (model, sample_box, _) = model_of(&s)?;
    let (structure, entropy_note) = match build_g(&model, &sample_box, &model.reference()) {
        Ok(st) => (Some(st), None),
        Err(e) => (None, Some(format!("entropy unavailable: {e}"))),
    };
    let mut artifacts = RunArtifacts { dir: s.out.clone(), csv: s.cfg.writes_csv(), files: Vec::new() };
    let result = run(&s.cfg, &model, structure.as_ref(), &mut artifacts);
    s.manifest.files.append(&mut artifacts.files);
    match result {
        Ok(report) => {
            s.manifest.steps = report.steps;
            s.manifest.t_final = report.t_final;
            let summary = json!({
                "steps": report.steps,
                "t_final": report.t_final,
                "h_theorem": to_value(&report.h_stats),
                "final": report.series.last().map(|r| json!({
                    "entropy": r.entropy, "dissipation": r.dissipation, "min_det": r.min_det, "max_speed": r.max_speed,
                    "stress_gap": r.stress_gap, "constraint_defect": r.constraint_defect,
                })),
                "run_wall_clock_s": report.wall_clock_s,
                "note": entropy_note,
            });
            s.write_json("summary.json", &summary)?;
            let _ = writeln!(out, "completed {} steps to t = {:.6} in {:.3} s", report.steps, report.t_final, report.wall_clock_s);
            finish(&mut s, true, summary)
        }
        Err((e, step)) => {
            s.manifest.steps = step;
            abort(&mut s, out, e.to_string(), json!({ "last_step": step }))
        }
    }
}

pub(super) fn converge(args: &CommonArgs, threads: Option<usize>, out: &mut dyn Write) -> Result<i32, CliError> {
    let mut s = Session::open("converge", args, threads)?;
    let eps_list = s.cfg.relax.eps_list.clone();
    if eps_list.len() < 3 {
        return Err(CliError::usage(format!("converge needs at least 3 eps values, got {}", eps_list.len())));
    }
    let (model, sample_box, _) = model_of(&s)?;
    let structure: EntropyStructure = match build_g(&model, &sample_box, &model.reference()) {
        Ok(st) => st,
        Err(e) => return abort(&mut s, out, format!("entropy construction failed: {e}"), json!({})),
    };
    let motion = s.cfg.motion(model.dim()).map_err(|e| CliError::usage(e.to_string()))?;
    let converge_cfg = s.cfg.converge.clone();
    let setup = StudySetup {
        model: &model,
        structure: &structure,
        grid: s.cfg.grid(),
        motion: &motion,
        tau_init: s.cfg.tau_init(),
        t_end: s.cfg.time.t_end,
        numerics: s.cfg.numerics(),
        converge: &converge_cfg,
        summation: summation(&s),
    };
    let study = match convergence_study(&setup, &eps_list) {
        Ok(st) => st,
        Err(e) => return abort(&mut s, out, e.to_string(), json!({})),
    };
    s.write_csv("convergence.csv", &study.csv())?;
    s.write_csv("e_r_series.csv", &study.series_csv())?;
    let summary = json!({
        "slope": study.fit.map(|f| f.slope),
        "slope_band": study.fit.map(|f| f.band()),
        "threshold": study.threshold,
        "floor": study.floor,
        "gaps_monotone": study.gaps_monotone,
        "gronwall": to_value(&study.gronwall),
        "tau_init": study.tau_init,
        "excluded": study.rows.iter().filter(|r| r.status.as_str() != "ok").map(|r| json!({"eps": r.eps, "status": r.status.as_str(), "reason": r.abort_reason})).collect::<Vec<_>>(),
        "notes": study.notes,
    });
    s.write_json("convergence.json", &json!({ "summary": summary, "study": to_value(&study) }))?;
    let _ = write!(out, "{}", study.csv());
    match study.fit {
        Some(f) => {
            let (lo, hi) = f.band();
            let _ = writeln!(out, "slope {:.4} (band [{lo:.4}, {hi:.4}]), threshold {}", f.slope, study.threshold);
        }
        None => {
            let _ = writeln!(out, "no slope: fewer than two usable eps values");
        }
    }
    let pass = study.slope_pass == Some(true);
    finish(&mut s, pass, summary)
}

fn gas_abort(s: &mut Session, out: &mut dyn Write, e: GasError) -> Result<i32, CliError> {
    match e {
        GasError::Config(m) | GasError::InvalidParams(m) => Err(CliError::usage(m)),
        other => abort(s, out, other.to_string(), json!({})),
    }
}

pub(super) fn gas_check(args: &CommonArgs, threads: Option<usize>, out: &mut dyn Write) -> Result<i32, CliError> {
    let mut s = Session::open("gas check", args, threads)?;
    gas_certificate(&mut s, out)
}

fn euler_numerics(s: &Session) -> EulerNumerics {
    EulerNumerics { cfl: s.cfg.time.cfl, rho_min: s.cfg.numerics.rho_min }
}

fn euler_simulate(s: &mut Session, out: &mut dyn Write) -> Result<i32, CliError> {
    let gas = gas_of(s)?;
    let motion = s.cfg.motion(Dim::Three).map_err(|e| CliError::usage(e.to_string()))?;
    let init = match euler_init_from_motion(&s.cfg.grid(), &motion, &gas, s.cfg.tau_init(), s.cfg.numerics.rho_min) {
        Ok(v) => v,
        Err(e) => return gas_abort(s, out, e),
    };
    let numerics = euler_numerics(s);
    let (t_end, eps, stride) = (s.cfg.time.t_end, s.cfg.relax.epsilon, s.cfg.time.snapshot_stride);
    let mut io_error = None;
    let mut last = 0;
    let result = {
        let sess = &mut *s;
        run_euler(&gas, init, t_end, eps, stride, &numerics, &mut |st, k| {
            last = k;
            if let Err(e) = sess.write_csv(&format!("snapshot_{k:07}.csv"), &euler_snapshot_csv(&gas, st)) {
                io_error = Some(e.message.clone());
                return Err(GasError::Config(e.message));
            }
            Ok(())
        })
    };
    if let Some(m) = io_error {
        return Err(CliError::abort(m));
    }
    match result {
        Ok((series, fin, steps)) => {
            s.write_csv("series.csv", &euler_series_csv(&series))?;
            s.manifest.steps = steps;
            s.manifest.t_final = fin.t;
            let summary = json!({ "steps": steps, "t_final": fin.t, "h_theorem": to_value(&euler_h_stats(&series)), "final": to_value(&series.last()) });
            s.write_json("summary.json", &summary)?;
            let _ = writeln!(out, "completed {steps} steps to t = {:.6}", fin.t);
            finish(s, true, summary)
        }
        Err(e) => {
            s.manifest.steps = last;
            abort(s, out, e.to_string(), json!({ "last_step": last }))
        }
    }
}

pub(super) fn gas_simulate(args: &CommonArgs, threads: Option<usize>, out: &mut dyn Write) -> Result<i32, CliError> {
    let mut s = Session::open("gas simulate", args, threads)?;
    euler_simulate(&mut s, out)
}

pub(super) fn gas_converge(args: &CommonArgs, threads: Option<usize>, out: &mut dyn Write) -> Result<i32, CliError> {
    let mut s = Session::open("gas converge", args, threads)?;
    let eps_list = s.cfg.relax.eps_list.clone();
    if eps_list.len() < 3 {
        return Err(CliError::usage(format!("gas converge needs at least 3 eps values, got {}", eps_list.len())));
    }
    let gas = gas_of(&s)?;
    let motion = s.cfg.motion(Dim::Three).map_err(|e| CliError::usage(e.to_string()))?;
    let init = match euler_init_from_motion(&s.cfg.grid(), &motion, &gas, s.cfg.tau_init(), s.cfg.numerics.rho_min) {
        Ok(v) => v,
        Err(e) => return gas_abort(&mut s, out, e),
    };
    let study = match euler_eps_study(&gas, &init, s.cfg.time.t_end, &eps_list, &euler_numerics(&s)) {
        Ok(v) => v,
        Err(e) => return gas_abort(&mut s, out, e),
    };
    s.write_csv("gas_convergence.csv", &study.csv())?;
    let summary = json!({ "monotone": study.monotone, "rows": to_value(&study.rows) });
    s.write_json("gas_convergence.json", &summary)?;
    let _ = write!(out, "{}", study.csv());
    finish(&mut s, study.monotone == Some(true), summary)
}

pub(super) fn gas_crosscheck(args: &CommonArgs, threads: Option<usize>, out: &mut dyn Write) -> Result<i32, CliError> {
    let mut s = Session::open("gas crosscheck", args, threads)?;
    let gas = gas_of(&s)?;
    let motion = s.cfg.motion(Dim::Three).map_err(|e| CliError::usage(e.to_string()))?;
    let spec = CrossCheckSpec {
        motion,
        t_end: s.cfg.time.t_end,
        eps: s.cfg.relax.epsilon,
        cfl: s.cfg.time.cfl,
        rho_min: s.cfg.numerics.rho_min,
        tau_init: s.cfg.tau_init(),
    };
    let n = s.cfg.grid.n_cells;
    let study = match cross_check_refinement(&gas, s.cfg.grid.x_min, s.cfg.grid.x_max, &[n, 2 * n, 4 * n], &spec) {
        Ok(v) => v,
        Err(e) => return gas_abort(&mut s, out, e),
    };
    s.write_csv("crosscheck.csv", &study.csv())?;
    // asymptotic rate: the finest pair decides
    let pass = study.orders.last().is_some_and(|o| *o >= CROSSCHECK_MIN_ORDER);
    let summary = json!({ "orders": study.orders, "fitted_order": study.fitted_order, "min_order": CROSSCHECK_MIN_ORDER, "reports": to_value(&study.reports) });
    s.write_json("crosscheck.json", &summary)?;
    let _ = write!(out, "{}", study.csv());
    let _ = writeln!(out, "observed orders: {:?}", study.orders);
    finish(&mut s, pass, summary)
}

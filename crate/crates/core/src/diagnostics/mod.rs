//! Relative entropy between a relaxation state and a smooth equilibrium state, its error terms
//! and balance residual, the Chapman-Enskog diffusivity, and the `eps`-convergence study.

mod study;

pub use study::*;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constitutive::ConstitutiveModel;
use crate::dynamics::{DynamicsError, EquilState, RelaxState, SlabGrid};
use crate::entropy::{EntropyError, EntropyStructure};
use crate::linalg::sym_eig_range;
use crate::minors::{dphi, dphi_column, phi, Mat, Minors};

/// Order of floating-point reductions over cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Summation {
    /// Left-to-right in cell order.
    #[default]
    Ordered,
    /// Recursive pairwise halving; differs from `Ordered` at round-off level.
    Pairwise,
}

pub fn reduce_sum(values: &[f64], mode: Summation) -> f64 {
    fn pairwise(v: &[f64]) -> f64 {
        if v.len() <= 8 {
            v.iter().sum()
        } else {
            let (a, b) = v.split_at(v.len() / 2);
            pairwise(a) + pairwise(b)
        }
    }
    match mode {
        Summation::Ordered => values.iter().sum(),
        Summation::Pairwise => pairwise(values),
    }
}

fn sub3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm3_sq(a: &[f64; 3]) -> f64 {
    a[0] * a[0] + a[1] * a[1] + a[2] * a[2]
}

/// Spatial derivatives of the smooth solution on the coarse grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HatDerivatives {
    /// `d_1 v_hat`.
    pub dv: Vec<[f64; 3]>,
    /// `d_1 (grad sigma_E(Phi(F_hat)))`.
    pub dgrad_sigma_e: Vec<Minors>,
}

/// Centered differences of `v` and `grad sigma_E(Phi(F))` on `fine`, block-averaged by `factor`.
pub fn hat_derivatives(model: &ConstitutiveModel, fine: &EquilState, factor: usize) -> Result<HatDerivatives, DynamicsError> {
    let n = fine.grid.n_cells;
    if factor == 0 || !n.is_multiple_of(factor) {
        return Err(DynamicsError::Grid(format!("cannot restrict {n} cells by {factor}")));
    }
    let dx = fine.grid.dx();
    let g: Vec<Minors> = (0..n).into_par_iter().map(|j| model.sigma_e().gradient(&phi(&fine.f(j)))).collect();
    let nc = n / factor;
    let mut dv = vec![[0.0; 3]; nc];
    let dim = model.dim();
    let mut dg = vec![Minors::zeros(dim); nc];
    for j in 0..n {
        let (jp, jm) = ((j + 1) % n, (j + n - 1) % n);
        let c = j / factor;
        for i in 0..3 {
            dv[c][i] += (fine.v[jp][i] - fine.v[jm][i]) / (2.0 * dx) / factor as f64;
        }
        dg[c] += (g[jp] - g[jm]) * (1.0 / (2.0 * dx * factor as f64));
    }
    Ok(HatDerivatives { dv, dgrad_sigma_e: dg })
}

/// Per-cell relative entropy quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelEntropyReport {
    pub e_r_field: Vec<f64>,
    pub total_e_r: f64,
    /// `(T - grad sigma_E(Xi_hat)) . dPhi/dF_{.1}(F) (v - v_hat)`.
    pub flux_field: Vec<f64>,
    pub dissipation_field: Vec<f64>,
    pub dissipation_total: f64,
}

/// `e_r = |v - v_hat|^2/2 + Psi(Xi, tau) - sigma_E(Xi_hat) - grad sigma_E(Xi_hat).(Xi - Xi_hat)`.
pub fn relative_entropy(
    structure: &EntropyStructure,
    state: &RelaxState,
    hat: &EquilState,
    summation: Summation,
) -> Result<RelEntropyReport, DynamicsError> {
    state.grid.same_as(&hat.grid)?;
    let model = structure.model();
    let rows: Vec<Result<(f64, f64, f64), EntropyError>> = (0..state.grid.n_cells)
        .into_par_iter()
        .map(|j| {
            let f = state.f(j);
            let fh = hat.f(j);
            let xi = phi(&f);
            let xh = phi(&fh);
            let dvv = sub3(&state.v[j], &hat.v[j]);
            let gp = structure.g_point(&state.tau[j], Some(&xi))?;
            let psi = structure.psi_with(&xi, &gp);
            let ge_h = model.sigma_e().gradient(&xh);
            let e = 0.5 * norm3_sq(&dvv) + psi - model.sigma_e().value(&xh) - ge_h.dot(&(xi - xh));
            let t = model.sigma_i().gradient(&xi) + model.project_active(&state.tau[j]);
            let flux = (t - ge_h).dot(&dphi_column(&f, 0).apply(&dvv));
            let d = structure.dissipation_with(&xi, &gp);
            Ok((e, flux, d))
        })
        .collect();
    let mut e_r = Vec::with_capacity(rows.len());
    let mut flux = Vec::with_capacity(rows.len());
    let mut diss = Vec::with_capacity(rows.len());
    for r in rows {
        let (e, f, d) = r?;
        e_r.push(e);
        flux.push(f);
        diss.push(d);
    }
    let dx = state.grid.dx();
    Ok(RelEntropyReport {
        total_e_r: reduce_sum(&e_r, summation) * dx,
        dissipation_total: reduce_sum(&diss, summation) * dx,
        e_r_field: e_r,
        flux_field: flux,
        dissipation_field: diss,
    })
}

/// Quadratic and linear error fields of the relative entropy identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTerms {
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
    pub q3: Vec<f64>,
    pub l: Vec<f64>,
}

impl ErrorTerms {
    /// `(|Q1|_1, |Q2|_1, |Q3|_1, |L|_1)` with the grid weight.
    pub fn l1_norms(&self, dx: f64) -> [f64; 4] {
        let n = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>() * dx;
        [n(&self.q1), n(&self.q2), n(&self.q3), n(&self.l)]
    }

    /// `int (Q1 + Q2 + Q3 + L) dx`.
    pub fn integral(&self, dx: f64, summation: Summation) -> f64 {
        let s: Vec<f64> = (0..self.q1.len()).map(|j| self.q1[j] + self.q2[j] + self.q3[j] + self.l[j]).collect();
        reduce_sum(&s, summation) * dx
    }
}

/// `Q1, Q2, Q3, L` with `d_alpha` restricted to `alpha = 1`.
pub fn error_terms(
    model: &ConstitutiveModel,
    state: &RelaxState,
    hat: &EquilState,
    deriv: &HatDerivatives,
) -> Result<ErrorTerms, DynamicsError> {
    state.grid.same_as(&hat.grid)?;
    let n = state.grid.n_cells;
    let rows: Vec<[f64; 4]> = (0..n)
        .into_par_iter()
        .map(|j| {
            let (f, fh) = (state.f(j), hat.f(j));
            let (xi, xh) = (phi(&f), phi(&fh));
            let (col, colh) = (dphi_column(&f, 0), dphi_column(&fh, 0));
            let dvv = sub3(&state.v[j], &hat.v[j]);
            let dvh = deriv.dv[j];
            let ge = model.sigma_e().gradient(&xi);
            let ge_h = model.sigma_e().gradient(&xh);
            let he_h = model.sigma_e().hessian(&xh);
            let lin = he_h * (xi - xh).to_dvector();
            let mut rem = ge - ge_h;
            for k in 0..rem.len() {
                rem[k] -= lin[k];
            }
            let q1 = deriv.dgrad_sigma_e[j].dot(&(col.apply(&dvv) - colh.apply(&dvv)));
            let q2 = colh.apply(&dvh).dot(&rem);
            let q3 = (col.apply(&dvh) - colh.apply(&dvh)).dot(&(ge - ge_h));
            let t = model.sigma_i().gradient(&xi) + model.project_active(&state.tau[j]);
            let l = col.apply(&dvh).dot(&(t - ge));
            [q1, q2, q3, l]
        })
        .collect();
    Ok(ErrorTerms {
        q1: rows.iter().map(|r| r[0]).collect(),
        q2: rows.iter().map(|r| r[1]).collect(),
        q3: rows.iter().map(|r| r[2]).collect(),
        l: rows.iter().map(|r| r[3]).collect(),
    })
}

/// One time level of a relaxation-vs-reference comparison.
#[derive(Debug, Clone)]
pub struct PairSnapshot {
    pub t: f64,
    pub total_e_r: f64,
    pub dissipation_total: f64,
    pub error_integral: f64,
    pub error_norms: [f64; 4],
}

pub fn pair_snapshot(
    structure: &EntropyStructure,
    state: &RelaxState,
    hat: &EquilState,
    deriv: &HatDerivatives,
    summation: Summation,
) -> Result<PairSnapshot, DynamicsError> {
    let re = relative_entropy(structure, state, hat, summation)?;
    let et = error_terms(structure.model(), state, hat, deriv)?;
    let dx = state.grid.dx();
    Ok(PairSnapshot {
        t: state.t,
        total_e_r: re.total_e_r,
        dissipation_total: re.dissipation_total,
        error_integral: et.integral(dx, summation),
        error_norms: et.l1_norms(dx),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub times: Vec<f64>,
    pub residuals: Vec<f64>,
    pub max_abs: f64,
}

/// Residual of `d/dt int e_r + int D/eps - int (Q1 + Q2 + Q3 + L) = 0` with a centered time
/// difference at interior snapshots (the flux integrates to zero on the periodic grid).
pub fn relen_balance_residual(snapshots: &[PairSnapshot], eps: f64) -> Result<BalanceReport, DynamicsError> {
    if snapshots.len() < 3 {
        return Err(DynamicsError::Config(format!("balance residual needs >= 3 snapshots, got {}", snapshots.len())));
    }
    let inv_eps = if eps.is_infinite() { 0.0 } else { 1.0 / eps };
    let mut times = Vec::new();
    let mut residuals = Vec::new();
    for w in snapshots.windows(3) {
        let dedt = (w[2].total_e_r - w[0].total_e_r) / (w[2].t - w[0].t);
        let d = if w[1].dissipation_total == 0.0 { 0.0 } else { w[1].dissipation_total * inv_eps };
        times.push(w[1].t);
        residuals.push(dedt + d - w[1].error_integral);
    }
    let max_abs = residuals.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
    Ok(BalanceReport { times, residuals, max_abs })
}

/// `D_{ia}^{jb} = hess Sigma_{AB} dPhi^A/dF_{ia} dPhi^B/dF_{jb}` as a `d^2 x d^2` matrix
/// (index `i*d + a`) with its smallest eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct ChapmanEnskog {
    pub matrix: DMatrix<f64>,
    pub lambda_min: f64,
}

impl ChapmanEnskog {
    pub fn get(&self, i: usize, a: usize, j: usize, b: usize) -> f64 {
        let d = (self.matrix.nrows() as f64).sqrt().round() as usize;
        self.matrix[(i * d + a, j * d + b)]
    }
}

pub fn chapman_enskog_tensor(model: &ConstitutiveModel, f: &Mat) -> ChapmanEnskog {
    let j = dphi(f).to_dmatrix();
    let h = model.sigma().hessian(&phi(f));
    let m = j.transpose() * h * &j;
    let sym = (&m + m.transpose()) * 0.5;
    let lambda_min = sym_eig_range(&sym).0;
    ChapmanEnskog { matrix: sym, lambda_min }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipticityReport {
    pub n_samples: usize,
    pub lambda_min: f64,
    /// `lambda_min / max |D|`.
    pub relative_lambda_min: f64,
    pub pass: bool,
}

/// Samples `F = I + H`, `|H_ia| <= spread`, keeping `det F >= w_min`, and records the smallest
/// ellipticity eigenvalue. Round-off negatives down to `-1e-12 max|D|` count as zero.
pub fn check_ellipticity(model: &ConstitutiveModel, n_samples: usize, seed: u64, spread: f64, w_min: f64) -> EllipticityReport {
    use rand::Rng;
    let dim = model.dim();
    let d = dim.d();
    let mut rng = crate::sampling::rng_from_seed(seed);
    let mut fs = Vec::with_capacity(n_samples);
    while fs.len() < n_samples {
        let f = Mat::from_fn(dim, |i, a| if i == a { 1.0 } else { 0.0 } + rng.random_range(-spread..spread));
        if crate::minors::determinant(&f) >= w_min && (d > 0) {
            fs.push(f);
        }
    }
    let rows: Vec<(f64, f64)> = fs
        .par_iter()
        .map(|f| {
            let ce = chapman_enskog_tensor(model, f);
            (ce.lambda_min, ce.matrix.amax())
        })
        .collect();
    let mut lmin = f64::INFINITY;
    let mut rel = f64::INFINITY;
    for (l, s) in rows {
        lmin = lmin.min(l);
        rel = rel.min(if s > 0.0 { l / s } else { 0.0 });
    }
    EllipticityReport { n_samples, lambda_min: lmin, relative_lambda_min: rel, pass: rel >= -1e-12 }
}

/// Relative energy of two equilibrium states with `g = sigma_E`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumRelEntropy {
    pub eta_field: Vec<f64>,
    pub eta_total: f64,
    pub q_flux_field: Vec<f64>,
    pub q_field: Vec<f64>,
    pub q_total: f64,
}

pub fn equilibrium_relative_entropy(
    model: &ConstitutiveModel,
    a: &EquilState,
    b: &EquilState,
    deriv: &HatDerivatives,
    summation: Summation,
) -> Result<EquilibriumRelEntropy, DynamicsError> {
    a.grid.same_as(&b.grid)?;
    let g = model.sigma_e();
    let rows: Vec<[f64; 3]> = (0..a.grid.n_cells)
        .into_par_iter()
        .map(|j| {
            let (f, fh) = (a.f(j), b.f(j));
            let (xi, xh) = (phi(&f), phi(&fh));
            let (col, colh) = (dphi_column(&f, 0), dphi_column(&fh, 0));
            let dvv = sub3(&a.v[j], &b.v[j]);
            let (gx, gh) = (g.gradient(&xi), g.gradient(&xh));
            let eta = 0.5 * norm3_sq(&dvv) + g.value(&xi) - g.value(&xh) - gh.dot(&(xi - xh));
            let qf = (gx - gh).dot(&col.apply(&dvv));
            let lin = g.hessian(&xh) * (xi - xh).to_dvector();
            let mut rem = gx - gh;
            for k in 0..rem.len() {
                rem[k] -= lin[k];
            }
            let dvh = deriv.dv[j];
            let q = deriv.dgrad_sigma_e[j].dot(&(col.apply(&dvv) - colh.apply(&dvv)))
                + (col.apply(&dvh) - colh.apply(&dvh)).dot(&(gx - gh))
                + colh.apply(&dvh).dot(&rem);
            [eta, qf, q]
        })
        .collect();
    let dx = a.grid.dx();
    let eta: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let q: Vec<f64> = rows.iter().map(|r| r[2]).collect();
    Ok(EquilibriumRelEntropy {
        eta_total: reduce_sum(&eta, summation) * dx,
        q_total: reduce_sum(&q, summation) * dx,
        eta_field: eta,
        q_flux_field: rows.iter().map(|r| r[1]).collect(),
        q_field: q,
    })
}

/// Residual of `d/dt int eta - int Q = 0` at interior snapshots `(t, eta_total, q_total)`.
pub fn equilibrium_balance_residual(snapshots: &[(f64, f64, f64)]) -> Result<BalanceReport, DynamicsError> {
    if snapshots.len() < 3 {
        return Err(DynamicsError::Config("balance residual needs >= 3 snapshots".into()));
    }
    let mut times = Vec::new();
    let mut residuals = Vec::new();
    for w in snapshots.windows(3) {
        times.push(w[1].0);
        residuals.push((w[2].1 - w[0].1) / (w[2].0 - w[0].0) - w[1].2);
    }
    let max_abs = residuals.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
    Ok(BalanceReport { times, residuals, max_abs })
}

/// Grid-weighted L2 distances `(|v - v_hat|, |F - F_hat|, |tau - tau_inf(F_hat)|)`.
pub fn l2_gaps(model: &ConstitutiveModel, state: &RelaxState, hat: &EquilState) -> Result<[f64; 3], DynamicsError> {
    state.grid.same_as(&hat.grid)?;
    let dx = state.grid.dx();
    let mut g = [0.0; 3];
    for j in 0..state.grid.n_cells {
        g[0] += norm3_sq(&sub3(&state.v[j], &hat.v[j])) * dx;
        g[1] += norm3_sq(&sub3(&state.f1[j], &hat.f1[j])) * dx;
        let tinf = model.project_active(&model.tau_eq(&phi(&hat.f(j))));
        g[2] += (model.project_active(&state.tau[j]) - tinf).norm_sq() * dx;
    }
    Ok(g.map(f64::sqrt))
}

/// Grid helper shared with the tests: same interval, `n` cells.
pub fn grid_like(grid: &SlabGrid, n: usize) -> Result<SlabGrid, DynamicsError> {
    SlabGrid::new(n, grid.x_min, grid.x_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::{builtin_model, default_box, ModelParams};
    use crate::dynamics::{init_from_motion, SineMode, SlabMotion, TauInit};
    use crate::entropy::build_g;
    use crate::entropy::convexity_margin;
    use crate::minors::Dim;
    use proptest::prelude::*;

    fn quad(dim: Dim, ge: f64, gv: f64) -> ConstitutiveModel {
        let p: ModelParams = [("gamma_e".to_string(), ge), ("gamma_v".to_string(), gv)].into_iter().collect();
        builtin_model("quadratic", dim, &p).unwrap()
    }

    fn motion(dim: Dim, a: f64, b: f64) -> SlabMotion {
        SlabMotion {
            background: Mat::identity(dim),
            displacement: (0..dim.d()).map(|c| SineMode { component: c, amplitude: a, wavenumber: 1, phase: c as f64 }).collect(),
            velocity: (0..dim.d()).map(|c| SineMode { component: c, amplitude: b, wavenumber: 1, phase: 0.5 }).collect(),
        }
    }

    #[test]
    fn identical_pair_has_zero_relative_entropy_and_error_terms() {
        let m = builtin_model("polyquad", Dim::Three, &ModelParams::new()).unwrap();
        let st = build_g(&m, &default_box(&m), &m.reference()).unwrap();
        let g = SlabGrid::unit(16).unwrap();
        let s = init_from_motion(&g, &motion(Dim::Three, 0.03, 0.1), &m, TauInit::Prepared, 0.1).unwrap();
        let hat = s.to_equilibrium();
        let re = relative_entropy(&st, &s, &hat, Summation::Ordered).unwrap();
        assert!(re.e_r_field.iter().all(|e| e.abs() < 1e-12));
        assert!(re.dissipation_field.iter().all(|d| d.abs() < 1e-12));
        let fine = init_from_motion(&g.refined(2), &motion(Dim::Three, 0.03, 0.1), &m, TauInit::Prepared, 0.1).unwrap();
        let der = hat_derivatives(&m, &fine.to_equilibrium(), 2).unwrap();
        let et = error_terms(&m, &s, &hat, &der).unwrap();
        for v in [&et.q1, &et.q2, &et.q3, &et.l] {
            assert!(v.iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn slab_q1_q3_vanish_for_distinct_states() {
        // dPhi/dF_{.1} depends on the frozen columns only, so both states share it
        let m = builtin_model("polyquad", Dim::Three, &ModelParams::new()).unwrap();
        let g = SlabGrid::unit(16).unwrap();
        let s = init_from_motion(&g, &motion(Dim::Three, 0.03, 0.1), &m, TauInit::Offset(0.02), 0.1).unwrap();
        let fine = init_from_motion(&g.refined(2), &motion(Dim::Three, 0.01, 0.04), &m, TauInit::Prepared, 0.1).unwrap();
        let hat = fine.to_equilibrium().restrict(2).unwrap();
        let der = hat_derivatives(&m, &fine.to_equilibrium(), 2).unwrap();
        let et = error_terms(&m, &s, &hat, &der).unwrap();
        assert!(et.q1.iter().chain(&et.q3).all(|x| *x == 0.0));
        assert!(et.q2.iter().any(|x| x.abs() > 1e-8));
        assert!(et.l.iter().any(|x| x.abs() > 1e-8));
    }

    #[test]
    fn quadratic_relative_entropy_closed_form() {
        // Psi(Xi, tau) = gamma_I/2 |Xi - X0|^2 + Xi.tau + G(tau) with quadratic G: e_r is an exact quadratic form
        let (ge, gv) = (2.0, 0.5);
        let m = quad(Dim::Two, ge, gv);
        let st = build_g(&m, &default_box(&m), &m.reference()).unwrap();
        let g = SlabGrid::unit(8).unwrap();
        let mut s = init_from_motion(&g, &motion(Dim::Two, 0.02, 0.1), &m, TauInit::Offset(0.03), 0.1).unwrap();
        let hat = init_from_motion(&g, &motion(Dim::Two, 0.01, 0.05), &m, TauInit::Prepared, 0.1).unwrap().to_equilibrium();
        s.tau[3][1] += 0.01;
        let re = relative_entropy(&st, &s, &hat, Summation::Ordered).unwrap();
        let x0 = m.reference();
        for j in 0..8 {
            let (xi, xh) = (phi(&s.f(j)), phi(&hat.f(j)));
            let r = s.tau[j] + (xi - x0) * gv; // tau - tau_eq(Xi)
            let dv = sub3(&s.v[j], &hat.v[j]);
            // Psi - sigma_E(Xi) = |tau - tau_eq|^2 / (2 gamma_v); sigma_E part is an exact quadratic
            let expect = 0.5 * norm3_sq(&dv) + r.norm_sq() / (2.0 * gv) + 0.5 * ge * (xi - xh).norm_sq();
            assert!((re.e_r_field[j] - expect).abs() < 1e-12, "{} vs {expect}", re.e_r_field[j]);
        }
    }

    #[test]
    fn relative_entropy_is_nonnegative_on_random_pairs() {
        let m = builtin_model("polyquad", Dim::Three, &ModelParams::new()).unwrap();
        let st = build_g(&m, &default_box(&m), &m.reference()).unwrap();
        let g = SlabGrid::unit(32).unwrap();
        for (k, (a, off)) in [(0.02, 0.05), (0.04, -0.03), (0.01, 0.1)].into_iter().enumerate() {
            let s = init_from_motion(&g, &motion(Dim::Three, a, 0.2), &m, TauInit::Offset(off), 0.1).unwrap();
            let mut mh = motion(Dim::Three, 0.03, -0.1);
            mh.displacement[0].phase += k as f64;
            let hat = init_from_motion(&g, &mh, &m, TauInit::Prepared, 0.1).unwrap().to_equilibrium();
            let re = relative_entropy(&st, &s, &hat, Summation::Ordered).unwrap();
            assert!(re.e_r_field.iter().all(|&e| e >= -1e-12));
        }
    }

    #[test]
    fn q2_is_second_order_in_the_separation() {
        let m = builtin_model("polyquad", Dim::Three, &ModelParams::new()).unwrap();
        let g = SlabGrid::unit(16).unwrap();
        let base = motion(Dim::Three, 0.03, 0.1);
        let hat = init_from_motion(&g, &base, &m, TauInit::Prepared, 0.1).unwrap().to_equilibrium();
        let fine = init_from_motion(&g.refined(2), &base, &m, TauInit::Prepared, 0.1).unwrap().to_equilibrium();
        let der = hat_derivatives(&m, &fine, 2).unwrap();
        let mut norms = Vec::new();
        for s in [0.02, 0.01] {
            let mut mm = base.clone();
            for md in &mut mm.displacement {
                md.amplitude += s;
            }
            let st = init_from_motion(&g, &mm, &m, TauInit::Prepared, 0.1).unwrap();
            norms.push(error_terms(&m, &st, &hat, &der).unwrap().l1_norms(g.dx())[1]);
        }
        let ratio = norms[0] / norms[1];
        assert!((ratio - 4.0).abs() < 0.4, "{ratio}");
    }

    #[test]
    fn linear_term_obeys_cauchy_schwarz() {
        let m = builtin_model("polyquad", Dim::Three, &ModelParams::new()).unwrap();
        let g = SlabGrid::unit(16).unwrap();
        let s = init_from_motion(&g, &motion(Dim::Three, 0.03, 0.1), &m, TauInit::Offset(0.05), 0.1).unwrap();
        let fine = init_from_motion(&g.refined(2), &motion(Dim::Three, 0.02, 0.3), &m, TauInit::Prepared, 0.1).unwrap();
        let hat = fine.to_equilibrium().restrict(2).unwrap();
        let der = hat_derivatives(&m, &fine.to_equilibrium(), 2).unwrap();
        let et = error_terms(&m, &s, &hat, &der).unwrap();
        let dvmax = der.dv.iter().map(|v| norm3_sq(v).sqrt()).fold(0.0, f64::max);
        for j in 0..16 {
            let f = s.f(j);
            let xi = phi(&f);
            let t = m.sigma_i().gradient(&xi) + s.tau[j];
            let gap = (t - m.sigma_e().gradient(&xi)).norm();
            let jn = dphi_column(&f, 0).norm();
            assert!(et.l[j].abs() <= dvmax * gap * jn * (1.0 + 1e-12));
        }
    }

    #[test]
    fn stationary_pair_balance_is_zero() {
        let m = quad(Dim::Three, 2.0, 0.5);
        let st = build_g(&m, &default_box(&m), &m.reference()).unwrap();
        let g = SlabGrid::unit(16).unwrap();
        let mut mo = SlabMotion::identity(Dim::Three);
        mo.background.set(0, 0, 1.1);
        let s = init_from_motion(&g, &mo, &m, TauInit::Prepared, 0.1).unwrap();
        let hat = s.to_equilibrium();
        let der = hat_derivatives(&m, &hat, 1).unwrap();
        let snaps: Vec<PairSnapshot> = (0..4)
            .map(|k| {
                let mut a = s.clone();
                a.t = k as f64 * 0.1;
                pair_snapshot(&st, &a, &hat, &der, Summation::Ordered).unwrap()
            })
            .collect();
        let b = relen_balance_residual(&snaps, 0.1).unwrap();
        assert!(b.max_abs < 1e-13);
        assert!(relen_balance_residual(&snaps[..2], 0.1).is_err());
    }

    #[test]
    fn chapman_enskog_quadratic_closed_form() {
        let gv = 0.5;
        let m = quad(Dim::Three, 2.0, gv);
        let f = Mat::from_row_major(Dim::Three, &[1.1, 0.2, 0.0, -0.1, 0.9, 0.05, 0.0, 0.1, 1.0]).unwrap();
        let ce = chapman_enskog_tensor(&m, &f);
        let jac = dphi(&f);
        for i in 0..3 {
            for a in 0..3 {
                for j in 0..3 {
                    for b in 0..3 {
                        let expect: f64 = (0..19).map(|r| gv * jac.get(r, i, a) * jac.get(r, j, b)).sum();
                        assert!((ce.get(i, a, j, b) - expect).abs() < 1e-12);
                    }
                }
            }
        }
        assert!(ce.lambda_min > 0.0);
    }

    #[test]
    fn chapman_enskog_at_identity_by_hand() {
        // dPhi/dF at I: F-rows identity, Z-rows eps_jik eps_bag delta_kg, w-row delta_ia
        let gv = 0.25;
        let m = quad(Dim::Three, 1.0, gv);
        let ce = chapman_enskog_tensor(&m, &Mat::identity(Dim::Three));
        // D_{11}^{11}: F part 1, Z part sum_{j,b} (eps_j1k eps_b1k)^2 = 2, w part 1
        assert!((ce.get(0, 0, 0, 0) - gv * 4.0).abs() < 1e-14);
        // D_{11}^{22}: Z part couples through Z_33 (+1), w part 1
        assert!((ce.get(0, 0, 1, 1) - gv * 2.0).abs() < 1e-14);
        // D_{12}^{21}: F_12 and F_21 move different cofactor entries
        assert!(ce.get(0, 1, 1, 0).abs() < 1e-14);
        // D_{12}^{12}: F part 1, Z part 1 (Z_21), w part 0
        assert!((ce.get(0, 1, 0, 1) - gv * 2.0).abs() < 1e-14);
    }

    #[test]
    fn ellipticity_for_builtin_models() {
        for (name, dim) in [("quadratic", Dim::Three), ("polyquad", Dim::Three), ("polyquad", Dim::Two), ("gas-lagrangean", Dim::Three)] {
            let m = builtin_model(name, dim, &ModelParams::new()).unwrap();
            let r = check_ellipticity(&m, 200, 5, 0.3, 0.5);
            assert!(r.pass, "{name}: {r:?}");
        }
    }

    #[test]
    fn pairwise_sum_is_close_to_ordered() {
        let v: Vec<f64> = (0..1000).map(|k| (k as f64 * 0.37).sin()).collect();
        let a = reduce_sum(&v, Summation::Ordered);
        let b = reduce_sum(&v, Summation::Pairwise);
        assert!((a - b).abs() < 1e-13);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn relative_entropy_controls_the_distance(
            ge in 0.2f64..4.0,
            gv in 0.1f64..2.0,
            a in -0.05f64..0.05,
            b in -0.2f64..0.2,
            offset in -0.1f64..0.1,
        ) {
            let m = quad(Dim::Three, ge, gv);
            let st = build_g(&m, &default_box(&m), &m.reference()).unwrap();
            let g = SlabGrid::unit(16).unwrap();
            let s = init_from_motion(&g, &motion(Dim::Three, a, b), &m, TauInit::Offset(offset), 0.1).unwrap();
            let hat = init_from_motion(&g, &motion(Dim::Three, 0.02, 0.05), &m, TauInit::Prepared, 0.1).unwrap().to_equilibrium();
            let re = relative_entropy(&st, &s, &hat, Summation::Ordered).unwrap();
            // constant Hessian: e_r is a quadratic form bounded below by its smallest eigenvalue
            let lam = convexity_margin(ge + gv, gv);
            for j in 0..16 {
                let (xi, xh) = (phi(&s.f(j)), phi(&hat.f(j)));
                let dtau = s.tau[j] - m.tau_eq(&xh);
                let dv = sub3(&s.v[j], &hat.v[j]);
                let floor = 0.5 * norm3_sq(&dv) + 0.5 * lam * ((xi - xh).norm_sq() + dtau.norm_sq());
                prop_assert!(re.e_r_field[j] >= floor - 1e-12, "cell {}: {} < {}", j, re.e_r_field[j], floor);
                prop_assert!(re.dissipation_field[j] >= -1e-14);
            }
        }
    }
}

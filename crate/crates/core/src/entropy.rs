//! Entropy `Psi(Xi, tau) = sigma_I(Xi) + Xi.tau + G(tau)` with `G` obtained by Legendre
//! conjugation of `Sigma` through Newton inversion of `grad Sigma`.
//!
//! `G(tau) = Sigma*(-tau) + c`, `grad G(tau) = -(grad Sigma)^{-1}(-tau)` and
//! `hess G(tau) = [hess Sigma(-grad G(tau))]^{-1}`. The constant `c` makes
//! `Psi(anchor, -grad Sigma(anchor)) = sigma_E(anchor)`. All quantities live on the model's
//! active components.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitutive::{ConstitutiveModel, SampleBox};
use crate::linalg::{solve, sym_eig_range, sym_eigenvalues};
use crate::minors::Minors;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EntropyError {
    #[error("Newton inversion of grad Sigma did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("target has nonzero inactive component {component} (value {value:e}); outside the image of grad Sigma")]
    OutsideImage { component: usize, value: f64 },
    #[error("non-finite input")]
    NonFinite,
}

pub const NEWTON_TOL: f64 = 1e-11;
pub const NEWTON_MAX_ITER: usize = 100;
const MAX_BACKTRACK: usize = 60;

/// Result of [`invert_grad_sigma`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inversion {
    pub xi: Minors,
    pub iterations: usize,
    pub residual: f64,
}

fn active_residual(model: &ConstitutiveModel, xi: &Minors, p: &Minors) -> (DVector<f64>, f64) {
    let g = model.sigma().gradient(xi);
    let act = model.active();
    let r = DVector::from_iterator(act.len(), act.iter().map(|&k| g[k] - p[k]));
    let norm = if r.iter().all(|x| x.is_finite()) { r.amax() } else { f64::INFINITY };
    (r, norm)
}

/// Solves `grad Sigma(Xi) = p` on the active components by damped Newton.
///
/// Armijo backtracking on the max-norm residual; non-finite trial points count as no decrease.
/// Inactive components of `Xi` are copied from the guess (default: the model reference).
pub fn invert_grad_sigma(
    model: &ConstitutiveModel,
    p: &Minors,
    guess: Option<&Minors>,
) -> Result<Inversion, EntropyError> {
    if !p.is_finite() {
        return Err(EntropyError::NonFinite);
    }
    let act = model.active();
    for k in 0..p.len() {
        if !act.contains(&k) && p[k].abs() > NEWTON_TOL {
            return Err(EntropyError::OutsideImage { component: k, value: p[k] });
        }
    }
    let mut xi = guess.copied().unwrap_or_else(|| model.reference());
    if !xi.is_finite() {
        xi = model.reference();
    }
    let (mut r, mut norm) = active_residual(model, &xi, p);
    if !norm.is_finite() {
        xi = model.reference();
        (r, norm) = active_residual(model, &xi, p);
    }
    for it in 0..=NEWTON_MAX_ITER {
        if norm <= NEWTON_TOL {
            return Ok(Inversion { xi, iterations: it, residual: norm });
        }
        if it == NEWTON_MAX_ITER {
            break;
        }
        let jac = model.restrict_hessian(&model.sigma().hessian(&xi));
        let Some(step) = solve(&jac, &(-&r)) else {
            return Err(EntropyError::NoConvergence { iterations: it, residual: norm });
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACK {
            let mut trial = xi;
            for (j, &k) in act.iter().enumerate() {
                trial[k] += t * step[j];
            }
            let (rt, nt) = active_residual(model, &trial, p);
            if nt.is_finite() && nt <= (1.0 - 1e-4 * t) * norm {
                xi = trial;
                r = rt;
                norm = nt;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(EntropyError::NoConvergence { iterations: it + 1, residual: norm });
        }
    }
    Err(EntropyError::NoConvergence { iterations: NEWTON_MAX_ITER, residual: norm })
}

/// `G` evaluated at one `tau`, carrying the conjugate point `Xi = (grad Sigma)^{-1}(-tau)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GPoint {
    pub tau: Minors,
    pub xi: Minors,
    pub value: f64,
    grad: Minors,
}

impl GPoint {
    /// `grad G(tau) = -Xi` on the active components.
    pub fn grad(&self) -> Minors {
        self.grad
    }
}

/// Immutable entropy structure for one model.
#[derive(Debug, Clone)]
pub struct EntropyStructure {
    model: ConstitutiveModel,
    anchor: Minors,
    normalization: f64,
    certified: SampleBox,
}

/// Builds `G` and fixes its constant at `anchor`. `certified` is the `Xi` box whose image under
/// `-grad Sigma` is the certified `tau` range.
pub fn build_g(
    model: &ConstitutiveModel,
    certified: &SampleBox,
    anchor: &Minors,
) -> Result<EntropyStructure, EntropyError> {
    let mut s = EntropyStructure { model: model.clone(), anchor: *anchor, normalization: 0.0, certified: *certified };
    let tau_a = model.tau_eq(anchor);
    let g_raw = s.g_point(&tau_a, Some(anchor))?.value;
    let lhs = model.sigma_i().value(anchor) + s.dot_active(anchor, &tau_a) + g_raw;
    s.normalization = model.sigma_e().value(anchor) - lhs;
    Ok(s)
}

impl EntropyStructure {
    pub fn model(&self) -> &ConstitutiveModel {
        &self.model
    }

    pub fn anchor(&self) -> Minors {
        self.anchor
    }

    /// Additive constant of `G`.
    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    pub fn certified_box(&self) -> &SampleBox {
        &self.certified
    }

    fn dot_active(&self, a: &Minors, b: &Minors) -> f64 {
        self.model.active().iter().map(|&k| a[k] * b[k]).sum()
    }

    /// `G(tau)`, `grad G(tau)` and the conjugate point; `guess` warm-starts the inversion.
    pub fn g_point(&self, tau: &Minors, guess: Option<&Minors>) -> Result<GPoint, EntropyError> {
        let p = -*tau;
        let inv = invert_grad_sigma(&self.model, &p, guess)?;
        let xi = inv.xi;
        // Sigma*(p) = p.Xi - Sigma(Xi)
        let value = self.dot_active(&p, &xi) - self.model.sigma().value(&xi) + self.normalization;
        let grad = -self.model.project_active(&xi);
        Ok(GPoint { tau: *tau, xi, value, grad })
    }

    pub fn g_value(&self, tau: &Minors, guess: Option<&Minors>) -> Result<f64, EntropyError> {
        Ok(self.g_point(tau, guess)?.value)
    }

    pub fn g_grad(&self, tau: &Minors, guess: Option<&Minors>) -> Result<Minors, EntropyError> {
        Ok(self.g_point(tau, guess)?.grad())
    }

    /// `hess G(tau)` on the active components.
    pub fn g_hess(&self, tau: &Minors, guess: Option<&Minors>) -> Result<DMatrix<f64>, EntropyError> {
        let gp = self.g_point(tau, guess)?;
        self.g_hess_at(&gp)
    }

    fn g_hess_at(&self, gp: &GPoint) -> Result<DMatrix<f64>, EntropyError> {
        let h = self.model.restrict_hessian(&self.model.sigma().hessian(&gp.xi));
        h.try_inverse().ok_or(EntropyError::NoConvergence { iterations: 0, residual: f64::INFINITY })
    }

    /// `Psi(Xi, tau)`.
    pub fn psi(&self, xi: &Minors, tau: &Minors, guess: Option<&Minors>) -> Result<f64, EntropyError> {
        let g = self.g_value(tau, guess.or(Some(xi)))?;
        Ok(self.model.sigma_i().value(xi) + self.dot_active(xi, tau) + g)
    }

    /// `Psi` from an already evaluated `G` point.
    pub fn psi_with(&self, xi: &Minors, gp: &GPoint) -> f64 {
        self.model.sigma_i().value(xi) + self.dot_active(xi, &gp.tau) + gp.value
    }

    /// `dPsi/dXi = grad sigma_I + tau`.
    pub fn psi_grad_xi(&self, xi: &Minors, tau: &Minors) -> Minors {
        self.model.sigma_i().gradient(xi) + self.model.project_active(tau)
    }

    /// `dPsi/dtau = Xi + grad G(tau)`.
    pub fn psi_grad_tau(&self, xi: &Minors, tau: &Minors, guess: Option<&Minors>) -> Result<Minors, EntropyError> {
        let g = self.g_grad(tau, guess.or(Some(xi)))?;
        Ok(self.model.project_active(xi) + g)
    }

    /// `D = (Xi + grad G(tau)).(tau + grad Sigma(Xi))`.
    pub fn dissipation(&self, xi: &Minors, tau: &Minors, guess: Option<&Minors>) -> Result<f64, EntropyError> {
        let gp = self.g_point(tau, guess.or(Some(xi)))?;
        Ok(self.dissipation_with(xi, &gp))
    }

    pub fn dissipation_with(&self, xi: &Minors, gp: &GPoint) -> f64 {
        let a = *xi + gp.grad();
        let b = gp.tau + self.model.sigma().gradient(xi);
        self.dot_active(&a, &b)
    }

    /// `lambda_min` of `[[hess sigma_I, I], [I, hess G]]` on the active components.
    pub fn hessian_psi_min_eig(&self, xi: &Minors, tau: &Minors, guess: Option<&Minors>) -> Result<f64, EntropyError> {
        let gp = self.g_point(tau, guess.or(Some(xi)))?;
        let hg = self.g_hess_at(&gp)?;
        let hi = self.model.restrict_hessian(&self.model.sigma_i().hessian(xi));
        let n = hi.nrows();
        let mut block = DMatrix::zeros(2 * n, 2 * n);
        block.view_mut((0, 0), (n, n)).copy_from(&hi);
        block.view_mut((n, n), (n, n)).copy_from(&hg);
        for k in 0..n {
            block[(k, n + k)] = 1.0;
            block[(n + k, k)] = 1.0;
        }
        Ok(sym_eig_range(&block).0)
    }
}

/// Sharp lower bound on the `Psi` Hessian from `gamma_I` and `gamma_v`:
/// `lambda_min [[gamma_I, 1], [1, 1/gamma_v]]`, the best constant of the Young splitting
/// `(gamma_I - d)|Xi|^2 + (1/gamma_v - 1/d)|tau|^2`.
pub fn convexity_margin(gamma_i: f64, gamma_v: f64) -> f64 {
    let s = gamma_i + 1.0 / gamma_v;
    let d = gamma_i - 1.0 / gamma_v;
    0.5 * (s - (d * d + 4.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckItem {
    pub name: String,
    /// Worst observed value of the quantity that must be `>= 0` (margins) or the worst error.
    pub worst: f64,
    pub pass: bool,
}

impl CheckItem {
    fn margin(name: &str, worst: f64, tol: f64) -> CheckItem {
        CheckItem { name: name.into(), worst, pass: worst >= -tol }
    }
    fn error(name: &str, worst: f64, tol: f64) -> CheckItem {
        CheckItem { name: name.into(), worst, pass: worst <= tol }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharReport {
    pub n_samples: usize,
    pub seed: u64,
    pub items: Vec<CheckItem>,
    pub failed_evaluations: usize,
    pub pass: bool,
}

/// Sampled checks of the Legendre characterization on the certified box:
/// zero-set coincidence in both directions, convexity of `G` and of `Sigma`,
/// `(hess G)(hess Sigma) = I`, the cross inequality and monotonicity of `grad Sigma`.
pub fn check_char(structure: &EntropyStructure, n_samples: usize, seed: u64) -> CharReport {
    let model = structure.model();
    let b = structure.certified_box();
    let xs = b.sample(n_samples, seed);
    let ys = b.sample(n_samples, seed.wrapping_add(1));
    let guess = b.center();
    struct Row {
        forward: f64,
        backward: f64,
        g_convex: f64,
        sigma_convex: f64,
        inverse_identity: f64,
        cross: f64,
        monotone: f64,
    }
    let rows: Vec<Option<Row>> = xs
        .par_iter()
        .zip(ys.par_iter())
        .map(|(x, y)| {
            let act = model.active();
            // forward: tau = -grad Sigma(x) implies x + grad G(tau) = 0
            let tau_x = model.tau_eq(x);
            let gp_x = structure.g_point(&tau_x, Some(&guess)).ok()?;
            let forward = model.project_active(&(*x + gp_x.grad())).max_abs();
            // backward: tau in the image, Xi = -grad G(tau) implies tau + grad Sigma(Xi) = 0
            let tau_y = model.tau_eq(y);
            let gp_y = structure.g_point(&tau_y, Some(&guess)).ok()?;
            let xi_b = -gp_y.grad() + (*y - model.project_active(y));
            let backward = model.project_active(&(tau_y + model.sigma().gradient(&xi_b))).max_abs();
            let hs = model.restrict_hessian(&model.sigma().hessian(&gp_y.xi));
            let hg = structure.g_hess_at(&gp_y).ok()?;
            let (hs_min, hs_max) = sym_eig_range(&hs);
            let g_min = sym_eigenvalues(&hg)[0];
            let g_convex = g_min - (1.0 / hs_max) * (1.0 - 1e-10);
            let n = act.len();
            let inverse_identity = (&hg * &hs - DMatrix::<f64>::identity(n, n)).amax();
            let cross = structure.dissipation_with(x, &gp_y);
            let monotone = {
                let dx = model.project_active(&(*x - *y));
                let dg = model.sigma().gradient(x) - model.sigma().gradient(y);
                dx.dot(&dg)
            };
            Some(Row { forward, backward, g_convex, sigma_convex: hs_min, inverse_identity, cross, monotone })
        })
        .collect();
    let mut failed = 0;
    let mut w = [0.0_f64, 0.0, f64::INFINITY, f64::INFINITY, 0.0, f64::INFINITY, f64::INFINITY];
    for r in rows {
        match r {
            None => failed += 1,
            Some(r) => {
                w[0] = w[0].max(r.forward);
                w[1] = w[1].max(r.backward);
                w[2] = w[2].min(r.g_convex);
                w[3] = w[3].min(r.sigma_convex);
                w[4] = w[4].max(r.inverse_identity);
                w[5] = w[5].min(r.cross);
                w[6] = w[6].min(r.monotone);
            }
        }
    }
    let items = vec![
        CheckItem::error("zero set: tau = -grad Sigma(Xi) => Xi + grad G(tau) = 0", w[0], 1e-9),
        CheckItem::error("zero set: Xi = -grad G(tau) => tau + grad Sigma(Xi) = 0", w[1], 1e-9),
        CheckItem::margin("G convex: lambda_min(hess G) - 1/lambda_max(hess Sigma)", w[2], 1e-9),
        CheckItem { name: "Sigma convex: lambda_min(hess Sigma)".into(), worst: w[3], pass: w[3] > 0.0 },
        CheckItem::error("hess G . hess Sigma(-grad G) = I", w[4], 1e-7),
        CheckItem::margin("(Xi + grad G(tau)).(tau + grad Sigma(Xi)) >= 0", w[5], 1e-10),
        CheckItem::margin("(Xi1 - Xi2).(grad Sigma(Xi1) - grad Sigma(Xi2)) >= 0", w[6], 1e-12),
    ];
    let pass = failed == 0 && items.iter().all(|i| i.pass);
    CharReport { n_samples, seed, items, failed_evaluations: failed, pass }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub n_samples: usize,
    /// Max `|grad Sigma((grad Sigma)^{-1}(p)) - p|`.
    pub max_roundtrip_residual: f64,
    /// Max `|Psi(Xi, -grad Sigma(Xi)) - sigma_E(Xi)|`.
    pub max_psi_minus_sigma_e: f64,
    /// Max central-difference `|dPsi/dtau|` on the equilibrium manifold.
    pub max_psi_tau_derivative: f64,
    /// Max `|dPsi/dXi - grad sigma_I - tau|` by central differences at off-equilibrium points.
    pub max_psi_xi_identity_error: f64,
    pub failed_evaluations: usize,
    pub pass: bool,
}

/// Finite-difference step for the entropy identities.
pub const FD_STEP: f64 = 1e-6;

/// Sampled equilibrium-manifold identities of `Psi`.
pub fn check_equilibrium(structure: &EntropyStructure, n_samples: usize, seed: u64) -> EquilibriumReport {
    let model = structure.model();
    let b = structure.certified_box();
    let xs = b.sample(n_samples, seed);
    let ys = b.sample(n_samples, seed.wrapping_add(7));
    let h = FD_STEP;
    let rows: Vec<Option<[f64; 4]>> = xs
        .par_iter()
        .zip(ys.par_iter())
        .map(|(x, y)| {
            let tau = model.tau_eq(x);
            let gp = structure.g_point(&tau, Some(x)).ok()?;
            let roundtrip = model.project_active(&(model.sigma().gradient(&gp.xi) + tau)).max_abs();
            let prop3 = (structure.psi_with(x, &gp) - model.sigma_e().value(x)).abs();
            let mut prop2 = 0.0_f64;
            for &k in model.active() {
                let mut tp = tau;
                let mut tm = tau;
                tp[k] += h;
                tm[k] -= h;
                let d = (structure.psi(x, &tp, Some(&gp.xi)).ok()? - structure.psi(x, &tm, Some(&gp.xi)).ok()?) / (2.0 * h);
                prop2 = prop2.max(d.abs());
            }
            // off-equilibrium tau taken from another sample's image
            let tau_y = model.tau_eq(y);
            let gy = structure.g_point(&tau_y, Some(y)).ok()?;
            let grad = structure.psi_grad_xi(x, &tau_y);
            let mut entro = 0.0_f64;
            for &k in model.active() {
                let mut xp = *x;
                let mut xm = *x;
                xp[k] += h;
                xm[k] -= h;
                let d = (structure.psi_with(&xp, &gy) - structure.psi_with(&xm, &gy)) / (2.0 * h);
                entro = entro.max((d - grad[k]).abs());
            }
            Some([roundtrip, prop3, prop2, entro])
        })
        .collect();
    let mut w = [0.0_f64; 4];
    let mut failed = 0;
    for r in rows {
        match r {
            None => failed += 1,
            Some(r) => {
                for k in 0..4 {
                    w[k] = w[k].max(r[k]);
                }
            }
        }
    }
    EquilibriumReport {
        n_samples,
        max_roundtrip_residual: w[0],
        max_psi_minus_sigma_e: w[1],
        max_psi_tau_derivative: w[2],
        max_psi_xi_identity_error: w[3],
        failed_evaluations: failed,
        pass: failed == 0 && w[0] <= 1e-9 && w[1] <= 1e-8 && w[2] <= 1e-8 && w[3] <= 1e-6,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissipationReport {
    pub n_samples: usize,
    pub gamma_v_est: f64,
    /// `min (D - |tau + grad Sigma|^2 / gamma_v_est)`.
    pub min_margin: f64,
    pub min_dissipation: f64,
    pub failed_evaluations: usize,
    pub pass: bool,
}

/// Samples `D >= |tau + grad Sigma(Xi)|^2 / gamma_v_est` over `(Xi, tau)` pairs from the certified box.
pub fn check_dissipation_bound(
    structure: &EntropyStructure,
    gamma_v_est: f64,
    n_samples: usize,
    seed: u64,
    tol: f64,
) -> DissipationReport {
    let model = structure.model();
    let b = structure.certified_box();
    let xs = b.sample(n_samples, seed);
    let ys = b.sample(n_samples, seed.wrapping_add(13));
    let rows: Vec<Option<(f64, f64)>> = xs
        .par_iter()
        .zip(ys.par_iter())
        .map(|(x, y)| {
            let tau = model.tau_eq(y);
            let gp = structure.g_point(&tau, Some(y)).ok()?;
            let d = structure.dissipation_with(x, &gp);
            let r = model.project_active(&(tau + model.sigma().gradient(x))).norm_sq();
            Some((d, d - r / gamma_v_est))
        })
        .collect();
    let mut min_margin = f64::INFINITY;
    let mut min_d = f64::INFINITY;
    let mut failed = 0;
    for r in rows {
        match r {
            None => failed += 1,
            Some((d, m)) => {
                min_d = min_d.min(d);
                min_margin = min_margin.min(m);
            }
        }
    }
    DissipationReport {
        n_samples,
        gamma_v_est,
        min_margin,
        min_dissipation: min_d,
        failed_evaluations: failed,
        pass: failed == 0 && min_margin >= -tol,
    }
}

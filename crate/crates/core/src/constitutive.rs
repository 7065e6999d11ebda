//! Energy potentials on minors, the built-in model families, and sampled checks of the
//! structural hypotheses.
//!
//! A [`ConstitutiveModel`] carries `sigma_I`, `sigma_E` and `Sigma = sigma_I - sigma_E`.
//! Potentials that depend on a subset of the minors (the gas family depends on `w` only)
//! declare that subset as the *active* components; the internal variable, the Legendre
//! inversion and every convexity check live on the active components.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gasdyn::{GasModel, GasParams};
use crate::linalg::{restrict, sym_eig_range, sym_norm};
use crate::minors::{phi, Dim, Mat, Minors, MinorsError};
use crate::sampling::{latin_hypercube, rng_from_seed, unit_vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown model family `{0}` (expected quadratic, polyquad or gas-lagrangean)")]
    UnknownFamily(String),
    #[error("unknown parameter `{param}` for family `{family}`")]
    UnknownParam { family: String, param: String },
    #[error("invalid parameters for `{family}`: {reason}")]
    InvalidParams { family: String, reason: String },
    #[error(transparent)]
    Minors(#[from] MinorsError),
    #[error("invalid sample box: {0}")]
    InvalidBox(String),
}

/// Smooth potential on minors with exact gradient and Hessian.
pub trait Potential: Send + Sync + Debug {
    fn dim(&self) -> Dim;
    fn value(&self, x: &Minors) -> f64;
    fn gradient(&self, x: &Minors) -> Minors;
    fn hessian(&self, x: &Minors) -> DMatrix<f64>;
}

/// `gamma/2 |x - center|^2`.
#[derive(Debug, Clone)]
pub struct QuadraticPotential {
    pub center: Minors,
    pub gamma: f64,
}

impl Potential for QuadraticPotential {
    fn dim(&self) -> Dim {
        self.center.dim()
    }
    fn value(&self, x: &Minors) -> f64 {
        0.5 * self.gamma * (*x - self.center).norm_sq()
    }
    fn gradient(&self, x: &Minors) -> Minors {
        (*x - self.center) * self.gamma
    }
    fn hessian(&self, _x: &Minors) -> DMatrix<f64> {
        let n = self.center.len();
        DMatrix::from_diagonal_element(n, n, self.gamma)
    }
}

/// `a/2 |F|^2 + b/2 |Z|^2 + c (w-1)^2 + mu ln cosh(w-1) + s/2 |x|^2`.
#[derive(Debug, Clone)]
pub struct PolyquadPotential {
    pub dim: Dim,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub mu: f64,
    pub shift: f64,
}

fn ln_cosh(x: f64) -> f64 {
    let ax = x.abs();
    ax + (-2.0 * ax).exp().ln_1p() - std::f64::consts::LN_2
}

impl PolyquadPotential {
    fn block_weight(&self, k: usize) -> f64 {
        let d2 = self.dim.d() * self.dim.d();
        if k < d2 {
            self.a
        } else {
            self.b
        }
    }
}

impl Potential for PolyquadPotential {
    fn dim(&self) -> Dim {
        self.dim
    }
    fn value(&self, x: &Minors) -> f64 {
        let wi = self.dim.w_index();
        let mut s = 0.0;
        for k in 0..wi {
            s += 0.5 * self.block_weight(k) * x[k] * x[k];
        }
        let t = x[wi] - 1.0;
        s + self.c * t * t + self.mu * ln_cosh(t) + 0.5 * self.shift * x.norm_sq()
    }
    fn gradient(&self, x: &Minors) -> Minors {
        let wi = self.dim.w_index();
        let t = x[wi] - 1.0;
        Minors::from_fn(self.dim, |k| {
            let base = if k < wi { self.block_weight(k) * x[k] } else { 2.0 * self.c * t + self.mu * t.tanh() };
            base + self.shift * x[k]
        })
    }
    fn hessian(&self, x: &Minors) -> DMatrix<f64> {
        let wi = self.dim.w_index();
        let n = self.dim.minors_len();
        let t = x[wi] - 1.0;
        let sech2 = 1.0 / t.cosh().powi(2);
        let mut h = DMatrix::zeros(n, n);
        for k in 0..n {
            h[(k, k)] = if k < wi { self.block_weight(k) } else { 2.0 * self.c + self.mu * sech2 } + self.shift;
        }
        h
    }
}

/// Which gas energy a [`GasWPotential`] represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GasEnergy {
    Instantaneous,
    Equilibrium,
    Difference,
}

/// `e(1/w)` for a gas energy; depends on `w` only and is NaN for `w <= 0`.
#[derive(Debug, Clone)]
pub struct GasWPotential {
    pub dim: Dim,
    pub gas: GasModel,
    pub which: GasEnergy,
}

impl GasWPotential {
    fn energy(&self, rho: f64) -> f64 {
        match self.which {
            GasEnergy::Instantaneous => self.gas.e_i(rho),
            GasEnergy::Equilibrium => self.gas.e_e(rho),
            GasEnergy::Difference => self.gas.e_diff(rho),
        }
    }
    fn pressure(&self, rho: f64) -> f64 {
        match self.which {
            GasEnergy::Instantaneous => self.gas.p_i(rho),
            GasEnergy::Equilibrium => self.gas.p_e(rho),
            GasEnergy::Difference => self.gas.p_diff(rho),
        }
    }
    fn dpressure(&self, rho: f64) -> f64 {
        match self.which {
            GasEnergy::Instantaneous => self.gas.dp_i(rho),
            GasEnergy::Equilibrium => self.gas.dp_e(rho),
            GasEnergy::Difference => self.gas.dp_diff(rho),
        }
    }
    fn d2pressure(&self, rho: f64) -> f64 {
        match self.which {
            GasEnergy::Instantaneous => self.gas.d2p_i(rho),
            GasEnergy::Equilibrium => self.gas.d2p_e(rho),
            GasEnergy::Difference => self.gas.d2p_diff(rho),
        }
    }

    /// `d/dw e(1/w) = -p(1/w)`.
    pub fn d1(&self, w: f64) -> f64 {
        if w > 0.0 {
            -self.pressure(1.0 / w)
        } else {
            f64::NAN
        }
    }

    pub fn d2(&self, w: f64) -> f64 {
        if w > 0.0 {
            self.dpressure(1.0 / w) / (w * w)
        } else {
            f64::NAN
        }
    }

    pub fn d3(&self, w: f64) -> f64 {
        if w > 0.0 {
            let rho = 1.0 / w;
            -self.d2pressure(rho) / w.powi(4) - 2.0 * self.dpressure(rho) / w.powi(3)
        } else {
            f64::NAN
        }
    }
}

impl Potential for GasWPotential {
    fn dim(&self) -> Dim {
        self.dim
    }
    fn value(&self, x: &Minors) -> f64 {
        let w = x.w();
        if w > 0.0 {
            self.energy(1.0 / w)
        } else {
            f64::NAN
        }
    }
    fn gradient(&self, x: &Minors) -> Minors {
        let mut g = Minors::zeros(self.dim);
        g[self.dim.w_index()] = self.d1(x.w());
        g
    }
    fn hessian(&self, x: &Minors) -> DMatrix<f64> {
        let n = self.dim.minors_len();
        let mut h = DMatrix::zeros(n, n);
        h[(n - 1, n - 1)] = self.d2(x.w());
        h
    }
}

/// `first - second`.
#[derive(Debug, Clone)]
pub struct DifferencePotential {
    pub first: Arc<dyn Potential>,
    pub second: Arc<dyn Potential>,
}

impl Potential for DifferencePotential {
    fn dim(&self) -> Dim {
        self.first.dim()
    }
    fn value(&self, x: &Minors) -> f64 {
        self.first.value(x) - self.second.value(x)
    }
    fn gradient(&self, x: &Minors) -> Minors {
        self.first.gradient(x) - self.second.gradient(x)
    }
    fn hessian(&self, x: &Minors) -> DMatrix<f64> {
        self.first.hessian(x) - self.second.hessian(x)
    }
}

/// Constants a model declares for `(h1)` and `(h2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeclaredConstants {
    pub gamma_i: f64,
    pub gamma_v: f64,
    pub m: f64,
}

impl DeclaredConstants {
    /// `gamma_I > gamma_v > 0` and `M > 0`.
    pub fn is_ordered(&self) -> bool {
        self.gamma_i > self.gamma_v && self.gamma_v > 0.0 && self.m > 0.0
    }
}

pub type ModelParams = BTreeMap<String, f64>;

/// Pair of potentials with the derived `Sigma` and declared constants.
#[derive(Debug, Clone)]
pub struct ConstitutiveModel {
    pub family: String,
    pub params: ModelParams,
    pub declared: DeclaredConstants,
    dim: Dim,
    sigma_i: Arc<dyn Potential>,
    sigma_e: Arc<dyn Potential>,
    sigma: Arc<dyn Potential>,
    reference: Minors,
    active: Vec<usize>,
    gas: Option<GasModel>,
}

impl ConstitutiveModel {
    /// Model from arbitrary potentials; `Sigma` is their difference.
    pub fn from_potentials(
        family: &str,
        sigma_i: Arc<dyn Potential>,
        sigma_e: Arc<dyn Potential>,
        declared: DeclaredConstants,
    ) -> ConstitutiveModel {
        let dim = sigma_i.dim();
        let sigma: Arc<dyn Potential> =
            Arc::new(DifferencePotential { first: sigma_i.clone(), second: sigma_e.clone() });
        ConstitutiveModel {
            family: family.to_string(),
            params: ModelParams::new(),
            declared,
            dim,
            sigma_i,
            sigma_e,
            sigma,
            reference: phi(&Mat::identity(dim)),
            active: (0..dim.minors_len()).collect(),
            gas: None,
        }
    }

    pub fn dim(&self) -> Dim {
        self.dim
    }

    pub fn sigma_i(&self) -> &dyn Potential {
        self.sigma_i.as_ref()
    }

    pub fn sigma_e(&self) -> &dyn Potential {
        self.sigma_e.as_ref()
    }

    /// `Sigma = sigma_I - sigma_E`.
    pub fn sigma(&self) -> &dyn Potential {
        self.sigma.as_ref()
    }

    /// Reference point `Phi(I)`; anchor of the entropy normalization.
    pub fn reference(&self) -> Minors {
        self.reference
    }

    /// Components on which the potentials depend; sorted.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn gas(&self) -> Option<&GasModel> {
        self.gas.as_ref()
    }

    /// Equilibrium internal variable `grad(sigma_E - sigma_I) = -grad Sigma`.
    pub fn tau_eq(&self, xi: &Minors) -> Minors {
        -self.sigma.gradient(xi)
    }

    pub fn restrict_hessian(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        restrict(h, &self.active)
    }

    /// Zeroes the inactive components.
    pub fn project_active(&self, x: &Minors) -> Minors {
        let mut out = Minors::zeros(self.dim);
        for &k in &self.active {
            out[k] = x[k];
        }
        out
    }
}

const QUADRATIC_KEYS: [&str; 2] = ["gamma_e", "gamma_v"];
const POLYQUAD_KEYS: [&str; 5] = ["a", "b", "c", "mu", "gamma_v"];
const GAS_KEYS: [&str; 6] = ["kappa", "gamma", "a", "beta", "rho_min", "rho_max"];

fn check_keys(family: &str, params: &ModelParams, allowed: &[&str]) -> Result<(), ModelError> {
    match params.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(ModelError::UnknownParam { family: family.to_string(), param: k.clone() }),
        None => Ok(()),
    }
}

fn positive(family: &str, name: &str, v: f64) -> Result<f64, ModelError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(ModelError::InvalidParams { family: family.to_string(), reason: format!("{name} must be positive, got {v}") })
    }
}

/// Instantiates `quadratic`, `polyquad` or `gas-lagrangean`.
///
/// Declared constants default to the family's exact bounds; for `gas-lagrangean` they are the
/// extreme second and third derivatives over the certified `w` range.
pub fn builtin_model(name: &str, dim: Dim, params: &ModelParams) -> Result<ConstitutiveModel, ModelError> {
    let get = |k: &str, default: f64| params.get(k).copied().unwrap_or(default);
    let reference = phi(&Mat::identity(dim));
    let mut model = match name {
        "quadratic" => {
            check_keys(name, params, &QUADRATIC_KEYS)?;
            let gamma_e = positive(name, "gamma_e", get("gamma_e", 2.0))?;
            let gamma_v = positive(name, "gamma_v", get("gamma_v", 0.5))?;
            let gamma_i = gamma_e + gamma_v;
            let sigma_e: Arc<dyn Potential> = Arc::new(QuadraticPotential { center: reference, gamma: gamma_e });
            let sigma_i: Arc<dyn Potential> = Arc::new(QuadraticPotential { center: reference, gamma: gamma_i });
            let mut m = ConstitutiveModel::from_potentials(
                name,
                sigma_i,
                sigma_e,
                DeclaredConstants { gamma_i, gamma_v, m: gamma_e },
            );
            m.sigma = Arc::new(QuadraticPotential { center: reference, gamma: gamma_v });
            m
        }
        "polyquad" => {
            check_keys(name, params, &POLYQUAD_KEYS)?;
            let a = positive(name, "a", get("a", 1.0))?;
            let b = if dim == Dim::Three { positive(name, "b", get("b", 0.5))? } else { 0.0 };
            if dim == Dim::Two && params.contains_key("b") {
                return Err(ModelError::UnknownParam { family: name.into(), param: "b".into() });
            }
            let c = positive(name, "c", get("c", 1.0))?;
            let mu = get("mu", 0.5);
            if !(mu.is_finite() && mu >= 0.0) {
                return Err(ModelError::InvalidParams { family: name.into(), reason: "mu must be non-negative".into() });
            }
            let gamma_v = positive(name, "gamma_v", get("gamma_v", 0.25))?;
            let base = PolyquadPotential { dim, a, b, c, mu, shift: 0.0 };
            let sigma_e: Arc<dyn Potential> = Arc::new(base.clone());
            let sigma_i: Arc<dyn Potential> = Arc::new(PolyquadPotential { shift: gamma_v, ..base });
            let low = if dim == Dim::Three { a.min(b).min(2.0 * c) } else { a.min(2.0 * c) };
            let high = if dim == Dim::Three { a.max(b).max(2.0 * c + mu) } else { a.max(2.0 * c + mu) };
            // sup |d^3 ln cosh| = 4 / (3 sqrt 3)
            let third = mu * 4.0 / (3.0 * 3f64.sqrt());
            let mut m = ConstitutiveModel::from_potentials(
                name,
                sigma_i,
                sigma_e,
                DeclaredConstants { gamma_i: low + gamma_v, gamma_v, m: high.max(third) },
            );
            m.sigma = Arc::new(QuadraticPotential { center: Minors::zeros(dim), gamma: gamma_v });
            m
        }
        "gas-lagrangean" => {
            check_keys(name, params, &GAS_KEYS)?;
            let gas_params: GasParams = params.clone();
            let gas = crate::gasdyn::builtin_gas("default", &gas_params).map_err(|e| ModelError::InvalidParams {
                family: name.into(),
                reason: e.to_string(),
            })?;
            let mk = |which| GasWPotential { dim, gas: gas.clone(), which };
            let si = mk(GasEnergy::Instantaneous);
            let se = mk(GasEnergy::Equilibrium);
            let sd = mk(GasEnergy::Difference);
            let (w_lo, w_hi) = (1.0 / gas.rho_box.1, 1.0 / gas.rho_box.0);
            let scan = |f: &dyn Fn(f64) -> f64, take_max: bool| {
                let n = 4000;
                (0..=n)
                    .map(|k| f(w_lo + (w_hi - w_lo) * k as f64 / n as f64))
                    .fold(if take_max { f64::NEG_INFINITY } else { f64::INFINITY }, |acc, x| {
                        if take_max {
                            acc.max(x)
                        } else {
                            acc.min(x)
                        }
                    })
            };
            let gamma_i = scan(&|w| si.d2(w), false);
            let gamma_v = scan(&|w| sd.d2(w), true);
            let m_bound = scan(&|w| se.d2(w).abs().max(se.d3(w).abs()), true);
            let mut m = ConstitutiveModel::from_potentials(
                name,
                Arc::new(si),
                Arc::new(se),
                DeclaredConstants { gamma_i, gamma_v, m: m_bound },
            );
            m.sigma = Arc::new(sd);
            m.active = vec![dim.w_index()];
            m.gas = Some(gas);
            m
        }
        other => return Err(ModelError::UnknownFamily(other.to_string())),
    };
    model.params = params.clone();
    model.reference = reference;
    Ok(model)
}

/// Axis-aligned box of minors used for sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleBox {
    pub lower: Minors,
    pub upper: Minors,
}

impl SampleBox {
    pub fn around(center: Minors, half_width: f64) -> SampleBox {
        let h = Minors::from_fn(center.dim(), |_| half_width);
        SampleBox { lower: center - h, upper: center + h }
    }

    pub fn with_w_range(mut self, lo: f64, hi: f64) -> SampleBox {
        let wi = self.lower.dim().w_index();
        self.lower[wi] = lo;
        self.upper[wi] = hi;
        self
    }

    pub fn center(&self) -> Minors {
        (self.lower + self.upper) * 0.5
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for k in 0..self.lower.len() {
            if !(self.lower[k].is_finite() && self.upper[k].is_finite() && self.lower[k] <= self.upper[k]) {
                return Err(ModelError::InvalidBox(format!("component {k}: [{}, {}]", self.lower[k], self.upper[k])));
            }
        }
        Ok(())
    }

    /// Latin-hypercube samples; components of zero width stay fixed.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<Minors> {
        let dim = self.lower.dim();
        let mut rng = rng_from_seed(seed);
        latin_hypercube(n, dim.minors_len(), &mut rng)
            .into_iter()
            .map(|u| Minors::from_fn(dim, |k| self.lower[k] + (self.upper[k] - self.lower[k]) * u[k]))
            .collect()
    }

    pub fn to_report(&self) -> BoxReport {
        BoxReport { lower: self.lower.as_slice().to_vec(), upper: self.upper.as_slice().to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxReport {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Default box per family: `Phi(I)` plus or minus `half_width`; the gas family varies `w` only.
pub fn default_box(model: &ConstitutiveModel) -> SampleBox {
    match model.gas() {
        Some(g) => SampleBox::around(model.reference(), 0.0).with_w_range(1.0 / g.rho_box.1, 1.0 / g.rho_box.0),
        None => SampleBox::around(model.reference(), 0.5),
    }
}

fn restricted_eig_range(model: &ConstitutiveModel, h: &DMatrix<f64>) -> (f64, f64) {
    sym_eig_range(&model.restrict_hessian(h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionFailure {
    pub sample: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H0Report {
    pub sample_box: BoxReport,
    pub n_samples: usize,
    pub seed: u64,
    /// `min lambda_min(hess Sigma)` on the active components.
    pub min_eig_sigma_hessian: f64,
    pub inversions_succeeded: usize,
    pub inversion_failures: Vec<InversionFailure>,
    /// Max `|Xi_recovered - Xi_target|` over successful inversions.
    pub max_roundtrip_error: f64,
    pub pass: bool,
}

/// Local `(h0)` evidence: positive `hess Sigma` and Newton inversion of `grad Sigma` at sampled
/// targets `p = grad Sigma(Xi')`, `Xi'` in the box.
pub fn check_h0(model: &ConstitutiveModel, sample_box: &SampleBox, n_samples: usize, seed: u64) -> H0Report {
    let samples = sample_box.sample(n_samples, seed);
    let guess = sample_box.center();
    let rows: Vec<(f64, Result<f64, String>)> = samples
        .par_iter()
        .map(|xi| {
            let (lo, _) = restricted_eig_range(model, &model.sigma().hessian(xi));
            let p = model.sigma().gradient(xi);
            let inv = crate::entropy::invert_grad_sigma(model, &p, Some(&guess))
                .map(|r| model.project_active(&(r.xi - *xi)).max_abs())
                .map_err(|e| e.to_string());
            (lo, inv)
        })
        .collect();
    let mut min_eig = f64::INFINITY;
    let mut ok = 0;
    let mut failures = Vec::new();
    let mut max_err = 0.0_f64;
    for (k, (lo, inv)) in rows.into_iter().enumerate() {
        min_eig = min_eig.min(lo);
        match inv {
            Ok(err) => {
                ok += 1;
                max_err = max_err.max(err);
            }
            Err(reason) => failures.push(InversionFailure { sample: k, reason }),
        }
    }
    H0Report {
        sample_box: sample_box.to_report(),
        n_samples,
        seed,
        min_eig_sigma_hessian: min_eig,
        inversions_succeeded: ok,
        pass: min_eig > 0.0 && failures.is_empty(),
        inversion_failures: failures,
        max_roundtrip_error: max_err,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H1Report {
    pub gamma_i_est: f64,
    pub gamma_v_est: f64,
    pub declared_gamma_i: f64,
    pub declared_gamma_v: f64,
    /// `min lambda_min(hess sigma_E)`; must dominate `gamma_i_est - gamma_v_est` when the check passes.
    pub sigma_e_min_eig: f64,
    pub sigma_e_convexity_remark_holds: bool,
    pub violations: Vec<String>,
    pub pass: bool,
}

/// Sampled `(h1)`: `gamma_I_est = min lambda_min(hess sigma_I)`, `gamma_v_est = max lambda_max(hess Sigma)`.
pub fn check_h1(model: &ConstitutiveModel, sample_box: &SampleBox, n_samples: usize, seed: u64) -> H1Report {
    let samples = sample_box.sample(n_samples, seed);
    let rows: Vec<(f64, f64, f64)> = samples
        .par_iter()
        .map(|xi| {
            let (gi, _) = restricted_eig_range(model, &model.sigma_i().hessian(xi));
            let (_, gv) = restricted_eig_range(model, &model.sigma().hessian(xi));
            let (ge, _) = restricted_eig_range(model, &model.sigma_e().hessian(xi));
            (gi, gv, ge)
        })
        .collect();
    let mut gi = f64::INFINITY;
    let mut gv = f64::NEG_INFINITY;
    let mut ge = f64::INFINITY;
    for (a, b, c) in rows {
        gi = gi.min(a);
        gv = gv.max(b);
        ge = ge.min(c);
    }
    let d = model.declared;
    let tol = 1e-12 * (1.0 + d.gamma_i.abs().max(d.gamma_v.abs()));
    let mut violations = Vec::new();
    if !(gv > 0.0) {
        violations.push(format!("(h1): hess Sigma not positive (gamma_v_est = {gv})"));
    }
    if !(gi > gv) {
        violations.push(format!("(h1): gamma_I_est = {gi} does not exceed gamma_v_est = {gv}"));
    }
    if !(d.gamma_i > d.gamma_v && d.gamma_v > 0.0) {
        violations.push(format!("(h1): declared gamma_I = {} must exceed declared gamma_v = {} > 0", d.gamma_i, d.gamma_v));
    }
    if gi < d.gamma_i - tol {
        violations.push(format!("(h1): sampled lambda_min(hess sigma_I) = {gi} below declared gamma_I = {}", d.gamma_i));
    }
    if gv > d.gamma_v + tol {
        violations.push(format!("(h1): sampled lambda_max(hess Sigma) = {gv} above declared gamma_v = {}", d.gamma_v));
    }
    let pass = violations.is_empty();
    let remark = !pass || ge >= gi - gv - 1e-10 * (1.0 + gi.abs());
    H1Report {
        gamma_i_est: gi,
        gamma_v_est: gv,
        declared_gamma_i: d.gamma_i,
        declared_gamma_v: d.gamma_v,
        sigma_e_min_eig: ge,
        sigma_e_convexity_remark_holds: remark,
        violations,
        pass,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H2Report {
    pub hessian_norm_max: f64,
    pub third_derivative_est: f64,
    pub m_est: f64,
    pub declared_m: f64,
    pub pass: bool,
}

/// Step of the directional Hessian difference quotient.
pub const THIRD_DERIVATIVE_STEP: f64 = 1e-4;

/// Sampled `(h2)`: max of `||hess sigma_E||` and `||(hess sigma_E(Xi + h u) - hess sigma_E(Xi)) / h||`.
pub fn check_h2(model: &ConstitutiveModel, sample_box: &SampleBox, n_samples: usize, seed: u64) -> H2Report {
    let samples = sample_box.sample(n_samples, seed);
    let dirs: Vec<Minors> = {
        let mut rng = rng_from_seed(seed ^ 0x9e37_79b9_7f4a_7c15);
        let act = model.active();
        (0..samples.len())
            .map(|_| {
                let u = unit_vector(act.len(), &mut rng);
                let mut m = Minors::zeros(model.dim());
                for (k, &idx) in act.iter().enumerate() {
                    m[idx] = u[k];
                }
                m
            })
            .collect()
    };
    let h = THIRD_DERIVATIVE_STEP;
    let rows: Vec<(f64, f64)> = samples
        .par_iter()
        .zip(dirs.par_iter())
        .map(|(xi, u)| {
            let h0 = model.sigma_e().hessian(xi);
            let h1 = model.sigma_e().hessian(&xi.axpy(h, u));
            let n2 = sym_norm(&model.restrict_hessian(&h0));
            let n3 = sym_norm(&model.restrict_hessian(&((h1 - &h0) / h)));
            (n2, n3)
        })
        .collect();
    let mut hn = 0.0_f64;
    let mut tn = 0.0_f64;
    for (a, b) in rows {
        hn = hn.max(a);
        tn = tn.max(b);
    }
    let m_est = hn.max(tn);
    H2Report {
        hessian_norm_max: hn,
        third_derivative_est: tn,
        m_est,
        declared_m: model.declared.m,
        pass: m_est.is_finite() && m_est <= model.declared.m * (1.0 + 1e-6),
    }
}

/// Sample box as written in a model table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub half_width: Option<f64>,
    pub w_range: Option<[f64; 2]>,
    pub samples: Option<usize>,
}

/// Declared constants as written in a model table; missing entries take the family defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredConfig {
    pub gamma_i: Option<f64>,
    pub gamma_v: Option<f64>,
    pub m: Option<f64>,
}

/// `[model]` table of a run or check configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: String,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub params: ModelParams,
    #[serde(default)]
    pub declared: DeclaredConfig,
    #[serde(default, rename = "box")]
    pub sample_box: BoxConfig,
}

fn default_dim() -> usize {
    3
}

pub const DEFAULT_SAMPLES: usize = 512;

impl ModelConfig {
    pub fn build(&self) -> Result<(ConstitutiveModel, SampleBox, usize), ModelError> {
        let dim = Dim::new(self.dim)?;
        let mut model = builtin_model(&self.family, dim, &self.params)?;
        if let Some(v) = self.declared.gamma_i {
            model.declared.gamma_i = v;
        }
        if let Some(v) = self.declared.gamma_v {
            model.declared.gamma_v = v;
        }
        if let Some(v) = self.declared.m {
            model.declared.m = v;
        }
        let mut b = default_box(&model);
        if let Some(hw) = self.sample_box.half_width {
            if !(hw.is_finite() && hw >= 0.0) {
                return Err(ModelError::InvalidBox(format!("half_width = {hw}")));
            }
            // the gas box varies w only and ignores half_width
            if model.gas().is_none() {
                b = SampleBox::around(model.reference(), hw);
            }
        }
        if let Some([lo, hi]) = self.sample_box.w_range {
            b = b.with_w_range(lo, hi);
        }
        b.validate()?;
        Ok((model, b, self.sample_box.samples.unwrap_or(DEFAULT_SAMPLES)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(kv: &[(&str, f64)]) -> ModelParams {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn random_point(rng: &mut ChaCha8Rng, dim: Dim, center: Minors, r: f64) -> Minors {
        Minors::from_fn(dim, |k| center[k] + rng.random_range(-r..r))
    }

    fn grad_fd_error(p: &dyn Potential, x: &Minors) -> f64 {
        let h = 1e-6;
        let g = p.gradient(x);
        let mut worst = 0.0_f64;
        for k in 0..x.len() {
            let mut xp = *x;
            let mut xm = *x;
            xp[k] += h;
            xm[k] -= h;
            let fd = (p.value(&xp) - p.value(&xm)) / (2.0 * h);
            worst = worst.max((fd - g[k]).abs());
        }
        worst
    }

    fn hess_fd_error(p: &dyn Potential, x: &Minors) -> f64 {
        let h = 1e-6;
        let hm = p.hessian(x);
        let mut worst = 0.0_f64;
        for k in 0..x.len() {
            let mut xp = *x;
            let mut xm = *x;
            xp[k] += h;
            xm[k] -= h;
            let col = (p.gradient(&xp) - p.gradient(&xm)) * (0.5 / h);
            for r in 0..x.len() {
                worst = worst.max((col[r] - hm[(r, k)]).abs());
            }
        }
        worst
    }

    fn all_models() -> Vec<ConstitutiveModel> {
        let mut v = Vec::new();
        for dim in [Dim::Two, Dim::Three] {
            v.push(builtin_model("quadratic", dim, &ModelParams::new()).unwrap());
            v.push(builtin_model("polyquad", dim, &ModelParams::new()).unwrap());
            v.push(builtin_model("gas-lagrangean", dim, &ModelParams::new()).unwrap());
        }
        v
    }

    #[test]
    fn evaluators_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for m in all_models() {
            for _ in 0..20 {
                let mut x = random_point(&mut rng, m.dim(), m.reference(), 0.4);
                if m.gas().is_some() {
                    x[m.dim().w_index()] = rng.random_range(0.6..1.9);
                }
                for p in [m.sigma_i(), m.sigma_e(), m.sigma()] {
                    assert!(grad_fd_error(p, &x) < 1e-6, "{} gradient", m.family);
                    assert!(hess_fd_error(p, &x) < 1e-4, "{} hessian", m.family);
                    let h = p.hessian(&x);
                    assert!((&h - h.transpose()).abs().max() <= 1e-12);
                }
                let diff = m.sigma_i().gradient(&x) - m.sigma_e().gradient(&x) - m.sigma().gradient(&x);
                assert!(diff.max_abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quadratic_constants_and_sigma() {
        let m = builtin_model("quadratic", Dim::Three, &params(&[("gamma_e", 2.0), ("gamma_v", 0.5)])).unwrap();
        assert_eq!(m.declared.gamma_i, 2.5);
        let x = Minors::from_fn(Dim::Three, |k| 0.1 * k as f64);
        let expect = 0.25 * (x - m.reference()).norm_sq();
        assert!((m.sigma().value(&x) - expect).abs() < 1e-15);
    }

    #[test]
    fn gas_lagrangean_gradient_is_minus_pressure() {
        let m = builtin_model("gas-lagrangean", Dim::Three, &params(&[("kappa", 1.0), ("gamma", 2.0)])).unwrap();
        for &w in &[0.5, 0.8, 1.0, 1.6] {
            let mut x = m.reference();
            x[18] = w;
            assert!((m.sigma_e().gradient(&x)[18] + 1.0 / (w * w)).abs() < 1e-14);
        }
        assert_eq!(m.active(), &[18]);
    }

    #[test]
    fn unknown_family_and_bad_params() {
        assert!(matches!(builtin_model("cubic", Dim::Three, &ModelParams::new()), Err(ModelError::UnknownFamily(_))));
        assert!(matches!(
            builtin_model("quadratic", Dim::Three, &params(&[("gamma_v", -1.0)])),
            Err(ModelError::InvalidParams { .. })
        ));
        assert!(matches!(
            builtin_model("polyquad", Dim::Two, &params(&[("b", 1.0)])),
            Err(ModelError::UnknownParam { .. })
        ));
    }

    #[test]
    fn quadratic_h0_h1_h2_exact() {
        let m = builtin_model("quadratic", Dim::Three, &params(&[("gamma_e", 2.0), ("gamma_v", 0.5)])).unwrap();
        let b = default_box(&m);
        let h0 = check_h0(&m, &b, 64, 1);
        assert_eq!(h0.min_eig_sigma_hessian, 0.5);
        assert!(h0.pass && h0.inversions_succeeded == 64);
        let h1 = check_h1(&m, &b, 64, 1);
        assert_eq!((h1.gamma_i_est, h1.gamma_v_est), (2.5, 0.5));
        assert!(h1.pass && h1.sigma_e_convexity_remark_holds);
        let h2 = check_h2(&m, &b, 64, 1);
        assert!(h2.third_derivative_est <= 1e-6);
        assert_eq!(h2.hessian_norm_max, 2.0);
        assert!(h2.pass);
    }

    #[test]
    fn declared_gamma_v_too_small_fails() {
        let mut m = builtin_model("quadratic", Dim::Three, &ModelParams::new()).unwrap();
        m.declared.gamma_v = 0.4;
        let h1 = check_h1(&m, &default_box(&m), 32, 2);
        assert!(!h1.pass);
        assert!(h1.violations.iter().any(|v| v.contains("above declared gamma_v")));
    }

    #[test]
    fn polyquad_checks_within_brackets() {
        let m = builtin_model("polyquad", Dim::Three, &ModelParams::new()).unwrap();
        let b = SampleBox::around(Minors::zeros(Dim::Three), 5.0 / 19f64.sqrt());
        let h0 = check_h0(&m, &b, 128, 3);
        assert!(h0.min_eig_sigma_hessian > 0.0 && h0.pass);
        let h1 = check_h1(&m, &b, 128, 3);
        assert!(h1.pass, "{:?}", h1.violations);
        assert!(h1.gamma_i_est >= m.declared.gamma_i && h1.gamma_v_est <= m.declared.gamma_v);
        assert!(h1.sigma_e_min_eig >= h1.gamma_i_est - h1.gamma_v_est - 1e-12);
        let h2 = check_h2(&m, &b, 128, 3);
        assert!(h2.m_est >= h2.hessian_norm_max && h2.pass);
    }

    #[derive(Debug)]
    struct DoubleWell(Dim);

    impl Potential for DoubleWell {
        fn dim(&self) -> Dim {
            self.0
        }
        fn value(&self, x: &Minors) -> f64 {
            let t = x.w() - 1.0;
            0.25 * t.powi(4) - t * t + 0.5 * x.norm_sq()
        }
        fn gradient(&self, x: &Minors) -> Minors {
            let t = x.w() - 1.0;
            let mut g = *x;
            g[self.0.w_index()] += t.powi(3) - 2.0 * t;
            g
        }
        fn hessian(&self, x: &Minors) -> DMatrix<f64> {
            let n = self.0.minors_len();
            let t = x.w() - 1.0;
            let mut h = DMatrix::identity(n, n);
            h[(n - 1, n - 1)] += 3.0 * t * t - 2.0;
            h
        }
    }

    #[test]
    fn non_convex_sigma_is_reported() {
        let dim = Dim::Two;
        let si: Arc<dyn Potential> = Arc::new(QuadraticPotential { center: Minors::zeros(dim), gamma: 3.0 });
        let toy = ConstitutiveModel::from_potentials(
            "toy",
            Arc::new(DifferencePotential {
                first: si.clone(),
                second: Arc::new(DifferencePotential { first: si, second: Arc::new(DoubleWell(dim)) }),
            }),
            Arc::new(QuadraticPotential { center: Minors::zeros(dim), gamma: 1.0 }),
            DeclaredConstants { gamma_i: 2.0, gamma_v: 1.0, m: 1.0 },
        );
        let b = SampleBox::around(phi(&Mat::identity(dim)), 0.5);
        let h0 = check_h0(&toy, &b, 64, 4);
        assert!(h0.min_eig_sigma_hessian < 0.0);
        assert!(!h0.pass);
    }

    #[test]
    fn model_config_parses_and_overrides() {
        let cfg: ModelConfig = toml::from_str(
            r#"
family = "quadratic"
dim = 2
params = { gamma_e = 3.0, gamma_v = 1.0 }
declared = { gamma_v = 1.5 }
box = { half_width = 0.25, samples = 16 }
"#,
        )
        .unwrap();
        let (m, b, n) = cfg.build().unwrap();
        assert_eq!(m.dim(), Dim::Two);
        assert_eq!(m.declared.gamma_v, 1.5);
        assert_eq!(m.declared.gamma_i, 4.0);
        assert_eq!(n, 16);
        assert!((b.upper[0] - 1.25).abs() < 1e-15);
        let bad: Result<ModelConfig, _> = toml::from_str("family = \"quadratic\"\nfoo = 1\n");
        assert!(bad.is_err());
    }

    #[test]
    fn gas_declared_constants_violate_ordering_on_default_box() {
        let m = builtin_model("gas-lagrangean", Dim::Three, &ModelParams::new()).unwrap();
        assert!((m.declared.gamma_i - 0.5).abs() < 1e-12);
        assert!((m.declared.gamma_v - 4.0).abs() < 1e-12);
        let h1 = check_h1(&m, &default_box(&m), 64, 5);
        assert!(!h1.pass);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn derivatives_agree_with_differences(
            offsets in proptest::collection::vec(-0.4f64..0.4, 19),
            w in 0.55f64..1.9,
            pick in 0usize..6,
        ) {
            let m = &all_models()[pick];
            let mut x = Minors::from_fn(m.dim(), |k| m.reference()[k] + offsets[k]);
            if m.gas().is_some() {
                x = m.reference();
                x[m.dim().w_index()] = w;
            }
            for p in [m.sigma_i(), m.sigma_e(), m.sigma()] {
                prop_assert!(grad_fd_error(p, &x) < 1e-6);
                prop_assert!(hess_fd_error(p, &x) < 1e-4);
            }
            // Sigma = sigma_I - sigma_E pointwise
            let gap = m.sigma_i().value(&x) - m.sigma_e().value(&x) - m.sigma().value(&x);
            prop_assert!(gap.abs() < 1e-12);
        }

        #[test]
        fn quadratic_h1_constants_are_exact(ge in 0.1f64..5.0, gv in 0.05f64..3.0) {
            let m = builtin_model("quadratic", Dim::Three, &params(&[("gamma_e", ge), ("gamma_v", gv)])).unwrap();
            let r = check_h1(&m, &default_box(&m), 16, 3);
            prop_assert!(r.pass);
            prop_assert!((m.declared.gamma_i - (ge + gv)).abs() < 1e-14);
        }
    }
}

use std::collections::BTreeMap;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampling::{latin_hypercube, Rng64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GasError {
    #[error("unknown gas family `{0}`")]
    UnknownFamily(String),
    #[error("unknown parameter `{0}` for gas family")]
    UnknownParam(String),
    #[error("invalid gas parameters: {0}")]
    InvalidParams(String),
    #[error("density {rho} below vacuum floor {floor} at cell {cell}")]
    Vacuum { rho: f64, floor: f64, cell: usize },
    #[error("non-finite gas state at cell {0}")]
    NonFinite(usize),
    #[error("time step {dt} exceeds the CFL bound {bound}")]
    Cfl { dt: f64, bound: f64 },
    #[error("{0}")]
    Config(String),
    #[error("Lagrangean particle map folds over at cell {cell} (t = {t:.6e})")]
    FoldOver { cell: usize, t: f64 },
    #[error("Lagrangean run failed: {0}")]
    Lagrangean(String),
}

/// Single power term `c rho^k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerTerm {
    pub coef: f64,
    pub exponent: f64,
}

impl PowerTerm {
    pub fn p(&self, rho: f64) -> f64 {
        self.coef * rho.powf(self.exponent)
    }

    pub fn dp(&self, rho: f64) -> f64 {
        self.coef * self.exponent * rho.powf(self.exponent - 1.0)
    }

    pub fn d2p(&self, rho: f64) -> f64 {
        self.coef * self.exponent * (self.exponent - 1.0) * rho.powf(self.exponent - 2.0)
    }

    /// Internal energy with `e' = p / rho^2` and `e(1) = 0`.
    pub fn energy(&self, rho: f64) -> f64 {
        let k = self.exponent - 1.0;
        if k == 0.0 {
            self.coef * rho.ln()
        } else {
            self.coef * (rho.powf(k) - 1.0) / k
        }
    }
}

/// Two-pressure gas: `p_E = kappa rho^gamma`, `p_I = p_E + a rho^beta`, `P = p_I - p_E`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GasModel {
    pub kappa: f64,
    pub gamma: f64,
    pub a: f64,
    pub beta: f64,
    /// Certified density box.
    pub rho_box: (f64, f64),
    /// Runs abort below this density.
    pub vacuum_floor: f64,
}

impl GasModel {
    fn eq_term(&self) -> PowerTerm {
        PowerTerm { coef: self.kappa, exponent: self.gamma }
    }

    fn diff_term(&self) -> PowerTerm {
        PowerTerm { coef: self.a, exponent: self.beta }
    }

    pub fn p_e(&self, rho: f64) -> f64 {
        self.eq_term().p(rho)
    }

    pub fn p_i(&self, rho: f64) -> f64 {
        self.eq_term().p(rho) + self.diff_term().p(rho)
    }

    /// `P = p_I - p_E`.
    pub fn p_diff(&self, rho: f64) -> f64 {
        self.diff_term().p(rho)
    }

    pub fn dp_e(&self, rho: f64) -> f64 {
        self.eq_term().dp(rho)
    }

    pub fn dp_i(&self, rho: f64) -> f64 {
        self.eq_term().dp(rho) + self.diff_term().dp(rho)
    }

    pub fn dp_diff(&self, rho: f64) -> f64 {
        self.diff_term().dp(rho)
    }

    pub fn d2p_i(&self, rho: f64) -> f64 {
        self.eq_term().d2p(rho) + self.diff_term().d2p(rho)
    }

    pub fn d2p_e(&self, rho: f64) -> f64 {
        self.eq_term().d2p(rho)
    }

    pub fn d2p_diff(&self, rho: f64) -> f64 {
        self.diff_term().d2p(rho)
    }

    pub fn e_e(&self, rho: f64) -> f64 {
        self.eq_term().energy(rho)
    }

    pub fn e_i(&self, rho: f64) -> f64 {
        self.eq_term().energy(rho) + self.diff_term().energy(rho)
    }

    /// `e_I - e_E`.
    pub fn e_diff(&self, rho: f64) -> f64 {
        self.diff_term().energy(rho)
    }

    /// `P^{-1}(tau)`; NaN outside `tau > 0`.
    pub fn p_inv(&self, tau: f64) -> f64 {
        if tau > 0.0 {
            (tau / self.a).powf(1.0 / self.beta)
        } else {
            f64::NAN
        }
    }

    /// `G(tau) = -int_1^tau ds / P^{-1}(s)`.
    pub fn g(&self, tau: f64) -> f64 {
        if tau <= 0.0 {
            return f64::NAN;
        }
        if self.beta == 1.0 {
            -self.a * tau.ln()
        } else {
            let k = 1.0 - 1.0 / self.beta;
            -self.a.powf(1.0 / self.beta) * (tau.powf(k) - 1.0) / k
        }
    }

    pub fn dg(&self, tau: f64) -> f64 {
        -1.0 / self.p_inv(tau)
    }

    /// `G'' = 1 / (P^{-1}(tau)^2 P'(P^{-1}(tau)))`.
    pub fn d2g(&self, tau: f64) -> f64 {
        let r = self.p_inv(tau);
        1.0 / (r * r * self.dp_diff(r))
    }

    /// Lagrangean sound speed `rho sqrt(p_I'(rho))` of the instantaneous system.
    pub fn lagrangean_sound_speed(&self, rho: f64) -> f64 {
        rho * self.dp_i(rho).sqrt()
    }
}

pub type GasParams = BTreeMap<String, f64>;

const GAS_KEYS: [&str; 7] = ["kappa", "gamma", "a", "beta", "rho_min", "rho_max", "vacuum_floor"];

/// Builds a gas family. The only family is `default` (power laws).
pub fn builtin_gas(name: &str, params: &GasParams) -> Result<GasModel, GasError> {
    if name != "default" && name != "power" {
        return Err(GasError::UnknownFamily(name.to_string()));
    }
    if let Some(k) = params.keys().find(|k| !GAS_KEYS.contains(&k.as_str())) {
        return Err(GasError::UnknownParam(k.clone()));
    }
    let get = |k: &str, default: f64| params.get(k).copied().unwrap_or(default);
    let gas = GasModel {
        kappa: get("kappa", 1.0),
        gamma: get("gamma", 2.0),
        a: get("a", 1.0),
        beta: get("beta", 1.0),
        rho_box: (get("rho_min", 0.5), get("rho_max", 2.0)),
        vacuum_floor: get("vacuum_floor", 1e-3),
    };
    let all = [gas.kappa, gas.gamma, gas.a, gas.beta, gas.rho_box.0, gas.rho_box.1, gas.vacuum_floor];
    if all.iter().any(|x| !x.is_finite()) {
        return Err(GasError::InvalidParams("non-finite parameter".into()));
    }
    if !(gas.rho_box.0 > 0.0 && gas.rho_box.1 > gas.rho_box.0) {
        return Err(GasError::InvalidParams("density box must satisfy 0 < rho_min < rho_max".into()));
    }
    if !(gas.kappa > 0.0 && gas.gamma > 0.0) {
        return Err(GasError::InvalidParams("p_E' > 0 requires kappa > 0 and gamma > 0".into()));
    }
    if !(gas.a > 0.0 && gas.beta > 0.0) {
        return Err(GasError::InvalidParams("(p_I - p_E)' > 0 requires a > 0 and beta > 0".into()));
    }
    if gas.vacuum_floor <= 0.0 {
        return Err(GasError::InvalidParams("vacuum_floor must be positive".into()));
    }
    Ok(gas)
}

/// `H = |m|^2 / (2 rho) + rho e_I(rho) + tau + rho G(tau)`.
pub fn entropy_h(gas: &GasModel, rho: f64, m: f64, tau: f64) -> f64 {
    0.5 * m * m / rho + rho * gas.e_i(rho) + tau + rho * gas.g(tau)
}

/// Hessian of [`entropy_h`] in the variable order `(rho, tau, m)`.
pub fn entropy_h_hessian(gas: &GasModel, rho: f64, m: f64, tau: f64) -> Matrix3<f64> {
    let h_rr = m * m / (rho * rho * rho) + gas.dp_i(rho) / rho;
    let h_rt = gas.dg(tau);
    let h_rm = -m / (rho * rho);
    let h_tt = rho * gas.d2g(tau);
    let h_mm = 1.0 / rho;
    Matrix3::new(h_rr, h_rt, h_rm, h_rt, h_tt, 0.0, h_rm, 0.0, h_mm)
}

pub fn entropy_h_min_eig(gas: &GasModel, rho: f64, m: f64, tau: f64) -> f64 {
    let h = entropy_h_hessian(gas, rho, m, tau);
    h.symmetric_eigenvalues().min()
}

/// `rho (tau - P(rho)) (1/rho - 1/P^{-1}(tau))`.
pub fn gas_dissipation(gas: &GasModel, rho: f64, tau: f64) -> f64 {
    rho * (tau - gas.p_diff(rho)) * (1.0 / rho - 1.0 / gas.p_inv(tau))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub name: String,
    pub min_margin: f64,
    pub pass: bool,
}

impl ConditionReport {
    fn new(name: &str, min_margin: f64, strict: bool) -> ConditionReport {
        let pass = if strict { min_margin > 0.0 } else { min_margin >= 0.0 };
        ConditionReport { name: name.to_string(), min_margin, pass }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GasCertificate {
    pub rho_box: (f64, f64),
    pub n_samples: usize,
    pub seed: u64,
    pub a0: ConditionReport,
    pub a1: ConditionReport,
    pub a2: ConditionReport,
    pub a3: ConditionReport,
    /// `(rho e_I)'' rho G'' - G'^2` over `(rho, tau = P(rhobar))`.
    pub hessian_determinant: ConditionReport,
    /// Max relative mismatch of `e' = p / rho^2` and of `G''` against central differences.
    pub max_derivative_mismatch: f64,
    pub pass: bool,
}

impl GasCertificate {
    pub fn conditions(&self) -> [&ConditionReport; 5] {
        [&self.a0, &self.a1, &self.a2, &self.a3, &self.hessian_determinant]
    }
}

fn box_samples(lo: f64, hi: f64, n: usize, rng: &mut Rng64) -> Vec<(f64, f64)> {
    let unit = latin_hypercube(n, 2, rng);
    let mut out: Vec<(f64, f64)> =
        unit.iter().map(|u| (lo + (hi - lo) * u[0], lo + (hi - lo) * u[1])).collect();
    for &x in &[lo, hi] {
        for &y in &[lo, hi] {
            out.push((x, y));
        }
    }
    out
}

/// Samples `(a0)`-`(a3)` and the `(rho, tau)` Hessian determinant over the density box.
pub fn check_a_conditions(gas: &GasModel, n_samples: usize, seed: u64) -> GasCertificate {
    let (lo, hi) = gas.rho_box;
    let mut rng = crate::sampling::rng_from_seed(seed);
    let pairs = box_samples(lo, hi, n_samples.max(1), &mut rng);
    let h = 1e-6;

    let mut a0 = f64::INFINITY;
    let mut a1 = f64::INFINITY;
    let mut a2 = f64::INFINITY;
    let mut a3 = f64::INFINITY;
    let mut hdet = f64::INFINITY;
    let mut mismatch = 0.0_f64;
    // (a2) separates into min_rho p_I'(rho) rho^2 - max_rhobar P'(rhobar) rhobar^2; pairs are kept explicit
    for &(rho, rhobar) in &pairs {
        a0 = a0.min(gas.p_i(rho)).min(gas.p_e(rho)).min(gas.dp_i(rho)).min(gas.dp_e(rho));
        let de_i = (gas.e_i(rho + h) - gas.e_i(rho - h)) / (2.0 * h);
        let de_e = (gas.e_e(rho + h) - gas.e_e(rho - h)) / (2.0 * h);
        mismatch = mismatch
            .max((de_i - gas.p_i(rho) / (rho * rho)).abs() / (1.0 + de_i.abs()))
            .max((de_e - gas.p_e(rho) / (rho * rho)).abs() / (1.0 + de_e.abs()));
        a1 = a1.min(gas.dp_diff(rho));
        a2 = a2.min(gas.dp_i(rho) * rho * rho - gas.dp_diff(rhobar) * rhobar * rhobar);
        a3 = a3.min(gas.dp_i(rho) - gas.dp_diff(rhobar)).min(gas.dp_diff(rhobar));
        let tau = gas.p_diff(rhobar);
        let d2 = gas.d2g(tau);
        let ht = 1e-6 * tau.max(1e-3);
        let fd = (gas.dg(tau + ht) - gas.dg(tau - ht)) / (2.0 * ht);
        mismatch = mismatch.max((fd - d2).abs() / (1.0 + d2.abs()));
        let dg = gas.dg(tau);
        hdet = hdet.min(gas.dp_i(rho) / rho * rho * d2 - dg * dg);
    }
    let a0r = ConditionReport::new("a0", a0, true);
    let a1r = ConditionReport::new("a1", a1, true);
    let a2r = ConditionReport::new("a2", a2, false);
    let a3r = ConditionReport::new("a3", a3, true);
    let hr = ConditionReport::new("hessian", hdet, true);
    let pass = a0r.pass && a1r.pass && a2r.pass && a3r.pass && hr.pass && mismatch < 1e-6;
    GasCertificate {
        rho_box: gas.rho_box,
        n_samples: pairs.len(),
        seed,
        a0: a0r,
        a1: a1r,
        a2: a2r,
        a3: a3r,
        hessian_determinant: hr,
        max_derivative_mismatch: mismatch,
        pass,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_gas() -> GasModel {
        builtin_gas("default", &GasParams::new()).unwrap()
    }

    #[test]
    fn default_family_closed_forms() {
        let g = default_gas();
        for &rho in &[0.5, 1.0, 1.7] {
            assert_eq!(g.p_diff(rho), rho);
            // gamma = 2: e_E = kappa (rho - 1)
            assert!((g.e_e(rho) - (rho - 1.0)).abs() < 1e-15);
        }
        for &tau in &[0.3, 1.0, 2.5] {
            assert!((g.g(tau) + tau.ln()).abs() < 1e-15);
            assert!((g.dg(tau) + 1.0 / tau).abs() < 1e-15);
        }
        assert_eq!(g.g(1.0), 0.0);
    }

    #[test]
    fn general_beta_g_matches_quadrature() {
        let mut p = GasParams::new();
        p.insert("beta".into(), 2.0);
        p.insert("a".into(), 1.5);
        let g = builtin_gas("default", &p).unwrap();
        // Simpson quadrature of -1 / P^{-1}(s) from 1 to tau
        let tau = 2.3;
        let n = 2000;
        let h = (tau - 1.0) / n as f64;
        let f = |s: f64| -1.0 / g.p_inv(s);
        let mut q = f(1.0) + f(tau);
        for k in 1..n {
            q += f(1.0 + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        q *= h / 3.0;
        assert!((g.g(tau) - q).abs() < 1e-10);
    }

    #[test]
    fn dissipation_arithmetic() {
        let g = default_gas();
        assert_eq!(gas_dissipation(&g, 1.0, 2.0), 0.5);
        assert_eq!(gas_dissipation(&g, 1.3, g.p_diff(1.3)), 0.0);
    }

    #[test]
    fn entropy_at_equilibrium_unit_density() {
        let g = default_gas();
        let h = entropy_h(&g, 1.0, 0.0, g.p_diff(1.0));
        assert!((h - (g.e_i(1.0) + 1.0)).abs() < 1e-15);
        let h2 = entropy_h(&g, 1.0, 0.7, 1.0);
        assert!((h2 - h - 0.5 * 0.49).abs() < 1e-15);
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let g = default_gas();
        let x = [1.2, 0.8, 0.3];
        let f = |v: [f64; 3]| entropy_h(&g, v[0], v[2], v[1]);
        let hm = entropy_h_hessian(&g, x[0], x[2], x[1]);
        let h = 1e-4;
        for i in 0..3 {
            for j in 0..3 {
                let mut pp = x;
                let mut pm = x;
                let mut mp = x;
                let mut mm = x;
                pp[i] += h;
                pp[j] += h;
                pm[i] += h;
                pm[j] -= h;
                mp[i] -= h;
                mp[j] += h;
                mm[i] -= h;
                mm[j] -= h;
                let fd = (f(pp) - f(pm) - f(mp) + f(mm)) / (4.0 * h * h);
                assert!((fd - hm[(i, j)]).abs() < 1e-5, "{i}{j} {fd} {}", hm[(i, j)]);
            }
        }
    }

    #[test]
    fn default_certificate_margins() {
        let cert = check_a_conditions(&default_gas(), 256, 1);
        assert!(cert.a0.pass && cert.a1.pass && cert.a3.pass && cert.hessian_determinant.pass);
        // p_I' rho^2 at rho = 0.5 is 0.5, P' rhobar^2 at rhobar = 2 is 4
        assert!((cert.a2.min_margin + 3.5).abs() < 1e-12);
        assert!(!cert.a2.pass);
        assert!(cert.max_derivative_mismatch < 1e-6);
    }

    #[test]
    fn a3_violation_is_reported() {
        let mut p = GasParams::new();
        p.insert("a".into(), 10.0);
        p.insert("beta".into(), 3.0);
        let cert = check_a_conditions(&builtin_gas("default", &p).unwrap(), 128, 2);
        assert!(!cert.a3.pass);
        assert!(!cert.hessian_determinant.pass);
        assert!(!cert.pass);
    }

    #[test]
    fn invalid_parameters_rejected() {
        let mut p = GasParams::new();
        p.insert("a".into(), -1.0);
        assert!(matches!(builtin_gas("default", &p), Err(GasError::InvalidParams(_))));
        assert!(matches!(builtin_gas("nope", &GasParams::new()), Err(GasError::UnknownFamily(_))));
        let mut q = GasParams::new();
        q.insert("zeta".into(), 1.0);
        assert!(matches!(builtin_gas("default", &q), Err(GasError::UnknownParam(_))));
    }

    fn power_gas(a: f64, beta: f64) -> GasModel {
        let mut p = GasParams::new();
        p.insert("a".into(), a);
        p.insert("beta".into(), beta);
        builtin_gas("default", &p).unwrap()
    }

    proptest! {
        #[test]
        fn dissipation_is_nonnegative_and_vanishes_at_equilibrium(
            rho in 0.05f64..5.0, tau in 0.05f64..10.0, a in 0.2f64..5.0, beta in 0.3f64..3.0,
        ) {
            let g = power_gas(a, beta);
            // P increasing makes both factors share a sign
            prop_assert!(gas_dissipation(&g, rho, tau) >= 0.0);
            prop_assert!(gas_dissipation(&g, rho, g.p_diff(rho)).abs() <= 1e-12 * (1.0 + rho));
        }

        #[test]
        fn g_derivative_is_minus_reciprocal_inverse(tau in 0.05f64..10.0, a in 0.2f64..5.0, beta in 0.3f64..3.0) {
            let g = power_gas(a, beta);
            prop_assert!((g.dg(tau) * g.p_inv(tau) + 1.0).abs() < 1e-13);
            let h = 1e-5 * tau;
            let fd = (g.g(tau + h) - g.g(tau - h)) / (2.0 * h);
            prop_assert!((fd - g.dg(tau)).abs() <= 1e-6 * (1.0 + g.dg(tau).abs()));
            prop_assert!((g.p_diff(g.p_inv(tau)) - tau).abs() <= 1e-12 * tau.max(1.0));
        }

        #[test]
        fn entropy_is_strictly_convex_on_the_default_box(rho in 0.5f64..2.0, rhobar in 0.5f64..2.0, m in -2.0f64..2.0) {
            let g = default_gas();
            let tau = g.p_diff(rhobar);
            prop_assert!(entropy_h_min_eig(&g, rho, m, tau) > 0.0);
        }
    }
}

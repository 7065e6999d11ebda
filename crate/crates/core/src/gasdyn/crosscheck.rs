//! Cross-check of the Eulerian gas solver against the slab solver with the `gas-lagrangean`
//! constitutive model, and the discrete Abel identity for prescribed slab motions.

use serde::{Deserialize, Serialize};

use super::euler::{advance_euler_to, euler_init_from_motion, EulerNumerics, EulerState, InverseMap};
use super::model::{GasError, GasModel};
use crate::constitutive::{builtin_model, ConstitutiveModel, ModelParams};
use crate::diagnostics::observed_orders;
use crate::dynamics::{max_wave_speed, stable_dt, step_relax, init_from_motion, Numerics, RelaxState, SineMode, SlabGrid, SlabMotion, TauInit};
use crate::minors::{cofactor, determinant, Dim, Mat};

/// Only guards `w > 0`; density limits are enforced on the Eulerian side.
const LAGRANGEAN_W_MIN: f64 = 1e-6;

/// The `gas-lagrangean` constitutive model carrying the same gas parameters.
pub fn lagrangean_model(gas: &GasModel) -> Result<ConstitutiveModel, GasError> {
    let p: ModelParams = [
        ("kappa", gas.kappa),
        ("gamma", gas.gamma),
        ("a", gas.a),
        ("beta", gas.beta),
        ("rho_min", gas.rho_box.0),
        ("rho_max", gas.rho_box.1),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    builtin_model("gas-lagrangean", Dim::Three, &p).map_err(|e| GasError::Lagrangean(e.to_string()))
}

/// Settings of one cross-check run.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCheckSpec {
    pub motion: SlabMotion,
    pub t_end: f64,
    pub eps: f64,
    pub cfl: f64,
    pub rho_min: f64,
    pub tau_init: TauInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCheckReport {
    pub n_cells: usize,
    pub t_end: f64,
    /// `int |1/F_11 - rho_E(y)| dy` over the Lagrangean cells mapped to Eulerian positions.
    pub l1_gap: f64,
    pub lagrangean_steps: usize,
    pub euler_steps: usize,
}

/// Periodic linear interpolation of cell-centered values.
fn interpolate(s: &EulerState, y: f64) -> f64 {
    let g = &s.grid;
    let n = g.n_cells;
    let xi = (y - g.x_min) / g.dx() - 0.5;
    let k = xi.floor();
    let w = xi - k;
    let j0 = (k as i64).rem_euclid(n as i64) as usize;
    let j1 = (j0 + 1) % n;
    (1.0 - w) * s.rho[j0] + w * s.rho[j1]
}

fn face_velocities(s: &RelaxState) -> Vec<f64> {
    let n = s.grid.n_cells;
    // face j+1/2
    (0..n).map(|j| 0.5 * (s.v[j][0] + s.v[(j + 1) % n][0])).collect()
}

/// Runs both solvers on `grid` to `t_end` and compares densities at the transported positions.
/// Face positions follow `dy/dt = v` with the trapezoidal rule on face-averaged velocities.
pub fn lagrangean_cross_check(gas: &GasModel, grid: &SlabGrid, spec: &CrossCheckSpec) -> Result<CrossCheckReport, GasError> {
    let model = lagrangean_model(gas)?;
    let numerics = Numerics { cfl: spec.cfl, ..Numerics::default() };
    let lag_err = |e: crate::dynamics::DynamicsError| GasError::Lagrangean(e.to_string());
    let mut lag = init_from_motion(grid, &spec.motion, &model, spec.tau_init, LAGRANGEAN_W_MIN)
        .map_err(lag_err)?;
    let map = InverseMap::new(grid, &spec.motion)?;
    let n = grid.n_cells;
    let length = grid.length();
    let mut y: Vec<f64> = (0..n).map(|j| map.forward(grid.face(j + 1))).collect();
    let mut vf = face_velocities(&lag);
    let mut lag_steps = 0;
    while spec.t_end - lag.t > 1e-13 * spec.t_end.max(1.0) {
        let lam = max_wave_speed(&model, &lag).map_err(lag_err)?;
        let dt = stable_dt(lam, grid.dx(), spec.cfl).min(spec.t_end - lag.t);
        lag = step_relax(&lag, &model, None, dt, spec.eps, &numerics).map_err(lag_err)?.0;
        let vn = face_velocities(&lag);
        for j in 0..n {
            y[j] += 0.5 * dt * (vf[j] + vn[j]);
        }
        vf = vn;
        lag_steps += 1;
        for j in 0..n {
            let prev = if j == 0 { y[n - 1] - length } else { y[j - 1] };
            if y[j] - prev <= 0.0 {
                return Err(GasError::FoldOver { cell: j, t: lag.t });
            }
        }
    }
    let euler0 = euler_init_from_motion(grid, &spec.motion, gas, spec.tau_init, spec.rho_min)?;
    let en = EulerNumerics { cfl: spec.cfl, rho_min: spec.rho_min };
    let (euler, _, euler_steps) = advance_euler_to(gas, euler0, spec.t_end, spec.eps, &en)?;
    let mut gap = 0.0;
    for j in 0..n {
        let lo = if j == 0 { y[n - 1] - length } else { y[j - 1] };
        let hi = y[j];
        let rho_l = 1.0 / lag.f1[j][0];
        gap += (rho_l - interpolate(&euler, 0.5 * (lo + hi))).abs() * (hi - lo);
    }
    Ok(CrossCheckReport { n_cells: n, t_end: spec.t_end, l1_gap: gap, lagrangean_steps: lag_steps, euler_steps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCheckStudy {
    pub reports: Vec<CrossCheckReport>,
    /// Observed order between successive resolutions.
    pub orders: Vec<f64>,
    pub fitted_order: Option<f64>,
}

impl CrossCheckStudy {
    pub fn csv(&self) -> String {
        let mut s = String::from("n_cells,l1_gap_rho,lagrangean_steps,euler_steps\n");
        for r in &self.reports {
            s.push_str(&format!("{},{:.17e},{},{}\n", r.n_cells, r.l1_gap, r.lagrangean_steps, r.euler_steps));
        }
        s
    }
}

/// Cross-check at every resolution of `ns` on `[x_min, x_max)`.
pub fn cross_check_refinement(
    gas: &GasModel,
    x_min: f64,
    x_max: f64,
    ns: &[usize],
    spec: &CrossCheckSpec,
) -> Result<CrossCheckStudy, GasError> {
    let mut reports = Vec::with_capacity(ns.len());
    for &n in ns {
        let g = SlabGrid::new(n, x_min, x_max).map_err(|e| GasError::Config(e.to_string()))?;
        reports.push(lagrangean_cross_check(gas, &g, spec)?);
    }
    let h: Vec<f64> = reports.iter().map(|r| 1.0 / r.n_cells as f64).collect();
    let e: Vec<f64> = reports.iter().map(|r| r.l1_gap).collect();
    let (orders, fitted_order) = if e.iter().all(|v| *v > 0.0) { observed_orders(&h, &e) } else { (Vec::new(), None) };
    Ok(CrossCheckStudy { reports, orders, fitted_order })
}

/// Prescribed slab motion `y(x, t) = B x + sum a_m cos(w_m t) sin(theta_m(x)) e_{c_m}` on the unit
/// interval, with velocity `v = -sum a_m w_m sin(w_m t) sin(theta_m) e_{c_m}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrescribedMotion {
    pub background: Mat,
    /// `(mode at t = 0, angular frequency w_m)`.
    pub modes: Vec<(SineMode, f64)>,
}

impl PrescribedMotion {
    fn y(&self, grid: &SlabGrid, x: f64, t: f64) -> [f64; 3] {
        let mut y = [0.0; 3];
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.background.get(i, 0) * x;
        }
        for (m, b) in &self.modes {
            let scaled = SineMode { amplitude: m.amplitude * (b * t).cos(), ..*m };
            y[m.component] += scaled.value(grid, x);
        }
        y
    }

    fn v(&self, grid: &SlabGrid, x: f64, t: f64) -> [f64; 3] {
        let mut v = [0.0; 3];
        for (m, b) in &self.modes {
            v[m.component] += SineMode { amplitude: -m.amplitude * b * (b * t).sin(), ..*m }.value(grid, x);
        }
        v
    }

    /// `F` with column 1 from centered differences of `y` (step `h`).
    fn f(&self, grid: &SlabGrid, x: f64, t: f64, h: f64) -> Mat {
        let (a, b) = (self.y(grid, x - h, t), self.y(grid, x + h, t));
        let mut f = self.background;
        f.set_column(0, &[(b[0] - a[0]) / (2.0 * h), (b[1] - a[1]) / (2.0 * h), (b[2] - a[2]) / (2.0 * h)]);
        f
    }
}

/// `max_j |d/dt det F - cof F : d_t F|` at time `t` on `n` points, with every derivative a
/// centered difference of step `1/n`; `d_t F = d_1 v` in column 1. Second order in `1/n`.
pub fn abel_residual(motion: &PrescribedMotion, n: usize, t: f64) -> f64 {
    let grid = SlabGrid { n_cells: n.max(1), x_min: 0.0, x_max: 1.0 };
    let h = 1.0 / n.max(1) as f64;
    let mut worst = 0.0f64;
    for j in 0..n {
        let x = (j as f64 + 0.5) * h;
        let ddet = (determinant(&motion.f(&grid, x, t + h, h)) - determinant(&motion.f(&grid, x, t - h, h))) / (2.0 * h);
        let cof = cofactor(&motion.f(&grid, x, t, h));
        let (va, vb) = (motion.v(&grid, x - h, t), motion.v(&grid, x + h, t));
        let rhs: f64 = (0..3).map(|i| cof.get(i, 0) * (vb[i] - va[i]) / (2.0 * h)).sum();
        worst = worst.max((ddet - rhs).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gasdyn::{builtin_gas, GasParams};

    fn spec(a: f64, u: f64) -> CrossCheckSpec {
        CrossCheckSpec {
            motion: SlabMotion {
                background: Mat::identity(Dim::Three),
                displacement: vec![SineMode { component: 0, amplitude: a, wavenumber: 1, phase: 0.0 }],
                velocity: vec![SineMode { component: 0, amplitude: u, wavenumber: 1, phase: 0.4 }],
            },
            t_end: 0.1,
            eps: 0.05,
            cfl: 0.4,
            rho_min: 1e-3,
            tau_init: TauInit::Prepared,
        }
    }

    #[test]
    fn stationary_state_has_zero_gap() {
        let gas = builtin_gas("default", &GasParams::new()).unwrap();
        let r = lagrangean_cross_check(&gas, &SlabGrid::unit(16).unwrap(), &spec(0.0, 0.0)).unwrap();
        assert!(r.l1_gap < 1e-14, "{r:?}");
    }

    #[test]
    fn initial_gap_is_interpolation_error_only() {
        let gas = builtin_gas("default", &GasParams::new()).unwrap();
        let mut s = spec(0.03, 0.1);
        s.t_end = 0.0;
        let a = lagrangean_cross_check(&gas, &SlabGrid::unit(32).unwrap(), &s).unwrap().l1_gap;
        let b = lagrangean_cross_check(&gas, &SlabGrid::unit(64).unwrap(), &s).unwrap().l1_gap;
        assert!(a > 0.0 && a / b > 3.0, "{a} {b}");
    }

    #[test]
    fn gap_decreases_under_refinement() {
        let gas = builtin_gas("default", &GasParams::new()).unwrap();
        let st = cross_check_refinement(&gas, 0.0, 1.0, &[32, 64, 128], &spec(0.03, 0.1)).unwrap();
        assert!(st.orders.iter().all(|o| *o > 0.8), "{:?}", st);
    }

    #[test]
    fn lagrangean_model_carries_gas_parameters() {
        let mut p = GasParams::new();
        p.insert("a".into(), 2.0);
        let gas = builtin_gas("default", &p).unwrap();
        let m = lagrangean_model(&gas).unwrap();
        assert_eq!(m.gas().unwrap().a, 2.0);
    }

    #[test]
    fn abel_residual_is_second_order() {
        let b = Mat::from_row_major(Dim::Three, &[1.1, 0.2, 0.0, 0.1, 0.9, 0.1, -0.1, 0.0, 1.2]).unwrap();
        let motion = PrescribedMotion {
            background: b,
            modes: vec![
                (SineMode { component: 0, amplitude: 0.05, wavenumber: 1, phase: 0.0 }, 3.0),
                (SineMode { component: 1, amplitude: 0.03, wavenumber: 2, phase: 0.5 }, -2.0),
                (SineMode { component: 2, amplitude: 0.02, wavenumber: 1, phase: 1.0 }, 5.0),
            ],
        };
        let r: Vec<f64> = [32, 64, 128].iter().map(|&n| abel_residual(&motion, n, 0.3)).collect();
        let (orders, _) = observed_orders(&[1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0], &r);
        assert!(orders.iter().all(|o| *o > 1.9), "{r:?} {orders:?}");
    }
}

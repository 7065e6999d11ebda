//! One-dimensional Eulerian pressure-relaxation solver on a periodic grid.
//!
//! Conservative variables `(rho, m, rho tau)` with fluxes `(m, m^2/rho + p_I(rho) - tau, m tau)`;
//! the source relaxes `tau` toward `P(rho)` at rate `1/eps`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{entropy_h, gas_dissipation, GasError, GasModel};
use crate::dynamics::{h_stats_of, HTheoremStats, SineMode, SlabGrid, SlabMotion, TauInit, GL4};

#[derive(Debug, Clone, PartialEq)]
pub struct EulerState {
    pub grid: SlabGrid,
    pub rho: Vec<f64>,
    pub m: Vec<f64>,
    /// Conserved `rho tau`.
    pub rho_tau: Vec<f64>,
    pub t: f64,
}

impl EulerState {
    pub fn tau(&self, j: usize) -> f64 {
        self.rho_tau[j] / self.rho[j]
    }

    pub fn u(&self, j: usize) -> f64 {
        self.m[j] / self.rho[j]
    }

    pub fn min_rho(&self) -> f64 {
        self.rho.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// `(int rho, int m)`.
    pub fn totals(&self) -> (f64, f64) {
        let dx = self.grid.dx();
        (self.rho.iter().sum::<f64>() * dx, self.m.iter().sum::<f64>() * dx)
    }

    pub fn total_h(&self, gas: &GasModel) -> f64 {
        (0..self.rho.len()).map(|j| entropy_h(gas, self.rho[j], self.m[j], self.tau(j))).sum::<f64>() * self.grid.dx()
    }

    fn check(&self, rho_min: f64) -> Result<(), GasError> {
        for j in 0..self.rho.len() {
            if !(self.rho[j].is_finite() && self.m[j].is_finite() && self.rho_tau[j].is_finite()) {
                return Err(GasError::NonFinite(j));
            }
            if self.rho[j] < rho_min {
                return Err(GasError::Vacuum { rho: self.rho[j], floor: rho_min, cell: j });
            }
        }
        Ok(())
    }
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerNumerics {
    pub cfl: f64,
    pub rho_min: f64,
}

impl Default for EulerNumerics {
    fn default() -> Self {
        EulerNumerics { cfl: crate::dynamics::DEFAULT_CFL, rho_min: 1e-3 }
    }
}

/// Inverse of `x -> x + delta(x)` for a periodic displacement with `1 + delta' > 0`.
pub(crate) struct InverseMap<'a> {
    grid: &'a SlabGrid,
    modes: Vec<SineMode>,
    bound: f64,
}

impl<'a> InverseMap<'a> {
    pub(crate) fn new(grid: &'a SlabGrid, motion: &SlabMotion) -> Result<InverseMap<'a>, GasError> {
        let b = motion.background;
        let diag_unit = (0..3).all(|i| (0..3).all(|a| (b.get(i, a) - if i == a { 1.0 } else { 0.0 }).abs() < 1e-15));
        if motion.dim().d() != 3 || !diag_unit {
            return Err(GasError::Config("gas data requires the 3D identity background".into()));
        }
        if motion.displacement.iter().chain(&motion.velocity).any(|m| m.component != 0) {
            return Err(GasError::Config("gas data must be longitudinal (component 0 only)".into()));
        }
        let modes = motion.displacement.clone();
        let bound: f64 = modes.iter().map(|m| m.amplitude.abs()).sum();
        let map = InverseMap { grid, modes, bound };
        let min_slope = (0..4096)
            .map(|k| map.slope(grid.x_min + grid.length() * k as f64 / 4096.0))
            .fold(f64::INFINITY, f64::min);
        if min_slope <= 0.0 {
            return Err(GasError::Config(format!("initial displacement folds over (min dy/dx = {min_slope:.3e})")));
        }
        Ok(map)
    }

    pub(crate) fn forward(&self, x: f64) -> f64 {
        x + self.modes.iter().map(|m| m.value(self.grid, x)).sum::<f64>()
    }

    pub(crate) fn slope(&self, x: f64) -> f64 {
        1.0 + self.modes.iter().map(|m| m.derivative(self.grid, x)).sum::<f64>()
    }

    /// Safeguarded Newton on the bracket `[y - bound, y + bound]`.
    pub(crate) fn inverse(&self, y: f64) -> f64 {
        let (mut lo, mut hi) = (y - self.bound, y + self.bound);
        let mut x = y;
        for _ in 0..100 {
            let r = self.forward(x) - y;
            if r.abs() <= 1e-15 * (1.0 + y.abs()) {
                break;
            }
            if r > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let mut next = x - r / self.slope(x);
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - x).abs() <= 1e-16 * (1.0 + x.abs()) {
                x = next;
                break;
            }
            x = next;
        }
        x
    }
}

/// Eulerian cell averages of the longitudinal Lagrangean data `y = x + delta(x)`, `v = V(x)` with
/// unit reference density: `rho = 1 / y'` pushed forward, `m = rho V`, `rho tau` with
/// `tau = P(rho)` (plus the offset when unprepared). Mass integrals are evaluated in the
/// reference coordinate: `int rho dy = x(y_b) - x(y_a)`.
pub fn euler_init_from_motion(
    grid: &SlabGrid,
    motion: &SlabMotion,
    gas: &GasModel,
    tau_init: TauInit,
    rho_min: f64,
) -> Result<EulerState, GasError> {
    let map = InverseMap::new(grid, motion)?;
    let n = grid.n_cells;
    let faces: Vec<f64> = (0..=n).map(|j| map.inverse(grid.face(j))).collect();
    let offset = match tau_init {
        TauInit::Prepared => 0.0,
        TauInit::Offset(s) => s,
    };
    let dy = grid.dx();
    let mut s = EulerState { grid: *grid, rho: vec![0.0; n], m: vec![0.0; n], rho_tau: vec![0.0; n], t: 0.0 };
    for j in 0..n {
        let (xa, xb) = (faces[j], faces[j + 1]);
        s.rho[j] = (xb - xa) / dy;
        s.m[j] = motion.velocity.iter().map(|md| md.average(grid, xa, xb)).sum::<f64>() * (xb - xa) / dy;
        let mut q = 0.0;
        for (node, w) in GL4 {
            let x = 0.5 * (xb - xa) * node + 0.5 * (xa + xb);
            q += 0.5 * (xb - xa) * w * (gas.p_diff(1.0 / map.slope(x)) + offset);
        }
        s.rho_tau[j] = q / dy;
    }
    s.check(rho_min)?;
    Ok(s)
}

/// `|u| + sqrt(p_I'(rho))`.
pub fn euler_cell_speed(gas: &GasModel, rho: f64, m: f64) -> f64 {
    (m / rho).abs() + gas.dp_i(rho).sqrt()
}

pub fn euler_max_speed(gas: &GasModel, s: &EulerState) -> f64 {
    (0..s.rho.len()).map(|j| euler_cell_speed(gas, s.rho[j], s.m[j])).fold(0.0, f64::max)
}

fn flux(gas: &GasModel, rho: f64, m: f64, q: f64) -> [f64; 3] {
    let u = m / rho;
    [m, m * u + gas.p_i(rho) - q / rho, u * q]
}

fn llf_rhs(gas: &GasModel, s: &EulerState) -> [Vec<f64>; 3] {
    let n = s.rho.len();
    let dx = s.grid.dx();
    let speed: Vec<f64> = (0..n).map(|j| euler_cell_speed(gas, s.rho[j], s.m[j])).collect();
    let fl: Vec<[f64; 3]> = (0..n).map(|j| flux(gas, s.rho[j], s.m[j], s.rho_tau[j])).collect();
    // face j+1/2 between cells j and j+1
    let face: Vec<[f64; 3]> = (0..n)
        .into_par_iter()
        .map(|j| {
            let k = (j + 1) % n;
            let a = speed[j].max(speed[k]);
            let ul = [s.rho[j], s.m[j], s.rho_tau[j]];
            let ur = [s.rho[k], s.m[k], s.rho_tau[k]];
            [0, 1, 2].map(|c| 0.5 * (fl[j][c] + fl[k][c]) - 0.5 * a * (ur[c] - ul[c]))
        })
        .collect();
    let mut out = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for j in 0..n {
        let jm = (j + n - 1) % n;
        for c in 0..3 {
            out[c][j] = -(face[j][c] - face[jm][c]) / dx;
        }
    }
    out
}

fn euler_stage(gas: &GasModel, s: &EulerState, dt: f64) -> EulerState {
    let r = llf_rhs(gas, s);
    let mut o = s.clone();
    for j in 0..s.rho.len() {
        o.rho[j] += dt * r[0][j];
        o.m[j] += dt * r[1][j];
        o.rho_tau[j] += dt * r[2][j];
    }
    o
}

/// Exact relaxation with `rho` frozen; returns `int D/eps ds dx` along the exact trajectory.
fn gas_source(gas: &GasModel, s: &mut EulerState, h: f64, eps: f64) -> f64 {
    if h <= 0.0 || eps.is_infinite() {
        return 0.0;
    }
    let u0 = (-h / eps).exp();
    let dx = s.grid.dx();
    let rows: Vec<(f64, f64)> = (0..s.rho.len())
        .into_par_iter()
        .map(|j| {
            let rho = s.rho[j];
            let teq = gas.p_diff(rho);
            let r0 = s.rho_tau[j] / rho - teq;
            let mut d = 0.0;
            if r0 != 0.0 {
                for (x, w) in GL4 {
                    let u = 0.5 * (1.0 - u0) * x + 0.5 * (1.0 + u0);
                    d += 0.5 * (1.0 - u0) * w * gas_dissipation(gas, rho, teq + u * r0) / u;
                }
            }
            (rho * (teq + u0 * r0), d)
        })
        .collect();
    let mut total = 0.0;
    for (j, (q, d)) in rows.into_iter().enumerate() {
        s.rho_tau[j] = q;
        total += d * dx;
    }
    total
}

/// One Strang step: half source, SSP-RK2 LLF transport, half source. `eps = 0` projects onto
/// `tau = P(rho)`; `eps = inf` switches the source off. Returns the new state and the
/// dissipation `int int D/eps` over the step.
pub fn step_euler_relax(
    state: &EulerState,
    gas: &GasModel,
    dt: f64,
    eps: f64,
    numerics: &EulerNumerics,
) -> Result<(EulerState, f64), GasError> {
    if eps.is_nan() || eps < 0.0 {
        return Err(GasError::Config(format!("eps must be >= 0, got {eps}")));
    }
    let lam = euler_max_speed(gas, state);
    let bound = crate::dynamics::stable_dt(lam, state.grid.dx(), 1.0);
    if !(dt > 0.0) || dt > bound * (1.0 + 1e-12) {
        return Err(GasError::Cfl { dt, bound });
    }
    let mut s = state.clone();
    let mut diss = gas_source(gas, &mut s, 0.5 * dt, eps);
    let s1 = euler_stage(gas, &s, dt);
    s1.check(numerics.rho_min)?;
    let s2 = euler_stage(gas, &s1, dt);
    for j in 0..s.rho.len() {
        s.rho[j] = 0.5 * (s.rho[j] + s2.rho[j]);
        s.m[j] = 0.5 * (s.m[j] + s2.m[j]);
        s.rho_tau[j] = 0.5 * (s.rho_tau[j] + s2.rho_tau[j]);
    }
    s.check(numerics.rho_min)?;
    diss += gas_source(gas, &mut s, 0.5 * dt, eps);
    s.t = state.t + dt;
    s.check(numerics.rho_min)?;
    Ok((s, diss))
}

fn reached(t: f64, t_end: f64) -> bool {
    t_end - t <= 1e-13 * t_end.abs().max(1.0)
}

/// Advances exactly to `t_target`; returns the state, dissipation and step count.
pub fn advance_euler_to(
    gas: &GasModel,
    state: EulerState,
    t_target: f64,
    eps: f64,
    numerics: &EulerNumerics,
) -> Result<(EulerState, f64, usize), GasError> {
    let mut s = state;
    let mut diss = 0.0;
    let mut steps = 0;
    while !reached(s.t, t_target) {
        let lam = euler_max_speed(gas, &s);
        let dt = crate::dynamics::stable_dt(lam, s.grid.dx(), numerics.cfl).min(t_target - s.t);
        let (next, d) = step_euler_relax(&s, gas, dt, eps, numerics)?;
        s = next;
        diss += d;
        steps += 1;
    }
    s.t = t_target;
    Ok((s, diss, steps))
}

/// One row of the Eulerian time series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerRecord {
    pub step: usize,
    pub t: f64,
    pub h_total: f64,
    /// Accumulated `int int D/eps`.
    pub dissipation: f64,
    pub mass: f64,
    pub momentum: f64,
    pub min_rho: f64,
    pub max_speed: f64,
}

impl EulerRecord {
    pub const CSV_HEADER: &'static str = "step,t,H_total,dissipation_integral,mass,momentum,min_rho,max_speed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.step, self.t, self.h_total, self.dissipation, self.mass, self.momentum, self.min_rho, self.max_speed
        )
    }
}

fn record(gas: &GasModel, s: &EulerState, step: usize, dissipation: f64) -> EulerRecord {
    let (mass, momentum) = s.totals();
    EulerRecord {
        step,
        t: s.t,
        h_total: s.total_h(gas),
        dissipation,
        mass,
        momentum,
        min_rho: s.min_rho(),
        max_speed: euler_max_speed(gas, s),
    }
}

pub fn euler_series_csv(series: &[EulerRecord]) -> String {
    let mut s = String::from(EulerRecord::CSV_HEADER);
    s.push('\n');
    for r in series {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Snapshot with columns `x, rho, u, tau, H`.
pub fn euler_snapshot_csv(gas: &GasModel, s: &EulerState) -> String {
    let mut out = String::from("x,rho,u,tau,H\n");
    for j in 0..s.rho.len() {
        out.push_str(&format!(
            "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            s.grid.center(j),
            s.rho[j],
            s.u(j),
            s.tau(j),
            entropy_h(gas, s.rho[j], s.m[j], s.tau(j))
        ));
    }
    out
}

/// H-theorem statistics of `H + int D/eps` along a series.
pub fn euler_h_stats(series: &[EulerRecord]) -> HTheoremStats {
    h_stats_of(&series.iter().map(|r| r.h_total + r.dissipation).collect::<Vec<_>>())
}

/// Runs to `t_end`; `observe` sees the state at step 0, every `stride` steps and at the end.
pub fn run_euler(
    gas: &GasModel,
    init: EulerState,
    t_end: f64,
    eps: f64,
    stride: usize,
    numerics: &EulerNumerics,
    observe: &mut dyn FnMut(&EulerState, usize) -> Result<(), GasError>,
) -> Result<(Vec<EulerRecord>, EulerState, usize), GasError> {
    let mut s = init;
    let mut diss = 0.0;
    let mut step = 0;
    let mut series = vec![record(gas, &s, 0, 0.0)];
    observe(&s, 0)?;
    while !reached(s.t, t_end) {
        let lam = euler_max_speed(gas, &s);
        let dt = crate::dynamics::stable_dt(lam, s.grid.dx(), numerics.cfl).min(t_end - s.t);
        let (next, d) = step_euler_relax(&s, gas, dt, eps, numerics)?;
        s = next;
        diss += d;
        step += 1;
        let last = reached(s.t, t_end);
        if step % stride.max(1) == 0 || last {
            series.push(record(gas, &s, step, diss));
            observe(&s, step)?;
        }
    }
    Ok((series, s, step))
}

/// `(|rho_a - rho_b|_1, |m_a - m_b|_1)`.
pub fn euler_l1_gap(a: &EulerState, b: &EulerState) -> (f64, f64) {
    let dx = a.grid.dx();
    let r = a.rho.iter().zip(&b.rho).map(|(x, y)| (x - y).abs()).sum::<f64>() * dx;
    let m = a.m.iter().zip(&b.m).map(|(x, y)| (x - y).abs()).sum::<f64>() * dx;
    (r, m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EulerStudyRow {
    pub eps: f64,
    pub aborted: Option<String>,
    pub l1_rho: f64,
    pub l1_m: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EulerStudy {
    pub rows: Vec<EulerStudyRow>,
    /// Both gaps strictly decrease along the (decreasing) `eps` list; `None` with fewer than two
    /// completed rows.
    pub monotone: Option<bool>,
}

impl EulerStudy {
    pub fn csv(&self) -> String {
        let mut s = String::from("eps,status,l1_gap_rho,l1_gap_m,steps\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:.17e},{},{:.17e},{:.17e},{}\n",
                r.eps,
                if r.aborted.is_some() { "aborted" } else { "ok" },
                r.l1_rho,
                r.l1_m,
                r.steps
            ));
        }
        s
    }
}

/// Compares each `eps` run at `t_end` against the `p_E`-Euler reference, i.e. the same scheme
/// with `tau = P(rho)` enforced after every step (`eps = 0`).
pub fn euler_eps_study(
    gas: &GasModel,
    init: &EulerState,
    t_end: f64,
    eps_list: &[f64],
    numerics: &EulerNumerics,
) -> Result<EulerStudy, GasError> {
    let mut reference = init.clone();
    for j in 0..reference.rho.len() {
        reference.rho_tau[j] = reference.rho[j] * gas.p_diff(reference.rho[j]);
    }
    let (reference, _, _) = advance_euler_to(gas, reference, t_end, 0.0, numerics)?;
    let rows: Vec<EulerStudyRow> = eps_list
        .par_iter()
        .map(|&eps| match advance_euler_to(gas, init.clone(), t_end, eps, numerics) {
            Ok((s, _, steps)) => {
                let (r, m) = euler_l1_gap(&s, &reference);
                EulerStudyRow { eps, aborted: None, l1_rho: r, l1_m: m, steps }
            }
            Err(e) => EulerStudyRow { eps, aborted: Some(e.to_string()), l1_rho: f64::NAN, l1_m: f64::NAN, steps: 0 },
        })
        .collect();
    let ok: Vec<&EulerStudyRow> = rows.iter().filter(|r| r.aborted.is_none()).collect();
    let monotone = if ok.len() >= 2 {
        Some(ok.windows(2).all(|w| w[1].eps < w[0].eps && w[1].l1_rho < w[0].l1_rho && w[1].l1_m <= w[0].l1_m))
    } else {
        None
    };
    Ok(EulerStudy { rows, monotone })
}

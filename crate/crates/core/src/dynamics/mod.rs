//! Finite-volume solvers in slab geometry: fields depend on `x_1` only, so columns 2..d of `F`
//! are spatially constant and stored once as `background`; only column 1 (`f1`) is a cell field.
//!
//! Conservation form `U_t + f(U)_x = 0` with `f = (-S_{.1}, -v)` (plus `-dPhi/dF_{.1} v` for the
//! augmented `Xi`). Local Lax-Friedrichs fluxes, SSP-RK2 in time, optional componentwise minmod
//! MUSCL, Strang splitting with the exact exponential relaxation of `tau`.

mod run;

pub use run::*;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitutive::ConstitutiveModel;
use crate::entropy::{EntropyError, EntropyStructure};
use crate::linalg::sym_eig_range;
use crate::minors::{determinant, dphi_column, phi, Dim, Mat, Minors};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("det F = {det:.6e} at cell {cell} (t = {t:.6e}) is below the floor {floor}")]
    DetFloor { cell: usize, det: f64, floor: f64, t: f64 },
    #[error("time step {dt:.6e} exceeds the CFL bound {bound:.6e}")]
    Cfl { dt: f64, bound: f64 },
    #[error("non-finite value at cell {cell} (t = {t:.6e})")]
    NonFinite { cell: usize, t: f64 },
    #[error("entropy evaluation failed: {0}")]
    Entropy(#[from] EntropyError),
    #[error("grids differ: {0}")]
    GridMismatch(String),
    #[error("solution left the smooth regime: max |dF/dx| grew by {factor:.3} (> {limit}) at t = {t:.6e}")]
    BlowUp { factor: f64, limit: f64, t: f64 },
    #[error("{0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, DynamicsError>;

pub const MIN_CELLS: usize = 8;
pub const DEFAULT_CFL: f64 = 0.4;
pub const DEFAULT_W_MIN: f64 = 0.1;

/// Uniform periodic grid on `[x_min, x_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlabGrid {
    pub n_cells: usize,
    pub x_min: f64,
    pub x_max: f64,
}

impl SlabGrid {
    pub fn new(n_cells: usize, x_min: f64, x_max: f64) -> Result<SlabGrid> {
        if n_cells < MIN_CELLS {
            return Err(DynamicsError::Grid(format!("n_cells = {n_cells} < {MIN_CELLS}")));
        }
        if !(x_max - x_min > 0.0) || !x_min.is_finite() || !x_max.is_finite() {
            return Err(DynamicsError::Grid(format!("empty interval [{x_min}, {x_max})")));
        }
        Ok(SlabGrid { n_cells, x_min, x_max })
    }

    /// `n` cells on `[0, 1)`.
    pub fn unit(n_cells: usize) -> Result<SlabGrid> {
        SlabGrid::new(n_cells, 0.0, 1.0)
    }

    pub fn length(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn dx(&self) -> f64 {
        self.length() / self.n_cells as f64
    }

    pub fn face(&self, j: usize) -> f64 {
        self.x_min + j as f64 * self.dx()
    }

    pub fn center(&self, j: usize) -> f64 {
        self.x_min + (j as f64 + 0.5) * self.dx()
    }

    /// Grid with `factor` times as many cells on the same interval.
    pub fn refined(&self, factor: usize) -> SlabGrid {
        SlabGrid { n_cells: self.n_cells * factor, ..*self }
    }

    pub fn same_as(&self, other: &SlabGrid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(DynamicsError::GridMismatch(format!("{self:?} vs {other:?}")))
        }
    }
}

/// `amplitude * sin(2 pi k (x - x_min) / L + phase)` added to component `component`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineMode {
    pub component: usize,
    pub amplitude: f64,
    pub wavenumber: u32,
    pub phase: f64,
}

impl SineMode {
    fn theta(&self, grid: &SlabGrid, x: f64) -> f64 {
        std::f64::consts::TAU * self.wavenumber as f64 * (x - grid.x_min) / grid.length() + self.phase
    }

    pub fn value(&self, grid: &SlabGrid, x: f64) -> f64 {
        self.amplitude * self.theta(grid, x).sin()
    }

    pub fn derivative(&self, grid: &SlabGrid, x: f64) -> f64 {
        let k = std::f64::consts::TAU * self.wavenumber as f64 / grid.length();
        self.amplitude * k * self.theta(grid, x).cos()
    }

    /// Exact average over `[a, b]`.
    pub fn average(&self, grid: &SlabGrid, a: f64, b: f64) -> f64 {
        if self.wavenumber == 0 {
            return self.amplitude * self.phase.sin();
        }
        let k = std::f64::consts::TAU * self.wavenumber as f64 / grid.length();
        self.amplitude * (self.theta(grid, a).cos() - self.theta(grid, b).cos()) / (k * (b - a))
    }
}

/// Plane-wave motion `y(x) = B x + sum u_m(x_1) e_{c_m}` with velocity `v(x) = sum v_m(x_1) e_{c_m}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlabMotion {
    pub background: Mat,
    pub displacement: Vec<SineMode>,
    pub velocity: Vec<SineMode>,
}

impl SlabMotion {
    pub fn identity(dim: Dim) -> SlabMotion {
        SlabMotion { background: Mat::identity(dim), displacement: Vec::new(), velocity: Vec::new() }
    }

    pub fn dim(&self) -> Dim {
        self.background.dim()
    }

    /// Cell average of column 1 of `grad y`: `B e_1 + (u(x_{j+1/2}) - u(x_{j-1/2})) / dx`.
    pub fn f1_average(&self, grid: &SlabGrid, j: usize) -> [f64; 3] {
        let mut c = self.background.column(0);
        let (a, b) = (grid.face(j), grid.face(j + 1));
        for m in &self.displacement {
            c[m.component] += (m.value(grid, b) - m.value(grid, a)) / (b - a);
        }
        c
    }

    /// Pointwise column 1 of `grad y`.
    pub fn f1_point(&self, grid: &SlabGrid, x: f64) -> [f64; 3] {
        let mut c = self.background.column(0);
        for m in &self.displacement {
            c[m.component] += m.derivative(grid, x);
        }
        c
    }

    pub fn v_average(&self, grid: &SlabGrid, j: usize) -> [f64; 3] {
        let mut v = [0.0; 3];
        for m in &self.velocity {
            v[m.component] += m.average(grid, grid.face(j), grid.face(j + 1));
        }
        v
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim().d();
        for m in self.displacement.iter().chain(&self.velocity) {
            if m.component >= d || !m.amplitude.is_finite() || !m.phase.is_finite() {
                return Err(DynamicsError::Config(format!("invalid mode {m:?} for d = {d}")));
            }
        }
        if !self.background.is_finite() {
            return Err(DynamicsError::Config("non-finite background".into()));
        }
        Ok(())
    }
}

/// Initial internal variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TauInit {
    /// `tau = grad(sigma_E - sigma_I)(Phi(F))` (well prepared).
    Prepared,
    /// Equilibrium value plus a constant shift on every active component.
    Offset(f64),
}

fn with_column(background: &Mat, f1: &[f64; 3]) -> Mat {
    let mut f = *background;
    f.set_column(0, &f1[..background.dim().d()]);
    f
}

/// State of the reduced relaxation system.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxState {
    pub grid: SlabGrid,
    pub background: Mat,
    pub v: Vec<[f64; 3]>,
    pub f1: Vec<[f64; 3]>,
    pub tau: Vec<Minors>,
    pub t: f64,
}

/// State of equilibrium elastodynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilState {
    pub grid: SlabGrid,
    pub background: Mat,
    pub v: Vec<[f64; 3]>,
    pub f1: Vec<[f64; 3]>,
    pub t: f64,
}

/// State of the augmented relaxation system.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub grid: SlabGrid,
    pub background: Mat,
    pub v: Vec<[f64; 3]>,
    pub f1: Vec<[f64; 3]>,
    pub xi: Vec<Minors>,
    pub tau: Vec<Minors>,
    pub t: f64,
}

macro_rules! slab_common {
    ($t:ty) => {
        impl $t {
            pub fn dim(&self) -> Dim {
                self.background.dim()
            }

            /// Deformation gradient of cell `j`.
            pub fn f(&self, j: usize) -> Mat {
                with_column(&self.background, &self.f1[j])
            }

            pub fn min_det(&self) -> f64 {
                (0..self.grid.n_cells).map(|j| determinant(&self.f(j))).fold(f64::INFINITY, f64::min)
            }

            /// `sum_j v_j dx` and `sum_j F_{.1,j} dx`.
            pub fn totals(&self) -> ([f64; 3], [f64; 3]) {
                let dx = self.grid.dx();
                let mut tv = [0.0; 3];
                let mut tf = [0.0; 3];
                for j in 0..self.grid.n_cells {
                    for i in 0..3 {
                        tv[i] += self.v[j][i] * dx;
                        tf[i] += self.f1[j][i] * dx;
                    }
                }
                (tv, tf)
            }

            fn check_admissible(&self, w_min: f64) -> Result<()> {
                for j in 0..self.grid.n_cells {
                    let f = self.f(j);
                    let det = determinant(&f);
                    if !det.is_finite() || !self.v[j].iter().all(|x| x.is_finite()) {
                        return Err(DynamicsError::NonFinite { cell: j, t: self.t });
                    }
                    if det <= w_min {
                        return Err(DynamicsError::DetFloor { cell: j, det, floor: w_min, t: self.t });
                    }
                }
                Ok(())
            }
        }
    };
}

slab_common!(RelaxState);
slab_common!(EquilState);
slab_common!(AugmentedState);

impl RelaxState {
    /// Equilibrium state with the same `(v, F)`.
    pub fn to_equilibrium(&self) -> EquilState {
        EquilState { grid: self.grid, background: self.background, v: self.v.clone(), f1: self.f1.clone(), t: self.t }
    }

    /// Augmented state with `Xi = Phi(F)`.
    pub fn to_augmented(&self) -> AugmentedState {
        AugmentedState {
            grid: self.grid,
            background: self.background,
            v: self.v.clone(),
            f1: self.f1.clone(),
            xi: (0..self.grid.n_cells).map(|j| phi(&self.f(j))).collect(),
            tau: self.tau.clone(),
            t: self.t,
        }
    }
}

impl EquilState {
    /// Lift to the relaxation system with `tau` on the equilibrium manifold.
    pub fn lift(&self, model: &ConstitutiveModel) -> RelaxState {
        RelaxState {
            grid: self.grid,
            background: self.background,
            v: self.v.clone(),
            f1: self.f1.clone(),
            tau: (0..self.grid.n_cells).map(|j| model.project_active(&model.tau_eq(&phi(&self.f(j))))).collect(),
            t: self.t,
        }
    }

    /// Cell averages over blocks of `factor` cells.
    pub fn restrict(&self, factor: usize) -> Result<EquilState> {
        if factor == 0 || !self.grid.n_cells.is_multiple_of(factor) {
            return Err(DynamicsError::Grid(format!("cannot restrict {} cells by {factor}", self.grid.n_cells)));
        }
        let n = self.grid.n_cells / factor;
        let avg = |a: &[[f64; 3]]| -> Vec<[f64; 3]> {
            (0..n)
                .map(|j| {
                    let mut s = [0.0; 3];
                    for c in &a[j * factor..(j + 1) * factor] {
                        for i in 0..3 {
                            s[i] += c[i];
                        }
                    }
                    s.map(|x| x / factor as f64)
                })
                .collect()
        };
        Ok(EquilState {
            grid: SlabGrid::new(n, self.grid.x_min, self.grid.x_max)?,
            background: self.background,
            v: avg(&self.v),
            f1: avg(&self.f1),
            t: self.t,
        })
    }
}

/// Cell-averaged initial data from a plane-wave motion.
pub fn init_from_motion(
    grid: &SlabGrid,
    motion: &SlabMotion,
    model: &ConstitutiveModel,
    tau_init: TauInit,
    w_min: f64,
) -> Result<RelaxState> {
    motion.validate()?;
    if motion.dim() != model.dim() {
        return Err(DynamicsError::Dim(format!("motion d = {}, model d = {}", motion.dim().d(), model.dim().d())));
    }
    let n = grid.n_cells;
    let f1: Vec<[f64; 3]> = (0..n).map(|j| motion.f1_average(grid, j)).collect();
    let v: Vec<[f64; 3]> = (0..n).map(|j| motion.v_average(grid, j)).collect();
    let shift = match tau_init {
        TauInit::Prepared => 0.0,
        TauInit::Offset(s) => s,
    };
    let tau = f1
        .iter()
        .map(|c| {
            let mut t = model.project_active(&model.tau_eq(&phi(&with_column(&motion.background, c))));
            for &k in model.active() {
                t[k] += shift;
            }
            t
        })
        .collect();
    let s = RelaxState { grid: *grid, background: motion.background, v, f1, tau, t: 0.0 };
    s.check_admissible(w_min)?;
    Ok(s)
}

/// `S_{i1} = sum_A (d sigma_I/d Xi^A (Phi(F)) + tau^A) dPhi^A/dF_{i1}`.
pub fn instantaneous_stress(model: &ConstitutiveModel, f: &Mat, tau: &Minors) -> [f64; 3] {
    let t = model.sigma_i().gradient(&phi(f)) + model.project_active(tau);
    dphi_column(f, 0).contract(&t)
}

/// `S_{i1} = d sigma_E/d Xi^A (Phi(F)) dPhi^A/dF_{i1}`.
pub fn equilibrium_stress(model: &ConstitutiveModel, f: &Mat) -> [f64; 3] {
    dphi_column(f, 0).contract(&model.sigma_e().gradient(&phi(f)))
}

/// Relative step of the acoustic-tensor difference quotient.
pub const SPEED_FD_STEP: f64 = 1e-6;

/// `sqrt(lambda_max(A))`, `A_ij = dS_i1/dF_j1` by central differences of `stress`, symmetrized.
fn fd_speed(f: &Mat, stress: impl Fn(&Mat) -> [f64; 3]) -> f64 {
    let d = f.dim().d();
    let mut a = nalgebra::DMatrix::zeros(d, d);
    for j in 0..d {
        let h = SPEED_FD_STEP * f.get(j, 0).abs().max(1.0);
        let mut fp = *f;
        let mut fm = *f;
        fp.set(j, 0, f.get(j, 0) + h);
        fm.set(j, 0, f.get(j, 0) - h);
        let (sp, sm) = (stress(&fp), stress(&fm));
        for i in 0..d {
            a[(i, j)] = (sp[i] - sm[i]) / (2.0 * h);
        }
    }
    let sym = (&a + a.transpose()) * 0.5;
    sym_eig_range(&sym).1.max(0.0).sqrt()
}

/// Characteristic speed bound of one cell of the relaxation system.
pub fn cell_speed_relax(model: &ConstitutiveModel, f: &Mat, tau: &Minors) -> f64 {
    fd_speed(f, |g| instantaneous_stress(model, g, tau))
}

/// Characteristic speed bound of one cell of equilibrium elastodynamics.
pub fn cell_speed_equilibrium(model: &ConstitutiveModel, f: &Mat) -> f64 {
    fd_speed(f, |g| equilibrium_stress(model, g))
}

/// `sqrt(lambda_max(J^T hess sigma_I(Xi) J))` with `J = dPhi/dF_{.1}(F)`.
///
/// Equals [`cell_speed_relax`] at `Xi = Phi(F)`: `Phi` is affine in column 1 of `F`.
pub fn cell_speed_augmented(model: &ConstitutiveModel, f: &Mat, xi: &Minors) -> f64 {
    let d = f.dim().d();
    let col = dphi_column(f, 0);
    let h = model.sigma_i().hessian(xi);
    let n = xi.len();
    let mut a = nalgebra::DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for p in 0..n {
                let cp = col.get(p, i);
                if cp == 0.0 {
                    continue;
                }
                for q in 0..n {
                    s += cp * h[(p, q)] * col.get(q, j);
                }
            }
            a[(i, j)] = s;
        }
    }
    let sym = (&a + a.transpose()) * 0.5;
    sym_eig_range(&sym).1.max(0.0).sqrt()
}

fn check_speeds(speeds: &[f64], t: f64) -> Result<f64> {
    let mut m = 0.0_f64;
    for (j, &s) in speeds.iter().enumerate() {
        if !s.is_finite() {
            return Err(DynamicsError::NonFinite { cell: j, t });
        }
        m = m.max(s);
    }
    Ok(m)
}

fn relax_speeds(state: &RelaxState, model: &ConstitutiveModel) -> Vec<f64> {
    (0..state.grid.n_cells).into_par_iter().map(|j| cell_speed_relax(model, &state.f(j), &state.tau[j])).collect()
}

/// Max characteristic speed of the hyperbolic part of the relaxation system.
pub fn max_wave_speed(model: &ConstitutiveModel, state: &RelaxState) -> Result<f64> {
    check_speeds(&relax_speeds(state, model), state.t)
}

pub fn max_wave_speed_equilibrium(model: &ConstitutiveModel, state: &EquilState) -> Result<f64> {
    let s: Vec<f64> =
        (0..state.grid.n_cells).into_par_iter().map(|j| cell_speed_equilibrium(model, &state.f(j))).collect();
    check_speeds(&s, state.t)
}

pub fn max_wave_speed_augmented(model: &ConstitutiveModel, state: &AugmentedState) -> Result<f64> {
    let s: Vec<f64> = (0..state.grid.n_cells)
        .into_par_iter()
        .map(|j| cell_speed_augmented(model, &state.f(j), &state.xi[j]))
        .collect();
    check_speeds(&s, state.t)
}

/// Spatial reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Reconstruction {
    #[default]
    FirstOrder,
    Muscl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Numerics {
    pub cfl: f64,
    pub reconstruction: Reconstruction,
    pub w_min: f64,
}

impl Default for Numerics {
    fn default() -> Self {
        Numerics { cfl: DEFAULT_CFL, reconstruction: Reconstruction::FirstOrder, w_min: DEFAULT_W_MIN }
    }
}

impl Numerics {
    pub fn muscl() -> Numerics {
        Numerics { reconstruction: Reconstruction::Muscl, ..Numerics::default() }
    }
}

fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

/// Cell-major packed variables: `ne` evolved then `nv - ne` passive (reconstructed, not updated).
struct Packed {
    nv: usize,
    ne: usize,
    data: Vec<f64>,
}

impl Packed {
    fn cell(&self, j: usize) -> &[f64] {
        &self.data[j * self.nv..(j + 1) * self.nv]
    }
}

/// `-(F_{j+1/2} - F_{j-1/2}) / dx` for the evolved variables, LLF with `max(speed_j, speed_{j+1})`.
fn llf_rhs<Fl>(u: &Packed, n: usize, dx: f64, speeds: &[f64], recon: Reconstruction, flux: &Fl) -> Vec<f64>
where
    Fl: Fn(&[f64], &mut [f64]) + Sync,
{
    let (nv, ne) = (u.nv, u.ne);
    let slopes: Option<Vec<f64>> = match recon {
        Reconstruction::FirstOrder => None,
        Reconstruction::Muscl => Some(
            (0..n)
                .into_par_iter()
                .flat_map_iter(|j| {
                    let (um, u0, up) = (u.cell((j + n - 1) % n), u.cell(j), u.cell((j + 1) % n));
                    (0..nv).map(move |k| minmod(u0[k] - um[k], up[k] - u0[k]))
                })
                .collect(),
        ),
    };
    // interface j+1/2 between cells j and j+1
    let iface: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|j| {
            let jp = (j + 1) % n;
            let (mut ul, mut ur) = (u.cell(j).to_vec(), u.cell(jp).to_vec());
            if let Some(s) = &slopes {
                for k in 0..nv {
                    ul[k] += 0.5 * s[j * nv + k];
                    ur[k] -= 0.5 * s[jp * nv + k];
                }
            }
            let mut fl = vec![0.0; ne];
            let mut fr = vec![0.0; ne];
            flux(&ul, &mut fl);
            flux(&ur, &mut fr);
            let a = speeds[j].max(speeds[jp]);
            (0..ne).map(move |k| 0.5 * (fl[k] + fr[k]) - 0.5 * a * (ur[k] - ul[k]))
        })
        .collect();
    let mut rhs = vec![0.0; n * ne];
    for j in 0..n {
        let jm = (j + n - 1) % n;
        for k in 0..ne {
            rhs[j * ne + k] = -(iface[j * ne + k] - iface[jm * ne + k]) / dx;
        }
    }
    rhs
}

/// One SSP-RK2 step of the evolved variables; speeds are re-evaluated at the second stage.
fn ssp_rk2<Fl, Sp>(u0: &Packed, n: usize, dx: f64, dt: f64, recon: Reconstruction, flux: &Fl, speeds: &Sp, s0: &[f64]) -> Packed
where
    Fl: Fn(&[f64], &mut [f64]) + Sync,
    Sp: Fn(&Packed) -> Vec<f64>,
{
    let (nv, ne) = (u0.nv, u0.ne);
    let r0 = llf_rhs(u0, n, dx, s0, recon, flux);
    let mut u1 = Packed { nv, ne, data: u0.data.clone() };
    for j in 0..n {
        for k in 0..ne {
            u1.data[j * nv + k] += dt * r0[j * ne + k];
        }
    }
    let s1 = speeds(&u1);
    let r1 = llf_rhs(&u1, n, dx, &s1, recon, flux);
    let mut out = Packed { nv, ne, data: u0.data.clone() };
    for j in 0..n {
        for k in 0..ne {
            let i = j * nv + k;
            out.data[i] = 0.5 * u0.data[i] + 0.5 * (u1.data[i] + dt * r1[j * ne + k]);
        }
    }
    out
}

fn pack(v: &[[f64; 3]], f1: &[[f64; 3]], extra: &[&[Minors]], d: usize, ne: usize) -> Packed {
    let dlen = extra.first().map_or(0, |e| e[0].len());
    let nv = 2 * d + extra.len() * dlen;
    let mut data = Vec::with_capacity(v.len() * nv);
    for j in 0..v.len() {
        data.extend_from_slice(&v[j][..d]);
        data.extend_from_slice(&f1[j][..d]);
        for e in extra {
            data.extend_from_slice(e[j].as_slice());
        }
    }
    Packed { nv, ne, data }
}

fn unpack_vf(p: &Packed, d: usize) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let n = p.data.len() / p.nv;
    let mut v = vec![[0.0; 3]; n];
    let mut f = vec![[0.0; 3]; n];
    for j in 0..n {
        let c = p.cell(j);
        v[j][..d].copy_from_slice(&c[..d]);
        f[j][..d].copy_from_slice(&c[d..2 * d]);
    }
    (v, f)
}

fn slice3(s: &[f64]) -> [f64; 3] {
    let mut a = [0.0; 3];
    a[..s.len()].copy_from_slice(s);
    a
}

fn check_dt(dt: f64, dx: f64, speed: f64, cfl: f64) -> Result<()> {
    let bound = if speed > 0.0 { cfl * dx / speed } else { f64::INFINITY };
    if !(dt > 0.0) || dt > bound * (1.0 + 1e-12) {
        return Err(DynamicsError::Cfl { dt, bound });
    }
    Ok(())
}

/// Stable step `cfl dx / lambda` (infinite for a state at rest with zero speed).
pub fn stable_dt(speed: f64, dx: f64, cfl: f64) -> f64 {
    if speed > 0.0 {
        cfl * dx / speed
    } else {
        f64::INFINITY
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub(crate) const GL4: [(f64, f64); 4] = [
    (-0.861_136_311_594_052_6, 0.347_854_845_137_453_85),
    (-0.339_981_043_584_856_26, 0.652_145_154_862_546_1),
    (0.339_981_043_584_856_26, 0.652_145_154_862_546_1),
    (0.861_136_311_594_052_6, 0.347_854_845_137_453_85),
];

/// `tau <- tau_eq + (tau - tau_eq) exp(-h/eps)` with `Xi` frozen. `eps = 0` projects,
/// `eps = inf` leaves `tau` unchanged. Returns `int_0^h D/eps ds` when `structure` is given,
/// evaluated along the exact trajectory in the variable `u = exp(-s/eps)`:
/// `int D/eps ds = int_{u0}^1 D(tau_eq + u r0) / u du`.
fn relax_source(
    model: &ConstitutiveModel,
    structure: Option<&EntropyStructure>,
    xi: &Minors,
    tau: &Minors,
    h: f64,
    eps: f64,
) -> std::result::Result<(Minors, f64), EntropyError> {
    let teq = model.project_active(&model.tau_eq(xi));
    let r0 = model.project_active(tau) - teq;
    let u0 = (-h / eps).exp();
    let new = teq + r0 * u0;
    let mut diss = 0.0;
    if let Some(s) = structure {
        if r0.max_abs() > 0.0 && u0 < 1.0 {
            let (a, b) = (u0, 1.0);
            for (x, wgt) in GL4 {
                let u = 0.5 * (b - a) * x + 0.5 * (a + b);
                let d = s.dissipation(xi, &(teq + r0 * u), Some(xi))?;
                diss += 0.5 * (b - a) * wgt * d / u;
            }
        }
    }
    Ok((new, diss))
}

fn source_all(
    model: &ConstitutiveModel,
    structure: Option<&EntropyStructure>,
    xis: &[Minors],
    taus: &[Minors],
    h: f64,
    eps: f64,
    dx: f64,
) -> Result<(Vec<Minors>, f64)> {
    let rows: Vec<std::result::Result<(Minors, f64), EntropyError>> =
        xis.par_iter().zip(taus.par_iter()).map(|(x, t)| relax_source(model, structure, x, t, h, eps)).collect();
    let mut out = Vec::with_capacity(rows.len());
    let mut total = 0.0;
    for r in rows {
        let (t, d) = r?;
        out.push(t);
        total += d * dx;
    }
    Ok((out, total))
}

/// Per-step by-products.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepInfo {
    /// `sum_j int D/eps dt dx` over the step (zero without an entropy structure).
    pub dissipation: f64,
    /// Speed used for the CFL check.
    pub speed: f64,
}

/// Relaxation parameter `eps`; `0` means instantaneous projection and `inf` switches the source off.
fn check_eps(eps: f64) -> Result<()> {
    if eps.is_nan() || eps < 0.0 {
        return Err(DynamicsError::Config(format!("eps must be >= 0, got {eps}")));
    }
    Ok(())
}

/// Strang step of the reduced relaxation system.
pub fn step_relax(
    state: &RelaxState,
    model: &ConstitutiveModel,
    structure: Option<&EntropyStructure>,
    dt: f64,
    eps: f64,
    numerics: &Numerics,
) -> Result<(RelaxState, StepInfo)> {
    check_eps(eps)?;
    let d = state.dim().d();
    let n = state.grid.n_cells;
    let dx = state.grid.dx();
    let s0 = relax_speeds(state, model);
    let speed = check_speeds(&s0, state.t)?;
    check_dt(dt, dx, speed, numerics.cfl)?;
    let xis: Vec<Minors> = (0..n).map(|j| phi(&state.f(j))).collect();
    let (tau_a, d1) = source_all(model, structure, &xis, &state.tau, 0.5 * dt, eps, dx)?;

    let bg = state.background;
    let dl = tau_a[0].len();
    let flux = |c: &[f64], out: &mut [f64]| {
        let f = with_column(&bg, &slice3(&c[d..2 * d]));
        let tau = Minors::from_slice(bg.dim(), &c[2 * d..2 * d + dl]).expect("packed length");
        let s = instantaneous_stress(model, &f, &tau);
        for i in 0..d {
            out[i] = -s[i];
            out[d + i] = -c[i];
        }
    };
    let speeds = |p: &Packed| -> Vec<f64> {
        (0..n)
            .into_par_iter()
            .map(|j| {
                let c = p.cell(j);
                let f = with_column(&bg, &slice3(&c[d..2 * d]));
                let tau = Minors::from_slice(bg.dim(), &c[2 * d..2 * d + dl]).expect("packed length");
                cell_speed_relax(model, &f, &tau)
            })
            .collect()
    };
    let u0 = pack(&state.v, &state.f1, &[&tau_a], d, 2 * d);
    let u = ssp_rk2(&u0, n, dx, dt, numerics.reconstruction, &flux, &speeds, &s0);
    let (v, f1) = unpack_vf(&u, d);
    let mid = RelaxState { grid: state.grid, background: bg, v, f1, tau: tau_a, t: state.t + dt };
    mid.check_admissible(numerics.w_min)?;
    let xis: Vec<Minors> = (0..n).map(|j| phi(&mid.f(j))).collect();
    let (tau_b, d2) = source_all(model, structure, &xis, &mid.tau, 0.5 * dt, eps, dx)?;
    let out = RelaxState { tau: tau_b, ..mid };
    Ok((out, StepInfo { dissipation: d1 + d2, speed }))
}

/// One SSP-RK2 step of equilibrium elastodynamics.
pub fn step_equilibrium(state: &EquilState, model: &ConstitutiveModel, dt: f64, numerics: &Numerics) -> Result<(EquilState, StepInfo)> {
    let d = state.dim().d();
    let n = state.grid.n_cells;
    let dx = state.grid.dx();
    let bg = state.background;
    let cell_speeds = |p: &Packed| -> Vec<f64> {
        (0..n)
            .into_par_iter()
            .map(|j| cell_speed_equilibrium(model, &with_column(&bg, &slice3(&p.cell(j)[d..2 * d]))))
            .collect()
    };
    let u0 = pack(&state.v, &state.f1, &[], d, 2 * d);
    let s0 = cell_speeds(&u0);
    let speed = check_speeds(&s0, state.t)?;
    check_dt(dt, dx, speed, numerics.cfl)?;
    let flux = |c: &[f64], out: &mut [f64]| {
        let s = equilibrium_stress(model, &with_column(&bg, &slice3(&c[d..2 * d])));
        for i in 0..d {
            out[i] = -s[i];
            out[d + i] = -c[i];
        }
    };
    let u = ssp_rk2(&u0, n, dx, dt, numerics.reconstruction, &flux, &cell_speeds, &s0);
    let (v, f1) = unpack_vf(&u, d);
    let out = EquilState { grid: state.grid, background: bg, v, f1, t: state.t + dt };
    out.check_admissible(numerics.w_min)?;
    Ok((out, StepInfo { dissipation: 0.0, speed }))
}

/// Strang step of the augmented relaxation system; `Xi` is evolved with flux
/// `-dPhi/dF_{i1}(F) v_i` and the source relaxes `tau` toward `-grad Sigma(Xi)`.
pub fn step_augmented(
    state: &AugmentedState,
    model: &ConstitutiveModel,
    structure: Option<&EntropyStructure>,
    dt: f64,
    eps: f64,
    numerics: &Numerics,
) -> Result<(AugmentedState, StepInfo)> {
    check_eps(eps)?;
    let d = state.dim().d();
    let n = state.grid.n_cells;
    let dx = state.grid.dx();
    let bg = state.background;
    let dl = state.xi[0].len();
    let cell_speeds = |p: &Packed| -> Vec<f64> {
        (0..n)
            .into_par_iter()
            .map(|j| {
                let c = p.cell(j);
                let f = with_column(&bg, &slice3(&c[d..2 * d]));
                let xi = Minors::from_slice(bg.dim(), &c[2 * d..2 * d + dl]).expect("packed length");
                cell_speed_augmented(model, &f, &xi)
            })
            .collect()
    };
    let (tau_a, d1) = source_all(model, structure, &state.xi, &state.tau, 0.5 * dt, eps, dx)?;
    let u0 = pack(&state.v, &state.f1, &[&state.xi, &tau_a], d, 2 * d + dl);
    let s0 = cell_speeds(&u0);
    let speed = check_speeds(&s0, state.t)?;
    check_dt(dt, dx, speed, numerics.cfl)?;
    let flux = |c: &[f64], out: &mut [f64]| {
        let f = with_column(&bg, &slice3(&c[d..2 * d]));
        let xi = Minors::from_slice(bg.dim(), &c[2 * d..2 * d + dl]).expect("packed length");
        let tau = Minors::from_slice(bg.dim(), &c[2 * d + dl..2 * d + 2 * dl]).expect("packed length");
        let col = dphi_column(&f, 0);
        let t = model.sigma_i().gradient(&xi) + model.project_active(&tau);
        let s = col.contract(&t);
        let vf = col.apply(&slice3(&c[..d]));
        for i in 0..d {
            out[i] = -s[i];
            out[d + i] = -c[i];
        }
        for a in 0..dl {
            out[2 * d + a] = -vf[a];
        }
    };
    let u = ssp_rk2(&u0, n, dx, dt, numerics.reconstruction, &flux, &cell_speeds, &s0);
    let (v, f1) = unpack_vf(&u, d);
    let xi: Vec<Minors> =
        (0..n).map(|j| Minors::from_slice(bg.dim(), &u.cell(j)[2 * d..2 * d + dl]).expect("packed length")).collect();
    let mid = AugmentedState { grid: state.grid, background: bg, v, f1, xi, tau: tau_a, t: state.t + dt };
    mid.check_admissible(numerics.w_min)?;
    let (tau_b, d2) = source_all(model, structure, &mid.xi, &mid.tau, 0.5 * dt, eps, dx)?;
    Ok((AugmentedState { tau: tau_b, ..mid }, StepInfo { dissipation: d1 + d2, speed }))
}

/// Total entropy `sum_j (|v_j|^2/2 + Psi(Phi(F_j), tau_j)) dx`.
pub fn total_entropy(structure: &EntropyStructure, state: &RelaxState) -> Result<f64> {
    let dx = state.grid.dx();
    let rows: Vec<std::result::Result<f64, EntropyError>> = (0..state.grid.n_cells)
        .into_par_iter()
        .map(|j| {
            let xi = phi(&state.f(j));
            let v = state.v[j];
            Ok(0.5 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) + structure.psi(&xi, &state.tau[j], Some(&xi))?)
        })
        .collect();
    let mut total = 0.0;
    for r in rows {
        total += r? * dx;
    }
    Ok(total)
}

/// Total equilibrium energy `sum_j (|v_j|^2/2 + sigma_E(Phi(F_j))) dx`.
pub fn total_energy_equilibrium(model: &ConstitutiveModel, state: &EquilState) -> f64 {
    let dx = state.grid.dx();
    (0..state.grid.n_cells)
        .map(|j| {
            let v = state.v[j];
            (0.5 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) + model.sigma_e().value(&phi(&state.f(j)))) * dx
        })
        .sum()
}

/// `max_j |T_j - grad sigma_E(Phi(F_j))| = max_j |tau_j - tau_eq(F_j)|` on the active components.
pub fn stress_gap(model: &ConstitutiveModel, state: &RelaxState) -> f64 {
    (0..state.grid.n_cells)
        .map(|j| {
            let teq = model.project_active(&model.tau_eq(&phi(&state.f(j))));
            (model.project_active(&state.tau[j]) - teq).max_abs()
        })
        .fold(0.0, f64::max)
}

/// `max_j |Xi_j - Phi(F_j)|`.
pub fn constraint_defect(state: &AugmentedState) -> f64 {
    (0..state.grid.n_cells).map(|j| (state.xi[j] - phi(&state.f(j))).max_abs()).fold(0.0, f64::max)
}

/// `max_j |F_{.1,j+1} - F_{.1,j}| / dx`, the smoothness monitor.
pub fn max_gradient(f1: &[[f64; 3]], dx: f64) -> f64 {
    let n = f1.len();
    (0..n)
        .map(|j| {
            let (a, b) = (f1[j], f1[(j + 1) % n]);
            (0..3).map(|i| (b[i] - a[i]).abs()).fold(0.0, f64::max) / dx
        })
        .fold(0.0, f64::max)
}

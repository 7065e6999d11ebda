//! Minor map of a deformation gradient and its exact first derivatives.
//!
//! Flat layout of a [`Minors`] vector, fixed for every Hessian and Jacobian in the crate:
//!
//! | d | indices `0..d*d` | indices `9..18` | last index |
//! |---|------------------|-----------------|------------|
//! | 3 | `F` row-major    | `Z = cof F` row-major | `w = det F` (18) |
//! | 2 | `F` row-major    | absent          | `w = det F` (4) |
//!
//! so `D = 19` for `d = 3` and `D = 5` for `d = 2`.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest minors dimension (`d = 3`).
pub const MAX_MINORS: usize = 19;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MinorsError {
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch(Dim, Dim),
    #[error("grid axis {axis} has {n} points, at least 4 are required")]
    GridTooSmall { axis: usize, n: usize },
    #[error("unsupported dimension {0}")]
    UnsupportedDim(usize),
}

/// Spatial dimension of the deformation gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dim {
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
}

impl Dim {
    pub fn new(d: usize) -> Result<Dim, MinorsError> {
        match d {
            2 => Ok(Dim::Two),
            3 => Ok(Dim::Three),
            _ => Err(MinorsError::UnsupportedDim(d)),
        }
    }

    pub const fn d(self) -> usize {
        match self {
            Dim::Two => 2,
            Dim::Three => 3,
        }
    }

    /// Length `D` of the minors vector.
    pub const fn minors_len(self) -> usize {
        match self {
            Dim::Two => 5,
            Dim::Three => 19,
        }
    }

    pub const fn f_index(self, i: usize, a: usize) -> usize {
        i * self.d() + a
    }

    /// Flat index of `Z_{ia}`; only meaningful for `d = 3`.
    pub const fn z_index(self, i: usize, a: usize) -> usize {
        9 + 3 * i + a
    }

    pub const fn w_index(self) -> usize {
        self.minors_len() - 1
    }
}

/// Permutation symbol on `{0,1,2}`.
#[inline]
pub(crate) const fn levi(i: usize, j: usize, k: usize) -> f64 {
    match (i, j, k) {
        (0, 1, 2) | (1, 2, 0) | (2, 0, 1) => 1.0,
        (0, 2, 1) | (2, 1, 0) | (1, 0, 2) => -1.0,
        _ => 0.0,
    }
}

/// Dense `d x d` matrix; unused rows and columns stay zero for `d = 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat {
    dim: Dim,
    e: [[f64; 3]; 3],
}

impl Mat {
    pub fn zeros(dim: Dim) -> Mat {
        Mat { dim, e: [[0.0; 3]; 3] }
    }

    pub fn identity(dim: Dim) -> Mat {
        Mat::from_fn(dim, |i, a| if i == a { 1.0 } else { 0.0 })
    }

    pub fn from_fn(dim: Dim, mut f: impl FnMut(usize, usize) -> f64) -> Mat {
        let mut m = Mat::zeros(dim);
        for i in 0..dim.d() {
            for a in 0..dim.d() {
                m.e[i][a] = f(i, a);
            }
        }
        m
    }

    pub fn diag(dim: Dim, values: &[f64]) -> Result<Mat, MinorsError> {
        if values.len() != dim.d() {
            return Err(MinorsError::Length { expected: dim.d(), got: values.len() });
        }
        Ok(Mat::from_fn(dim, |i, a| if i == a { values[i] } else { 0.0 }))
    }

    /// Builds from `d*d` row-major values.
    pub fn from_row_major(dim: Dim, values: &[f64]) -> Result<Mat, MinorsError> {
        let d = dim.d();
        if values.len() != d * d {
            return Err(MinorsError::Length { expected: d * d, got: values.len() });
        }
        Ok(Mat::from_fn(dim, |i, a| values[i * d + a]))
    }

    pub fn dim(&self) -> Dim {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, a: usize) -> f64 {
        self.e[i][a]
    }

    #[inline]
    pub fn set(&mut self, i: usize, a: usize, v: f64) {
        debug_assert!(i < self.dim.d() && a < self.dim.d());
        self.e[i][a] = v;
    }

    pub fn row_major(&self) -> Vec<f64> {
        let d = self.dim.d();
        (0..d * d).map(|k| self.e[k / d][k % d]).collect()
    }

    pub fn column(&self, a: usize) -> [f64; 3] {
        [self.e[0][a], self.e[1][a], self.e[2][a]]
    }

    pub fn set_column(&mut self, a: usize, col: &[f64]) {
        for (i, c) in col.iter().enumerate().take(self.dim.d()) {
            self.e[i][a] = *c;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.e.iter().flatten().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.dim, |i, a| self.e[a][i])
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        let d = self.dim.d();
        Mat::from_fn(self.dim, |i, a| (0..d).map(|k| self.e[i][k] * other.e[k][a]).sum())
    }

    /// Frobenius product `A:B`.
    pub fn frob_dot(&self, other: &Mat) -> f64 {
        let d = self.dim.d();
        let mut s = 0.0;
        for i in 0..d {
            for a in 0..d {
                s += self.e[i][a] * other.e[i][a];
            }
        }
        s
    }

    pub fn norm(&self) -> f64 {
        self.frob_dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.e.iter().flatten().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat::from_fn(self.dim, |i, a| s * self.e[i][a])
    }
}

impl Add for Mat {
    type Output = Mat;
    fn add(self, rhs: Mat) -> Mat {
        Mat::from_fn(self.dim, |i, a| self.e[i][a] + rhs.e[i][a])
    }
}

impl Sub for Mat {
    type Output = Mat;
    fn sub(self, rhs: Mat) -> Mat {
        Mat::from_fn(self.dim, |i, a| self.e[i][a] - rhs.e[i][a])
    }
}

const PERMS3: [([usize; 3], f64); 6] = [
    ([0, 1, 2], 1.0),
    ([1, 2, 0], 1.0),
    ([2, 0, 1], 1.0),
    ([0, 2, 1], -1.0),
    ([2, 1, 0], -1.0),
    ([1, 0, 2], -1.0),
];

/// `det F`; for `d = 3` the Leibniz sum over permutations.
pub fn determinant(f: &Mat) -> f64 {
    match f.dim {
        Dim::Two => f.e[0][0] * f.e[1][1] - f.e[0][1] * f.e[1][0],
        Dim::Three => PERMS3
            .iter()
            .map(|(p, s)| s * f.e[0][p[0]] * f.e[1][p[1]] * f.e[2][p[2]])
            .sum(),
    }
}

/// `cof F` with `F (cof F)^T = det F I`.
pub fn cofactor(f: &Mat) -> Mat {
    let e = &f.e;
    match f.dim {
        Dim::Two => {
            let mut c = Mat::zeros(Dim::Two);
            c.e[0][0] = e[1][1];
            c.e[0][1] = -e[1][0];
            c.e[1][0] = -e[0][1];
            c.e[1][1] = e[0][0];
            c
        }
        Dim::Three => Mat::from_fn(Dim::Three, |i, a| {
            let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
            let (a1, a2) = ((a + 1) % 3, (a + 2) % 3);
            e[i1][a1] * e[i2][a2] - e[i1][a2] * e[i2][a1]
        }),
    }
}

/// Vector in `R^D` with the `(F, Z, w)` block structure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minors {
    dim: Dim,
    v: [f64; MAX_MINORS],
}

impl Minors {
    pub fn zeros(dim: Dim) -> Minors {
        Minors { dim, v: [0.0; MAX_MINORS] }
    }

    pub fn from_slice(dim: Dim, values: &[f64]) -> Result<Minors, MinorsError> {
        let n = dim.minors_len();
        if values.len() != n {
            return Err(MinorsError::Length { expected: n, got: values.len() });
        }
        let mut m = Minors::zeros(dim);
        m.v[..n].copy_from_slice(values);
        Ok(m)
    }

    pub fn from_fn(dim: Dim, mut f: impl FnMut(usize) -> f64) -> Minors {
        let mut m = Minors::zeros(dim);
        for k in 0..dim.minors_len() {
            m.v[k] = f(k);
        }
        m
    }

    /// Assembles from blocks; `z` must be present exactly when `d = 3`.
    pub fn from_parts(f: &Mat, z: Option<&Mat>, w: f64) -> Result<Minors, MinorsError> {
        let dim = f.dim;
        let mut m = Minors::zeros(dim);
        let d = dim.d();
        for i in 0..d {
            for a in 0..d {
                m.v[dim.f_index(i, a)] = f.get(i, a);
            }
        }
        match (dim, z) {
            (Dim::Three, Some(z)) => {
                if z.dim != Dim::Three {
                    return Err(MinorsError::DimMismatch(dim, z.dim));
                }
                for i in 0..3 {
                    for a in 0..3 {
                        m.v[dim.z_index(i, a)] = z.get(i, a);
                    }
                }
            }
            (Dim::Two, None) => {}
            (_, Some(z)) => return Err(MinorsError::DimMismatch(dim, z.dim)),
            (_, None) => return Err(MinorsError::Length { expected: 19, got: 10 }),
        }
        m.v[dim.w_index()] = w;
        Ok(m)
    }

    pub fn dim(&self) -> Dim {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.dim.minors_len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v[..self.dim.minors_len()]
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        let n = self.dim.minors_len();
        &mut self.v[..n]
    }

    pub fn f_part(&self) -> Mat {
        Mat::from_fn(self.dim, |i, a| self.v[self.dim.f_index(i, a)])
    }

    pub fn z_part(&self) -> Option<Mat> {
        match self.dim {
            Dim::Two => None,
            Dim::Three => Some(Mat::from_fn(Dim::Three, |i, a| self.v[Dim::Three.z_index(i, a)])),
        }
    }

    pub fn w(&self) -> f64 {
        self.v[self.dim.w_index()]
    }

    pub fn dot(&self, other: &Minors) -> f64 {
        self.as_slice().iter().zip(other.as_slice()).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.as_slice().iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice().iter().all(|x| x.is_finite())
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(self.as_slice())
    }

    pub fn from_dvector(dim: Dim, v: &DVector<f64>) -> Result<Minors, MinorsError> {
        Minors::from_slice(dim, v.as_slice())
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &Minors) -> Minors {
        Minors::from_fn(self.dim, |k| self.v[k] + s * other.v[k])
    }
}

impl Index<usize> for Minors {
    type Output = f64;
    fn index(&self, k: usize) -> &f64 {
        &self.as_slice()[k]
    }
}

impl IndexMut<usize> for Minors {
    fn index_mut(&mut self, k: usize) -> &mut f64 {
        &mut self.as_mut_slice()[k]
    }
}

impl Add for Minors {
    type Output = Minors;
    fn add(self, rhs: Minors) -> Minors {
        Minors::from_fn(self.dim, |k| self.v[k] + rhs.v[k])
    }
}

impl Sub for Minors {
    type Output = Minors;
    fn sub(self, rhs: Minors) -> Minors {
        Minors::from_fn(self.dim, |k| self.v[k] - rhs.v[k])
    }
}

impl AddAssign for Minors {
    fn add_assign(&mut self, rhs: Minors) {
        for k in 0..self.dim.minors_len() {
            self.v[k] += rhs.v[k];
        }
    }
}

impl SubAssign for Minors {
    fn sub_assign(&mut self, rhs: Minors) {
        for k in 0..self.dim.minors_len() {
            self.v[k] -= rhs.v[k];
        }
    }
}

impl Mul<f64> for Minors {
    type Output = Minors;
    fn mul(self, s: f64) -> Minors {
        Minors::from_fn(self.dim, |k| s * self.v[k])
    }
}

impl Neg for Minors {
    type Output = Minors;
    fn neg(self) -> Minors {
        self * -1.0
    }
}

/// `Phi(F) = (F, cof F, det F)`, or `(F, det F)` for `d = 2`.
pub fn phi(f: &Mat) -> Minors {
    let dim = f.dim;
    let mut m = Minors::zeros(dim);
    let d = dim.d();
    for i in 0..d {
        for a in 0..d {
            m.v[dim.f_index(i, a)] = f.e[i][a];
        }
    }
    if dim == Dim::Three {
        let c = cofactor(f);
        for i in 0..3 {
            for a in 0..3 {
                m.v[dim.z_index(i, a)] = c.e[i][a];
            }
        }
    }
    m.v[dim.w_index()] = determinant(f);
    m
}

/// Full Jacobian `dPhi^A/dF_{ia}`; column index `i*d + a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiJacobian {
    dim: Dim,
    rows: [[f64; 9]; MAX_MINORS],
}

impl PhiJacobian {
    pub fn dim(&self) -> Dim {
        self.dim
    }

    #[inline]
    pub fn get(&self, row: usize, i: usize, a: usize) -> f64 {
        self.rows[row][i * self.dim.d() + a]
    }

    pub fn column(&self, a: usize) -> PhiColumn {
        let mut c = PhiColumn { dim: self.dim, c: [[0.0; 3]; MAX_MINORS] };
        for row in 0..self.dim.minors_len() {
            for i in 0..self.dim.d() {
                c.c[row][i] = self.get(row, i, a);
            }
        }
        c
    }

    /// `D x d^2` matrix.
    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        let d2 = self.dim.d() * self.dim.d();
        DMatrix::from_fn(self.dim.minors_len(), d2, |r, c| self.rows[r][c])
    }

    /// `S_{ia} = T^A dPhi^A/dF_{ia}`.
    pub fn contract(&self, t: &Minors) -> Mat {
        Mat::from_fn(self.dim, |i, a| {
            (0..self.dim.minors_len()).map(|r| t.v[r] * self.get(r, i, a)).sum()
        })
    }

    /// `Phi^A_{,ia} M_{ia}`.
    pub fn apply(&self, m: &Mat) -> Minors {
        Minors::from_fn(self.dim, |r| {
            let mut s = 0.0;
            for i in 0..self.dim.d() {
                for a in 0..self.dim.d() {
                    s += self.get(r, i, a) * m.get(i, a);
                }
            }
            s
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.rows.iter().flatten().fold(0.0_f64, |m, x| m.max(x.abs()))
    }
}

/// One material column `a` of the Jacobian: `c[A][i] = dPhi^A/dF_{ia}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiColumn {
    dim: Dim,
    c: [[f64; 3]; MAX_MINORS],
}

impl PhiColumn {
    #[inline]
    pub fn get(&self, row: usize, i: usize) -> f64 {
        self.c[row][i]
    }

    /// `T^A dPhi^A/dF_{ia}` for `i = 0..d`.
    pub fn contract(&self, t: &Minors) -> [f64; 3] {
        let mut s = [0.0; 3];
        for r in 0..self.dim.minors_len() {
            let tr = t.v[r];
            for (i, si) in s.iter_mut().enumerate() {
                *si += tr * self.c[r][i];
            }
        }
        s
    }

    /// `dPhi^A/dF_{ia} u_i`.
    pub fn apply(&self, u: &[f64; 3]) -> Minors {
        Minors::from_fn(self.dim, |r| self.c[r][0] * u[0] + self.c[r][1] * u[1] + self.c[r][2] * u[2])
    }

    pub fn norm(&self) -> f64 {
        self.c.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Column `a` of `dPhi/dF` without assembling the full Jacobian.
pub fn dphi_column(f: &Mat, a: usize) -> PhiColumn {
    let dim = f.dim;
    let d = dim.d();
    let mut c = PhiColumn { dim, c: [[0.0; 3]; MAX_MINORS] };
    for i in 0..d {
        c.c[dim.f_index(i, a)][i] = 1.0;
    }
    let cof = cofactor(f);
    let w = dim.w_index();
    for i in 0..d {
        c.c[w][i] = cof.e[i][a];
    }
    if dim == Dim::Three {
        // dZ_{jb}/dF_{ia} = eps_{jik} eps_{bag} F_{kg}, nonzero only for j != i and b != a
        for j in 0..3 {
            for b in 0..3 {
                if b == a {
                    continue;
                }
                let g = 3 - a - b;
                let row = dim.z_index(j, b);
                for i in 0..3 {
                    if i == j {
                        continue;
                    }
                    let k = 3 - i - j;
                    c.c[row][i] = levi(j, i, k) * levi(b, a, g) * f.e[k][g];
                }
            }
        }
    }
    c
}

/// Exact Jacobian of [`phi`].
pub fn dphi(f: &Mat) -> PhiJacobian {
    let dim = f.dim;
    let d = dim.d();
    let mut jac = PhiJacobian { dim, rows: [[0.0; 9]; MAX_MINORS] };
    for a in 0..d {
        let col = dphi_column(f, a);
        for r in 0..dim.minors_len() {
            for i in 0..d {
                jac.rows[r][i * d + a] = col.c[r][i];
            }
        }
    }
    jac
}

/// Motion `y(x) = A x + b + u(x)` sampled on a periodic grid with `u` periodic.
///
/// Axes beyond `d` have shape 1.
pub trait Motion: Sync {
    fn dim(&self) -> Dim;
    fn shape(&self) -> [usize; 3];
    /// Constant affine gradient `A`.
    fn background(&self) -> Mat;
    /// Periodic displacement `u` at grid node `idx`.
    fn displacement(&self, idx: [usize; 3]) -> [f64; 3];
}

/// Motion given by stored nodal displacements (row-major over `shape`).
#[derive(Debug, Clone)]
pub struct SampledMotion {
    pub dim: Dim,
    pub shape: [usize; 3],
    pub background: Mat,
    pub u: Vec<[f64; 3]>,
}

impl Motion for SampledMotion {
    fn dim(&self) -> Dim {
        self.dim
    }
    fn shape(&self) -> [usize; 3] {
        self.shape
    }
    fn background(&self) -> Mat {
        self.background
    }
    fn displacement(&self, idx: [usize; 3]) -> [f64; 3] {
        self.u[(idx[0] * self.shape[1] + idx[1]) * self.shape[2] + idx[2]]
    }
}

/// One separable mode `amplitude * prod_k sin(2 pi n_k x_k + phase_k)` added to `u_component`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrigMode {
    pub component: usize,
    pub amplitude: f64,
    pub wavenumbers: [u32; 3],
    pub phases: [f64; 3],
}

/// Sum of separable trigonometric modes on the unit periodic cube with `n` nodes per axis.
///
/// Factors with wavenumber 0 contribute `sin(phase)`.
#[derive(Debug, Clone)]
pub struct TrigMotion {
    dim: Dim,
    n: usize,
    background: Mat,
    modes: Vec<TrigMode>,
    tables: Vec<[Vec<f64>; 3]>,
}

impl TrigMotion {
    pub fn new(dim: Dim, n: usize, background: Mat, modes: Vec<TrigMode>) -> TrigMotion {
        let tables = modes
            .iter()
            .map(|m| {
                std::array::from_fn(|k| {
                    (0..n)
                        .map(|j| {
                            let x = j as f64 / n as f64;
                            (2.0 * std::f64::consts::PI * m.wavenumbers[k] as f64 * x + m.phases[k]).sin()
                        })
                        .collect()
                })
            })
            .collect();
        TrigMotion { dim, n, background, modes, tables }
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }
}

impl Motion for TrigMotion {
    fn dim(&self) -> Dim {
        self.dim
    }
    fn shape(&self) -> [usize; 3] {
        match self.dim {
            Dim::Two => [self.n, self.n, 1],
            Dim::Three => [self.n; 3],
        }
    }
    fn background(&self) -> Mat {
        self.background
    }
    fn displacement(&self, idx: [usize; 3]) -> [f64; 3] {
        let mut u = [0.0; 3];
        let d = self.dim.d();
        for (m, t) in self.modes.iter().zip(&self.tables) {
            let mut v = m.amplitude;
            for k in 0..d {
                v *= t[k][idx[k]];
            }
            u[m.component] += v;
        }
        u
    }
}

/// Max over `(A, i)` and nodes of `|sum_a D_a (dPhi^A/dF_{ia}(F_h))|` with centered differences `D_a`
/// and `F_h = A + D u`.
pub fn null_lagrangian_residual(motion: &dyn Motion, spacing: f64) -> Result<f64, MinorsError> {
    let dim = motion.dim();
    let d = dim.d();
    let shape = motion.shape();
    for (axis, &n) in shape.iter().enumerate().take(d) {
        if n < 4 {
            return Err(MinorsError::GridTooSmall { axis, n });
        }
    }
    if !spacing.is_finite() || spacing <= 0.0 {
        return Err(MinorsError::NonFinite("spacing"));
    }
    let n0 = shape[0];
    let chunks = rayon::current_num_threads().clamp(1, n0);
    let bounds: Vec<(usize, usize)> =
        (0..chunks).map(|c| (c * n0 / chunks, (c + 1) * n0 / chunks)).collect();
    use rayon::prelude::*;
    let maxima: Vec<Result<f64, MinorsError>> = bounds
        .par_iter()
        .map(|&(lo, hi)| residual_slabs(motion, spacing, lo, hi))
        .collect();
    let mut worst = 0.0_f64;
    for m in maxima {
        worst = worst.max(m?);
    }
    Ok(worst)
}

fn residual_slabs(motion: &dyn Motion, h: f64, lo: usize, hi: usize) -> Result<f64, MinorsError> {
    let dim = motion.dim();
    let d = dim.d();
    let [n0, n1, n2] = motion.shape();
    let slab = n1 * n2;
    let bg = motion.background();
    let wrap = |i: isize, n: usize| -> usize { i.rem_euclid(n as isize) as usize };
    let u_slab = |i0: usize| -> Vec<[f64; 3]> {
        let mut s = Vec::with_capacity(slab);
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                s.push(motion.displacement([i0, i1, i2]));
            }
        }
        s
    };
    let inv2h = 0.5 / h;
    let next1: Vec<usize> = (0..n1).map(|i| (i + 1) % n1).collect();
    let prev1: Vec<usize> = (0..n1).map(|i| (i + n1 - 1) % n1).collect();
    let next2: Vec<usize> = (0..n2).map(|i| (i + 1) % n2).collect();
    let prev2: Vec<usize> = (0..n2).map(|i| (i + n2 - 1) % n2).collect();
    // F on slab i0 from displacement slabs i0-1, i0, i0+1
    let f_slab = |um: &[[f64; 3]], u0: &[[f64; 3]], up: &[[f64; 3]]| -> Result<Vec<Mat>, MinorsError> {
        let mut out = Vec::with_capacity(slab);
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                let p = i1 * n2 + i2;
                let mut f = bg;
                let p1p = next1[i1] * n2 + i2;
                let p1m = prev1[i1] * n2 + i2;
                let p2p = i1 * n2 + next2[i2];
                let p2m = i1 * n2 + prev2[i2];
                for j in 0..d {
                    f.e[j][0] += (up[p][j] - um[p][j]) * inv2h;
                    f.e[j][1] += (u0[p1p][j] - u0[p1m][j]) * inv2h;
                    if d == 3 {
                        f.e[j][2] += (u0[p2p][j] - u0[p2m][j]) * inv2h;
                    }
                }
                if !f.is_finite() {
                    return Err(MinorsError::NonFinite("motion"));
                }
                out.push(f);
            }
        }
        Ok(out)
    };

    // displacement slabs lo-3..=lo+1; shifted to i0-2..=i0+2 at the top of each iteration
    let mut u: Vec<Vec<[f64; 3]>> =
        (-3..=1).map(|o| u_slab(wrap(lo as isize + o, n0))).collect();
    let mut fm: Vec<Mat>;
    let mut f0 = f_slab(&u[1], &u[2], &u[3])?;
    let mut fp = f_slab(&u[2], &u[3], &u[4])?;
    let mut worst = 0.0_f64;
    let rows = dim.minors_len();
    for i0 in lo..hi {
        u.remove(0);
        u.push(u_slab(wrap(i0 as isize + 2, n0)));
        let next = f_slab(&u[2], &u[3], &u[4])?;
        fm = std::mem::replace(&mut f0, std::mem::replace(&mut fp, next));
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                let p = i1 * n2 + i2;
                let mut div = [[0.0_f64; 3]; MAX_MINORS];
                accumulate_column_difference(&fp[p], &fm[p], 0, inv2h, &mut div);
                let p1p = next1[i1] * n2 + i2;
                let p1m = prev1[i1] * n2 + i2;
                accumulate_column_difference(&f0[p1p], &f0[p1m], 1, inv2h, &mut div);
                if d == 3 {
                    let p2p = i1 * n2 + next2[i2];
                    let p2m = i1 * n2 + prev2[i2];
                    accumulate_column_difference(&f0[p2p], &f0[p2m], 2, inv2h, &mut div);
                }
                for row in div.iter().take(rows) {
                    for v in row.iter().take(d) {
                        let a = v.abs();
                        if a > worst {
                            worst = a;
                        }
                    }
                }
            }
        }
    }
    Ok(worst)
}

/// Adds `scale * (dphi_column(plus, a) - dphi_column(minus, a))` to `div`.
///
/// The `F` rows are constant and the `Z` rows are linear with coefficients `+-1`, so their
/// difference is formed from `plus - minus` directly; the result equals the explicit
/// difference bit for bit.
#[inline(always)]
fn accumulate_column_difference(
    plus: &Mat,
    minus: &Mat,
    a: usize,
    scale: f64,
    div: &mut [[f64; 3]; MAX_MINORS],
) {
    let dim = plus.dim;
    let w = dim.w_index();
    match dim {
        Dim::Two => {
            let cp = cofactor(plus);
            let cm = cofactor(minus);
            for i in 0..2 {
                div[w][i] += (cp.e[i][a] - cm.e[i][a]) * scale;
            }
        }
        Dim::Three => {
            let (a1, a2) = ((a + 1) % 3, (a + 2) % 3);
            for i in 0..3 {
                let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
                let cp = plus.e[i1][a1] * plus.e[i2][a2] - plus.e[i1][a2] * plus.e[i2][a1];
                let cm = minus.e[i1][a1] * minus.e[i2][a2] - minus.e[i1][a2] * minus.e[i2][a1];
                div[w][i] += (cp - cm) * scale;
            }
            for &(row, i, k, g, s) in &Z_TERMS[a] {
                div[row][i] += (s * plus.e[k][g] - s * minus.e[k][g]) * scale;
            }
        }
    }
}

/// Nonzero entries `(row, i, k, g, sign)` of `dZ/dF_{.a}`: `dZ_{jb}/dF_{ia} = sign * F_{kg}`.
const Z_TERMS: [[(usize, usize, usize, usize, f64); 12]; 3] = {
    let mut t = [[(0, 0, 0, 0, 0.0); 12]; 3];
    let mut a = 0;
    while a < 3 {
        let mut n = 0;
        let mut j = 0;
        while j < 3 {
            let mut b = 0;
            while b < 3 {
                if b != a {
                    let g = 3 - a - b;
                    let mut i = 0;
                    while i < 3 {
                        if i != j {
                            let k = 3 - i - j;
                            t[a][n] = (9 + 3 * j + b, i, k, g, levi(j, i, k) * levi(b, a, g));
                            n += 1;
                        }
                        i += 1;
                    }
                }
                b += 1;
            }
            j += 1;
        }
        a += 1;
    }
    t
};

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, dim: Dim, scale: f64) -> Mat {
        Mat::from_fn(dim, |_, _| rng.random_range(-scale..scale))
    }

    // determinant by Laplace expansion along the first row
    fn laplace_det(m: &[Vec<f64>]) -> f64 {
        let n = m.len();
        if n == 1 {
            return m[0][0];
        }
        (0..n)
            .map(|c| {
                let minor: Vec<Vec<f64>> =
                    m[1..].iter().map(|r| r.iter().enumerate().filter(|(k, _)| *k != c).map(|(_, x)| *x).collect()).collect();
                let s = if c % 2 == 0 { 1.0 } else { -1.0 };
                s * m[0][c] * laplace_det(&minor)
            })
            .sum()
    }

    fn rows_of(f: &Mat) -> Vec<Vec<f64>> {
        let d = f.dim().d();
        (0..d).map(|i| (0..d).map(|a| f.get(i, a)).collect()).collect()
    }

    fn eps_cofactor(f: &Mat) -> Mat {
        Mat::from_fn(Dim::Three, |i, a| {
            let mut s = 0.0;
            for j in 0..3 {
                for k in 0..3 {
                    for b in 0..3 {
                        for g in 0..3 {
                            s += 0.5 * levi(i, j, k) * levi(a, b, g) * f.get(j, b) * f.get(k, g);
                        }
                    }
                }
            }
            s
        })
    }

    fn eps_det(f: &Mat) -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for a in 0..3 {
                        for b in 0..3 {
                            for g in 0..3 {
                                s += levi(i, j, k) * levi(a, b, g) * f.get(i, a) * f.get(j, b) * f.get(k, g);
                            }
                        }
                    }
                }
            }
        }
        s / 6.0
    }

    #[test]
    fn determinant_of_identity_and_diagonal() {
        assert_eq!(determinant(&Mat::identity(Dim::Three)), 1.0);
        assert_eq!(determinant(&Mat::diag(Dim::Three, &[1.0, 2.0, 3.0]).unwrap()), 6.0);
        assert_eq!(determinant(&Mat::identity(Dim::Two)), 1.0);
    }

    #[test]
    fn determinant_matches_laplace_and_epsilon_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let f = random_mat(&mut rng, Dim::Three, 2.0);
            let det = determinant(&f);
            let lap = laplace_det(&rows_of(&f));
            assert!((det - lap).abs() <= 1e-14 * lap.abs().max(1.0));
            assert!((det - eps_det(&f)).abs() <= 1e-13 * lap.abs().max(1.0));
        }
    }

    #[test]
    fn cofactor_cases() {
        let i3 = Mat::identity(Dim::Three);
        assert_eq!(cofactor(&i3), i3);
        let c = cofactor(&Mat::diag(Dim::Three, &[1.0, 2.0, 3.0]).unwrap());
        assert_eq!(c, Mat::diag(Dim::Three, &[6.0, 3.0, 2.0]).unwrap());
        let f2 = Mat::from_row_major(Dim::Two, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(cofactor(&f2).row_major(), vec![4.0, -3.0, -2.0, 1.0]);
    }

    #[test]
    fn cofactor_matches_epsilon_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let f = random_mat(&mut rng, Dim::Three, 2.0);
            let a = cofactor(&f);
            let b = eps_cofactor(&f);
            assert!((a - b).max_abs() <= 1e-13);
        }
    }

    #[test]
    fn phi_blocks() {
        let f = Mat::diag(Dim::Three, &[1.0, 2.0, 3.0]).unwrap();
        let m = phi(&f);
        assert_eq!(m.f_part(), f);
        assert_eq!(m.z_part().unwrap(), Mat::diag(Dim::Three, &[6.0, 3.0, 2.0]).unwrap());
        assert_eq!(m.w(), 6.0);
        let m2 = phi(&Mat::identity(Dim::Two));
        assert_eq!(m2.as_slice(), &[1.0, 0.0, 0.0, 1.0, 1.0]);
        assert!(m2.z_part().is_none());
    }

    #[test]
    fn phi_flat_layout_matches_minor_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f = random_mat(&mut rng, Dim::Three, 1.5);
        let m = phi(&f);
        let r = rows_of(&f);
        for i in 0..3 {
            for a in 0..3 {
                assert_eq!(m[3 * i + a], f.get(i, a));
                // signed complementary 2x2 minor
                let rows: Vec<usize> = (0..3).filter(|&k| k != i).collect();
                let cols: Vec<usize> = (0..3).filter(|&k| k != a).collect();
                let minor = r[rows[0]][cols[0]] * r[rows[1]][cols[1]] - r[rows[0]][cols[1]] * r[rows[1]][cols[0]];
                let sign = if (i + a) % 2 == 0 { 1.0 } else { -1.0 };
                assert!((m[9 + 3 * i + a] - sign * minor).abs() < 1e-14);
            }
        }
        assert!((m[18] - laplace_det(&r)).abs() < 1e-13);
    }

    #[test]
    fn minors_roundtrip_between_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for dim in [Dim::Two, Dim::Three] {
            let vals: Vec<f64> = (0..dim.minors_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m = Minors::from_slice(dim, &vals).unwrap();
            let back = Minors::from_parts(&m.f_part(), m.z_part().as_ref(), m.w()).unwrap();
            assert_eq!(back, m);
            assert_eq!(Minors::from_dvector(dim, &m.to_dvector()).unwrap(), m);
        }
        assert!(Minors::from_slice(Dim::Three, &[0.0; 5]).is_err());
    }

    fn fd_check(f: &Mat) -> f64 {
        let h = 1e-6;
        let jac = dphi(f);
        let d = f.dim().d();
        let mut worst = 0.0_f64;
        for i in 0..d {
            for a in 0..d {
                let mut fp = *f;
                let mut fm = *f;
                fp.set(i, a, f.get(i, a) + h);
                fm.set(i, a, f.get(i, a) - h);
                let diff = (phi(&fp) - phi(&fm)) * (0.5 / h);
                for r in 0..f.dim().minors_len() {
                    worst = worst.max((diff[r] - jac.get(r, i, a)).abs());
                }
            }
        }
        worst
    }

    #[test]
    fn dphi_structure_at_identity() {
        let jac = dphi(&Mat::identity(Dim::Three));
        for r in 0..9 {
            for c in 0..9 {
                assert_eq!(jac.rows[r][c], if r == c { 1.0 } else { 0.0 });
            }
        }
        let w_row: Vec<f64> = (0..9).map(|c| jac.rows[18][c]).collect();
        assert_eq!(w_row, Mat::identity(Dim::Three).row_major());
    }

    #[test]
    fn dphi_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for dim in [Dim::Two, Dim::Three] {
            for _ in 0..50 {
                let f = random_mat(&mut rng, dim, 2.0);
                assert!(fd_check(&f) < 1e-6);
            }
        }
    }

    #[test]
    fn contract_and_apply_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let f = random_mat(&mut rng, Dim::Three, 1.0);
        let t = Minors::from_fn(Dim::Three, |_| rng.random_range(-1.0..1.0));
        let m = random_mat(&mut rng, Dim::Three, 1.0);
        let jac = dphi(&f);
        let lhs = jac.contract(&t).frob_dot(&m);
        let rhs = t.dot(&jac.apply(&m));
        assert!((lhs - rhs).abs() < 1e-13);
        let col = jac.column(0);
        let s = col.contract(&t);
        let full = jac.contract(&t);
        for i in 0..3 {
            assert!((s[i] - full.get(i, 0)).abs() < 1e-14);
        }
    }

    #[test]
    fn column_difference_equals_explicit_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for dim in [Dim::Two, Dim::Three] {
            for a in 0..dim.d() {
                let p = random_mat(&mut rng, dim, 2.0);
                let m = random_mat(&mut rng, dim, 2.0);
                let mut div = [[0.0; 3]; MAX_MINORS];
                accumulate_column_difference(&p, &m, a, 0.75, &mut div);
                let (cp, cm) = (dphi_column(&p, a), dphi_column(&m, a));
                for r in 0..dim.minors_len() {
                    for i in 0..dim.d() {
                        assert_eq!(div[r][i], (cp.get(r, i) - cm.get(r, i)) * 0.75);
                    }
                }
            }
        }
    }

    fn smooth_3d(n: usize) -> TrigMotion {
        let modes = vec![
            TrigMode { component: 0, amplitude: 0.05, wavenumbers: [1, 1, 1], phases: [0.3, 1.1, 0.7] },
            TrigMode { component: 1, amplitude: 0.04, wavenumbers: [1, 2, 1], phases: [1.3, 0.2, 0.4] },
            TrigMode { component: 2, amplitude: 0.06, wavenumbers: [2, 1, 1], phases: [0.5, 0.9, 1.7] },
        ];
        TrigMotion::new(Dim::Three, n, Mat::identity(Dim::Three), modes)
    }

    #[test]
    fn affine_motion_has_zero_residual() {
        let a = Mat::from_row_major(Dim::Three, &[1.1, 0.2, 0.0, -0.1, 0.9, 0.3, 0.05, 0.0, 1.2]).unwrap();
        let motion = TrigMotion::new(Dim::Three, 8, a, vec![]);
        assert_eq!(null_lagrangian_residual(&motion, 0.125).unwrap(), 0.0);
    }

    #[test]
    fn column_only_motion_is_exactly_null() {
        // F varies only in its first column: every row of dPhi/dF is linear along the difference direction
        let modes = vec![TrigMode { component: 0, amplitude: 0.1 / (2.0 * std::f64::consts::PI), wavenumbers: [1, 0, 0], phases: [0.0, std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2] }];
        let motion = TrigMotion::new(Dim::Three, 16, Mat::identity(Dim::Three), modes);
        assert!(null_lagrangian_residual(&motion, 1.0 / 16.0).unwrap() < 1e-13);
    }

    #[test]
    fn residual_decays_at_second_order_in_3d() {
        let r32 = null_lagrangian_residual(&smooth_3d(32), 1.0 / 32.0).unwrap();
        let r64 = null_lagrangian_residual(&smooth_3d(64), 1.0 / 64.0).unwrap();
        assert!(r32 > 1e-8);
        let order = (r32 / r64).log2();
        assert!(order > 1.85, "order {order}");
    }

    #[test]
    fn planar_motion_residual_is_round_off() {
        let modes = vec![
            TrigMode { component: 0, amplitude: 0.05, wavenumbers: [1, 1, 0], phases: [0.3, 1.1, 0.0] },
            TrigMode { component: 1, amplitude: 0.04, wavenumbers: [2, 1, 0], phases: [1.3, 0.2, 0.0] },
        ];
        let m = TrigMotion::new(Dim::Two, 32, Mat::identity(Dim::Two), modes);
        assert!(null_lagrangian_residual(&m, 1.0 / 32.0).unwrap() < 1e-12);
    }

    #[test]
    fn tiny_grid_is_rejected() {
        let m = TrigMotion::new(Dim::Three, 3, Mat::identity(Dim::Three), vec![]);
        assert_eq!(null_lagrangian_residual(&m, 1.0 / 3.0), Err(MinorsError::GridTooSmall { axis: 0, n: 3 }));
    }

    #[test]
    fn sampled_motion_matches_trig_motion() {
        let t = smooth_3d(8);
        let mut u = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..8 {
                    u.push(t.displacement([i, j, k]));
                }
            }
        }
        let s = SampledMotion { dim: Dim::Three, shape: [8; 3], background: Mat::identity(Dim::Three), u };
        assert_eq!(null_lagrangian_residual(&s, 0.125).unwrap(), null_lagrangian_residual(&t, 0.125).unwrap());
    }

    proptest! {
        #[test]
        fn cofactor_identity_holds(vals in proptest::collection::vec(-5.0f64..5.0, 9)) {
            let f = Mat::from_row_major(Dim::Three, &vals).unwrap();
            let det = determinant(&f);
            let prod = f.matmul(&cofactor(&f).transpose());
            let scale = f.max_abs().powi(3).max(1.0);
            for i in 0..3 {
                for a in 0..3 {
                    let expect = if i == a { det } else { 0.0 };
                    prop_assert!((prod.get(i, a) - expect).abs() <= 1e-13 * scale);
                }
            }
            prop_assert!((det - cofactor(&f).frob_dot(&f) / 3.0).abs() <= 1e-13 * scale);
        }

        #[test]
        fn cofactor_identity_holds_2d(vals in proptest::collection::vec(-5.0f64..5.0, 4)) {
            let f = Mat::from_row_major(Dim::Two, &vals).unwrap();
            let prod = f.matmul(&cofactor(&f).transpose());
            let det = determinant(&f);
            prop_assert!((prod.get(0, 0) - det).abs() < 1e-12);
            prop_assert!((prod.get(1, 1) - det).abs() < 1e-12);
            prop_assert!(prod.get(0, 1).abs() < 1e-12 && prod.get(1, 0).abs() < 1e-12);
        }

        #[test]
        fn dphi_matches_differences_on_bounded_inputs(vals in proptest::collection::vec(-5.7f64..5.7, 9)) {
            // entries bounded so that the Frobenius norm stays below 10 after scaling
            let f = Mat::from_row_major(Dim::Three, &vals).unwrap();
            let f = if f.norm() > 10.0 { f.scale(10.0 / f.norm()) } else { f };
            prop_assert!(fd_check(&f) < 1e-6);
        }
    }
}

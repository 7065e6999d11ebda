//! C ABI for the polyrelax core.
//!
//! Objects cross the boundary as opaque handles created by `*_new` and released by `*_free`.
//! Every fallible call returns a [`PrStatus`]; on failure the message is kept per thread and read
//! back with [`pr_last_error`]. Matrices are row-major `d x d`, minors vectors have length
//! `pr_minors_len(d)`. Panics are caught at the boundary and reported as `PR_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use polyrelax::constitutive::{builtin_model, default_box, ConstitutiveModel, ModelParams};
use polyrelax::diagnostics::chapman_enskog_tensor;
use polyrelax::dynamics::{
    advance_relax_to, init_from_motion, total_entropy, Numerics, Reconstruction, SineMode, SlabGrid, SlabMotion, RelaxState, TauInit,
};
use polyrelax::entropy::{build_g, EntropyStructure};
use polyrelax::gasdyn::{builtin_gas, check_a_conditions, entropy_h, gas_dissipation, GasModel, GasParams};
use polyrelax::minors::{phi, Dim, Mat, Minors};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Model = 4,
    Entropy = 5,
    Dynamics = 6,
    Gas = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Failure(PrStatus, String);

type FfiResult = Result<(), Failure>;

fn fail(status: PrStatus, msg: impl std::fmt::Display) -> Failure {
    Failure(status, msg.to_string())
}

/// Runs `body` behind the unwind guard and maps its outcome to a status.
fn guard(body: impl FnOnce() -> FfiResult) -> PrStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            PrStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("panic: {msg}"));
            PrStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(fail(PrStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len < need {
        return Err(fail(PrStatus::BufferTooSmall, format!("{what} holds {len}, needs {need}")));
    }
    if ptr.is_null() {
        return Err(fail(PrStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| fail(PrStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| fail(PrStatus::NullPointer, format!("{what} is null")))
}

unsafe fn string(ptr: *const c_char, what: &str) -> Result<String, Failure> {
    if ptr.is_null() {
        return Err(fail(PrStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(ptr).to_str().map(str::to_owned).map_err(|_| fail(PrStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn params(names: *const *const c_char, values: *const f64, n: usize) -> Result<std::collections::BTreeMap<String, f64>, Failure> {
    let names = slice(names, n, "param_names")?;
    let values = slice(values, n, "param_values")?;
    let mut p = std::collections::BTreeMap::new();
    for (k, (&name, &v)) in names.iter().zip(values).enumerate() {
        p.insert(string(name, &format!("param_names[{k}]"))?, v);
    }
    Ok(p)
}

fn dim_of(d: u32) -> Result<Dim, Failure> {
    Dim::new(d as usize).map_err(|e| fail(PrStatus::InvalidArgument, e))
}

fn mat_of(dim: Dim, values: &[f64]) -> Result<Mat, Failure> {
    Mat::from_row_major(dim, values).map_err(|e| fail(PrStatus::InvalidArgument, e))
}

fn minors_of(dim: Dim, values: &[f64]) -> Result<Minors, Failure> {
    Minors::from_slice(dim, values).map_err(|e| fail(PrStatus::InvalidArgument, e))
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

unsafe fn release<T>(ptr: *mut T) {
    if !ptr.is_null() {
        drop(Box::from_raw(ptr));
    }
}

/// Copies the calling thread's last error message (NUL terminated, truncated to fit) into `buf`
/// and returns the full message length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pr_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Length of the minors vector in dimension `d` (5 for d = 2, 19 for d = 3; 0 otherwise).
#[no_mangle]
pub extern "C" fn pr_minors_len(d: u32) -> usize {
    Dim::new(d as usize).map(|dim| dim.minors_len()).unwrap_or(0)
}

/// Writes the minors `(F, cof F, det F)` of the row-major `d x d` matrix `f`.
///
/// # Safety
/// `f` must point to `d * d` doubles and `out` to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pr_phi(d: u32, f: *const f64, out: *mut f64, out_len: usize) -> PrStatus {
    guard(|| {
        let dim = dim_of(d)?;
        let f = mat_of(dim, slice(f, dim.d() * dim.d(), "f")?)?;
        let x = phi(&f);
        slice_mut(out, out_len, x.len(), "out")?[..x.len()].copy_from_slice(x.as_slice());
        Ok(())
    })
}

/// Constitutive pair `(sigma_I, sigma_E)` of a built-in family.
pub struct PrModel {
    model: ConstitutiveModel,
}

/// Builds the built-in family `family` (`quadratic`, `polyquad`, `gas-lagrangean`) in
/// dimension `d` with `n_params` named parameters; unnamed parameters take their defaults.
///
/// # Safety
/// `family` must be a NUL-terminated string; `param_names` and `param_values` must each hold
/// `n_params` entries; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pr_model_new(
    family: *const c_char,
    d: u32,
    param_names: *const *const c_char,
    param_values: *const f64,
    n_params: usize,
    out: *mut *mut PrModel,
) -> PrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let family = string(family, "family")?;
        let p: ModelParams = params(param_names, param_values, n_params)?;
        let model = builtin_model(&family, dim_of(d)?, &p).map_err(|e| fail(PrStatus::Model, e))?;
        *out = boxed(PrModel { model });
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`pr_model_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pr_model_free(model: *mut PrModel) {
    release(model)
}

/// Spatial dimension of the model (2 or 3), or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pr_model_dim(model: *const PrModel) -> u32 {
    model.as_ref().map(|m| m.model.dim().d() as u32).unwrap_or(0)
}

/// Chapman-Enskog tensor `D` at `F` as a row-major `d^2 x d^2` matrix indexed by `(i d + a, j d + b)`,
/// and its smallest eigenvalue.
///
/// # Safety
/// `f` must hold `d * d` doubles, `out` `out_len` writable doubles, `lambda_min` be writable.
#[no_mangle]
pub unsafe extern "C" fn pr_chapman_enskog(
    model: *const PrModel,
    f: *const f64,
    out: *mut f64,
    out_len: usize,
    lambda_min: *mut f64,
) -> PrStatus {
    guard(|| {
        let m = &handle(model, "model")?.model;
        let dim = m.dim();
        let d2 = dim.d() * dim.d();
        let f = mat_of(dim, slice(f, d2, "f")?)?;
        let lmin = out_ptr(lambda_min, "lambda_min")?;
        let ce = chapman_enskog_tensor(m, &f);
        let buf = slice_mut(out, out_len, d2 * d2, "out")?;
        for r in 0..d2 {
            for c in 0..d2 {
                buf[r * d2 + c] = ce.matrix[(r, c)];
            }
        }
        *lmin = ce.lambda_min;
        Ok(())
    })
}

/// Entropy structure: the integrating factor `G` and `Psi(Xi, tau) = sigma_I(Xi) + tau . Xi + G(tau)`.
pub struct PrEntropy {
    structure: EntropyStructure,
}

/// Builds `G` for `model` on its default sample box. The model handle may be freed afterwards.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pr_entropy_new(model: *const PrModel, out: *mut *mut PrEntropy) -> PrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = &handle(model, "model")?.model;
        let structure = build_g(m, &default_box(m), &m.reference()).map_err(|e| fail(PrStatus::Entropy, e))?;
        *out = boxed(PrEntropy { structure });
        Ok(())
    })
}

/// # Safety
/// `entropy` must be null or a handle from [`pr_entropy_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pr_entropy_free(entropy: *mut PrEntropy) {
    release(entropy)
}

/// `G(tau)`.
///
/// # Safety
/// `tau` must hold `len` doubles (the minors length) and `value` be writable.
#[no_mangle]
pub unsafe extern "C" fn pr_entropy_g(entropy: *const PrEntropy, tau: *const f64, len: usize, value: *mut f64) -> PrStatus {
    guard(|| {
        let st = &handle(entropy, "entropy")?.structure;
        let tau = minors_of(st.model().dim(), slice(tau, len, "tau")?)?;
        let v = st.g_value(&tau, None).map_err(|e| fail(PrStatus::Entropy, e))?;
        *out_ptr(value, "value")? = v;
        Ok(())
    })
}

/// `Psi(Xi, tau)` and the dissipation `D(Xi, tau) = (tau + grad Sigma(Xi)) . (Xi + grad G(tau))`.
///
/// # Safety
/// `xi` and `tau` must hold `len` doubles; `psi` and `dissipation` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pr_entropy_psi(
    entropy: *const PrEntropy,
    xi: *const f64,
    tau: *const f64,
    len: usize,
    psi: *mut f64,
    dissipation: *mut f64,
) -> PrStatus {
    guard(|| {
        let st = &handle(entropy, "entropy")?.structure;
        let dim = st.model().dim();
        let xi = minors_of(dim, slice(xi, len, "xi")?)?;
        let tau = minors_of(dim, slice(tau, len, "tau")?)?;
        let gp = st.g_point(&tau, None).map_err(|e| fail(PrStatus::Entropy, e))?;
        let (p, d) = (st.psi_with(&xi, &gp), st.dissipation_with(&xi, &gp));
        *out_ptr(psi, "psi")? = p;
        *out_ptr(dissipation, "dissipation")? = d;
        Ok(())
    })
}

/// Initial data of a slab run: `y_1 = x_1 + amplitude sin(2 pi k x_1) e_1` on the unit interval,
/// velocity `velocity_amplitude cos(2 pi k x_1) e_1`, equilibrium stresses.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PrSlabSpec {
    pub n_cells: usize,
    pub wavenumber: u32,
    pub amplitude: f64,
    pub velocity_amplitude: f64,
    pub eps: f64,
    pub cfl: f64,
    /// 0 first order, 1 minmod MUSCL.
    pub muscl: u32,
    pub w_min: f64,
}

/// Relaxation run in slab geometry that owns copies of the model and entropy structure.
pub struct PrSlab {
    model: ConstitutiveModel,
    structure: EntropyStructure,
    state: RelaxState,
    eps: f64,
    numerics: Numerics,
    dissipation: f64,
    steps: usize,
}

/// Starts a relaxation run at `t = 0`.
///
/// # Safety
/// `model` and `entropy` must be live handles built from the same model; `spec` readable;
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pr_slab_new(
    model: *const PrModel,
    entropy: *const PrEntropy,
    spec: *const PrSlabSpec,
    out: *mut *mut PrSlab,
) -> PrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = &handle(model, "model")?.model;
        let st = &handle(entropy, "entropy")?.structure;
        let spec = *handle(spec, "spec")?;
        if st.model().dim() != m.dim() {
            return Err(fail(PrStatus::InvalidArgument, "entropy was built for another dimension"));
        }
        if !(spec.eps.is_finite() && spec.eps > 0.0) {
            return Err(fail(PrStatus::InvalidArgument, format!("eps must be positive, got {}", spec.eps)));
        }
        if !(spec.cfl > 0.0 && spec.cfl <= 1.0) {
            return Err(fail(PrStatus::InvalidArgument, format!("cfl must lie in (0, 1], got {}", spec.cfl)));
        }
        if spec.wavenumber == 0 || spec.muscl > 1 {
            return Err(fail(PrStatus::InvalidArgument, "wavenumber must be >= 1 and muscl 0 or 1"));
        }
        let grid = SlabGrid::unit(spec.n_cells).map_err(|e| fail(PrStatus::InvalidArgument, e))?;
        let k = spec.wavenumber;
        let motion = SlabMotion {
            background: Mat::identity(m.dim()),
            displacement: vec![SineMode { component: 0, amplitude: spec.amplitude, wavenumber: k, phase: 0.0 }],
            velocity: vec![SineMode {
                component: 0,
                amplitude: spec.velocity_amplitude,
                wavenumber: k,
                phase: std::f64::consts::FRAC_PI_2,
            }],
        };
        let state = init_from_motion(&grid, &motion, m, TauInit::Prepared, spec.w_min).map_err(|e| fail(PrStatus::Dynamics, e))?;
        let reconstruction = if spec.muscl == 1 { Reconstruction::Muscl } else { Reconstruction::FirstOrder };
        let numerics = Numerics { cfl: spec.cfl, reconstruction, w_min: spec.w_min };
        *out = boxed(PrSlab { model: m.clone(), structure: st.clone(), state, eps: spec.eps, numerics, dissipation: 0.0, steps: 0 });
        Ok(())
    })
}

/// # Safety
/// `slab` must be null or a handle from [`pr_slab_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pr_slab_free(slab: *mut PrSlab) {
    release(slab)
}

/// Advances the run to `t_target >= t`. On failure the run keeps its previous state.
///
/// # Safety
/// `slab` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pr_slab_advance(slab: *mut PrSlab, t_target: f64) -> PrStatus {
    guard(|| {
        let s = slab.as_mut().ok_or_else(|| fail(PrStatus::NullPointer, "slab is null"))?;
        if !(t_target.is_finite() && t_target >= s.state.t) {
            return Err(fail(PrStatus::InvalidArgument, format!("t_target {t_target} precedes t = {}", s.state.t)));
        }
        let (next, diss, steps) = advance_relax_to(&s.model, Some(&s.structure), s.state.clone(), t_target, s.eps, &s.numerics)
            .map_err(|e| fail(PrStatus::Dynamics, e))?;
        s.state = next;
        s.dissipation += diss;
        s.steps += steps;
        Ok(())
    })
}

/// Scalar diagnostics of a slab run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PrSlabStats {
    pub t: f64,
    pub steps: usize,
    /// `sum (|v|^2 / 2 + Psi) dx`.
    pub entropy: f64,
    /// Accumulated `int sum D / eps dx dt`.
    pub dissipation: f64,
    pub min_det: f64,
}

/// # Safety
/// `slab` must be a live handle and `stats` writable.
#[no_mangle]
pub unsafe extern "C" fn pr_slab_stats(slab: *const PrSlab, stats: *mut PrSlabStats) -> PrStatus {
    guard(|| {
        let s = handle(slab, "slab")?;
        let out = out_ptr(stats, "stats")?;
        let entropy = total_entropy(&s.structure, &s.state).map_err(|e| fail(PrStatus::Dynamics, e))?;
        *out = PrSlabStats { t: s.state.t, steps: s.steps, entropy, dissipation: s.dissipation, min_det: s.state.min_det() };
        Ok(())
    })
}

/// Copies the cell values of `F_{.1}` (3 per cell, `n_cells * 3` doubles) into `out`.
///
/// # Safety
/// `slab` must be a live handle and `out` hold `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pr_slab_f1(slab: *const PrSlab, out: *mut f64, out_len: usize) -> PrStatus {
    guard(|| {
        let s = handle(slab, "slab")?;
        let n = s.state.f1.len();
        let buf = slice_mut(out, out_len, 3 * n, "out")?;
        for (j, c) in s.state.f1.iter().enumerate() {
            buf[3 * j..3 * j + 3].copy_from_slice(c);
        }
        Ok(())
    })
}

/// Two-pressure gas model of a built-in family.
pub struct PrGas {
    gas: GasModel,
}

/// # Safety
/// `family` must be a NUL-terminated string; the parameter arrays hold `n_params` entries;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pr_gas_new(
    family: *const c_char,
    param_names: *const *const c_char,
    param_values: *const f64,
    n_params: usize,
    out: *mut *mut PrGas,
) -> PrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let family = string(family, "family")?;
        let p: GasParams = params(param_names, param_values, n_params)?;
        let gas = builtin_gas(&family, &p).map_err(|e| fail(PrStatus::Gas, e))?;
        *out = boxed(PrGas { gas });
        Ok(())
    })
}

/// # Safety
/// `gas` must be null or a handle from [`pr_gas_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pr_gas_free(gas: *mut PrGas) {
    release(gas)
}

/// Entropy `H(rho, m, rho tau)` and dissipation `D(rho, tau)` of the gas system.
///
/// # Safety
/// `gas` must be a live handle; `h` and `dissipation` writable.
#[no_mangle]
pub unsafe extern "C" fn pr_gas_entropy(
    gas: *const PrGas,
    rho: f64,
    m: f64,
    tau: f64,
    h: *mut f64,
    dissipation: *mut f64,
) -> PrStatus {
    guard(|| {
        let g = &handle(gas, "gas")?.gas;
        if !(rho > 0.0 && tau > 0.0 && m.is_finite()) {
            return Err(fail(PrStatus::InvalidArgument, format!("need rho > 0 and tau > 0, got rho = {rho}, tau = {tau}")));
        }
        *out_ptr(h, "h")? = entropy_h(g, rho, m, tau);
        *out_ptr(dissipation, "dissipation")? = gas_dissipation(g, rho, tau);
        Ok(())
    })
}

/// Sampled `(a0)`-`(a3)` certificate: `margins[k]` is the smallest margin of `(a_k)`,
/// `passed` a bit set with bit `k` set when `(a_k)` holds.
///
/// # Safety
/// `gas` must be a live handle; `margins` must hold 4 writable doubles and `passed` be writable.
#[no_mangle]
pub unsafe extern "C" fn pr_gas_certificate(
    gas: *const PrGas,
    n_samples: usize,
    seed: u64,
    margins: *mut f64,
    passed: *mut u32,
) -> PrStatus {
    guard(|| {
        let g = &handle(gas, "gas")?.gas;
        if n_samples == 0 {
            return Err(fail(PrStatus::InvalidArgument, "n_samples must be >= 1"));
        }
        let c = check_a_conditions(g, n_samples, seed);
        let conds = [&c.a0, &c.a1, &c.a2, &c.a3];
        let buf = slice_mut(margins, 4, 4, "margins")?;
        let mut bits = 0u32;
        for (k, r) in conds.iter().enumerate() {
            buf[k] = r.min_margin;
            if r.pass {
                bits |= 1 << k;
            }
        }
        *out_ptr(passed, "passed")? = bits;
        Ok(())
    })
}

#ifndef POLYRELAX_H
#define POLYRELAX_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum PrStatus {
  PR_STATUS_OK = 0,
  PR_STATUS_NULL_POINTER = 1,
  PR_STATUS_INVALID_ARGUMENT = 2,
  PR_STATUS_BUFFER_TOO_SMALL = 3,
  PR_STATUS_MODEL = 4,
  PR_STATUS_ENTROPY = 5,
  PR_STATUS_DYNAMICS = 6,
  PR_STATUS_GAS = 7,
  PR_STATUS_PANIC = 8,
} PrStatus;

// Entropy structure: the integrating factor `G` and `Psi(Xi, tau) = sigma_I(Xi) + tau . Xi + G(tau)`.
typedef struct PrEntropy PrEntropy;

// Two-pressure gas model of a built-in family.
typedef struct PrGas PrGas;

// Constitutive pair `(sigma_I, sigma_E)` of a built-in family.
typedef struct PrModel PrModel;

// Relaxation run in slab geometry that owns copies of the model and entropy structure.
typedef struct PrSlab PrSlab;

// Initial data of a slab run: `y_1 = x_1 + amplitude sin(2 pi k x_1) e_1` on the unit interval,
// velocity `velocity_amplitude cos(2 pi k x_1) e_1`, equilibrium stresses.
typedef struct PrSlabSpec {
  size_t n_cells;
  uint32_t wavenumber;
  double amplitude;
  double velocity_amplitude;
  double eps;
  double cfl;
  // 0 first order, 1 minmod MUSCL.
  uint32_t muscl;
  double w_min;
} PrSlabSpec;

// Scalar diagnostics of a slab run.
typedef struct PrSlabStats {
  double t;
  size_t steps;
  // `sum (|v|^2 / 2 + Psi) dx`.
  double entropy;
  // Accumulated `int sum D / eps dx dt`.
  double dissipation;
  double min_det;
} PrSlabStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message (NUL terminated, truncated to fit) into `buf`
// and returns the full message length in bytes, excluding the terminator.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t pr_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *pr_version(void);

// Length of the minors vector in dimension `d` (5 for d = 2, 19 for d = 3; 0 otherwise).
size_t pr_minors_len(uint32_t d);

// Writes the minors `(F, cof F, det F)` of the row-major `d x d` matrix `f`.
//
// # Safety
// `f` must point to `d * d` doubles and `out` to `out_len` writable doubles.
enum PrStatus pr_phi(uint32_t d, const double *f, double *out, size_t out_len);

// Builds the built-in family `family` (`quadratic`, `polyquad`, `gas-lagrangean`) in
// dimension `d` with `n_params` named parameters; unnamed parameters take their defaults.
//
// # Safety
// `family` must be a NUL-terminated string; `param_names` and `param_values` must each hold
// `n_params` entries; `out` must be writable.
enum PrStatus pr_model_new(const char *family,
                           uint32_t d,
                           const char *const *param_names,
                           const double *param_values,
                           size_t n_params,
                           struct PrModel **out);

// # Safety
// `model` must be null or a handle from [`pr_model_new`] not yet freed.
void pr_model_free(struct PrModel *model);

// Spatial dimension of the model (2 or 3), or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uint32_t pr_model_dim(const struct PrModel *model);

// Chapman-Enskog tensor `D` at `F` as a row-major `d^2 x d^2` matrix indexed by `(i d + a, j d + b)`,
// and its smallest eigenvalue.
//
// # Safety
// `f` must hold `d * d` doubles, `out` `out_len` writable doubles, `lambda_min` be writable.
enum PrStatus pr_chapman_enskog(const struct PrModel *model,
                                const double *f,
                                double *out,
                                size_t out_len,
                                double *lambda_min);

// Builds `G` for `model` on its default sample box. The model handle may be freed afterwards.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum PrStatus pr_entropy_new(const struct PrModel *model, struct PrEntropy **out);

// # Safety
// `entropy` must be null or a handle from [`pr_entropy_new`] not yet freed.
void pr_entropy_free(struct PrEntropy *entropy);

// `G(tau)`.
//
// # Safety
// `tau` must hold `len` doubles (the minors length) and `value` be writable.
enum PrStatus pr_entropy_g(const struct PrEntropy *entropy,
                           const double *tau,
                           size_t len,
                           double *value);

// `Psi(Xi, tau)` and the dissipation `D(Xi, tau) = (tau + grad Sigma(Xi)) . (Xi + grad G(tau))`.
//
// # Safety
// `xi` and `tau` must hold `len` doubles; `psi` and `dissipation` must be writable.
enum PrStatus pr_entropy_psi(const struct PrEntropy *entropy,
                             const double *xi,
                             const double *tau,
                             size_t len,
                             double *psi,
                             double *dissipation);

// Starts a relaxation run at `t = 0`.
//
// # Safety
// `model` and `entropy` must be live handles built from the same model; `spec` readable;
// `out` writable.
enum PrStatus pr_slab_new(const struct PrModel *model,
                          const struct PrEntropy *entropy,
                          const struct PrSlabSpec *spec,
                          struct PrSlab **out);

// # Safety
// `slab` must be null or a handle from [`pr_slab_new`] not yet freed.
void pr_slab_free(struct PrSlab *slab);

// Advances the run to `t_target >= t`. On failure the run keeps its previous state.
//
// # Safety
// `slab` must be a live handle.
enum PrStatus pr_slab_advance(struct PrSlab *slab, double t_target);

// # Safety
// `slab` must be a live handle and `stats` writable.
enum PrStatus pr_slab_stats(const struct PrSlab *slab, struct PrSlabStats *stats);

// Copies the cell values of `F_{.1}` (3 per cell, `n_cells * 3` doubles) into `out`.
//
// # Safety
// `slab` must be a live handle and `out` hold `out_len` writable doubles.
enum PrStatus pr_slab_f1(const struct PrSlab *slab, double *out, size_t out_len);

// # Safety
// `family` must be a NUL-terminated string; the parameter arrays hold `n_params` entries;
// `out` must be writable.
enum PrStatus pr_gas_new(const char *family,
                         const char *const *param_names,
                         const double *param_values,
                         size_t n_params,
                         struct PrGas **out);

// # Safety
// `gas` must be null or a handle from [`pr_gas_new`] not yet freed.
void pr_gas_free(struct PrGas *gas);

// Entropy `H(rho, m, rho tau)` and dissipation `D(rho, tau)` of the gas system.
//
// # Safety
// `gas` must be a live handle; `h` and `dissipation` writable.
enum PrStatus pr_gas_entropy(const struct PrGas *gas,
                             double rho,
                             double m,
                             double tau,
                             double *h,
                             double *dissipation);

// Sampled `(a0)`-`(a3)` certificate: `margins[k]` is the smallest margin of `(a_k)`,
// `passed` a bit set with bit `k` set when `(a_k)` holds.
//
// # Safety
// `gas` must be a live handle; `margins` must hold 4 writable doubles and `passed` be writable.
enum PrStatus pr_gas_certificate(const struct PrGas *gas,
                                 size_t n_samples,
                                 uint64_t seed,
                                 double *margins,
                                 uint32_t *passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POLYRELAX_H */

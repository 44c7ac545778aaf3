#ifndef SVOLTERRA_H
#define SVOLTERRA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  SV_STATUS_OK = 0,
  SV_STATUS_NULL_POINTER = 1,
  SV_STATUS_INVALID_UTF8 = 2,
  SV_STATUS_CONFIG = 3,
  SV_STATUS_NUMERIC = 4,
  SV_STATUS_PROPERTY_FAILED = 5,
  SV_STATUS_BUFFER_TOO_SMALL = 6,
  SV_STATUS_PANIC = 7,
} SvStatus;

/**
 * One simulated path.
 */
typedef struct SvPath SvPath;

/**
 * A validated configuration with its kernel, operator and resolvent tables.
 */
typedef struct SvProblem SvProblem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message of this thread into `buf` (NUL-terminated).
 * Returns the message length excluding the terminator; if it is `>= len`
 * the message was truncated. `buf` may be null when `len` is 0.
 *
 * # Safety
 * `buf` must point to at least `len` writable bytes.
 */
size_t sv_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sv_version(void);

/**
 * Sector parameter of the model kernel `t^(rho-2) e^(-eta t) / Gamma(rho-1)`.
 *
 * # Safety
 * `out_rho` must be a valid pointer to a `double`.
 */
SvStatus sv_sector_parameter(double rho, double eta, double *out_rho);

/**
 * `E_rho(x)` for `x <= 0`.
 *
 * # Safety
 * `out_value` must be a valid pointer to a `double`.
 */
SvStatus sv_mittag_leffler(double rho, double x, double *out_value);

/**
 * Parse a configuration (flat dotted-key TOML) and build its resolvent
 * tables. Relative `kernel.table_path` entries resolve against the working
 * directory. Release the handle with [`sv_problem_free`].
 *
 * # Safety
 * `config` must be a NUL-terminated string; `out_problem` a valid pointer.
 */
SvStatus sv_problem_new(const char *config, SvProblem **out_problem);

/**
 * # Safety
 * `problem` must come from [`sv_problem_new`] and not be used afterwards.
 */
void sv_problem_free(SvProblem *problem);

/**
 * Number of spectral modes and time steps of the configured grid.
 *
 * # Safety
 * `problem` must be a live handle; `modes` and `steps` valid pointers.
 */
SvStatus sv_problem_shape(const SvProblem *problem, size_t *modes, size_t *steps);

/**
 * Resolvent value `s_mu_k(t_n)` for 0-based mode `k`.
 *
 * # Safety
 * `problem` must be a live handle; `out_value` a valid pointer.
 */
SvStatus sv_problem_resolvent(const SvProblem *problem, size_t k, size_t n, double *out_value);

/**
 * Simulate path `path_index` of the stream family of `seed` with the
 * direct stepper. Release the result with [`sv_path_free`].
 *
 * # Safety
 * `problem` must be a live handle; `out_path` a valid pointer.
 */
SvStatus sv_simulate(const SvProblem *problem,
                     uint64_t seed,
                     uint64_t path_index,
                     SvPath **out_path);

/**
 * # Safety
 * `path` must come from [`sv_simulate`] and not be used afterwards.
 */
void sv_path_free(SvPath *path);

/**
 * Number of large and small jumps that drove the path.
 *
 * # Safety
 * `path` must be a live handle; `large` and `small` valid pointers.
 */
SvStatus sv_path_jumps(const SvPath *path, size_t *large, size_t *small);

/**
 * Copy the grid values (time-major, `(steps + 1) * modes` doubles) into
 * `buf`. With a null `buf` or short `len`, only `needed` is written and
 * `BufferTooSmall` is returned.
 *
 * # Safety
 * `path` must be a live handle; `buf` must hold `len` doubles; `needed`
 * must be a valid pointer.
 */
SvStatus sv_path_values(const SvPath *path, double *buf, size_t len, size_t *needed);

/**
 * Run the invariant suite on the problem. Returns `PropertyFailed` if any
 * check fails; the failing check names are in [`sv_last_error`].
 *
 * # Safety
 * `problem` must be a live handle.
 */
SvStatus sv_verify(const SvProblem *problem);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SVOLTERRA_H */

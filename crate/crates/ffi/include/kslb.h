#ifndef KSLB_H
#define KSLB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum KslbStatus {
  KSLB_STATUS_OK = 0,
  KSLB_STATUS_NULL_POINTER = 1,
  KSLB_STATUS_INVALID_ARGUMENT = 2,
  KSLB_STATUS_PRECONDITION = 3,
  KSLB_STATUS_NUMERICAL_FAILURE = 4,
  KSLB_STATUS_IO = 5,
  KSLB_STATUS_CHECKPOINT = 6,
  KSLB_STATUS_PANIC = 7,
} KslbStatus;

/**
 * Outcome of a completed call to [`kslb_run`].
 */
typedef enum KslbRunStatus {
  KSLB_RUN_STATUS_COMPLETED = 0,
  KSLB_RUN_STATUS_BLOW_UP_SUSPECTED = 1,
  KSLB_RUN_STATUS_NUMERICAL_FAILURE = 2,
} KslbRunStatus;

/**
 * Opaque solver state: time plus `n` and `c` on a periodic grid.
 */
typedef struct KslbState KslbState;

typedef struct KslbRunConfig {
  double dt;
  double t_end;
  double monitor_every;
  /**
   * Cap on `‖n‖∞ + ‖c‖_{W1,∞}`; 0 selects the default.
   */
  double blowup_cap;
  bool dealias;
  bool adaptive;
} KslbRunConfig;

typedef struct KslbParams {
  double chi;
  double tau;
  double lambda;
  double mu;
} KslbParams;

typedef struct KslbRunSummary {
  enum KslbRunStatus status;
  /**
   * Time at which the run stopped.
   */
  double t_final;
  uint64_t steps;
  double sup_linf_n;
  double sup_w1inf_c;
} KslbRunSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if the last call
 * succeeded. The pointer stays valid until the next call on the same thread.
 */
const char *kslb_last_error_message(void);

/**
 * Static, nul-terminated crate version.
 */
const char *kslb_version(void);

/**
 * Fills `out` with the library defaults.
 *
 * # Safety
 * `out` must be null or point to writable memory for one `KslbRunConfig`.
 */
enum KslbStatus kslb_run_config_default(struct KslbRunConfig *out);

/**
 * Builds a state from `n_axis^d` row-major samples of `n` and `c`.
 *
 * # Safety
 * `n` and `c` must be null or point to `n_axis^d` readable doubles each;
 * `out` must be null or writable.
 */
enum KslbStatus kslb_state_new(uint32_t d,
                               uint32_t n_axis,
                               double box_len,
                               double t,
                               const double *n,
                               const double *c,
                               struct KslbState **out);

/**
 * Releases a state. Null is ignored.
 *
 * # Safety
 * `state` must be null or a handle from this library that was not freed yet.
 */
void kslb_state_free(struct KslbState *state);

/**
 * Number of grid points per field (`n_axis^d`), or 0 for null.
 *
 * # Safety
 * `state` must be null or a live handle.
 */
size_t kslb_state_len(const struct KslbState *state);

/**
 * Time of the state, or NaN for null.
 *
 * # Safety
 * `state` must be null or a live handle.
 */
double kslb_state_time(const struct KslbState *state);

/**
 * Copies `n` into `buf`, which must hold exactly [`kslb_state_len`] doubles.
 *
 * # Safety
 * `state` must be null or a live handle; `buf` must be null or point to `len` writable doubles.
 */
enum KslbStatus kslb_state_copy_n(const struct KslbState *state, double *buf, size_t len);

/**
 * Copies `c` into `buf`, which must hold exactly [`kslb_state_len`] doubles.
 *
 * # Safety
 * `state` must be null or a live handle; `buf` must be null or point to `len` writable doubles.
 */
enum KslbStatus kslb_state_copy_c(const struct KslbState *state, double *buf, size_t len);

/**
 * Reads a checkpoint file into a new state.
 *
 * # Safety
 * `path` must be null or a nul-terminated string; `out` must be null or writable.
 */
enum KslbStatus kslb_checkpoint_load(const char *path, struct KslbState **out);

/**
 * Writes `state` as a checkpoint file.
 *
 * # Safety
 * `state` must be null or a live handle; `path` must be null or a nul-terminated string.
 */
enum KslbStatus kslb_checkpoint_save(const struct KslbState *state, const char *path);

/**
 * Smallest damping meeting the threshold conditions for exponent `k` in dimension `d`.
 *
 * # Safety
 * `params` and `out` must be null or valid pointers.
 */
enum KslbStatus kslb_mu_zero_estimate(uint32_t k,
                                      uint32_t d,
                                      const struct KslbParams *params,
                                      double *out);

/**
 * Integrates from `initial` to `config.t_end`. The final state is returned as a
 * new handle in `out_final` (also on blow-up or numerical failure, where it is
 * the last accepted state); `summary` receives the outcome.
 *
 * # Safety
 * All pointers must be null or valid; `initial` must be a live handle.
 */
enum KslbStatus kslb_run(const struct KslbState *initial,
                         const struct KslbParams *params,
                         const struct KslbRunConfig *config,
                         struct KslbState **out_final,
                         struct KslbRunSummary *summary);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KSLB_H */

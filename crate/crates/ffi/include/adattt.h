#ifndef ADATTT_H
#define ADATTT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Test-time method selector, matching the CLI's method names.
 */
typedef enum AdatttMethod {
  ADATTT_METHOD_TEST = 0,
  ADATTT_METHOD_TTT = 1,
  ADATTT_METHOD_PRI_TTT = 2,
  ADATTT_METHOD_DYN_TTT = 3,
  ADATTT_METHOD_ADA_TTT = 4,
} AdatttMethod;

typedef enum AdatttStatus {
  ADATTT_STATUS_OK = 0,
  ADATTT_STATUS_NULL_POINTER = 1,
  ADATTT_STATUS_INVALID_UTF8 = 2,
  ADATTT_STATUS_INVALID_ARGUMENT = 3,
  ADATTT_STATUS_IO = 4,
  ADATTT_STATUS_MODEL = 5,
  ADATTT_STATUS_NUMERIC = 6,
  ADATTT_STATUS_PANIC = 7,
} AdatttStatus;

/**
 * Opaque handle to a loaded model file.
 */
typedef struct AdatttModel AdatttModel;

/**
 * Summary of a Sinkhorn solve; the plan itself goes to a caller buffer.
 */
typedef struct AdatttSinkhornInfo {
  size_t iterations;
  bool converged;
  double cost;
} AdatttSinkhornInfo;

/**
 * Binary error sandwich for one joint table.
 */
typedef struct AdatttBoundReport {
  double bayes_error;
  double lower;
  double upper;
  bool holds;
} AdatttBoundReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer is
 * owned by the library and valid until the next call on the same thread.
 */
const char *adattt_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *adattt_version(void);

/**
 * Parse a model file from a JSON string. Free the handle with [`adattt_model_free`].
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AdatttStatus adattt_model_from_json(const char *json, struct AdatttModel **out);

/**
 * Load a model file written by `adattt pretrain`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AdatttStatus adattt_model_load(const char *path, struct AdatttModel **out);

/**
 * Release a handle; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from this library that has not been freed.
 */
void adattt_model_free(struct AdatttModel *model);

/**
 * Length of the feature vector the model expects.
 *
 * # Safety
 * `model` must be a live handle.
 */
size_t adattt_model_input_dim(const struct AdatttModel *model);

/**
 * Length of the staleness vector (the gated block).
 *
 * # Safety
 * `model` must be a live handle.
 */
size_t adattt_model_gated_dim(const struct AdatttModel *model);

/**
 * Decision threshold stored with the model.
 *
 * # Safety
 * `model` must be a live handle.
 */
double adattt_model_threshold(const struct AdatttModel *model);

/**
 * Risk score for one derived feature vector (unstandardized) without adaptation.
 *
 * # Safety
 * `x` must hold `x_len` values, `dt` `dt_len` values, and `out` must be valid.
 */
enum AdatttStatus adattt_model_predict(const struct AdatttModel *model,
                                       const double *x,
                                       size_t x_len,
                                       const double *dt,
                                       size_t dt_len,
                                       double *out);

/**
 * Adapt to one input and return the adapted score. `method` is an
 * [`AdatttMethod`] value. The handle is left unchanged (reset protocol); the
 * model's stored config supplies everything except the method, step count,
 * step size and seed.
 *
 * # Safety
 * `x` must hold `x_len` values, `dt` `dt_len` values, and `out` must be valid.
 */
enum AdatttStatus adattt_model_adapt(const struct AdatttModel *model,
                                     const double *x,
                                     size_t x_len,
                                     const double *dt,
                                     size_t dt_len,
                                     uint32_t method,
                                     size_t steps,
                                     double ttt_lr,
                                     uint64_t seed,
                                     double *out);

/**
 * Entropic transport between `a` (length `n`) and `b` (length `m`) under a
 * row-major `n × m` cost. The plan is written row-major to `plan_out`.
 *
 * # Safety
 * `cost` and `plan_out` must hold `n * m` values, `a` `n` and `b` `m`; `info`
 * may be null.
 */
enum AdatttStatus adattt_sinkhorn(const double *cost,
                                  const double *a,
                                  size_t n,
                                  const double *b,
                                  size_t m,
                                  double epsilon,
                                  size_t max_iter,
                                  double tol,
                                  double *plan_out,
                                  struct AdatttSinkhornInfo *info);

/**
 * The η ∈ [0, ½] whose binary entropy (bits) is `h`.
 *
 * # Safety
 * `out` must be valid.
 */
enum AdatttStatus adattt_binary_entropy_inverse(double h, double *out);

/**
 * Check the binary error sandwich on a Markov joint `p[ys][z][ym]` (flat,
 * `s * r * 2` cells). With `ideal` the lower bound uses `H(Y_m|Y_s)`,
 * otherwise `H(Y_m|Z)`.
 *
 * # Safety
 * `p` must hold `s * r * 2` values and `out` must be valid.
 */
enum AdatttStatus adattt_check_binary_bounds(const double *p,
                                             size_t s,
                                             size_t r,
                                             bool ideal,
                                             struct AdatttBoundReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADATTT_H */

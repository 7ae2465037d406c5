#ifndef RBW_H
#define RBW_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every fallible function.
 */
typedef enum RbwStatus {
  RBW_STATUS_OK = 0,
  RBW_STATUS_NULL_POINTER = 1,
  RBW_STATUS_INVALID_ARGUMENT = 2,
  RBW_STATUS_IO = 3,
  RBW_STATUS_DATA = 4,
  RBW_STATUS_NUMERICAL = 5,
  RBW_STATUS_INFEASIBLE = 6,
  RBW_STATUS_NOT_CONVERGED = 7,
  RBW_STATUS_FORMULA = 8,
  RBW_STATUS_PANIC = 9,
} RbwStatus;

/**
 * Regressor sets for the confounder models of [`rbw_weights_rbw`].
 */
typedef enum RbwModelSpec {
  /**
   * Previous-period confounders and treatment.
   */
  RBW_MODEL_SPEC_LAG_ONE = 0,
  /**
   * Previous-period treatment only.
   */
  RBW_MODEL_SPEC_PRIOR_TREATMENT = 1,
} RbwModelSpec;

/**
 * Opaque fitted marginal structural model.
 */
typedef struct RbwMsm RbwMsm;

/**
 * Opaque panel dataset.
 */
typedef struct RbwPanel RbwPanel;

/**
 * Opaque weight vector with its diagnostics.
 */
typedef struct RbwWeights RbwWeights;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or NULL. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *rbw_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rbw_version(void);

/**
 * Load a long-format panel CSV described by a `key = value` schema file.
 *
 * # Safety
 * `data_path` and `schema_path` must be NUL-terminated strings and
 * `out_panel` a writable pointer.
 */
enum RbwStatus rbw_panel_load_csv(const char *data_path,
                                  const char *schema_path,
                                  struct RbwPanel **out_panel);

/**
 * Build a panel from arrays. `treatments` is n × periods, `confounders`
 * holds `periods` consecutive n × n_confounders blocks, all column-major.
 * `base_weights` may be NULL for unit weights. Treatment columns are named
 * `D1..DT`, confounders `X1..XJ` and the outcome `Y`.
 *
 * # Safety
 * Each array must hold the number of elements implied by the dimensions.
 */
enum RbwStatus rbw_panel_new(size_t n,
                             size_t periods,
                             size_t n_confounders,
                             const double *treatments,
                             bool binary_treatment,
                             const double *confounders,
                             const double *outcome,
                             const double *base_weights,
                             struct RbwPanel **out_panel);

/**
 * Draw one sample from the built-in simulation design (3 periods, 4
 * confounders). Misspecified samples expose transformed confounders.
 *
 * # Safety
 * `out_panel` must be a writable pointer.
 */
enum RbwStatus rbw_panel_simulate(size_t n,
                                  double alpha,
                                  bool continuous,
                                  bool misspecified,
                                  uint64_t seed,
                                  struct RbwPanel **out_panel);

/**
 * Number of units, or 0 for NULL.
 *
 * # Safety
 * `panel` must be NULL or a live handle.
 */
size_t rbw_panel_n(const struct RbwPanel *panel);

/**
 * Number of periods, or 0 for NULL.
 *
 * # Safety
 * `panel` must be NULL or a live handle.
 */
size_t rbw_panel_periods(const struct RbwPanel *panel);

/**
 * # Safety
 * `panel` must be NULL or a handle not yet freed.
 */
void rbw_panel_free(struct RbwPanel *panel);

/**
 * Residual balancing weights with the full treatment horizon. Gaussian
 * confounder models are used when `gaussian` is set, otherwise families
 * follow each confounder's level of measurement.
 *
 * # Safety
 * `panel` must be a live handle and `out_weights` writable.
 */
enum RbwStatus rbw_weights_rbw(const struct RbwPanel *panel,
                               enum RbwModelSpec spec,
                               bool gaussian,
                               double tol,
                               size_t max_iter,
                               struct RbwWeights **out_weights);

/**
 * Inverse probability weights from lag-one treatment models. Weights are
 * censored at the given percentiles when `0 <= lower < upper <= 100`; pass
 * a negative `lower` to skip censoring.
 *
 * # Safety
 * `panel` must be a live handle and `out_weights` writable.
 */
enum RbwStatus rbw_weights_ipw(const struct RbwPanel *panel,
                               bool stabilized,
                               double lower,
                               double upper,
                               struct RbwWeights **out_weights);

/**
 * Number of weights, or 0 for NULL.
 *
 * # Safety
 * `weights` must be NULL or a live handle.
 */
size_t rbw_weights_len(const struct RbwWeights *weights);

/**
 * Largest absolute balance violation; NaN for inverse probability weights
 * and for NULL.
 *
 * # Safety
 * `weights` must be NULL or a live handle.
 */
double rbw_weights_max_violation(const struct RbwWeights *weights);

/**
 * Copy the weights into `buffer`, which must hold exactly
 * [`rbw_weights_len`] values.
 *
 * # Safety
 * `weights` must be a live handle and `buffer` writable for `len` values.
 */
enum RbwStatus rbw_weights_copy(const struct RbwWeights *weights, double *buffer, size_t len);

/**
 * # Safety
 * `weights` must be NULL or a handle not yet freed.
 */
void rbw_weights_free(struct RbwWeights *weights);

/**
 * Weighted least squares fit of `formula` (e.g. `Y ~ D1 + D2 + D3` or
 * `Y ~ cum(D)`) with a sandwich covariance.
 *
 * # Safety
 * `panel` and `weights` must be live handles, `formula` a NUL-terminated
 * string and `out_msm` writable.
 */
enum RbwStatus rbw_msm_fit(const struct RbwPanel *panel,
                           const struct RbwWeights *weights,
                           const char *formula,
                           struct RbwMsm **out_msm);

/**
 * Number of coefficients including the intercept, or 0 for NULL.
 *
 * # Safety
 * `msm` must be NULL or a live handle.
 */
size_t rbw_msm_n_coefficients(const struct RbwMsm *msm);

/**
 * Name of coefficient `index`, owned by the handle; NULL when out of range.
 *
 * # Safety
 * `msm` must be NULL or a live handle.
 */
const char *rbw_msm_coefficient_name(const struct RbwMsm *msm, size_t index);

/**
 * Copy estimates and sandwich standard errors; either buffer may be NULL.
 *
 * # Safety
 * `msm` must be a live handle and non-NULL buffers writable for `len` values.
 */
enum RbwStatus rbw_msm_coefficients(const struct RbwMsm *msm,
                                    double *estimates,
                                    double *std_errors,
                                    size_t len);

/**
 * Linear combination such as `10*b1+10*b2` (b0 is the intercept) with its
 * sandwich standard error.
 *
 * # Safety
 * `msm` must be a live handle, `contrast` a NUL-terminated string and
 * `estimate`/`std_error` writable.
 */
enum RbwStatus rbw_msm_contrast(const struct RbwMsm *msm,
                                const char *contrast,
                                double *estimate,
                                double *std_error);

/**
 * # Safety
 * `msm` must be NULL or a handle not yet freed.
 */
void rbw_msm_free(struct RbwMsm *msm);

/**
 * Minimum relative-entropy weights for an n × m column-major constraint
 * matrix. `base_weights` may be NULL for unit weights; `dual` and
 * `max_violation` may be NULL.
 *
 * # Safety
 * `constraints` must hold n·m values, `weights` must be writable for n
 * values and non-NULL `dual` writable for m values.
 */
enum RbwStatus rbw_entropy_balance(size_t n,
                                   size_t m,
                                   const double *constraints,
                                   const double *base_weights,
                                   double tol,
                                   size_t max_iter,
                                   double *weights,
                                   double *dual,
                                   double *max_violation);

/**
 * Balancing-condition counts for `n_confounders` confounders over
 * `periods` periods with `regressors[t]` regressors, intercept included, in the
 * period-t confounder models and the full treatment horizon.
 *
 * # Safety
 * `regressors` must hold `periods` values; `n_c` and `n_c_cbps` writable.
 */
enum RbwStatus rbw_constraint_counts(size_t n_confounders,
                                     size_t periods,
                                     const size_t *regressors,
                                     size_t *n_c,
                                     size_t *n_c_cbps);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RBW_H */

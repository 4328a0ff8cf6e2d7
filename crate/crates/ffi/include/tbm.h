#ifndef TBM_H
#define TBM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TbmStatus {
  TBM_STATUS_OK = 0,
  TBM_STATUS_NULL_POINTER = 1,
  TBM_STATUS_INVALID_ARGUMENT = 2,
  TBM_STATUS_PARSE_ERROR = 3,
  TBM_STATUS_SHAPE_MISMATCH = 4,
  TBM_STATUS_MANIFEST_MISMATCH = 5,
  TBM_STATUS_INTERNAL = 6,
} TbmStatus;

/**
 * A loaded anomaly model and its calibrated threshold.
 */
typedef struct TbmAnomalyModel TbmAnomalyModel;

/**
 * A loaded rate model.
 */
typedef struct TbmRateModel TbmRateModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *tbm_last_error(void);

/**
 * Loads a rate checkpoint from `len` bytes of UTF-8 JSON. When
 * `manifest_hash` is non-null it must match the checkpoint's hash.
 *
 * # Safety
 * Pointers must be valid for the given lengths; `out` must be writable.
 */
enum TbmStatus tbm_rate_model_load(const uint8_t *json,
                                   size_t len,
                                   const uint8_t *manifest_hash,
                                   size_t hash_len,
                                   struct TbmRateModel **out);

/**
 * # Safety
 * `model` must come from [`tbm_rate_model_load`] and not be used afterwards.
 */
void tbm_rate_model_free(struct TbmRateModel *model);

/**
 * Feature count and window length the model expects.
 *
 * # Safety
 * `model` must be a live handle; outputs must be writable.
 */
enum TbmStatus tbm_rate_model_dims(const struct TbmRateModel *model,
                                   size_t *features,
                                   size_t *window_len);

/**
 * Predicts `n` next-step speeds from windows laid out `[n, features, window_len]`.
 *
 * # Safety
 * `windows` must hold `n * features * window_len` values and `out` `n`.
 */
enum TbmStatus tbm_rate_model_predict(const struct TbmRateModel *model,
                                      const double *windows,
                                      size_t n,
                                      size_t features,
                                      size_t window_len,
                                      double *out);

/**
 * Loads an anomaly checkpoint; see [`tbm_rate_model_load`].
 *
 * # Safety
 * Pointers must be valid for the given lengths; `out` must be writable.
 */
enum TbmStatus tbm_anomaly_model_load(const uint8_t *json,
                                      size_t len,
                                      const uint8_t *manifest_hash,
                                      size_t hash_len,
                                      struct TbmAnomalyModel **out);

/**
 * # Safety
 * `model` must come from [`tbm_anomaly_model_load`] and not be used afterwards.
 */
void tbm_anomaly_model_free(struct TbmAnomalyModel *model);

/**
 * Window length, excavation and geology channel counts, and threshold.
 *
 * # Safety
 * `model` must be a live handle; outputs must be writable.
 */
enum TbmStatus tbm_anomaly_model_dims(const struct TbmAnomalyModel *model,
                                      size_t *seq_len,
                                      size_t *d_exc,
                                      size_t *d_geo,
                                      double *threshold);

/**
 * Scores `n` windows. `exc` is `[n, seq_len, d_exc]` and `geo`
 * `[n, seq_len, d_geo]`, all in `[0, 1]`. `flags` may be null; otherwise it
 * receives 1 where the score exceeds the threshold.
 *
 * # Safety
 * Buffers must hold the sizes above; `scores` and `flags` hold `n`.
 */
enum TbmStatus tbm_anomaly_model_score(const struct TbmAnomalyModel *model,
                                       const double *exc,
                                       const double *geo,
                                       size_t n,
                                       double *scores,
                                       uint8_t *flags);

/**
 * Z-score of `n` values with the sample standard deviation. `mean` and
 * `std` may be null.
 *
 * # Safety
 * `x` and `out` must hold `n` values.
 */
enum TbmStatus tbm_zscore(const double *x, size_t n, double *out, double *mean, double *std);

/**
 * Min-max scaling of `n` values into `[0, 1]`.
 *
 * # Safety
 * `x` and `out` must hold `n` values.
 */
enum TbmStatus tbm_minmax(const double *x, size_t n, double *out);

/**
 * Mean smooth-L1 loss between two length-`n` vectors.
 *
 * # Safety
 * `pred` and `target` must hold `n` values; `out` must be writable.
 */
enum TbmStatus tbm_smooth_l1(const double *pred, const double *target, size_t n, double *out);

/**
 * KL divergence of `N(mu, exp(log_var))` from the standard normal, summed
 * over `n` latent dimensions.
 *
 * # Safety
 * `mu` and `log_var` must hold `n` values; `out` must be writable.
 */
enum TbmStatus tbm_kl(const double *mu, const double *log_var, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TBM_H */

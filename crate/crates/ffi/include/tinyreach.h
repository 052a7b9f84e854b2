#ifndef TINYREACH_H
#define TINYREACH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Number of features written by [`tr_extract_features`].
 */
#define TR_FEATURES 12

typedef enum TrStatus {
  TR_STATUS_OK = 0,
  TR_STATUS_NULL_POINTER = 1,
  TR_STATUS_INVALID_ARGUMENT = 2,
  TR_STATUS_CORRUPT = 3,
  TR_STATUS_NOT_READY = 4,
  TR_STATUS_PANIC = 5,
} TrStatus;

/**
 * A decoded model with its inference state.
 */
typedef struct TrModel TrModel;

/**
 * Uniform sample of fixed-width rows of doubles.
 */
typedef struct TrReservoir TrReservoir;

/**
 * Result of one window.
 */
typedef struct TrInference {
  uint32_t class_index;
  uint32_t n_classes;
  /**
   * Distance to the nearest k-means centroid.
   */
  double score;
  double threshold;
  bool anomalous;
} TrInference;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, e.g. "0.1.0".
 */
const char *tr_version(void);

/**
 * Message of the last failure on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *tr_last_error_message(void);

/**
 * Whether `bytes` hold a firmware image whose digest matches.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes.
 */
bool tr_firmware_verify(const uint8_t *bytes, size_t len);

/**
 * Per-axis min, max, RMS and mean crossings of a window of interleaved
 * x, y, z samples. Writes [`TR_FEATURES`] doubles to `out`.
 *
 * # Safety
 * `samples` must point to `3 * n_samples` doubles and `out` to
 * `TR_FEATURES` writable doubles.
 */
enum TrStatus tr_extract_features(const double *samples,
                                  size_t n_samples,
                                  uint16_t rate_hz,
                                  double *out);

/**
 * Decode a model blob. `seed` drives the sampling of retraining data.
 *
 * # Safety
 * `blob` must point to `len` readable bytes; `out` must be writable.
 */
enum TrStatus tr_model_load(const uint8_t *blob, size_t len, uint64_t seed, struct TrModel **out);

/**
 * Load the model carried by a verified firmware image.
 *
 * # Safety
 * As for [`tr_model_load`].
 */
enum TrStatus tr_model_load_firmware(const uint8_t *image,
                                     size_t len,
                                     uint64_t seed,
                                     struct TrModel **out);

/**
 * # Safety
 * `model` must come from a `tr_model_load*` call and not be used again.
 */
void tr_model_free(struct TrModel *model);

/**
 * Model name, or NULL for a null handle.
 *
 * # Safety
 * `model` must be a live handle or NULL.
 */
const char *tr_model_name(const struct TrModel *model);

/**
 * # Safety
 * `model` must be a live handle or NULL.
 */
const char *tr_model_version(const struct TrModel *model);

/**
 * # Safety
 * `model` must be a live handle or NULL.
 */
size_t tr_model_class_count(const struct TrModel *model);

/**
 * Name of class `index`, or NULL when out of range.
 *
 * # Safety
 * `model` must be a live handle or NULL.
 */
const char *tr_model_class_name(const struct TrModel *model, size_t index);

/**
 * Anomaly threshold of the current k-means model.
 *
 * # Safety
 * `model` must be a live handle or NULL.
 */
double tr_model_threshold(const struct TrModel *model);

/**
 * Classify and score one window of interleaved x, y, z samples. Class
 * probabilities go to `probabilities` (up to `capacity` of them; it may be
 * NULL when `capacity` is 0). The scaled features join the retraining
 * sample.
 *
 * # Safety
 * `model` must be a live handle; `samples` must point to `3 * n_samples`
 * doubles; `probabilities` to `capacity` writable doubles; `out` must be
 * writable.
 */
enum TrStatus tr_model_process(struct TrModel *model,
                               const double *samples,
                               size_t n_samples,
                               uint16_t rate_hz,
                               double *probabilities,
                               size_t capacity,
                               struct TrInference *out);

/**
 * Retrain the anomaly detector from the windows seen so far. Returns
 * `NotReady` until enough windows have been processed.
 *
 * # Safety
 * `model` must be a live handle or NULL.
 */
enum TrStatus tr_model_retrain(struct TrModel *model);

/**
 * # Safety
 * `out` must be writable.
 */
enum TrStatus tr_reservoir_new(size_t capacity,
                               size_t width,
                               uint64_t seed,
                               struct TrReservoir **out);

/**
 * # Safety
 * `reservoir` must come from [`tr_reservoir_new`] and not be used again.
 */
void tr_reservoir_free(struct TrReservoir *reservoir);

/**
 * Offer one row. `slot` receives the index it was stored at, or -1 when
 * it was not kept; it may be NULL.
 *
 * # Safety
 * `reservoir` must be live; `row` must point to `width` doubles.
 */
enum TrStatus tr_reservoir_add(struct TrReservoir *reservoir, const double *row, int64_t *slot);

/**
 * Rows currently held.
 *
 * # Safety
 * `reservoir` must be live or NULL.
 */
size_t tr_reservoir_len(const struct TrReservoir *reservoir);

/**
 * Rows offered so far.
 *
 * # Safety
 * `reservoir` must be live or NULL.
 */
uint64_t tr_reservoir_seen(const struct TrReservoir *reservoir);

/**
 * Copy row `index` to `out`.
 *
 * # Safety
 * `reservoir` must be live; `out` must point to `width` writable doubles.
 */
enum TrStatus tr_reservoir_get(const struct TrReservoir *reservoir, size_t index, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TINYREACH_H */

#ifndef MEDC_H
#define MEDC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MedcStatus {
  MEDC_STATUS_OK = 0,
  MEDC_STATUS_NULL_POINTER = 1,
  MEDC_STATUS_INVALID_ARGUMENT = 2,
  MEDC_STATUS_SHAPE_MISMATCH = 3,
  MEDC_STATUS_PARSE_ERROR = 4,
  MEDC_STATUS_IO_ERROR = 5,
  MEDC_STATUS_NON_FINITE = 6,
  MEDC_STATUS_CHECKPOINT_ERROR = 7,
  MEDC_STATUS_CONFIG_ERROR = 8,
  MEDC_STATUS_NO_POSITIVES = 9,
  MEDC_STATUS_PANIC = 10,
} MedcStatus;

/**
 * Opaque feature-file contents.
 */
typedef struct MedcDataset MedcDataset;

/**
 * Opaque trained model with the label statistics it was trained on.
 */
typedef struct MedcModel MedcModel;

/**
 * Headline metrics. Group entries are NaN when the group has no class
 * with a test positive.
 */
typedef struct MedcMetrics {
  double overall_map;
  double head_map;
  double medium_map;
  double tail_map;
  double acc_at_1;
  double acc_at_5;
} MedcMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *medc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *medc_version(void);

/**
 * Reads a feature file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MedcStatus medc_dataset_read(const char *path, struct MedcDataset **out);

/**
 * # Safety
 * `ds` must come from `medc_dataset_read` or be null.
 */
size_t medc_dataset_num_records(const struct MedcDataset *ds);

/**
 * # Safety
 * `ds` must come from `medc_dataset_read` or be null.
 */
size_t medc_dataset_num_classes(const struct MedcDataset *ds);

/**
 * # Safety
 * `ds` must come from `medc_dataset_read` and not be used afterwards.
 */
void medc_dataset_free(struct MedcDataset *ds);

/**
 * Loads a model from a checkpoint manifest (the `.bin` payload must sit
 * beside it).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MedcStatus medc_model_load(const char *path, struct MedcModel **out);

/**
 * # Safety
 * `m` must come from `medc_model_load` or be null.
 */
size_t medc_model_num_classes(const struct MedcModel *m);

/**
 * # Safety
 * `m` must come from `medc_model_load` or be null.
 */
size_t medc_model_input_dim(const struct MedcModel *m);

/**
 * Expert-averaged class probabilities for one clip of `frames` × `dim`
 * row-major features. Writes `num_classes` values to `out_probs`.
 *
 * # Safety
 * `features` must hold `frames * dim` doubles and `out_probs` must have
 * room for `out_len` doubles.
 */
enum MedcStatus medc_model_predict(const struct MedcModel *m,
                                   const double *features,
                                   size_t frames,
                                   size_t dim,
                                   double *out_probs,
                                   size_t out_len);

/**
 * Evaluates a model on a dataset using the model's training label groups.
 *
 * # Safety
 * Handles must be valid; `out` must be writable.
 */
enum MedcStatus medc_model_evaluate(const struct MedcModel *m,
                                    const struct MedcDataset *ds,
                                    struct MedcMetrics *out);

/**
 * # Safety
 * `m` must come from `medc_model_load` and not be used afterwards.
 */
void medc_model_free(struct MedcModel *m);

/**
 * Average precision of one class ranking. `positives[i]` is nonzero for
 * a positive sample. Returns `NoPositives` when there is none.
 *
 * # Safety
 * `scores` and `positives` must hold `n` elements; `out` must be writable.
 */
enum MedcStatus medc_average_precision(const double *scores,
                                       const uint8_t *positives,
                                       size_t n,
                                       double *out);

/**
 * Finite-difference check of the full objective; writes the largest
 * relative error.
 *
 * # Safety
 * `out_max_rel_err` must be writable.
 */
enum MedcStatus medc_gradcheck(uint64_t seed, double *out_max_rel_err);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MEDC_H */

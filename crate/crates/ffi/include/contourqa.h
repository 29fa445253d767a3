#ifndef CONTOURQA_H
#define CONTOURQA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CqaStatus {
  CQA_STATUS_OK = 0,
  CQA_STATUS_NULL_POINTER = 1,
  CQA_STATUS_INVALID_ARGUMENT = 2,
  CQA_STATUS_IO = 3,
  CQA_STATUS_FORMAT = 4,
  CQA_STATUS_DIMENSION_MISMATCH = 5,
  CQA_STATUS_EMPTY_MASK = 6,
  CQA_STATUS_SCHEMA_MISMATCH = 7,
  CQA_STATUS_NON_CONVERGENCE = 8,
  CQA_STATUS_INTERNAL = 9,
} CqaStatus;

// Rows of a feature file.
typedef struct CqaFeatureSet CqaFeatureSet;

// Binary 2-D mask, row-major with x fastest.
typedef struct CqaMask CqaMask;

// Trained one-class SVM.
typedef struct CqaModel CqaModel;

// DSC, HD95 and MSD of one contour pair.
typedef struct CqaMetrics {
  double dsc;
  double hd95;
  double msd;
} CqaMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread; empty after success.
// The pointer stays valid until the next call on this thread.
const char *cqa_last_error(void);

// Library version as a static NUL-terminated string.
const char *cqa_version(void);

// Load a model file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum CqaStatus cqa_model_load(const char *path, struct CqaModel **out);

// Train a model on `n` row-major vectors of length `dim`.
//
// # Safety
// `rows` must point to `n * dim` doubles, `schema_id` must be a
// NUL-terminated string and `out` a writable pointer.
enum CqaStatus cqa_model_train(const double *rows,
                               size_t n,
                               size_t dim,
                               const char *schema_id,
                               double nu,
                               double gamma,
                               struct CqaModel **out);

// Write a model file.
//
// # Safety
// `model` must come from this library and `path` be a NUL-terminated string.
enum CqaStatus cqa_model_save(const struct CqaModel *model, const char *path);

// Feature dimension the model expects.
//
// # Safety
// `model` must come from this library; `out` must be writable.
enum CqaStatus cqa_model_dim(const struct CqaModel *model, size_t *out);

// Decision value of a raw (unstandardized) feature vector; negative means
// low quality.
//
// # Safety
// `features` must point to `len` doubles; `out` must be writable.
enum CqaStatus cqa_model_decision(const struct CqaModel *model,
                                  const double *features,
                                  size_t len,
                                  double *out);

// # Safety
// `model` must come from this library or be null; it is invalid afterwards.
void cqa_model_free(struct CqaModel *model);

// Copy a `width × height` mask; nonzero bytes other than 1 are rejected.
//
// # Safety
// `data` must point to `width * height` bytes; `out` must be writable.
enum CqaStatus cqa_mask_new(const uint8_t *data, size_t width, size_t height, struct CqaMask **out);

// Number of foreground pixels.
//
// # Safety
// `mask` must come from this library; `out` must be writable.
enum CqaStatus cqa_mask_count(const struct CqaMask *mask, size_t *out);

// # Safety
// `mask` must come from this library or be null; it is invalid afterwards.
void cqa_mask_free(struct CqaMask *mask);

// Slice metrics with in-plane pixel spacing (use 1, 1 for pixel units).
//
// # Safety
// `gt` and `agc` must come from this library; `out` must be writable.
enum CqaStatus cqa_slice_metrics(const struct CqaMask *gt,
                                 const struct CqaMask *agc,
                                 double spacing_x,
                                 double spacing_y,
                                 struct CqaMetrics *out);

// Crop, resize and extract the 24 `classical-v1` features of a contour on
// its u8 slice image.
//
// # Safety
// `image` must hold one byte per mask pixel; `out` must hold `out_len`
// doubles, with `out_len` at least 24.
enum CqaStatus cqa_extract_features(const uint8_t *image,
                                    const struct CqaMask *mask,
                                    size_t margin,
                                    double *out,
                                    size_t out_len);

// Extract features and score them in one call.
//
// # Safety
// As for `cqa_extract_features`; `out` must be writable.
enum CqaStatus cqa_score_contour(const struct CqaModel *model,
                                 const uint8_t *image,
                                 const struct CqaMask *mask,
                                 size_t margin,
                                 double *out);

// Read a feature file; `strict` rejects unknown schemas.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum CqaStatus cqa_feature_file_read(const char *path, bool strict, struct CqaFeatureSet **out);

// Row count and dimension of a feature set.
//
// # Safety
// `set` must come from this library; both outputs must be writable.
enum CqaStatus cqa_feature_set_shape(const struct CqaFeatureSet *set, size_t *rows, size_t *dim);

// Copy row `index` into `out`, which must hold at least the set's dimension.
//
// # Safety
// `set` must come from this library; `out` must hold `out_len` doubles.
enum CqaStatus cqa_feature_set_row(const struct CqaFeatureSet *set,
                                   size_t index,
                                   double *out,
                                   size_t out_len);

// # Safety
// `set` must come from this library or be null; it is invalid afterwards.
void cqa_feature_set_free(struct CqaFeatureSet *set);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONTOURQA_H */

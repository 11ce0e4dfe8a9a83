#ifndef UNIFAI_H
#define UNIFAI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UnifaiStatus {
  UNIFAI_STATUS_OK = 0,
  UNIFAI_STATUS_NULL_POINTER = 1,
  UNIFAI_STATUS_INVALID_ARGUMENT = 2,
  UNIFAI_STATUS_IO = 3,
  UNIFAI_STATUS_FORMAT = 4,
  UNIFAI_STATUS_DIMENSION = 5,
  UNIFAI_STATUS_NUMERICAL = 6,
  UNIFAI_STATUS_UNSUPPORTED = 7,
  UNIFAI_STATUS_INTERNAL = 8,
} UnifaiStatus;

/*
 Loaded dataset cache.
 */
typedef struct UnifaiDataset UnifaiDataset;

/*
 Loaded model.
 */
typedef struct UnifaiModel UnifaiModel;

typedef struct UnifaiModelInfo {
  size_t input_dim;
  size_t e1_dim;
  size_t e2_dim;
  size_t num_classes;
  size_t num_z_classes;
  /*
   0 full, 1 without z-discriminator, 2 no adversaries, 3 encoder and predictor only.
   */
  uint32_t variant;
} UnifaiModelInfo;

typedef struct UnifaiProbeConfig {
  size_t hidden_width;
  size_t epochs;
  size_t batch_size;
  double learning_rate;
  double train_fraction;
  uint64_t seed;
} UnifaiProbeConfig;

typedef struct UnifaiMetrics {
  double a_y;
  /*
   Probe fields are meaningful only when `has_z` is 1.
   */
  uint8_t has_z;
  double a_z_e1;
  double a_z_e2;
  double z_majority_share;
  size_t n_eval;
} UnifaiMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *unifai_version(void);

/*
 Message for the last failed call on this thread, or null.
 */
const char *unifai_last_error(void);

/*
 Loads a checkpoint bundle (stem, `.manifest` or `.bin` path).

 # Safety
 `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum UnifaiStatus unifai_model_load(const char *path, struct UnifaiModel **out);

/*
 # Safety
 `model` must come from [`unifai_model_load`] and not be used afterwards. Null is ignored.
 */
void unifai_model_free(struct UnifaiModel *model);

/*
 # Safety
 `model` and `out` must be valid pointers.
 */
enum UnifaiStatus unifai_model_info(const struct UnifaiModel *model, struct UnifaiModelInfo *out);

/*
 Class probabilities for `rows` row-major inputs of width `cols`;
 writes `rows × num_classes` values to `out`.

 # Safety
 `x` must hold `rows * cols` values and `out` at least `out_len`.
 */
enum UnifaiStatus unifai_model_predict(const struct UnifaiModel *model,
                                       const double *x,
                                       size_t rows,
                                       size_t cols,
                                       double *out,
                                       size_t out_len);

/*
 Writes `rows × e1_dim` and `rows × e2_dim` embeddings.

 # Safety
 `x` must hold `rows * cols` values; `e1`/`e2` at least `e1_len`/`e2_len`.
 */
enum UnifaiStatus unifai_model_encode(const struct UnifaiModel *model,
                                      const double *x,
                                      size_t rows,
                                      size_t cols,
                                      double *e1,
                                      size_t e1_len,
                                      double *e2,
                                      size_t e2_len);

/*
 Loads a dataset cache manifest.

 # Safety
 `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum UnifaiStatus unifai_dataset_load(const char *path, struct UnifaiDataset **out);

/*
 # Safety
 `dataset` must come from [`unifai_dataset_load`] and not be used afterwards. Null is ignored.
 */
void unifai_dataset_free(struct UnifaiDataset *dataset);

/*
 Number of rows, or 0 for a null handle.

 # Safety
 `dataset` must be null or a live handle.
 */
size_t unifai_dataset_len(const struct UnifaiDataset *dataset);

/*
 Probe settings used when `unifai_evaluate` receives a null config.
 */
struct UnifaiProbeConfig unifai_probe_config_default(void);

/*
 `A_y` and, when the dataset carries z, probe accuracies on both embeddings.

 # Safety
 `model`, `dataset` and `out` must be valid; `probe` may be null.
 */
enum UnifaiStatus unifai_evaluate(const struct UnifaiModel *model,
                                  const struct UnifaiDataset *dataset,
                                  const struct UnifaiProbeConfig *probe,
                                  struct UnifaiMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNIFAI_H */

#ifndef MOTION_CODE_H
#define MOTION_CODE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. `Ok` is zero; every other value is an error.
typedef enum McStatus {
  MC_STATUS_OK = 0,
  MC_STATUS_NULL_POINTER = 1,
  MC_STATUS_INVALID_ARGUMENT = 2,
  MC_STATUS_IO = 3,
  MC_STATUS_PARSE = 4,
  MC_STATUS_DATASET = 5,
  MC_STATUS_VERSION = 6,
  MC_STATUS_NUMERICAL = 7,
  MC_STATUS_UNKNOWN_CLASS = 8,
  MC_STATUS_BUFFER_TOO_SMALL = 9,
  MC_STATUS_PANIC = 10,
} McStatus;

typedef enum McFormat {
  MC_FORMAT_RAGGED = 0,
  MC_FORMAT_UCR = 1,
} McFormat;

// A loaded, normalized dataset with its label map.
typedef struct McDataset McDataset;

// A model plus its parsed parameters.
typedef struct McModel McModel;

// Training hyperparameters; fill with `mc_hyperparams_default`.
typedef struct McHyperparams {
  size_t m;
  size_t d;
  size_t num_components;
  double lambda;
  double sigma;
  size_t max_iters;
  double epsilon;
  double jitter;
  uint64_t seed;
} McHyperparams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null if none. The
// pointer stays valid until the next failing call on the same thread.
const char *mc_last_error(void);

// Writes the default hyperparameters to `out`.
//
// # Safety
// `out` must be null or point to writable memory for one `McHyperparams`.
enum McStatus mc_hyperparams_default(struct McHyperparams *out);

// Loads a training dataset, fitting its label map and scales.
//
// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum McStatus mc_dataset_load(const char *path, enum McFormat format, struct McDataset **out);

// Loads a dataset using a model's label map and scales, as needed to pair
// a saved model with its training data. Fails if the data does not match
// the model's training digest.
//
// # Safety
// `model` must come from this library; `path` nul-terminated; `out` writable.
enum McStatus mc_dataset_load_for_model(const char *path,
                                        enum McFormat format,
                                        const struct McModel *model,
                                        struct McDataset **out);

// Number of classes, or 0 for a null handle.
//
// # Safety
// `dataset` must be null or come from this library.
size_t mc_dataset_num_classes(const struct McDataset *dataset);

// # Safety
// `dataset` must be null or come from this library and not be freed twice.
void mc_dataset_free(struct McDataset *dataset);

// Trains a model on `dataset`. `hyper` may be null for defaults.
//
// # Safety
// Pointers must be null or valid; `out` must be writable.
enum McStatus mc_train(const struct McDataset *dataset,
                       const struct McHyperparams *hyper,
                       struct McModel **out);

// # Safety
// `model` must come from this library; `path` must be nul-terminated.
enum McStatus mc_model_save(const struct McModel *model, const char *path);

// # Safety
// `path` must be nul-terminated; `out` must be writable.
enum McStatus mc_model_load(const char *path, struct McModel **out);

// # Safety
// `model` must be null or come from this library and not be freed twice.
void mc_model_free(struct McModel *model);

// Number of classes, or 0 for a null handle.
//
// # Safety
// `model` must be null or come from this library.
size_t mc_model_num_classes(const struct McModel *model);

// Informative timestamps per class (`m`), or 0 for a null handle.
//
// # Safety
// `model` must be null or come from this library.
size_t mc_model_num_timestamps(const struct McModel *model);

// Original label of class index `class`.
//
// # Safety
// `model` must come from this library; `out` must be writable.
enum McStatus mc_model_label(const struct McModel *model, size_t class_, int64_t *out);

// Sorted informative timestamps of class index `class`, in original time
// units, written to `out[0..len]`; `len` must be at least `m`.
//
// # Safety
// `model` must come from this library; `out` must hold `len` doubles.
enum McStatus mc_model_timestamps(const struct McModel *model,
                                  size_t class_,
                                  double *out,
                                  size_t len);

// Classifies one series given in original units. Writes the predicted
// original label to `label_out` and, if `distances_out` is not null, the
// distance to every class (length `mc_model_num_classes`).
//
// # Safety
// Handles must come from this library; `t` and `y` must hold `n` doubles.
enum McStatus mc_classify(const struct McModel *model,
                          const struct McDataset *train_data,
                          const double *t,
                          const double *y,
                          size_t n,
                          int64_t *label_out,
                          double *distances_out);

// Predicted mean and variance of the class with original label `label` at
// `n` timestamps in original units (up to 1.25x the training span past its
// start). `variance_out` may be null.
//
// # Safety
// Handles must come from this library; arrays must hold `n` doubles.
enum McStatus mc_forecast(const struct McModel *model,
                          const struct McDataset *train_data,
                          int64_t label,
                          const double *t,
                          size_t n,
                          double *mean_out,
                          double *variance_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOTION_CODE_H */

#ifndef GROWNET_H
#define GROWNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GrownetStatus {
  GROWNET_STATUS_OK = 0,
  GROWNET_STATUS_NULL_POINTER = 1,
  GROWNET_STATUS_INVALID_ARGUMENT = 2,
  GROWNET_STATUS_IO = 3,
  GROWNET_STATUS_PARSE = 4,
  GROWNET_STATUS_CHECKPOINT = 5,
  GROWNET_STATUS_DATA = 6,
  GROWNET_STATUS_NUMERICAL = 7,
  // The query does not apply to this architecture (for example the hard
  // size of a tunnel network).
  GROWNET_STATUS_NOT_APPLICABLE = 8,
  // An internal panic was caught.
  GROWNET_STATUS_PANIC = 9,
} GrownetStatus;

// A loaded checkpoint.
typedef struct GrownetModel GrownetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if none failed.
// The pointer stays valid until the next failing call on the same thread.
const char *grownet_last_error_message(void);

// Forgets the last error message on this thread.
void grownet_clear_error(void);

// Library version as a static NUL-terminated string.
const char *grownet_version(void);

// Loads a JSON checkpoint. On success `*model_out` owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `model_out` writable.
enum GrownetStatus grownet_model_load(const char *path, struct GrownetModel **model_out);

// Writes the model, including any pruning, as a JSON checkpoint.
//
// # Safety
// `model` must come from [`grownet_model_load`]; `path` must be a
// NUL-terminated string.
enum GrownetStatus grownet_model_save(const struct GrownetModel *model, const char *path);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must be null or come from [`grownet_model_load`] and not have
// been freed already.
void grownet_model_free(struct GrownetModel *model);

// Input columns, output columns and parameter count (budding trees count
// only their evaluated path). Any of the out pointers may be null.
//
// # Safety
// `model` must come from [`grownet_model_load`].
enum GrownetStatus grownet_model_dims(const struct GrownetModel *model,
                                      size_t *input_dim,
                                      size_t *output_dim,
                                      size_t *num_params);

// Architecture name (`tunnel`, `highway`, `budding` or `mlp-baseline`) as a
// static string.
//
// # Safety
// `model` must come from [`grownet_model_load`]; `name_out` writable.
enum GrownetStatus grownet_model_architecture(const struct GrownetModel *model,
                                              const char **name_out);

// Output probabilities for `rows` row-major inputs of `cols` columns.
// `out` must hold `rows * output_dim` values.
//
// # Safety
// `inputs` must point to `rows * cols` doubles and `out` to `out_len`.
enum GrownetStatus grownet_model_predict(const struct GrownetModel *model,
                                         const double *inputs,
                                         size_t rows,
                                         size_t cols,
                                         double *out_probs,
                                         size_t out_len);

// Total soft size. Highway gates are averaged over the given inputs; the
// other architectures ignore them, and they may then be null with zero
// rows. MLP baselines have no soft size.
//
// # Safety
// `inputs` must point to `rows * cols` doubles when the model is highway.
enum GrownetStatus grownet_model_soft_size(const struct GrownetModel *model,
                                           const double *inputs,
                                           size_t rows,
                                           size_t cols,
                                           double *size_out);

// Hard size (evaluated nodes) of a budding tree.
//
// # Safety
// `model` must come from [`grownet_model_load`]; `size_out` writable.
enum GrownetStatus grownet_model_hard_size(const struct GrownetModel *model, size_t *size_out);

// Drops stale budding subtrees in place. Predictions are unchanged; other
// architectures are left as they are.
//
// # Safety
// `model` must come from [`grownet_model_load`].
enum GrownetStatus grownet_model_prune(struct GrownetModel *model);

// Generates `2 * points_per_class` standardized two-spirals points, class 0
// first. `variant` is `easy`, `medium` or `difficult`. `inputs_out` needs
// room for `2 * rows` values and `labels_out` for `rows`; `*rows_out`
// receives the row count even when the buffers are too small.
//
// # Safety
// The out buffers must hold `capacity_rows` rows.
enum GrownetStatus grownet_spirals(const char *variant,
                                   uint64_t seed,
                                   size_t points_per_class,
                                   double noise_sd,
                                   double *inputs_out,
                                   double *labels_out,
                                   size_t capacity_rows,
                                   size_t *rows_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GROWNET_H */

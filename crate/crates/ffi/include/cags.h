#ifndef CAGS_H
#define CAGS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every entry point.
typedef enum CagsStatus {
  CAGS_STATUS_OK = 0,
  CAGS_STATUS_NULL_POINTER = 1,
  CAGS_STATUS_INVALID_ARGUMENT = 2,
  CAGS_STATUS_CONFIG = 3,
  CAGS_STATUS_DIMENSION = 4,
  CAGS_STATUS_IO = 5,
  CAGS_STATUS_FORMAT = 6,
  CAGS_STATUS_NON_FINITE = 7,
  CAGS_STATUS_DEGENERATE = 8,
  CAGS_STATUS_CONTRACT = 9,
  CAGS_STATUS_BUFFER_TOO_SMALL = 10,
  CAGS_STATUS_PANIC = 11,
} CagsStatus;

// A trained model loaded from a checkpoint.
typedef struct CagsModel CagsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *cags_version(void);

// Message for the last failed call on this thread, or null if it succeeded.
// The pointer stays valid until the next call into the library on this thread.
const char *cags_last_error_message(void);

// Loads a checkpoint written by `cags train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum CagsStatus cags_model_load(const char *path, struct CagsModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from [`cags_model_load`] and not be used afterwards.
void cags_model_free(struct CagsModel *model);

// Length of the expression code expected by [`cags_model_render`], or 0 for null.
//
// # Safety
// `model` must be null or a live handle.
size_t cags_model_expression_dim(const struct CagsModel *model);

// Side length in pixels of rendered images, or 0 for null.
//
// # Safety
// `model` must be null or a live handle.
size_t cags_model_resolution(const struct CagsModel *model);

// Number of Gaussians in the model, or 0 for null.
//
// # Safety
// `model` must be null or a live handle.
size_t cags_model_gaussian_count(const struct CagsModel *model);

// Renders one frame for expression `psi` seen from a camera orbited by
// `yaw_degrees`, over a black background. Writes row-major H×W×3 values in
// [0, 1] to `out_rgb`, which must hold `resolution² · 3` doubles.
//
// # Safety
// `psi` must point to `psi_len` doubles and `out_rgb` to `out_len` writable doubles.
enum CagsStatus cags_model_render(struct CagsModel *model,
                                  const double *psi,
                                  size_t psi_len,
                                  double yaw_degrees,
                                  double *out_rgb,
                                  size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAGS_H */

#ifndef ENDODEPTH_H
#define ENDODEPTH_H

/* Generated by build.rs; edits are overwritten. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. The first four match the command line exit codes.
 */
typedef enum EdStatus {
  ED_STATUS_OK = 0,
  ED_STATUS_RUNTIME = 1,
  ED_STATUS_CONFIG = 2,
  ED_STATUS_NOT_FOUND = 3,
  ED_STATUS_NULL_POINTER = 4,
  ED_STATUS_INVALID_ARGUMENT = 5,
  ED_STATUS_BAD_CHECKPOINT = 6,
  ED_STATUS_PANIC = 7,
} EdStatus;

/**
 * Trained model loaded from a checkpoint. Opaque to C.
 */
typedef struct EdModel EdModel;

/**
 * The eight depth statistics, in the order of the metrics record.
 */
typedef struct EdDepthMetrics {
  double abs_rel;
  double sq_rel;
  double rmse;
  double rmse_log;
  double l1;
  double delta_1;
  double delta_2;
  double delta_3;
} EdDepthMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ed_version(void);

/**
 * Copies the calling thread's last error message into `buf` (always
 * NUL-terminated when `cap > 0`) and returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t ed_last_error(char *buf, size_t cap);

/**
 * Loads a checkpoint written by `endodepth train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum EdStatus ed_model_load(const char *path, struct EdModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`ed_model_load`] and not be used afterwards.
 */
void ed_model_free(struct EdModel *model);

/**
 * Square input side length the model was trained at.
 *
 * # Safety
 * `model` and `side` must be valid pointers.
 */
enum EdStatus ed_model_input_size(const struct EdModel *model, size_t *side);

/**
 * Predicts a depth map from an interleaved 8-bit RGB image
 * (`width*height*3` bytes, row major). Writes `width*height` depths.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum EdStatus ed_predict_depth(const struct EdModel *model,
                               const uint8_t *rgb,
                               size_t width,
                               size_t height,
                               double *depth_out);

/**
 * Predicts the relative pose taking points from `target`'s camera into
 * `source`'s. Writes `[rx, ry, rz, tx, ty, tz]` (axis-angle, translation).
 *
 * # Safety
 * Image buffers must hold `width*height*3` bytes; `pose_out` six values.
 */
enum EdStatus ed_predict_pose(const struct EdModel *model,
                              const uint8_t *source_rgb,
                              const uint8_t *target_rgb,
                              size_t width,
                              size_t height,
                              double *pose_out);

/**
 * Depth error statistics between two `width*height` maps. Ground-truth
 * pixels outside `[min_depth, max_depth]` are ignored. With `median_scaling`
 * nonzero the prediction is first rescaled by the ratio of medians.
 *
 * # Safety
 * Buffers must hold `width*height` values; `out` must be writable.
 */
enum EdStatus ed_depth_metrics(const double *pred,
                               const double *gt,
                               size_t width,
                               size_t height,
                               double min_depth,
                               double max_depth,
                               int32_t median_scaling,
                               struct EdDepthMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENDODEPTH_H */

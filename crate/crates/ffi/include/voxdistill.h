#ifndef VOXDISTILL_H
#define VOXDISTILL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Values 2 to 10 match the command-line exit codes.
 */
typedef enum VdStatus {
  VD_STATUS_OK = 0,
  VD_STATUS_INPUT = 2,
  VD_STATUS_BEHIND_CAMERA = 3,
  VD_STATUS_CONFIG = 4,
  VD_STATUS_FORMAT = 5,
  VD_STATUS_DIGEST = 6,
  VD_STATUS_IO = 7,
  VD_STATUS_NUMERIC = 8,
  VD_STATUS_INSUFFICIENT = 9,
  VD_STATUS_CONTRACT = 10,
  VD_STATUS_NULL_POINTER = 11,
  VD_STATUS_PANIC = 12,
} VdStatus;

typedef enum VdMode {
  VD_MODE_GLOBAL = 0,
  VD_MODE_KP = 1,
} VdMode;

typedef struct VdConfig VdConfig;

typedef struct VdIndex VdIndex;

typedef struct VdModel VdModel;

/**
 * Pinhole intrinsics of a query feature map, in pixels.
 */
typedef struct VdIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
} VdIntrinsics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *vd_version(void);

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *vd_last_error_message(void);

void vd_clear_error(void);

/**
 * Default configuration.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum VdStatus vd_config_default(struct VdConfig **out);

/**
 * Parses a JSON configuration document. Missing fields take defaults.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum VdStatus vd_config_from_json(const char *json, struct VdConfig **out);

/**
 * # Safety
 * `config` must be null or a handle from this library, not yet freed.
 */
void vd_config_free(struct VdConfig *config);

/**
 * Loads model parameters written by `voxdistill train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum VdStatus vd_model_load(const char *path, struct VdModel **out);

/**
 * Feature channels the model expects, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t vd_model_feature_dim(const struct VdModel *model);

/**
 * # Safety
 * `model` must be null or a handle from this library, not yet freed.
 */
void vd_model_free(struct VdModel *model);

/**
 * Loads a scene index written by `voxdistill build-index`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum VdStatus vd_index_load(const char *path, struct VdIndex **out);

/**
 * Number of scenes, or 0 for a null handle.
 *
 * # Safety
 * `index` must be null or a live handle.
 */
size_t vd_index_len(const struct VdIndex *index);

/**
 * Id of scene `i`, owned by the index. Null when out of range.
 *
 * # Safety
 * `index` must be null or a live handle.
 */
const char *vd_index_scene_id(const struct VdIndex *index, size_t i);

/**
 * # Safety
 * `index` must be null or a handle from this library, not yet freed.
 */
void vd_index_free(struct VdIndex *index);

/**
 * Ranks the indexed scenes for one teacher feature map.
 *
 * `features` holds `height * width * channels` floats, row-major with
 * channels innermost. `valid` is null (all pixels valid) or `width * height`
 * bytes, nonzero meaning valid. On success `*out_best` is the index position
 * of the top scene, `*out_score` its score, and, when `scores` is not null,
 * `scores[i]` receives the score of scene `i` in index order. `*out_fell_back`
 * may be null; otherwise it reports a keypoint query that had no keypoints
 * and was ranked by global descriptor.
 *
 * # Safety
 * All non-null pointers must be valid for the stated lengths; `scores` must
 * hold `vd_index_len(index)` doubles.
 */
enum VdStatus vd_query(const struct VdConfig *config,
                       const struct VdIndex *index,
                       const struct VdModel *model,
                       const float *features,
                       uint32_t width,
                       uint32_t height,
                       uint32_t channels,
                       struct VdIntrinsics intrinsics,
                       const uint8_t *valid,
                       enum VdMode mode,
                       size_t *out_best,
                       double *out_score,
                       double *scores,
                       bool *out_fell_back);

/**
 * Duplicate verdict for scenes `a` and `b` of the index. The score is the
 * global cosine in global mode and the rigid inlier fraction in keypoint mode.
 *
 * # Safety
 * Handles must be live and output pointers valid.
 */
enum VdStatus vd_dup_pair(const struct VdConfig *config,
                          const struct VdIndex *index,
                          size_t a,
                          size_t b,
                          enum VdMode mode,
                          bool *out_duplicate,
                          double *out_score);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VOXDISTILL_H */

#ifndef LIDAR_OSS_H
#define LIDAR_OSS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum LidarOssStatus {
  LIDAR_OSS_STATUS_OK = 0,
  LIDAR_OSS_STATUS_NULL_POINTER = 1,
  LIDAR_OSS_STATUS_INVALID_ARGUMENT = 2,
  LIDAR_OSS_STATUS_IO = 3,
  LIDAR_OSS_STATUS_FORMAT = 4,
  LIDAR_OSS_STATUS_CONFIG = 5,
  LIDAR_OSS_STATUS_BUFFER_TOO_SMALL = 6,
  LIDAR_OSS_STATUS_PANIC = 7,
} LidarOssStatus;

// Loaded checkpoint plus the grid and threshold used at inference.
typedef struct LidarOssModel LidarOssModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *lidar_oss_version(void);

// Message describing the last failure on this thread; empty after a
// successful call. Valid until the next call on the same thread.
const char *lidar_oss_last_error(void);

// Loads a checkpoint. On success `*out` owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum LidarOssStatus lidar_oss_model_load(const char *path, struct LidarOssModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from [`lidar_oss_model_load`] and not be used again.
void lidar_oss_model_free(struct LidarOssModel *model);

// Number of known classes, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uint32_t lidar_oss_model_num_classes(const struct LidarOssModel *model);

// Copies the known class ids (ascending) into `out`, which holds `cap`
// entries. `*written` receives the number of ids, also when the buffer is
// too small.
//
// # Safety
// `out` must point to `cap` writable `u16`s and `written` be valid.
enum LidarOssStatus lidar_oss_model_known_classes(const struct LidarOssModel *model,
                                                  uint16_t *out,
                                                  size_t cap,
                                                  size_t *written);

// Sets the unknown threshold and the label written for unknown points.
//
// # Safety
// `model` must be a live handle.
enum LidarOssStatus lidar_oss_model_set_openset(struct LidarOssModel *model,
                                                double xi,
                                                uint16_t unknown_id);

// Replaces the voxel grid: radial and height ranges, then bin counts
// along radius, azimuth and height.
//
// # Safety
// `model` must be a live handle.
enum LidarOssStatus lidar_oss_model_set_grid(struct LidarOssModel *model,
                                             double rho_min,
                                             double rho_max,
                                             double z_min,
                                             double z_max,
                                             uint32_t n_rho,
                                             uint32_t n_phi,
                                             uint32_t n_z);

// Segments one scan. `points` holds `n` records of `x, y, z, intensity`.
// Writes one label and one anomaly score per point; points outside the
// grid get the unknown label and an infinite score. Either output may be
// null to skip it.
//
// # Safety
// `points` must hold `4 * n` floats; non-null outputs must hold `n`
// entries each.
enum LidarOssStatus lidar_oss_infer(const struct LidarOssModel *model,
                                    const float *points,
                                    size_t n,
                                    uint16_t *labels_out,
                                    float *scores_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LIDAR_OSS_H */

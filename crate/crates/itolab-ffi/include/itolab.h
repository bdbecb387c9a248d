#ifndef ITOLAB_H
#define ITOLAB_H

/* Generated by cbindgen from the itolab-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned across the ABI. `Config`, `Numeric`, and `Format`
 * mirror the command-line exit codes; `Usage` covers boundary misuse (null
 * pointers, bad UTF-8, wrong buffer sizes, unknown stage names) and
 * panics caught at the boundary.
 */
typedef enum ItoStatus {
  ITO_STATUS_OK = 0,
  ITO_STATUS_USAGE = 1,
  ITO_STATUS_CONFIG = 2,
  ITO_STATUS_NUMERIC = 3,
  ITO_STATUS_FORMAT = 4,
} ItoStatus;

/**
 * Opaque trajectory handle. Create with `ito_trajectory_read`, release with
 * `ito_trajectory_free`.
 */
typedef struct ItoTrajectory ItoTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ito_version(void);

/**
 * Message from the most recent failure on the calling thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *ito_last_error_message(void);

/**
 * Runs one pipeline stage (`simulate`, `train`, `sample`, `rollout`,
 * `analyze`, or `sweep`) from a JSON run configuration, writing artifacts
 * and the stage manifest under `out_dir`. `workers` of zero means one.
 *
 * # Safety
 * All three pointers must be null or NUL-terminated strings valid for the
 * duration of the call.
 */
enum ItoStatus ito_run_stage(const char *stage,
                             const char *config_json,
                             const char *out_dir,
                             size_t workers);

/**
 * Reads a trajectory file; returns null on failure (see
 * `ito_last_error_message`).
 *
 * # Safety
 * `path` must be null or a NUL-terminated string valid for the call.
 */
struct ItoTrajectory *ito_trajectory_read(const char *path);

/**
 * Writes the trajectory to `path` in the native binary format.
 *
 * # Safety
 * `path` as in `ito_trajectory_read`; `traj` must be null or a live handle.
 */
enum ItoStatus ito_trajectory_write(const char *path, const struct ItoTrajectory *traj);

/**
 * Number of saved frames; zero for a null handle.
 *
 * # Safety
 * `traj` must be null or a live handle.
 */
size_t ito_trajectory_n_frames(const struct ItoTrajectory *traj);

/**
 * Particles per frame; zero for a null handle.
 *
 * # Safety
 * `traj` must be null or a live handle.
 */
size_t ito_trajectory_n_particles(const struct ItoTrajectory *traj);

/**
 * Spatial dimension per particle; zero for a null handle.
 *
 * # Safety
 * `traj` must be null or a live handle.
 */
size_t ito_trajectory_dim(const struct ItoTrajectory *traj);

/**
 * Physical time between saved frames; NaN for a null handle.
 *
 * # Safety
 * `traj` must be null or a live handle.
 */
double ito_trajectory_frame_interval(const struct ItoTrajectory *traj);

/**
 * Simulation temperature; NaN for a null handle.
 *
 * # Safety
 * `traj` must be null or a live handle.
 */
double ito_trajectory_temperature(const struct ItoTrajectory *traj);

/**
 * Copies all frames into `out` in row-major (frame, particle, axis) order.
 * `len` must equal `n_frames * n_particles * dim`.
 *
 * # Safety
 * `traj` must be null or a live handle; `out` must be null or valid for
 * `len` doubles.
 */
enum ItoStatus ito_trajectory_copy_frames(const struct ItoTrajectory *traj,
                                          double *out,
                                          size_t len);

/**
 * Releases a handle returned by `ito_trajectory_read`. Null is a no-op.
 *
 * # Safety
 * `traj` must be null or a live handle, and must not be used afterwards.
 */
void ito_trajectory_free(struct ItoTrajectory *traj);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ITOLAB_H */

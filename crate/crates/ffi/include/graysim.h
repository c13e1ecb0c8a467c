#ifndef GRAYSIM_H
#define GRAYSIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes shared by every entry point.
 */
typedef enum GsStatus {
  GS_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  GS_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  GS_STATUS_INVALID_UTF8 = 2,
  GS_STATUS_IO = 3,
  /**
   * Netlist syntax or semantic error; see [`gs_last_error_position`].
   */
  GS_STATUS_PARSE = 4,
  /**
   * The netlist parsed but its system could not be assembled.
   */
  GS_STATUS_BUILD = 5,
  GS_STATUS_NON_CONVERGENCE = 6,
  /**
   * A buffer length or index disagrees with the handle's dimensions.
   */
  GS_STATUS_DIMENSION = 7,
  /**
   * Numerical failure other than non-convergence.
   */
  GS_STATUS_NUMERICAL = 8,
  GS_STATUS_PANIC = 9,
} GsStatus;

/**
 * Trained network loaded from a GSNN file.
 */
typedef struct GsModel GsModel;

/**
 * Prepared netlist: system, analysis, solver settings and input schedule.
 */
typedef struct GsSystem GsSystem;

/**
 * Transient result: uniformly spaced time points with full solution vectors.
 */
typedef struct GsTrajectory GsTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library on the same thread.
 */
const char *gs_last_error(void);

/**
 * Netlist line and column (1-based) of the last failure on this thread.
 * Returns 1 and fills both when the failure carried a position, else 0.
 *
 * # Safety
 * `line` and `col` are null or valid for one write.
 */
int32_t gs_last_error_position(size_t *line, size_t *col);

/**
 * Parses and prepares a netlist file; model and txnet paths resolve against its directory.
 *
 * # Safety
 * `path` is a nul-terminated string; `out` is valid for one write.
 */
enum GsStatus gs_system_load(const char *path, struct GsSystem **out);

/**
 * Parses and prepares netlist text; relative paths resolve against `base_dir`
 * (the working directory when null).
 *
 * # Safety
 * `text` is a nul-terminated string, `base_dir` null or one; `out` is valid for one write.
 */
enum GsStatus gs_system_parse(const char *text, const char *base_dir, struct GsSystem **out);

/**
 * # Safety
 * `sys` is null or a handle from this library not yet freed.
 */
void gs_system_free(struct GsSystem *sys);

/**
 * Number of unknowns (internal states then node voltages); 0 for null.
 *
 * # Safety
 * `sys` is null or a live handle.
 */
size_t gs_system_len(const struct GsSystem *sys);

/**
 * Writes the display name of unknown `index` as a nul-terminated string.
 * `needed` (optional) receives the size including the terminator; a buffer
 * that is too small yields `GS_STATUS_DIMENSION` and no write.
 *
 * # Safety
 * `sys` is a live handle; `buf` is null or valid for `cap` writes; `needed` null or valid.
 */
enum GsStatus gs_system_unknown_name(const struct GsSystem *sys,
                                     size_t index,
                                     char *buf,
                                     size_t cap,
                                     size_t *needed);

/**
 * Steady-state solve at `u(0)`; writes the solution (length `gs_system_len`)
 * and, when non-null, the Newton iteration count.
 *
 * # Safety
 * `sys` is a live handle; `z` valid for `len` writes; `iterations` null or valid.
 */
enum GsStatus gs_system_dc(const struct GsSystem *sys, double *z, size_t len, size_t *iterations);

/**
 * Transient solve per the netlist's `analysis tran` directive.
 *
 * # Safety
 * `sys` is a live handle; `out` valid for one write.
 */
enum GsStatus gs_system_tran(const struct GsSystem *sys, struct GsTrajectory **out);

/**
 * # Safety
 * `traj` is null or a live handle.
 */
void gs_trajectory_free(struct GsTrajectory *traj);

/**
 * Number of time points, including the initial one; 0 for null.
 *
 * # Safety
 * `traj` is null or a live handle.
 */
size_t gs_trajectory_len(const struct GsTrajectory *traj);

/**
 * Copies time point `k`: its time into `t` and its solution into `z`.
 *
 * # Safety
 * `traj` is a live handle; `t` valid for one write; `z` valid for `len` writes.
 */
enum GsStatus gs_trajectory_point(const struct GsTrajectory *traj,
                                  size_t k,
                                  double *t,
                                  double *z,
                                  size_t len);

/**
 * # Safety
 * `path` is a nul-terminated string; `out` valid for one write.
 */
enum GsStatus gs_model_load(const char *path, struct GsModel **out);

/**
 * # Safety
 * `model` is null or a live handle.
 */
void gs_model_free(struct GsModel *model);

/**
 * # Safety
 * `model` is null or a live handle.
 */
size_t gs_model_input_dim(const struct GsModel *model);

/**
 * # Safety
 * `model` is null or a live handle.
 */
size_t gs_model_output_dim(const struct GsModel *model);

/**
 * Network output at `x`.
 *
 * # Safety
 * `model` is a live handle; `x` valid for `nx` reads, `y` for `ny` writes.
 */
enum GsStatus gs_model_forward(const struct GsModel *model,
                               const double *x,
                               size_t nx,
                               double *y,
                               size_t ny);

/**
 * Input Jacobian at `x`, row-major `output_dim x input_dim`.
 *
 * # Safety
 * `model` is a live handle; `x` valid for `nx` reads, `jac` for `len` writes.
 */
enum GsStatus gs_model_input_jacobian(const struct GsModel *model,
                                      const double *x,
                                      size_t nx,
                                      double *jac,
                                      size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRAYSIM_H */

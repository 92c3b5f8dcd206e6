#ifndef CDIS_H
#define CDIS_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Outcome of a call. Codes 2 to 4 match the command-line exit codes.
typedef enum CdisStatus {
  CDIS_STATUS_OK = 0,
  // Null pointer, bad length, or invalid UTF-8 path.
  CDIS_STATUS_INVALID_ARGUMENT = 1,
  // Configuration or contract violation.
  CDIS_STATUS_VALIDATION = 2,
  // Unreadable, truncated or malformed data.
  CDIS_STATUS_DATA = 3,
  // Undefined AUC or other numerical failure.
  CDIS_STATUS_NUMERICAL = 4,
  CDIS_STATUS_PANIC = 5,
} CdisStatus;

// A fused, standardized multi-channel cube.
typedef struct CdisCube CdisCube;

// A 3-D scalar volume.
typedef struct CdisVolume CdisVolume;

// Confusion counts and rates. Undefined rates are NaN.
typedef struct CdisClassification {
  size_t tp;
  size_t fp;
  size_t tn;
  size_t fn_;
  double accuracy;
  double sensitivity;
  double specificity;
} CdisClassification;

// Nelder-Mead settings. `max_iter == 0` means `500 * n`; `max_evals == 0`
// means unlimited.
typedef struct CdisNmOptions {
  double alpha;
  double gamma;
  double beta;
  double delta;
  double init_step;
  double tol_f;
  double tol_x;
  size_t max_iter;
  size_t max_evals;
} CdisNmOptions;

// Objective callback: returns f(x) for `n` coordinates.
typedef double (*CdisObjective)(const double *x, size_t n, void *user_data);

// Summary of a minimization.
typedef struct CdisNmSummary {
  double f_best;
  size_t iterations;
  size_t evaluations;
  // 0 converged, 1 flat initial simplex, 2 iteration cap, 3 evaluation cap.
  uint32_t stop_reason;
} CdisNmSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *cdis_version(void);

// Message of the last error on this thread, or NULL. Valid until the next
// call into the library from the same thread.
const char *cdis_last_error_message(void);

// Dotted machine-readable tag of the last error on this thread, or NULL.
const char *cdis_last_error_tag(void);

// Copies `dims[0]*dims[1]*dims[2]` values (x fastest) into a new volume.
//
// # Safety
// `dims` and `spacing` point to 3 values, `data` to the voxel count, `out`
// is writable.
enum CdisStatus cdis_volume_new(const size_t *dims,
                                const double *spacing,
                                const double *data,
                                struct CdisVolume **out_volume);

// # Safety
// `path` is a NUL-terminated string; `out_volume` is writable.
enum CdisStatus cdis_volume_read_nifti(const char *path_, struct CdisVolume **out_volume);

// Writes little-endian float32 NIfTI-1.
//
// # Safety
// `volume` is a live handle; `path` is a NUL-terminated string.
enum CdisStatus cdis_volume_write_nifti(const struct CdisVolume *volume, const char *path_);

// # Safety
// `volume` is a live handle; `dims` and `spacing` (either may be NULL)
// have room for 3 values.
enum CdisStatus cdis_volume_shape(const struct CdisVolume *volume, size_t *dims, double *spacing);

// Number of voxels, or 0 for NULL.
//
// # Safety
// `volume` is NULL or a live handle.
size_t cdis_volume_len(const struct CdisVolume *volume);

// Copies the voxels into `buf`, which must hold exactly the voxel count.
//
// # Safety
// `volume` is a live handle; `buf` has room for `len` doubles.
enum CdisStatus cdis_volume_copy_data(const struct CdisVolume *volume, double *buf, size_t len);

// # Safety
// `volume` is NULL or a handle not yet freed.
void cdis_volume_free(struct CdisVolume *volume);

// Reads a cube file; the patient id is taken from the file stem.
//
// # Safety
// `path` is a NUL-terminated string; `out_cube` is writable.
enum CdisStatus cdis_cube_read(const char *path_, struct CdisCube **out_cube);

// # Safety
// `cube` is a live handle; `dims` has room for 3 values; `n_channels` is
// writable.
enum CdisStatus cdis_cube_shape(const struct CdisCube *cube, size_t *dims, size_t *n_channels);

// Copies channel `index` into `buf` (exactly the voxel count).
//
// # Safety
// `cube` is a live handle; `buf` has room for `len` doubles.
enum CdisStatus cdis_cube_copy_channel(const struct CdisCube *cube,
                                       size_t index,
                                       double *buf,
                                       size_t len);

// # Safety
// `cube` is NULL or a handle not yet freed.
void cdis_cube_free(struct CdisCube *cube);

// Rank-based (Mann-Whitney) AUC with midranks for ties. Labels are 0/1.
//
// # Safety
// `scores` and `labels` hold `n` values; `out_auc` is writable.
enum CdisStatus cdis_auc_rank(const double *scores,
                              const uint8_t *labels,
                              size_t n,
                              double *out_auc);

// Voxelwise AUC of `scores` against a binary `mask` volume.
//
// # Safety
// Both handles are live; `out_auc` is writable.
enum CdisStatus cdis_volume_auc(const struct CdisVolume *scores,
                                const struct CdisVolume *mask,
                                double *out_auc);

// # Safety
// `predictions` and `labels` hold `n` values; `out_report` is writable.
enum CdisStatus cdis_classify(const uint8_t *predictions,
                              const uint8_t *labels,
                              size_t n,
                              uint8_t positive_class,
                              struct CdisClassification *out_report);

// Mixes `n_channels` signal arrays of `n_voxels` each (channel-major,
// ascending b) as `exp(sum rho_i ln max(S_i, eps))`, then maps the
// `p_lo`/`p_hi` percentiles onto [0, 1]. `eps <= 0` selects
// `1e-6 * max signal`. Writes `n_voxels` values to `out`.
//
// # Safety
// `channels` holds `n_channels * n_voxels` values; `bvalues` and `rho`
// hold `n_channels`; `out` has room for `n_voxels`.
enum CdisStatus cdis_mix_calibrate(const double *channels,
                                   const double *bvalues,
                                   const double *rho,
                                   size_t n_channels,
                                   size_t n_voxels,
                                   double eps,
                                   double p_lo,
                                   double p_hi,
                                   double *out_signal);

// # Safety
// `out_options` is writable.
enum CdisStatus cdis_nm_options_default(struct CdisNmOptions *out_options);

// Minimizes `f` from `x0`. `options` may be NULL for defaults; `lower` and
// `upper` may both be NULL for an unbounded search. Writes the best point
// to `x_out`.
//
// # Safety
// `x0`, `x_out`, and non-NULL `lower`/`upper` hold `n` values; `f` is
// callable with `user_data`; `out_summary` is NULL or writable.
enum CdisStatus cdis_nelder_mead(CdisObjective f,
                                 void *user_data,
                                 const double *x0,
                                 size_t n,
                                 const struct CdisNmOptions *options,
                                 const double *lower,
                                 const double *upper,
                                 double *x_out,
                                 struct CdisNmSummary *out_summary);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CDIS_H */

#ifndef LATENT_ABCSS_H
#define LATENT_ABCSS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum LabcssStatus {
  LABCSS_STATUS_OK = 0,
  LABCSS_STATUS_NULL_POINTER = 1,
  /**
   * Invalid configuration, dimensions, paths or file contents.
   */
  LABCSS_STATUS_INVALID_INPUT = 2,
  /**
   * Numerical failure: non-finite values, factorization failure, divergence.
   */
  LABCSS_STATUS_NUMERIC = 3,
  /**
   * The threshold curve had no curvature peak; diagnostics are still
   * available from the inversion handle.
   */
  LABCSS_STATUS_NO_CURVATURE_PEAK = 4,
  LABCSS_STATUS_PANIC = 5,
} LabcssStatus;

/**
 * Result of one inversion.
 */
typedef struct LabcssInversion LabcssInversion;

/**
 * Trained generative model.
 */
typedef struct LabcssModel LabcssModel;

/**
 * Straight-ray travel-time operator.
 */
typedef struct LabcssRayMatrix LabcssRayMatrix;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none failed.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *labcss_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *labcss_version(void);

/**
 * Loads a model checkpoint written by the `train` command.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LabcssStatus labcss_model_load(const char *path, struct LabcssModel **out);

/**
 * # Safety
 * `model` must come from [`labcss_model_load`] and not be used afterwards.
 */
void labcss_model_free(struct LabcssModel *model);

/**
 * Writes the field, travel-time and latent dimensions.
 *
 * # Safety
 * All pointers must be valid.
 */
enum LabcssStatus labcss_model_dims(const struct LabcssModel *model,
                                    size_t *x_dim,
                                    size_t *y_dim,
                                    size_t *latent_dim);

/**
 * Maps `n` latent vectors (row-major, `n × latent_dim`) to fields
 * (`n × x_dim`) and travel times (`n × y_dim`). Either output may be null.
 *
 * # Safety
 * Buffers must hold the stated number of doubles.
 */
enum LabcssStatus labcss_model_generate(const struct LabcssModel *model,
                                        const double *z,
                                        size_t n,
                                        double *x_out,
                                        double *y_out);

/**
 * Builds the operator for a grid of `n_rows × n_cols` square cells of side
 * `cell_size` and two boreholes `separation` apart, with sources and
 * receivers evenly spaced between `depth_min` and `depth_max`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum LabcssStatus labcss_ray_matrix_new(size_t n_rows,
                                        size_t n_cols,
                                        double cell_size,
                                        size_t n_sources,
                                        size_t n_receivers,
                                        double depth_min,
                                        double depth_max,
                                        double separation,
                                        struct LabcssRayMatrix **out);

/**
 * Loads an operator saved under the array stem `stem`.
 *
 * # Safety
 * `stem` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LabcssStatus labcss_ray_matrix_load(const char *stem, struct LabcssRayMatrix **out);

/**
 * # Safety
 * `a` must come from a `labcss_ray_matrix_*` constructor and not be used
 * afterwards.
 */
void labcss_ray_matrix_free(struct LabcssRayMatrix *a);

/**
 * # Safety
 * All pointers must be valid.
 */
enum LabcssStatus labcss_ray_matrix_dims(const struct LabcssRayMatrix *a,
                                         size_t *n_rays,
                                         size_t *n_cells);

/**
 * Travel times `y = A x` for one slowness field.
 *
 * # Safety
 * `x` must hold `n_cells` and `y` `n_rays` doubles.
 */
enum LabcssStatus labcss_ray_matrix_apply(const struct LabcssRayMatrix *a,
                                          const double *x,
                                          double *y);

/**
 * Inverts one observation vector of length `n_obs`: deep Subset
 * Simulation run, threshold selection by curvature and a final run at the
 * selected threshold. `config_json` is a pipeline configuration in JSON
 * (null for the defaults); only its sampler, threshold grid and smoothing
 * settings are used.
 *
 * On [`LabcssStatus::NoCurvaturePeak`] the handle is still written so the
 * threshold curve can be inspected.
 *
 * # Safety
 * `y_obs` must hold `n_obs` doubles; other pointers must be valid.
 */
enum LabcssStatus labcss_invert(const struct LabcssModel *model,
                                const struct LabcssRayMatrix *a,
                                const double *y_obs,
                                size_t n_obs,
                                const char *config_json,
                                uint64_t seed,
                                struct LabcssInversion **out);

/**
 * # Safety
 * `inv` must come from [`labcss_invert`] and not be used afterwards.
 */
void labcss_inversion_free(struct LabcssInversion *inv);

/**
 * Selected threshold (squared ns) and the stagnation level in normalized
 * units (ns). `selected_eps` is set to NaN when no threshold was selected.
 *
 * # Safety
 * All pointers must be valid.
 */
enum LabcssStatus labcss_inversion_thresholds(const struct LabcssInversion *inv,
                                              double *selected_eps,
                                              double *stagnation_eps_n);

/**
 * Shape of the solution set; zero rows when no threshold was selected.
 *
 * # Safety
 * All pointers must be valid.
 */
enum LabcssStatus labcss_inversion_solutions_shape(const struct LabcssInversion *inv,
                                                   size_t *rows,
                                                   size_t *cols);

/**
 * Copies the solution fields row-major into `buf` of `len` doubles.
 *
 * # Safety
 * `buf` must hold `len` doubles.
 */
enum LabcssStatus labcss_inversion_copy_solutions(const struct LabcssInversion *inv,
                                                  double *buf,
                                                  size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LATENT_ABCSS_H */

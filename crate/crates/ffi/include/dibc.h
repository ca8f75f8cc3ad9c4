/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef DIBC_H
#define DIBC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Values 2 to 5 match the command-line exit codes.
 */
typedef enum DibcStatus {
  DIBC_STATUS_OK = 0,
  /**
   * Null pointer, zero size or malformed string.
   */
  DIBC_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Bad data, parameters or configuration.
   */
  DIBC_STATUS_DATA = 2,
  DIBC_STATUS_IO = 3,
  DIBC_STATUS_NUMERICAL = 4,
  /**
   * Transport failure or an internal panic.
   */
  DIBC_STATUS_INTERNAL = 5,
} DibcStatus;

/**
 * Posterior draws of the model parameters.
 */
typedef struct DibcDraws DibcDraws;

/**
 * Outcome of a full fit.
 */
typedef struct DibcFitResult DibcFitResult;

typedef struct DibcMetrics {
  double accuracy;
  double ari;
  double f_measure;
} DibcMetrics;

/**
 * Settings for [`dibc_fit`]. Start from [`dibc_fit_config_default`].
 */
typedef struct DibcFitConfig {
  size_t workers;
  size_t clusters;
  size_t subcomponents;
  size_t iterations;
  size_t burn_in;
  size_t refine_samples;
  size_t candidates;
  size_t param_iterations;
  size_t param_burn_in;
  double refine_alpha;
  /**
   * Nonzero selects the Binder loss instead of variation of information.
   */
  uint8_t binder_loss;
  uint64_t seed;
} DibcFitConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call on the same thread.
 */
const char *dibc_last_error(void);

/**
 * Reads draws saved by a fit.
 */
enum DibcStatus dibc_draws_load(const char *file, struct DibcDraws **out);

enum DibcStatus dibc_draws_save(const struct DibcDraws *draws, const char *file);

void dibc_draws_free(struct DibcDraws *draws);

/**
 * Data dimension, or 0 for a null handle.
 */
size_t dibc_draws_dim(const struct DibcDraws *draws);

/**
 * Number of clusters, or 0 for a null handle.
 */
size_t dibc_draws_clusters(const struct DibcDraws *draws);

/**
 * Number of stored draws, or 0 for a null handle.
 */
size_t dibc_draws_count(const struct DibcDraws *draws);

/**
 * Assigns `n` row-major points to clusters. `probs` may be null; otherwise
 * it receives `n * dibc_draws_clusters(draws)` values.
 */
enum DibcStatus dibc_classify(const struct DibcDraws *draws,
                              const double *values,
                              size_t n,
                              size_t dim,
                              uint32_t *labels,
                              double *probs);

/**
 * Simulates `n` points from the posterior predictive into `values`
 * (`n * dim`, row-major) and their clusters into `clusters`.
 */
enum DibcStatus dibc_predict(const struct DibcDraws *draws,
                             size_t n,
                             uint64_t seed,
                             double *values,
                             uint32_t *clusters);

/**
 * Variation of information between two labelings of `n` items.
 */
enum DibcStatus dibc_vi_distance(const uint32_t *a, const uint32_t *b, size_t n, double *out);

/**
 * Accuracy, adjusted Rand index and pair F-measure of `pred` against `truth`.
 */
enum DibcStatus dibc_metrics(const uint32_t *truth,
                             const uint32_t *pred,
                             size_t n,
                             struct DibcMetrics *out);

struct DibcFitConfig dibc_fit_config_default(void);

/**
 * Runs the full pipeline on `n` row-major points with in-process workers.
 */
enum DibcStatus dibc_fit(const double *values,
                         size_t n,
                         size_t dim,
                         const struct DibcFitConfig *config,
                         struct DibcFitResult **out);

void dibc_fit_result_free(struct DibcFitResult *result);

/**
 * Number of fitted rows, or 0 for a null handle.
 */
size_t dibc_fit_result_len(const struct DibcFitResult *result);

/**
 * Copies the one-based cluster and subcomponent of every fitted row.
 * `subcomponents` may be null.
 */
enum DibcStatus dibc_fit_result_labels(const struct DibcFitResult *result,
                                       uint32_t *clusters,
                                       uint32_t *subcomponents);

/**
 * Copies the fit's posterior draws into a new handle.
 */
enum DibcStatus dibc_fit_result_draws(const struct DibcFitResult *result, struct DibcDraws **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIBC_H */

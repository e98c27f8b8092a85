#ifndef UPPLDA_H
#define UPPLDA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UppldaStatus {
  UPPLDA_STATUS_OK = 0,
  UPPLDA_STATUS_NULL_POINTER = 1,
  UPPLDA_STATUS_INVALID_ARGUMENT = 2,
  UPPLDA_STATUS_IO = 3,
  UPPLDA_STATUS_FORMAT = 4,
  UPPLDA_STATUS_NUMERICAL = 5,
  UPPLDA_STATUS_PANIC = 6,
} UppldaStatus;

typedef enum UppldaScoringMode {
  // Uncertainties are ignored.
  UPPLDA_SCORING_MODE_PLDA = 0,
  UPPLDA_SCORING_MODE_UP_PLDA = 1,
} UppldaScoringMode;

typedef enum UppldaLengthScaleForm {
  UPPLDA_LENGTH_SCALE_FORM_MAHALANOBIS = 0,
  UPPLDA_LENGTH_SCALE_FORM_LITERAL = 1,
} UppldaLengthScaleForm;

// Pooling-head parameters (batch norm and affine layer).
typedef struct UppldaHead UppldaHead;

// A trained PLDA model.
typedef struct UppldaModel UppldaModel;

// Centering statistics: mean and total covariance.
typedef struct UppldaStats UppldaStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or an empty string.
// The pointer stays valid until the next call into this library on the same thread.
const char *upplda_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *upplda_version(void);

// Loads a model archive written by `upplda train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum UppldaStatus upplda_model_load(const char *path, struct UppldaModel **out);

// Model with `Φ_B = diag(between)` and `Σ = diag(residual)`.
//
// # Safety
// The three arrays must hold `dim` values; `out` must be a valid pointer.
enum UppldaStatus upplda_model_from_diagonal(size_t dim,
                                             const double *mean,
                                             const double *between,
                                             const double *residual,
                                             struct UppldaModel **out);

// # Safety
// `model` must come from this library and not have been freed. Null is ignored.
void upplda_model_free(struct UppldaModel *model);

// Embedding dimension, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t upplda_model_dim(const struct UppldaModel *model);

// Log-likelihood ratio of one trial. Uncertainty arrays may be null (zero
// uncertainty); they are ignored in `UPPLDA_SCORING_MODE_PLDA`.
//
// # Safety
// Non-null arrays must hold `dim` values; `out` must be a valid pointer.
enum UppldaStatus upplda_score(const struct UppldaModel *model,
                               enum UppldaScoringMode mode,
                               size_t dim,
                               const double *enroll_vec,
                               const double *enroll_unc,
                               const double *test_vec,
                               const double *test_unc,
                               double *out);

// Pools `n_frames` frame estimates into a Gaussian posterior. `means` and
// `precisions` are `n_frames × dim` row-major. Null prior arrays select the
// standard prior `(0, I)`.
//
// # Safety
// Arrays must have the sizes described above.
enum UppldaStatus upplda_pool_posterior(size_t dim,
                                        size_t n_frames,
                                        const double *means,
                                        const double *precisions,
                                        const double *prior_mean,
                                        const double *prior_precision,
                                        double *out_mean,
                                        double *out_precision);

// Loads pooling-head parameters.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum UppldaStatus upplda_head_load(const char *path, struct UppldaHead **out);

// # Safety
// `head` must come from this library and not have been freed. Null is ignored.
void upplda_head_free(struct UppldaHead *head);

// Input and output dimensions of the head; either pointer may be null.
//
// # Safety
// `head` must be a live handle.
enum UppldaStatus upplda_head_dims(const struct UppldaHead *head,
                                   size_t *input_dim,
                                   size_t *output_dim);

// Maps a pooled posterior through the head to an embedding and its diagonal
// uncertainty. Inputs hold the head's input dimension, outputs its output dimension.
//
// # Safety
// Arrays must have the sizes given by `upplda_head_dims`.
enum UppldaStatus upplda_head_propagate(const struct UppldaHead *head,
                                        const double *post_mean,
                                        const double *post_precision,
                                        double *out_vec,
                                        double *out_unc);

// Loads centering statistics written by `upplda train --stats-out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum UppldaStatus upplda_stats_load(const char *path, struct UppldaStats **out);

// # Safety
// `stats` must come from this library and not have been freed. Null is ignored.
void upplda_stats_free(struct UppldaStats *stats);

// Length-scales one embedding. With `uncertainty_aware` the scaling
// covariance includes `diag(unc)`. A null `unc` means zero uncertainty;
// `out_unc` may be null if the scaled uncertainty is not wanted.
//
// # Safety
// Non-null arrays must hold `dim` values.
enum UppldaStatus upplda_length_scale(const struct UppldaStats *stats,
                                      enum UppldaLengthScaleForm form,
                                      bool uncertainty_aware,
                                      size_t dim,
                                      const double *vec,
                                      const double *unc,
                                      double *out_vec,
                                      double *out_unc);

// Equal error rate as a fraction.
//
// # Safety
// `targets` and `nontargets` must hold the given number of scores.
enum UppldaStatus upplda_eer(const double *targets,
                             size_t n_targets,
                             const double *nontargets,
                             size_t n_nontargets,
                             double *out);

// Normalized minimum detection cost.
//
// # Safety
// `targets` and `nontargets` must hold the given number of scores.
enum UppldaStatus upplda_min_dcf(const double *targets,
                                 size_t n_targets,
                                 const double *nontargets,
                                 size_t n_nontargets,
                                 double p_target,
                                 double c_fa,
                                 double c_miss,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UPPLDA_H */

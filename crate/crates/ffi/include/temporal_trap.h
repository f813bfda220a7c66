#ifndef TEMPORAL_TRAP_H
#define TEMPORAL_TRAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result codes.
 */
typedef enum tt_status {
  TT_STATUS_OK = 0,
  TT_STATUS_NULL_POINTER = 1,
  TT_STATUS_INVALID_UTF8 = 2,
  TT_STATUS_DIMENSION_MISMATCH = 3,
  TT_STATUS_INVALID_BUDGET = 4,
  TT_STATUS_INVALID_MODEL = 5,
  TT_STATUS_INVALID_PARAMETER = 6,
  TT_STATUS_NON_FINITE = 7,
  TT_STATUS_ZERO_VIDEO_GRADIENT = 8,
  TT_STATUS_ASSUMPTION_VIOLATION = 9,
  TT_STATUS_PROPOSITION_VIOLATION = 10,
  TT_STATUS_DIVERGENCE = 11,
  TT_STATUS_INVALID_SCORES = 12,
  TT_STATUS_INVALID_RESPONSE = 13,
  TT_STATUS_PARSE = 14,
  TT_STATUS_INDEX_OUT_OF_RANGE = 15,
  TT_STATUS_PANIC = 16,
  TT_STATUS_OTHER = 17,
} tt_status;

/**
 * Opaque model handle.
 */
typedef struct tt_model tt_model;

/**
 * Opaque trajectory handle.
 */
typedef struct tt_trajectory tt_trajectory;

/**
 * One trajectory row. Losses are after the step's update.
 */
typedef struct tt_step_row {
  uint64_t step;
  double eta;
  uint32_t m;
  uint64_t sample;
  double image_loss;
  double video_loss;
  double alignment;
  double param_norm;
} tt_step_row;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, static NUL-terminated string.
 */
const char *tt_version(void);

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next library call on the same thread.
 */
const char *tt_last_error(void);

/**
 * Parses a model document (JSON).
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` a valid pointer.
 */
enum tt_status tt_model_from_json(const char *json, struct tt_model **out);

/**
 * The canned eight-dimensional conflict geometry. `theta0_out`, when not
 * NULL, receives the matching starting point (8 values).
 *
 * # Safety
 * `out` must be valid; `theta0_out` NULL or room for 8 doubles.
 */
enum tt_status tt_model_trap_geometry(struct tt_model **out, double *theta0_out);

/**
 * # Safety
 * `model` must come from this library and not be freed twice.
 */
void tt_model_free(struct tt_model *model);

/**
 * Parameter dimension, 0 for NULL.
 *
 * # Safety
 * `model` NULL or a live handle.
 */
size_t tt_model_dim(const struct tt_model *model);

/**
 * # Safety
 * Pointers valid for the stated lengths.
 */
enum tt_status tt_image_loss(const struct tt_model *model,
                             const double *theta,
                             size_t len,
                             double *out);

/**
 * # Safety
 * Pointers valid for the stated lengths.
 */
enum tt_status tt_image_grad(const struct tt_model *model,
                             const double *theta,
                             size_t len,
                             double *out,
                             size_t out_len);

/**
 * Deterministic video loss at budget `m`.
 *
 * # Safety
 * Pointers valid for the stated lengths.
 */
enum tt_status tt_video_loss(const struct tt_model *model,
                             const double *theta,
                             size_t len,
                             uint32_t m,
                             double *out);

/**
 * One stochastic video gradient drawn from the stream `(seed, trial, step)`.
 *
 * # Safety
 * Pointers valid for the stated lengths.
 */
enum tt_status tt_video_grad(const struct tt_model *model,
                             const double *theta,
                             size_t len,
                             uint32_t m,
                             uint32_t m_min,
                             uint64_t seed,
                             uint64_t trial,
                             uint64_t step,
                             double *out,
                             size_t out_len);

/**
 * Inner product of two gradients.
 *
 * # Safety
 * Both arrays hold `len` doubles.
 */
enum tt_status tt_alignment(const double *a, const double *b, size_t len, double *out);

/**
 * Largest step for which one image step is guaranteed to raise the image
 * loss. `*present` is false when the gradients do not conflict.
 *
 * # Safety
 * Both arrays hold `len` doubles; outputs valid.
 */
enum tt_status tt_conflict_step_bound(const double *g_img,
                                      const double *g_vid,
                                      size_t len,
                                      double beta_img,
                                      double *out,
                                      bool *present);

/**
 * Threshold budget for a tabulated `α` over the given budgets
 * (`alpha[i]` is `α(budgets[i])`).
 *
 * # Safety
 * Both arrays hold `len` values; outputs valid.
 */
enum tt_status tt_find_threshold(double rho_sh,
                                 double rho_tmp,
                                 const uint32_t *budget_values,
                                 const double *alpha,
                                 size_t len,
                                 uint32_t *out,
                                 bool *present);

/**
 * Descent bound `−η·a + (β/2)·η²·s`.
 *
 * # Safety
 * `out` valid.
 */
enum tt_status tt_prop3_bound(double eta,
                              double beta_img,
                              double alignment_term,
                              double second_moment,
                              double *out);

/**
 * Rule-based budget from five levels (0 = low … 3 = extreme), in the order
 * event duration, motion continuity, causal relations, object interactions,
 * fine-grained attributes.
 *
 * # Safety
 * `levels` holds 5 bytes; `out` valid.
 */
enum tt_status tt_allocate_rule_based(const uint8_t *levels, uint32_t *out);

/**
 * Similarity-based budget for `frames × dim` row-major unit embeddings.
 * NULL `budget_values` selects the default budget set.
 *
 * # Safety
 * `embeddings` holds `frames·dim` doubles; `budget_values` NULL or
 * `n_budgets` values; `out` valid.
 */
enum tt_status tt_allocate_similarity(const double *embeddings,
                                      size_t frames,
                                      size_t dim,
                                      double threshold,
                                      const uint32_t *budget_values,
                                      size_t n_budgets,
                                      uint32_t *out);

/**
 * Parses a predictor reply into an admissible budget.
 *
 * # Safety
 * `reply` NUL-terminated; `budget_values` NULL or `n_budgets` values; `out` valid.
 */
enum tt_status tt_parse_vlm_reply(const char *reply,
                                  const uint32_t *budget_values,
                                  size_t n_budgets,
                                  uint32_t *out);

/**
 * Multi-step simulation. `policy_json` is a budget-policy document
 * (e.g. `{"fixed": 64}`), NULL for the hybrid policy; the corpus is a
 * single sample whose minimal budget is the smallest admissible one.
 *
 * # Safety
 * `theta0` holds `len` doubles; `policy_json` NULL or NUL-terminated; `out` valid.
 */
enum tt_status tt_run_sft(const struct tt_model *model,
                          const double *theta0,
                          size_t len,
                          const char *policy_json,
                          size_t steps,
                          double eta,
                          uint64_t seed,
                          struct tt_trajectory **out);

/**
 * Number of rows, 0 for NULL.
 *
 * # Safety
 * `traj` NULL or a live handle.
 */
size_t tt_trajectory_len(const struct tt_trajectory *traj);

/**
 * # Safety
 * `traj` a live handle; `out` valid.
 */
enum tt_status tt_trajectory_row(const struct tt_trajectory *traj,
                                 size_t index,
                                 struct tt_step_row *out);

/**
 * Final parameters after the last step.
 *
 * # Safety
 * `traj` a live handle; `out` holds `out_len` doubles.
 */
enum tt_status tt_trajectory_final_theta(const struct tt_trajectory *traj,
                                         double *out,
                                         size_t out_len);

/**
 * # Safety
 * `traj` must come from this library and not be freed twice.
 */
void tt_trajectory_free(struct tt_trajectory *traj);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TEMPORAL_TRAP_H */

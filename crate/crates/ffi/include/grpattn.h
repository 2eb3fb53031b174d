#ifndef GRPATTN_H
#define GRPATTN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum GaStatus {
  GA_STATUS_OK = 0,
  GA_STATUS_NULL_POINTER = 1,
  GA_STATUS_INVALID_ARGUMENT = 2,
  GA_STATUS_SHAPE = 3,
  GA_STATUS_IO = 4,
  GA_STATUS_PARSE = 5,
  GA_STATUS_NUMERIC = 6,
  GA_STATUS_INTERNAL = 7,
} GaStatus;

/**
 * K-means grouping of key vectors.
 */
typedef struct GaGrouping GaGrouping;

/**
 * Trained model with its input scaler.
 */
typedef struct GaModel GaModel;

/**
 * Fitted batch size plan.
 */
typedef struct GaPlan GaPlan;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *ga_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ga_version(void);

/**
 * Groups `n` keys of dimension `d` into `n_groups` clusters.
 *
 * # Safety
 * `keys` must hold `n * d` doubles; `out` must be writable.
 */
enum GaStatus ga_grouping_kmeans(const double *keys,
                                 size_t n,
                                 size_t d,
                                 size_t n_groups,
                                 size_t iters,
                                 uint64_t seed,
                                 struct GaGrouping **out);

/**
 * # Safety
 * `g` must be a live grouping handle or null.
 */
enum GaStatus ga_grouping_n_groups(const struct GaGrouping *g, size_t *out);

/**
 * Writes the group index of each of the `len` keys.
 *
 * # Safety
 * `out` must hold `len` writable entries.
 */
enum GaStatus ga_grouping_assignment(const struct GaGrouping *g, size_t *out, size_t len);

/**
 * Largest key-to-representative distance.
 *
 * # Safety
 * `g` must be a live grouping handle or null.
 */
enum GaStatus ga_grouping_max_dist(const struct GaGrouping *g, double *out);

/**
 * # Safety
 * `g` must be null or a handle not yet freed.
 */
void ga_grouping_free(struct GaGrouping *g);

/**
 * One head of group attention: queries `n × dk` attend to the centroids of
 * `g`, values `n × dv` are summed per group. Writes `n × dv`.
 *
 * # Safety
 * Buffers must match the stated shapes.
 */
enum GaStatus ga_group_attention(const double *q,
                                 const double *v,
                                 size_t n,
                                 size_t dk,
                                 size_t dv,
                                 const struct GaGrouping *g,
                                 double scale,
                                 double *out);

/**
 * One head of full softmax attention. Writes `n × dv`.
 *
 * # Safety
 * Buffers must match the stated shapes.
 */
enum GaStatus ga_vanilla_attention(const double *q,
                                   const double *k,
                                   const double *v,
                                   size_t n,
                                   size_t dk,
                                   size_t dv,
                                   double scale,
                                   double *out);

/**
 * Loads a checkpoint written by the `grpattn` tool.
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum GaStatus ga_model_load(const char *path, struct GaModel **out);

/**
 * Input channels the model expects.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
enum GaStatus ga_model_channels(const struct GaModel *model, size_t *out);

/**
 * Fills cells whose `mask` byte is nonzero; observed cells pass through.
 * `mask` may be null (nothing hidden). Writes `t × m` in input units.
 *
 * # Safety
 * `values` and `out` hold `t * m` doubles, `mask` `t * m` bytes.
 */
enum GaStatus ga_model_impute(const struct GaModel *model,
                              const double *values,
                              const uint8_t *mask,
                              size_t t,
                              size_t m,
                              double *out);

/**
 * Predicts the final `horizon` timestamps of a `t × m` series, ignoring
 * their current values. Writes `horizon × m` in input units.
 *
 * # Safety
 * `values` holds `t * m` doubles, `out` `horizon * m`.
 */
enum GaStatus ga_model_forecast(const struct GaModel *model,
                                const double *values,
                                size_t t,
                                size_t m,
                                size_t horizon,
                                double *out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void ga_model_free(struct GaModel *model);

/**
 * Plans batch sizes for sequence lengths up to `l_max` against the encoder
 * memory model with the given `budget`.
 *
 * # Safety
 * `out` must be writable.
 */
enum GaStatus ga_plan_new(double budget,
                          size_t d_model,
                          size_t layers,
                          size_t l_max,
                          size_t min_points,
                          uint64_t max_batch,
                          struct GaPlan **out);

/**
 * Predicted batch size for sequence length `l` with `n` groups.
 *
 * # Safety
 * `plan` must be a live handle or null.
 */
enum GaStatus ga_plan_predict(const struct GaPlan *plan, size_t l, size_t n, uint64_t *out);

/**
 * Number of rectangles in the plan's partition.
 *
 * # Safety
 * `plan` must be a live handle or null.
 */
enum GaStatus ga_plan_pieces(const struct GaPlan *plan, size_t *out);

/**
 * # Safety
 * `plan` must be null or a handle not yet freed.
 */
void ga_plan_free(struct GaPlan *plan);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRPATTN_H */

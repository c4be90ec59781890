#ifndef LANEFUSE_H
#define LANEFUSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum LfStatus {
  LF_STATUS_OK = 0,
  LF_STATUS_NULL_POINTER = 1,
  LF_STATUS_INVALID_ARGUMENT = 2,
  LF_STATUS_DOMAIN = 3,
  LF_STATUS_IO = 4,
  LF_STATUS_CHECKPOINT = 5,
  LF_STATUS_PANIC = 6,
} LfStatus;

// Ordered collection of 3D lanes.
typedef struct LfLaneSet LfLaneSet;

// A trained model with the anchors and detection rules it runs with.
typedef struct LfModel LfModel;

// Counts and scores of one matching call.
typedef struct LfMatchSummary {
  size_t true_positives;
  size_t false_positives;
  size_t false_negatives;
  size_t correct_category;
  double precision;
  double recall;
  double f1;
  double accuracy;
} LfMatchSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or an empty string. The
// pointer stays valid until the next call into this library on the same
// thread.
const char *lf_last_error(void);

// Balanced L1 of a non-negative residual and its derivative.
//
// # Safety
// `value` and `derivative` must be valid for writes.
enum LfStatus lf_balanced_l1(double delta,
                             double alpha,
                             double gamma,
                             double beta,
                             double *value,
                             double *derivative);

// Softmax focal loss of `n` logits; `grad` receives `n` entries.
//
// # Safety
// `logits` and `grad` must point to `n` doubles; `value` must be writable.
enum LfStatus lf_focal(const double *logits,
                       size_t n,
                       size_t target,
                       double gamma,
                       double alpha,
                       double *value,
                       double *grad);

// Soft Dice loss; `grad` receives the derivative with respect to
// `probabilities`.
//
// # Safety
// `probabilities`, `target` and `grad` must point to `n` doubles; `value`
// must be writable.
enum LfStatus lf_dice(const double *probabilities,
                      const double *target,
                      size_t n,
                      double epsilon,
                      double *value,
                      double *grad);

// Chamfer distance between point sets of `np` and `nq` points stored as
// `x, y, z` triples. Either gradient buffer may be null to skip it.
//
// # Safety
// `p` / `grad_p` must hold `3 * np` doubles and `q` / `grad_q` `3 * nq`.
enum LfStatus lf_chamfer(const double *p,
                         size_t np,
                         const double *q,
                         size_t nq,
                         double *value,
                         double *grad_p,
                         double *grad_q);

// New empty lane set.
struct LfLaneSet *lf_lane_set_new(void);

// Release a lane set; null is ignored.
//
// # Safety
// `set` must come from this library and not be used afterwards.
void lf_lane_set_free(struct LfLaneSet *set);

// Number of lanes in the set (0 for null).
//
// # Safety
// `set` must be null or a live handle.
size_t lf_lane_set_len(const struct LfLaneSet *set);

// Append a lane of `n` points. Stations must be strictly increasing and
// visibility must lie in [0, 1].
//
// # Safety
// The four arrays must hold `n` doubles each.
enum LfStatus lf_lane_set_push(struct LfLaneSet *set,
                               const double *stations,
                               const double *x,
                               const double *z,
                               const double *visibility,
                               size_t n,
                               size_t category);

// Copy lane `index` out. `*n` receives the point count; the arrays are
// filled only when `capacity` is large enough (pass 0 to query the size).
//
// # Safety
// Non-null arrays must hold `capacity` doubles; `n` and `category` must be
// writable.
enum LfStatus lf_lane_set_get(const struct LfLaneSet *set,
                              size_t index,
                              size_t capacity,
                              double *stations,
                              double *x,
                              double *z,
                              double *visibility,
                              size_t *n,
                              size_t *category);

// Match predicted lanes to ground truth.
//
// # Safety
// Both sets must be live handles and `summary` writable.
enum LfStatus lf_match_lanes(const struct LfLaneSet *predictions,
                             const struct LfLaneSet *ground_truth,
                             double threshold,
                             double coverage,
                             struct LfMatchSummary *summary);

// Load a checkpoint. `config_path` names the run configuration that
// defines the anchors and detection rules; null means the defaults.
//
// # Safety
// Paths must be null-terminated; `model` must be writable.
enum LfStatus lf_model_load(const char *checkpoint_path,
                            const char *config_path,
                            struct LfModel **model);

// Release a model; null is ignored.
//
// # Safety
// `model` must come from [`lf_model_load`] and not be used afterwards.
void lf_model_free(struct LfModel *model);

// Anchor count the model expects per frame (0 for null).
//
// # Safety
// `model` must be null or a live handle.
size_t lf_model_anchors(const struct LfModel *model);

// Feature channels per anchor (0 for null).
//
// # Safety
// `model` must be null or a live handle.
size_t lf_model_channels(const struct LfModel *model);

// Detect lanes in the last of `frames` feature maps, oldest first, each
// `anchors x channels` row-major. On success `*lanes` is a new set owned
// by the caller.
//
// # Safety
// `features` must hold `frames * anchors * channels` doubles and `lanes`
// must be writable.
enum LfStatus lf_model_predict(const struct LfModel *model,
                               const double *features,
                               size_t frames,
                               size_t anchors,
                               size_t channels,
                               struct LfLaneSet **lanes);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LANEFUSE_H */

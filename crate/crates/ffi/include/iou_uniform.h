#ifndef IOU_UNIFORM_H
#define IOU_UNIFORM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IuStatus {
  IU_STATUS_OK = 0,
  IU_STATUS_NULL_POINTER = 1,
  IU_STATUS_INVALID_ARGUMENT = 2,
  IU_STATUS_OUT_OF_RANGE = 3,
  IU_STATUS_IO = 4,
  IU_STATUS_FORMAT = 5,
  IU_STATUS_INTERNAL = 6,
} IuStatus;

typedef enum IuRanking {
  IU_RANKING_CLS = 0,
  IU_RANKING_FUSED = 1,
} IuRanking;

// Opaque trained head.
typedef struct IuHeadModel IuHeadModel;

// Opaque set of generated samples.
typedef struct IuSampleSet IuSampleSet;

// Center-form box.
typedef struct IuBox {
  double cx;
  double cy;
  double w;
  double h;
} IuBox;

typedef struct IuDeltas {
  double dx;
  double dy;
  double dw;
  double dh;
} IuDeltas;

// NMS input. The fused score is `cls_score * iou_pred`.
typedef struct IuDetection {
  struct IuBox bbox;
  size_t class_id;
  double cls_score;
  double iou_pred;
} IuDetection;

typedef struct IuSample {
  struct IuBox bbox;
  size_t gt_index;
  double iou;
  size_t interval;
} IuSample;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer stays valid
// until the next failing call on the same thread.
const char *iu_last_error_message(void);

// # Safety
// `a`, `b` and `out` must be NULL or valid pointers.
enum IuStatus iu_iou(const struct IuBox *a, const struct IuBox *b, double *out);

// Regression deltas taking `roi` onto `gt`.
//
// # Safety
// All pointers must be NULL or valid.
enum IuStatus iu_encode_deltas(const struct IuBox *roi,
                               const struct IuBox *gt,
                               struct IuDeltas *out);

// Applies `d` to `roi`; log-size deltas are clamped as in the library.
//
// # Safety
// All pointers must be NULL or valid.
enum IuStatus iu_apply_deltas(const struct IuBox *roi, const struct IuDeltas *d, struct IuBox *out);

// Smooth-L1 value, and its derivative when `grad` is not NULL.
//
// # Safety
// `value` must be valid; `grad` may be NULL.
enum IuStatus iu_smooth_l1(double x, double beta, double *value, double *grad);

// Interval-weighted smooth-L1 regression loss over `n` samples. `weights` holds one
// weight per interval; `per_interval` may be NULL or hold `n_intervals` outputs.
//
// # Safety
// Array pointers must be valid for the stated lengths.
enum IuStatus iu_weighted_reg_loss(const struct IuDeltas *preds,
                                   const struct IuDeltas *targets,
                                   const size_t *intervals,
                                   size_t n,
                                   const double *weights,
                                   size_t n_intervals,
                                   double beta,
                                   double *total,
                                   double *per_interval);

// Greedy class-wise NMS. Writes kept input indices, in rank order, to `keep` (capacity
// `n`) and their count to `n_kept`.
//
// # Safety
// `dets` must hold `n` detections and `keep` room for `n` indices.
enum IuStatus iu_nms(const struct IuDetection *dets,
                     size_t n,
                     double iou_threshold,
                     enum IuRanking ranking,
                     size_t *keep,
                     size_t *n_kept);

// Generates IoU-uniform samples around `n_gts` boxes with the default intervals,
// jitter ranges and attempt budget.
//
// # Safety
// `gts` must hold `n_gts` boxes; `out` must be valid. The handle is released with
// [`iu_sample_set_free`].
enum IuStatus iu_sample_set_generate(const struct IuBox *gts,
                                     size_t n_gts,
                                     uint64_t seed,
                                     struct IuSampleSet **out);

// # Safety
// `set` must be NULL or a live handle.
size_t iu_sample_set_len(const struct IuSampleSet *set);

// Number of `(gt, interval)` pairs that ran out of attempts.
//
// # Safety
// `set` must be NULL or a live handle.
size_t iu_sample_set_shortfalls(const struct IuSampleSet *set);

// # Safety
// `set` must be a live handle and `out` valid.
enum IuStatus iu_sample_set_get(const struct IuSampleSet *set, size_t index, struct IuSample *out);

// # Safety
// `set` must be NULL or a handle from [`iu_sample_set_generate`] not freed before.
void iu_sample_set_free(struct IuSampleSet *set);

// Loads a model file written by the `train` or `reproduce` commands.
//
// # Safety
// `path` must be a NUL-terminated string and `out` valid.
enum IuStatus iu_head_model_load(const char *path, struct IuHeadModel **out);

// Parses a model document from a JSON string.
//
// # Safety
// `json` must be a NUL-terminated string and `out` valid.
enum IuStatus iu_head_model_from_json(const char *json, struct IuHeadModel **out);

// # Safety
// `m` must be NULL or a live handle.
size_t iu_head_model_input_dim(const struct IuHeadModel *m);

// 4 for a regressor, 1 for an IoU predictor, 0 for NULL.
//
// # Safety
// `m` must be NULL or a live handle.
size_t iu_head_model_output_dim(const struct IuHeadModel *m);

// True for an IoU predictor.
//
// # Safety
// `m` must be NULL or a live handle.
bool iu_head_model_is_iou_predictor(const struct IuHeadModel *m);

// Forward pass on a raw network input (scaled geometric part then appearance).
// Regressors write four deltas, IoU predictors one value in `[0, 1]`.
//
// # Safety
// `input` must hold `input_len` values and `output` room for `output_len`.
enum IuStatus iu_head_model_predict(const struct IuHeadModel *m,
                                    const double *input,
                                    size_t input_len,
                                    double *output,
                                    size_t output_len);

// # Safety
// `m` must be NULL or a handle not freed before.
void iu_head_model_free(struct IuHeadModel *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IOU_UNIFORM_H */

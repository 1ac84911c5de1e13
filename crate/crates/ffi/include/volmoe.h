#ifndef VOLMOE_H
#define VOLMOE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Point label values accepted by `volmoe_infer_points`.
 */
#define VOLMOE_POINT_BACKGROUND 0

#define VOLMOE_POINT_FOREGROUND 1

/**
 * Result code of every fallible call.
 */
typedef enum VolmoeStatus {
  VOLMOE_STATUS_OK = 0,
  VOLMOE_STATUS_NULL_POINTER = 1,
  VOLMOE_STATUS_INVALID_ARGUMENT = 2,
  VOLMOE_STATUS_IO = 3,
  VOLMOE_STATUS_LOAD = 4,
  VOLMOE_STATUS_BUFFER_TOO_SMALL = 5,
  VOLMOE_STATUS_CONTRACT = 6,
  VOLMOE_STATUS_PANIC = 7,
} VolmoeStatus;

typedef enum VolmoeFusion {
  VOLMOE_FUSION_WEIGHTED = 0,
  VOLMOE_FUSION_AVERAGE = 1,
  VOLMOE_FUSION_AFT_WEIGHT = 2,
} VolmoeFusion;

/**
 * Opaque model handle.
 */
typedef struct VolmoeModel VolmoeModel;

/**
 * Selector settings: switch threshold in `[0, 1]` and fusion rule.
 */
typedef struct VolmoeSelector {
  double tau;
  enum VolmoeFusion fusion;
} VolmoeSelector;

/**
 * Routing decision for one inference call. `top_index` is -1 when the model
 * has no experts.
 */
typedef struct VolmoeRouting {
  int64_t top_index;
  double s_top;
  bool fired;
} VolmoeRouting;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next volmoe call on the same thread.
 */
const char *volmoe_last_error_message(void);

/**
 * Loads a checkpoint. On success `*out` owns a handle to release with
 * `volmoe_model_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum VolmoeStatus volmoe_model_load(const char *path, struct VolmoeModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from `volmoe_model_load` and not be used afterwards.
 */
void volmoe_model_free(struct VolmoeModel *model);

/**
 * Edge length of the cubic input volume the model expects.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum VolmoeStatus volmoe_model_volume_side(const struct VolmoeModel *model, size_t *out);

/**
 * Number of expert decoders (excluding the general decoder).
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum VolmoeStatus volmoe_model_expert_count(const struct VolmoeModel *model, size_t *out);

/**
 * Copies the label of expert `index` into `buf` as a NUL-terminated string.
 * `*needed` receives the required size including the terminator, also when
 * the buffer is too small.
 *
 * # Safety
 * `model` must be a live handle, `buf` writable for `buf_len` bytes (or null
 * with `buf_len == 0`), and `needed` writable or null.
 */
enum VolmoeStatus volmoe_model_expert_label(const struct VolmoeModel *model,
                                            size_t index,
                                            char *buf,
                                            size_t buf_len,
                                            size_t *needed);

/**
 * Segments `volume` from `n_points` point prompts. `coords` holds `3 *
 * n_points` voxel coordinates `(x, y, z)`; `labels` holds one
 * `VOLMOE_POINT_*` value per point. Foreground probabilities are written to
 * `probs_out`; `routing_out` may be null. A null `selector` means tau 0.5
 * with weighted fusion.
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
enum VolmoeStatus volmoe_infer_points(const struct VolmoeModel *model,
                                      const float *volume,
                                      size_t volume_len,
                                      const uint32_t *coords,
                                      const int32_t *labels,
                                      size_t n_points,
                                      const struct VolmoeSelector *selector,
                                      double *probs_out,
                                      size_t probs_len,
                                      struct VolmoeRouting *routing_out);

/**
 * Segments `volume` from an inclusive box prompt `box_min..=box_max`, each a
 * 3-element voxel coordinate. Other arguments as in `volmoe_infer_points`.
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
enum VolmoeStatus volmoe_infer_box(const struct VolmoeModel *model,
                                   const float *volume,
                                   size_t volume_len,
                                   const uint32_t *box_min,
                                   const uint32_t *box_max,
                                   const struct VolmoeSelector *selector,
                                   double *probs_out,
                                   size_t probs_len,
                                   struct VolmoeRouting *routing_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VOLMOE_H */

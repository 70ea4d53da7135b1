/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef METAROUTE_H
#define METAROUTE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum MrStatus {
  MR_STATUS_OK = 0,
  MR_STATUS_NULL_POINTER = 1,
  MR_STATUS_DIMENSION = 2,
  MR_STATUS_DEGENERATE_MASK = 3,
  MR_STATUS_NO_MODALITY = 4,
  MR_STATUS_CONFIG = 5,
  MR_STATUS_NUMERIC = 6,
  MR_STATUS_EMPTY_INPUT = 7,
  MR_STATUS_FORMAT = 8,
  MR_STATUS_IO = 9,
  MR_STATUS_PANIC = 10,
} MrStatus;

typedef enum MrAttentionMode {
  MR_ATTENTION_MODE_SELF_ATTENTION = 0,
  MR_ATTENTION_MODE_METADATA_CROSS = 1,
} MrAttentionMode;

/*
 Segmentation network with the default configuration.
 */
typedef struct MrSegModel MrSegModel;

/*
 One attention layer with its own metadata dictionary.
 */
typedef struct MrTmaxModel MrTmaxModel;

/*
 Bottleneck shape for [`mr_compare_bottlenecks`].
 */
typedef struct MrBottleneck {
  enum MrAttentionMode mode;
  uint64_t n_tokens;
  uint64_t embed_dim;
  uint64_t ffn_hidden;
  uint64_t n_layers;
} MrBottleneck;

/*
 Totals and reductions from [`mr_compare_bottlenecks`].
 */
typedef struct MrComparison {
  uint64_t baseline_params;
  uint64_t baseline_flops;
  uint64_t ours_params;
  uint64_t ours_flops;
  double params_reduction_pct;
  double flops_reduction_pct;
} MrComparison;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL after a success.
 The pointer stays valid until the next call into this library on the
 same thread.
 */
const char *mr_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *mr_version(void);

/*
 Additive availability mask `[n_tokens x 4]`: 0 for available columns,
 negative infinity for missing ones.

 # Safety
 `out` must point to `n_tokens * 4` writable doubles.
 */
enum MrStatus mr_build_mask(uint32_t available_bits, size_t n_tokens, double *out);

/*
 Row-wise softmax of `scores + mask` for `[rows x cols]` inputs. Mask
 entries must be 0 or negative infinity, with at least one 0 per row.

 # Safety
 `scores`, `mask` and `out` must each point to `rows * cols` doubles.
 */
enum MrStatus mr_masked_softmax(const double *scores,
                                const double *mask,
                                size_t rows,
                                size_t cols,
                                double *out);

/*
 Logit plus weighted-sum FLOPs of one attention layer.

 # Safety
 `out` must point to one writable `uint64_t`.
 */
enum MrStatus mr_attention_flops(uint64_t n_tokens,
                                 size_t embed_dim,
                                 enum MrAttentionMode mode,
                                 uint64_t *out);

/*
 Compare a baseline bottleneck against ours; both must share token count
 and width.

 # Safety
 `out` must point to one writable `MrComparison`.
 */
enum MrStatus mr_compare_bottlenecks(struct MrBottleneck baseline,
                                     struct MrBottleneck ours,
                                     struct MrComparison *out);

/*
 Dice overlap of one class between two label arrays of length `len`.

 # Safety
 `pred` and `target` must point to `len` labels; `out` to one double.
 */
enum MrStatus mr_dice_score(const uint32_t *pred,
                            const uint32_t *target,
                            size_t len,
                            uint32_t class_id,
                            double *out);

/*
 Create a randomly initialised attention layer of width `embed_dim`.

 # Safety
 `out` must point to a writable handle slot. Release with [`mr_tmax_free`].
 */
enum MrStatus mr_tmax_new(size_t embed_dim,
                          size_t ffn_hidden,
                          uint64_t seed,
                          struct MrTmaxModel **out);

/*
 # Safety
 `model` must come from [`mr_tmax_new`] and not be used afterwards.
 */
void mr_tmax_free(struct MrTmaxModel *model);

/*
 Run the layer on `tokens [n_tokens x embed_dim]`, writing the output
 tokens to `out` (same size) and, when `attention_out` is not NULL, the
 `[n_tokens x 4]` attention weights.

 # Safety
 `model` must be a live handle; buffers must have the sizes above.
 */
enum MrStatus mr_tmax_forward(const struct MrTmaxModel *model,
                              const double *tokens,
                              size_t n_tokens,
                              uint32_t available_bits,
                              double *out,
                              double *attention_out);

/*
 Create a segmentation model for cubic volumes of side `extent`.

 # Safety
 `out` must point to a writable handle slot. Release with [`mr_seg_free`].
 */
enum MrStatus mr_seg_new(size_t extent, uint64_t seed, struct MrSegModel **out);

/*
 # Safety
 `model` must come from [`mr_seg_new`] and not be used afterwards.
 */
void mr_seg_free(struct MrSegModel *model);

/*
 Replace the weights with a checkpoint written by `metaroute train-seg`.

 # Safety
 `model` must be a live handle and `path` a NUL-terminated string.
 */
enum MrStatus mr_seg_load(struct MrSegModel *model, const char *path);

/*
 Predict labels for `volumes [4 x e x e x e]`. Channels of missing
 modalities are ignored. `labels` receives `e^3` class ids.

 # Safety
 `model` must be a live handle; buffers must have the sizes above.
 */
enum MrStatus mr_seg_predict(const struct MrSegModel *model,
                             const double *volumes,
                             uint32_t available_bits,
                             uint32_t *labels);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* METAROUTE_H */

#ifndef ATTNMASK_H
#define ATTNMASK_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

/**
 * Weighting of layers during aggregation.
 */
#define AM_WEIGHTS_PROPORTIONAL 0

#define AM_WEIGHTS_UNIFORM 1

typedef enum {
  AM_STATUS_OK = 0,
  AM_STATUS_NULL_ARGUMENT = 1,
  AM_STATUS_INVALID_ARGUMENT = 2,
  AM_STATUS_IO = 3,
  AM_STATUS_ARCHIVE = 4,
  AM_STATUS_SEGMENTATION = 5,
  AM_STATUS_BUFFER_TOO_SMALL = 6,
  AM_STATUS_PANIC = 7,
} AmStatus;

/**
 * Label and confidence maps from one segmentation.
 */
typedef struct AmSegmentation AmSegmentation;

/**
 * A parsed capture archive.
 */
typedef struct AmStack AmStack;

typedef struct {
  uint32_t target;
  uint32_t grid;
  double tau;
  uint32_t iterations;
  double epsilon;
  /**
   * `AM_WEIGHTS_PROPORTIONAL` or `AM_WEIGHTS_UNIFORM`.
   */
  uint32_t weights;
  uint32_t output_width;
  uint32_t output_height;
} AmSegmentParams;

/**
 * Percentages in `[0, 100]`.
 */
typedef struct {
  double iou;
  double precision;
  double recall;
  double dsc;
  /**
   * Both masks empty; the scores are 100 by convention.
   */
  bool degenerate;
} AmMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *am_version(void);

/**
 * Message for the last failing call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *am_last_error_message(void);

/**
 * Reads an ATNP archive from a NUL-terminated UTF-8 path.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
AmStatus am_stack_read_file(const char *path, AmStack **out);

/**
 * Reads an ATNP archive from memory.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` must be valid.
 */
AmStatus am_stack_read_bytes(const uint8_t *data, size_t len, AmStack **out);

/**
 * Number of self-attention layers, or 0 for a NULL handle.
 *
 * # Safety
 * `stack` must be NULL or a live handle.
 */
size_t am_stack_layer_count(const AmStack *stack);

/**
 * # Safety
 * `stack` must be NULL or a live handle.
 */
bool am_stack_has_cross_attention(const AmStack *stack);

/**
 * # Safety
 * `stack` must be NULL or a handle not yet freed.
 */
void am_stack_free(AmStack *stack);

/**
 * The library defaults at a 64 x 64 target and 512 x 512 output.
 */
AmSegmentParams am_segment_params_default(void);

/**
 * Segments `stack` into labels and confidences.
 *
 * # Safety
 * `stack` must be a live handle, `params` NULL (defaults) or valid, and
 * `out` valid.
 */
AmStatus am_segment(const AmStack *stack, const AmSegmentParams *params, AmSegmentation **out);

/**
 * # Safety
 * `seg` must be NULL or a live handle.
 */
size_t am_segmentation_width(const AmSegmentation *seg);

/**
 * # Safety
 * `seg` must be NULL or a live handle.
 */
size_t am_segmentation_height(const AmSegmentation *seg);

/**
 * Number of candidate labels; some may own no pixels.
 *
 * # Safety
 * `seg` must be NULL or a live handle.
 */
size_t am_segmentation_label_count(const AmSegmentation *seg);

/**
 * Copies the row-major label map into `buf`, which must hold
 * `width * height` entries.
 *
 * # Safety
 * `seg` must be a live handle and `buf` writable for `len` entries.
 */
AmStatus am_segmentation_copy_labels(const AmSegmentation *seg, uint32_t *buf, size_t len);

/**
 * Copies the row-major confidence map into `buf`.
 *
 * # Safety
 * `seg` must be a live handle and `buf` writable for `len` entries.
 */
AmStatus am_segmentation_copy_confidence(const AmSegmentation *seg, double *buf, size_t len);

/**
 * # Safety
 * `seg` must be NULL or a handle not yet freed.
 */
void am_segmentation_free(AmSegmentation *seg);

/**
 * Scores from pixel counts.
 *
 * # Safety
 * `out` must be valid.
 */
AmStatus am_metrics_from_counts(uint64_t true_positives,
                                uint64_t false_positives,
                                uint64_t false_negatives,
                                uint64_t true_negatives,
                                AmMetrics *out);

/**
 * Scores two masks of `len` bytes each; nonzero bytes are foreground.
 *
 * # Safety
 * `pred` and `gt` must each point to `len` readable bytes; `out` must be
 * valid.
 */
AmStatus am_metrics_from_masks(const uint8_t *pred, const uint8_t *gt, size_t len, AmMetrics *out);

/**
 * Symmetric KL distance between two distributions of `len` cells, with
 * values floored at `epsilon` and renormalized.
 *
 * # Safety
 * `p` and `q` must each point to `len` readable doubles; `out` must be
 * valid.
 */
AmStatus am_kl_distance(const double *p, const double *q, size_t len, double epsilon, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATTNMASK_H */

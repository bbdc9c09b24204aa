#ifndef VTRECIPE_H
#define VTRECIPE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Query direction: text-to-video queries are columns of the score grid.
typedef enum VtrDirection {
  VTR_DIRECTION_TEXT_TO_VIDEO = 0,
  VTR_DIRECTION_VIDEO_TO_TEXT = 1,
} VtrDirection;

typedef enum VtrStatus {
  VTR_STATUS_OK = 0,
  VTR_STATUS_NULL_POINTER = 1,
  VTR_STATUS_INVALID_ARGUMENT = 2,
  VTR_STATUS_SHAPE_MISMATCH = 3,
  VTR_STATUS_NUMERIC = 4,
  VTR_STATUS_IO = 5,
  VTR_STATUS_FORMAT = 6,
  // Caller buffer too small; the required length was still written.
  VTR_STATUS_BUFFER_TOO_SMALL = 7,
  VTR_STATUS_PANIC = 8,
} VtrStatus;

// Row-major `f64` matrix owned by the library.
typedef struct VtrMatrix VtrMatrix;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a
// success. Valid until the next call on the same thread.
const char *vtr_last_error(void);

// Library version as a static NUL-terminated string.
const char *vtr_version(void);

// Copies `rows * cols` values from `data` (row-major) into a new matrix.
//
// # Safety
// `data` must point to `rows * cols` readable doubles; `out` must be valid
// for a write.
enum VtrStatus vtr_matrix_new(size_t rows, size_t cols, const double *data, struct VtrMatrix **out);

// # Safety
// `m` must be null or a handle from this library not yet freed.
void vtr_matrix_free(struct VtrMatrix *m);

// # Safety
// `m` must be a live handle; `rows` and `cols` valid for writes.
enum VtrStatus vtr_matrix_shape(const struct VtrMatrix *m, size_t *rows, size_t *cols);

// Copies the values row-major into `buf` of `len` doubles.
//
// # Safety
// `m` must be a live handle; `buf` must hold `len` writable doubles.
enum VtrStatus vtr_matrix_copy(const struct VtrMatrix *m, double *buf, size_t len);

// Reads a single-matrix M2RP file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` valid for a write.
enum VtrStatus vtr_matrix_read(const char *path, struct VtrMatrix **out);

// Writes `m` as a single-matrix M2RP file (values stored as 32-bit floats).
//
// # Safety
// `m` must be a live handle; `path` a NUL-terminated string.
enum VtrStatus vtr_matrix_write(const struct VtrMatrix *m, const char *path);

// Recall@k in percent of a square score grid whose diagonal holds the
// true pairs (rows are videos, columns texts).
//
// # Safety
// `scores` must be a live handle; `out` valid for a write.
enum VtrStatus vtr_recall_at_k(const struct VtrMatrix *scores,
                               size_t k,
                               enum VtrDirection direction,
                               double *out);

// Mean of R@1, R@5 and R@10, each in [0, 100].
//
// # Safety
// `out` must be valid for a write.
enum VtrStatus vtr_avg_r(double r1, double r5, double r10, double *out);

// Dual-softmax re-weighting with temperature `beta`; returns a new matrix.
//
// # Safety
// `scores` must be a live handle; `out` valid for a write.
enum VtrStatus vtr_dsl(const struct VtrMatrix *scores,
                       double beta,
                       enum VtrDirection direction,
                       struct VtrMatrix **out);

// Text-anchored contrastive loss of a `B x B` score grid (rows videos,
// columns texts, positives on the diagonal) at logit `scale`.
//
// # Safety
// `scores` must be a live handle; `out` valid for a write.
enum VtrStatus vtr_vtc_loss(const struct VtrMatrix *scores,
                            double scale,
                            bool symmetric,
                            bool batch_mean,
                            double *out);

// Key-frame positions of `frames` (one row per frame). Writes up to
// `capacity` strictly increasing indices into `indices` and the full count
// into `len`; a short buffer yields `BufferTooSmall` with `len` set.
//
// # Safety
// `frames` must be a live handle; `indices` must hold `capacity` writable
// values; `len` valid for a write.
enum VtrStatus vtr_tsdpc(const struct VtrMatrix *frames,
                         size_t n_key,
                         double cutoff_percentile,
                         size_t *indices,
                         size_t capacity,
                         size_t *len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VTRECIPE_H */

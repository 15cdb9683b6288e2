#ifndef VQAD_H
#define VQAD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VqadStatus {
  VQAD_STATUS_OK = 0,
  VQAD_STATUS_NULL_POINTER = 1,
  VQAD_STATUS_INVALID_ARGUMENT = 2,
  // Not a stream, unsupported version, or corrupt contents.
  VQAD_STATUS_INVALID_STREAM = 3,
  // The stream ends before the requested levels are complete.
  VQAD_STATUS_TRUNCATED = 4,
  // Output buffer too small.
  VQAD_STATUS_BUFFER_TOO_SMALL = 5,
  VQAD_STATUS_INTERNAL = 6,
} VqadStatus;

typedef enum VqadTask {
  VQAD_TASK_IMAGE = 0,
  VQAD_TASK_SDF = 1,
  VQAD_TASK_RADIANCE = 2,
} VqadTask;

// Decoded model behind an opaque pointer.
typedef struct VqadModel VqadModel;

// Byte counts of the encoded model.
typedef struct VqadSizeReport {
  size_t header;
  size_t mlp;
  // Per-level framing plus occupancy bitmaps.
  size_t structure;
  size_t codebooks;
  size_t indices;
  // Raw fp16 features of unquantized levels.
  size_t features;
  size_t total;
  // Decoder plus uncompressed fp16 grid, over decoder plus stored grid
  // payload.
  double compression_ratio;
} VqadSizeReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Decodes a complete `.vqad` stream into `*out`.
//
// # Safety
// `data` must point to `len` readable bytes and `out` to a writable pointer.
enum VqadStatus vqad_decode(const uint8_t *data, size_t len, struct VqadModel **out);

// Decodes the first `levels` levels of a possibly truncated stream.
//
// # Safety
// As for [`vqad_decode`].
enum VqadStatus vqad_decode_prefix(const uint8_t *data,
                                   size_t len,
                                   size_t levels,
                                   struct VqadModel **out);

// Number of whole levels a stream prefix of `len` bytes can render
// (0 when not even level 0 is complete).
//
// # Safety
// `data` must point to `len` readable bytes; `out` must be writable.
enum VqadStatus vqad_complete_levels(const uint8_t *data, size_t len, size_t *out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from a decode call and not be used afterwards.
void vqad_free(struct VqadModel *model);

// # Safety
// `model` must be a live handle and `out` writable.
enum VqadStatus vqad_levels(const struct VqadModel *model, size_t *out);

// # Safety
// `model` must be a live handle and `out` writable.
enum VqadStatus vqad_task(const struct VqadModel *model, enum VqadTask *out);

// Spatial input dimension (2 or 3) and output width of the decoder.
//
// # Safety
// `model` must be a live handle; the outputs must be writable.
enum VqadStatus vqad_dims(const struct VqadModel *model, size_t *input_dim, size_t *output_dim);

// Evaluates the decoder at one point with levels `0..=lod`.
//
// `x` holds the point's 2 or 3 coordinates in `[-1, 1]`. `dir` is the
// 3-component view direction for radiance models and must be null
// otherwise. Writes the output width to `written` (if not null).
//
// # Safety
// Pointers must be valid for the stated lengths.
enum VqadStatus vqad_decode_point(const struct VqadModel *model,
                                  const double *x,
                                  size_t x_len,
                                  const double *dir,
                                  size_t lod,
                                  double *out,
                                  size_t out_len,
                                  size_t *written);

// Volume-renders one ray of a radiance model with levels `0..=lod`,
// writing `[R, G, B, opacity]` to `rgba`.
//
// # Safety
// `origin` and `direction` must point to 3 values, `rgba` to 4 writable.
enum VqadStatus vqad_render_ray(const struct VqadModel *model,
                                const double *origin,
                                const double *direction,
                                double near,
                                double far,
                                size_t lod,
                                double *rgba);

// # Safety
// `model` must be a live handle and `out` writable.
enum VqadStatus vqad_size_report(const struct VqadModel *model, struct VqadSizeReport *out);

// `16mk / (mb + k·2^b)`: an fp16 grid of `m` vertices and width `k` against
// `b`-bit indices plus one codebook.
double vqad_compression_ratio(double m, double k, double b);

// Copies the calling thread's last error message, NUL-terminated and
// truncated to `len` bytes, into `buf`. Returns the full message length
// excluding the terminator; pass a null `buf` to query it.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t vqad_last_error_message(char *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VQAD_H */

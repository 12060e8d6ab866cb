#ifndef SPLATWAVE_H
#define SPLATWAVE_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SwStatus {
  SW_STATUS_OK = 0,
  SW_STATUS_NULL_POINTER = 1,
  SW_STATUS_INVALID_ARGUMENT = 2,
  SW_STATUS_IO = 3,
  SW_STATUS_SHAPE = 4,
  SW_STATUS_NUMERICAL = 5,
  SW_STATUS_PANIC = 6,
} SwStatus;

/**
 * Opaque handle to a loaded model bundle.
 */
typedef struct SwBundle SwBundle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sw_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *sw_last_error_message(void);

/**
 * Loads a bundle directory. On success `*out` owns a handle for [`sw_bundle_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SwStatus sw_bundle_load(const char *path, struct SwBundle **out);

/**
 * Releases a handle from [`sw_bundle_load`]. Null is ignored.
 *
 * # Safety
 * `b` must come from [`sw_bundle_load`] and not be used afterwards.
 */
void sw_bundle_free(struct SwBundle *b);

/**
 * Texture height, width and channel count produced by the bundle.
 *
 * # Safety
 * All pointers must be valid.
 */
enum SwStatus sw_bundle_shape(const struct SwBundle *b,
                              size_t *height,
                              size_t *width,
                              size_t *channels);

/**
 * Width of the motion descriptor the predictors expect.
 *
 * # Safety
 * All pointers must be valid.
 */
enum SwStatus sw_bundle_descriptor_width(const struct SwBundle *b, size_t *width);

/**
 * Total coefficients per frame, all models concatenated.
 *
 * # Safety
 * All pointers must be valid.
 */
enum SwStatus sw_bundle_coefficient_count(const struct SwBundle *b, size_t *count);

/**
 * Predicts coefficients for one descriptor into `coeffs` (`coeff_len` must equal the count).
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum SwStatus sw_bundle_predict(const struct SwBundle *b,
                                const double *descriptor,
                                size_t descriptor_len,
                                double *coeffs,
                                size_t coeff_len);

/**
 * Decodes a texture (row-major, channels innermost) from explicit coefficients.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum SwStatus sw_bundle_reconstruct(const struct SwBundle *b,
                                    const double *coeffs,
                                    size_t coeff_len,
                                    float *texture,
                                    size_t texture_len);

/**
 * Runtime path: descriptor to texture in one call.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum SwStatus sw_bundle_evaluate(const struct SwBundle *b,
                                 const double *descriptor,
                                 size_t descriptor_len,
                                 float *texture,
                                 size_t texture_len);

/**
 * Parameters and FLOPs per frame of the `paper` rank preset at 768x768.
 *
 * # Safety
 * All pointers must be valid.
 */
enum SwStatus sw_cost_paper(uint64_t *params, uint64_t *flops);

/**
 * RGB of canonical degree-1 SH coefficients (12, colour-major) seen along unit
 * direction `dir` under the row-major texel rotation `rotation` (null for identity).
 *
 * # Safety
 * `eta` must hold 12 values, `dir` and `rgb` 3, `rotation` 9 when non-null.
 */
enum SwStatus sw_sh_eval_color(const float *eta,
                               const double *rotation,
                               const double *dir,
                               double *rgb);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPLATWAVE_H */

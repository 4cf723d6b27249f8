#ifndef AECODEC_H
#define AECODEC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum AecStatus {
  AEC_STATUS_OK = 0,
  AEC_STATUS_NULL_POINTER = 1,
  AEC_STATUS_INVALID_ARGUMENT = 2,
  AEC_STATUS_DIMENSION = 3,
  AEC_STATUS_FORMAT = 4,
  AEC_STATUS_MISSING_PARAMETER = 5,
  AEC_STATUS_IO = 6,
  AEC_STATUS_IMAGE = 7,
  AEC_STATUS_INTERNAL = 8,
  AEC_STATUS_PANIC = 9,
} AecStatus;

/**
 * Values accepted for the `mode` argument of [`aec_encode_rgb8`].
 */
typedef enum AecLatentMode {
  AEC_LATENT_MODE_FLOAT32 = 0,
  AEC_LATENT_MODE_UINT8 = 1,
} AecLatentMode;

/**
 * Opaque model handle holding encoder and/or decoder parameters.
 */
typedef struct AecModel AecModel;

/**
 * Byte buffer owned by the library.
 */
typedef struct AecBuffer {
  uint8_t *data;
  size_t len;
} AecBuffer;

typedef struct AecMetrics {
  /**
   * dB; infinite for identical images.
   */
  double psnr;
  double ssim;
  double mse;
} AecMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null if it succeeded.
 * The pointer stays valid until the next library call on the same thread.
 */
const char *aec_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *aec_version(void);

/**
 * Loads AEW1 weights (full model, encoder-only or decoder-only) from `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AecStatus aec_model_load(const char *path, struct AecModel **out);

/**
 * Parses AEW1 weights from memory.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` must be valid.
 */
enum AecStatus aec_model_from_bytes(const uint8_t *data, size_t len, struct AecModel **out);

/**
 * Creates a randomly initialized full model.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum AecStatus aec_model_init(uint64_t seed, struct AecModel **out);

/**
 * Serializes the model's parameters as AEW1 bytes.
 *
 * # Safety
 * `model` must come from this library and `out` must be valid.
 */
enum AecStatus aec_model_save_bytes(const struct AecModel *model, struct AecBuffer *out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void aec_model_free(struct AecModel *model);

/**
 * Encodes an interleaved RGB8 image (`width*height*3` bytes) into an AEL1
 * latent file. Both extents must be positive multiples of 16.
 *
 * # Safety
 * `pixels` must point to `width*height*3` readable bytes; `model` and `out` must be valid.
 */
enum AecStatus aec_encode_rgb8(const struct AecModel *model,
                               const uint8_t *pixels,
                               size_t width,
                               size_t height,
                               uint32_t mode,
                               struct AecBuffer *out);

/**
 * Decodes an AEL1 latent file into an interleaved RGB8 image.
 *
 * # Safety
 * `latent` must point to `len` readable bytes; all out-pointers must be valid.
 */
enum AecStatus aec_decode_rgb8(const struct AecModel *model,
                               const uint8_t *latent,
                               size_t len,
                               struct AecBuffer *out,
                               size_t *out_width,
                               size_t *out_height);

/**
 * PSNR (dB), SSIM and MSE between two RGB8 images of the same extents.
 *
 * # Safety
 * `a` and `b` must each point to `width*height*3` readable bytes; `out` must be valid.
 */
enum AecStatus aec_metrics_rgb8(const uint8_t *a,
                                const uint8_t *b,
                                size_t width,
                                size_t height,
                                struct AecMetrics *out);

/**
 * Releases a buffer returned by the library and resets it to empty.
 *
 * # Safety
 * `buf` must be null or point to a buffer filled by this library.
 */
void aec_buffer_free(struct AecBuffer *buf);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AECODEC_H */

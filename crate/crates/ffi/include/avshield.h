#ifndef AVSHIELD_H
#define AVSHIELD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AvsStatus {
  AVS_STATUS_OK = 0,
  AVS_STATUS_NULL_POINTER = 1,
  AVS_STATUS_INVALID_ARGUMENT = 2,
  AVS_STATUS_IO = 3,
  AVS_STATUS_CONFIG = 4,
  AVS_STATUS_ATTACK = 5,
  AVS_STATUS_INTERNAL = 6,
} AvsStatus;

/**
 * Opaque handle to a loaded victim model.
 */
typedef struct AvsModel AvsModel;

typedef struct AvsImageAttackParams {
  /**
   * L-infinity budget.
   */
  double tau;
  double step;
  size_t iters;
  uint64_t seed;
  /**
   * Frames per iteration; 0 uses every frame.
   */
  size_t frames_per_step;
} AvsImageAttackParams;

typedef struct AvsAudioAttackParams {
  /**
   * Peak level of the perturbation relative to the clip, in dB.
   */
  double db_bound;
  /**
   * Step size; 0 or less picks the default for the budget.
   */
  double step;
  size_t iters;
  uint64_t seed;
  /**
   * Frames per iteration; 0 uses every frame.
   */
  size_t frames_per_step;
} AvsAudioAttackParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the next call.
 */
const char *avs_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *avs_version(void);

/**
 * Loads a checkpoint; free the handle with [`avs_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum AvsStatus avs_model_load(const char *path, struct AvsModel **out_model);

/**
 * # Safety
 * `model` must be null or a handle from [`avs_model_load`] not yet freed.
 */
void avs_model_free(struct AvsModel *model);

/**
 * # Safety
 * `out_params` must be writable.
 */
enum AvsStatus avs_image_attack_defaults(struct AvsImageAttackParams *out_params);

/**
 * # Safety
 * `out_params` must be writable.
 */
enum AvsStatus avs_audio_attack_defaults(struct AvsAudioAttackParams *out_params);

/**
 * Protects a portrait with the default multi-interval plan. `out_pixels` receives
 * `3 * height * width` values and may alias nothing else.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `model` must be a live handle.
 */
enum AvsStatus avs_protect_image(const struct AvsModel *model,
                                 const double *pixels,
                                 size_t height,
                                 size_t width,
                                 const double *audio,
                                 size_t audio_len,
                                 const struct AvsImageAttackParams *params,
                                 double *out_pixels);

/**
 * Protects an audio clip with the default cross-attention target plan.
 * `out_audio` receives `audio_len` samples.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `model` must be a live handle.
 */
enum AvsStatus avs_protect_audio(const struct AvsModel *model,
                                 const double *pixels,
                                 size_t height,
                                 size_t width,
                                 const double *audio,
                                 size_t audio_len,
                                 const struct AvsAudioAttackParams *params,
                                 double *out_audio);

/**
 * # Safety
 * `a` and `b` must each hold `3 * height * width` values; `out_db` must be writable.
 */
enum AvsStatus avs_psnr(const double *a,
                        const double *b,
                        size_t height,
                        size_t width,
                        double *out_db);

/**
 * # Safety
 * `a` and `b` must each hold `3 * height * width` values; `out_value` must be writable.
 */
enum AvsStatus avs_ssim(const double *a,
                        const double *b,
                        size_t height,
                        size_t width,
                        double *out_value);

/**
 * # Safety
 * `clean` and `noisy` must each hold `len` samples; `out_db` must be writable.
 */
enum AvsStatus avs_snr(const double *clean, const double *noisy, size_t len, double *out_db);

/**
 * Peak level of `delta` relative to `x` in dB; `-inf` for an all-zero `delta`.
 *
 * # Safety
 * `delta` and `x` must each hold `len` samples; `out_db` must be writable.
 */
enum AvsStatus avs_db_x(const double *delta, const double *x, size_t len, double *out_db);

/**
 * Pearson correlation of two series; 0 when either is constant.
 *
 * # Safety
 * `a` and `b` must each hold `len` values; `out_r` must be writable.
 */
enum AvsStatus avs_pearson(const double *a, const double *b, size_t len, double *out_r);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AVSHIELD_H */

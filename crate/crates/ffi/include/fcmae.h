#ifndef FCMAE_H
#define FCMAE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FcmaeStatus {
  FCMAE_STATUS_OK = 0,
  FCMAE_STATUS_NULL_POINTER = 1,
  FCMAE_STATUS_INVALID_ARGUMENT = 2,
  FCMAE_STATUS_CONFIG = 3,
  FCMAE_STATUS_DATA = 4,
  FCMAE_STATUS_NUMERIC = 5,
  FCMAE_STATUS_IO = 6,
  FCMAE_STATUS_CORRUPT = 7,
  FCMAE_STATUS_BUFFER_TOO_SMALL = 8,
  FCMAE_STATUS_PANIC = 9,
} FcmaeStatus;

/**
 * Which encoder output becomes the embedding.
 */
typedef enum FcmaePooling {
  FCMAE_POOLING_CLS = 0,
  FCMAE_POOLING_MEAN = 1,
} FcmaePooling;

/**
 * Opaque handle to a loaded model.
 */
typedef struct FcmaeModel FcmaeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fcmae_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length plus
 * one, or 0 when there is no message.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t fcmae_last_error_message(char *buf, size_t len);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum FcmaeStatus fcmae_model_load(const char *path, struct FcmaeModel **out);

/**
 * Frees a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`fcmae_model_load`] and not be used afterwards.
 */
void fcmae_model_free(struct FcmaeModel *model);

/**
 * Embedding width, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fcmae_model_embed_dim(const struct FcmaeModel *model);

/**
 * Region count `R` the model expects, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fcmae_model_region_count(const struct FcmaeModel *model);

/**
 * Total number of learnable scalars, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fcmae_model_param_count(const struct FcmaeModel *model);

/**
 * Embeds one `regions x regions` row-major FC matrix into `out`
 * (`out_len` must be at least the embedding width). `pooling` is a
 * [`FcmaePooling`] value.
 *
 * # Safety
 * `fc` must point to `regions * regions` doubles and `out` to `out_len`.
 */
enum FcmaeStatus fcmae_model_encode(const struct FcmaeModel *model,
                                    const double *fc,
                                    size_t regions,
                                    uint32_t pooling,
                                    double *out,
                                    size_t out_len);

/**
 * Pearson correlation of two length-`n` arrays.
 *
 * # Safety
 * `y` and `yhat` must point to `n` doubles; `out` must be valid.
 */
enum FcmaeStatus fcmae_pearson(const double *y, const double *yhat, size_t n, double *out);

/**
 * One-sided permutation p-value of `observed` against `n` null values.
 *
 * # Safety
 * `nulls` must point to `n` doubles; `out` must be valid.
 */
enum FcmaeStatus fcmae_permutation_p(double observed, const double *nulls, size_t n, double *out);

/**
 * Column-wise Kronecker product of row-major `a` (`a_rows x cols`) and
 * `b` (`b_rows x cols`) into row-major `out` (`a_rows * b_rows x cols`).
 *
 * # Safety
 * Pointers must cover the stated sizes; `out` must hold `out_len` doubles.
 */
enum FcmaeStatus fcmae_khatri_rao(const double *a,
                                  size_t a_rows,
                                  const double *b,
                                  size_t b_rows,
                                  size_t cols,
                                  double *out,
                                  size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FCMAE_H */

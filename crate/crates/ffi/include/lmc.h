/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef LMC_H
#define LMC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Values 2-4 match the command-line exit codes.
 */
typedef enum LmcStatus {
  LMC_STATUS_OK = 0,
  LMC_STATUS_NULL_POINTER = 1,
  LMC_STATUS_CONFIG = 2,
  LMC_STATUS_DATA = 3,
  LMC_STATUS_NUMERIC = 4,
  LMC_STATUS_IO = 5,
  LMC_STATUS_FORMAT = 6,
  LMC_STATUS_PANIC = 7,
} LmcStatus;

/**
 * Opaque encoder handle.
 */
typedef struct LmcEncoder LmcEncoder;

/**
 * Loss value split into its two terms.
 */
typedef struct LmcLossBreakdown {
  double invariance;
  double redundancy;
  double lambda;
  double total;
} LmcLossBreakdown;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *lmc_version(void);

/**
 * Message for the most recent failure on this thread, or an empty string.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *lmc_last_error_message(void);

/**
 * Creates a freshly initialised encoder. `projector_dim` 0 disables the
 * projector.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum LmcStatus lmc_encoder_init(uintptr_t depth,
                                uintptr_t heads,
                                uintptr_t embed_dim,
                                uintptr_t patch_size_tokens,
                                uintptr_t input_side,
                                uintptr_t mlp_ratio,
                                uintptr_t projector_dim,
                                uint64_t seed,
                                struct LmcEncoder **out);

/**
 * Loads encoder parameters from a checkpoint file (training state, if
 * present, is ignored).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum LmcStatus lmc_encoder_load(const char *path, struct LmcEncoder **out);

/**
 * Writes the encoder parameters as an encoder-only checkpoint.
 *
 * # Safety
 * `enc` must be a live handle and `path` a NUL-terminated string.
 */
enum LmcStatus lmc_encoder_save(const struct LmcEncoder *enc, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `enc` must come from this library and not be used afterwards.
 */
void lmc_encoder_free(struct LmcEncoder *enc);

/**
 * Embedding width, or 0 for a null handle.
 *
 * # Safety
 * `enc` must be null or a live handle.
 */
uintptr_t lmc_encoder_embed_dim(const struct LmcEncoder *enc);

/**
 * Expected image side in pixels, or 0 for a null handle.
 *
 * # Safety
 * `enc` must be null or a live handle.
 */
uintptr_t lmc_encoder_input_side(const struct LmcEncoder *enc);

/**
 * Embeds `n_images` square RGB images stored back to back as interleaved
 * bytes (`n_images * side * side * 3`). Writes `n_images * embed_dim` values
 * row-major into `out`, whose capacity is `out_len`.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum LmcStatus lmc_encoder_embed(const struct LmcEncoder *enc,
                                 const uint8_t *rgb,
                                 uintptr_t n_images,
                                 double *out,
                                 uintptr_t out_len);

/**
 * Estimates the hematoxylin and eosin OD vectors of an interleaved RGB
 * image; each output holds 3 values.
 *
 * # Safety
 * `rgb` must hold `width * height * 3` bytes; outputs must hold 3 values.
 */
enum LmcStatus lmc_estimate_stain_basis(const uint8_t *rgb,
                                        uintptr_t width,
                                        uintptr_t height,
                                        double *out_h,
                                        double *out_e);

/**
 * Rescales H and E concentrations of an interleaved RGB image into `out`
 * (same size). `basis_h`/`basis_e` give unit OD vectors; pass both null to
 * estimate the basis from the image.
 *
 * # Safety
 * Image buffers must hold `width * height * 3` bytes; basis pointers, when
 * non-null, 3 values each.
 */
enum LmcStatus lmc_augment_rgb(const uint8_t *rgb,
                               uintptr_t width,
                               uintptr_t height,
                               const double *basis_h,
                               const double *basis_e,
                               double alpha_h,
                               double alpha_e,
                               uint8_t *out);

/**
 * Compaction loss between two row-major `batch x dim` embedding batches.
 *
 * # Safety
 * `z1` and `z2` must hold `batch * dim` values; `out` must be writable.
 */
enum LmcStatus lmc_loss(const double *z1,
                        const double *z2,
                        uintptr_t batch,
                        uintptr_t dim,
                        double lambda,
                        struct LmcLossBreakdown *out);

/**
 * Gaussian W2 between two row-major sample sets of width `dim`.
 *
 * # Safety
 * `a` must hold `n_a * dim` values, `b` `n_b * dim`; `out` must be writable.
 */
enum LmcStatus lmc_w2_distance(const double *a,
                               uintptr_t n_a,
                               const double *b,
                               uintptr_t n_b,
                               uintptr_t dim,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LMC_H */

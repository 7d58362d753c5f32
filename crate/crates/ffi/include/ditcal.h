#ifndef DITCAL_H
#define DITCAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Pixels in one generated image (8 × 8, row-major).
#define DITCAL_IMAGE_PIXELS 64

typedef enum DitcalGranularity {
  DITCAL_GRANULARITY_BLOCK = 0,
  DITCAL_GRANULARITY_LAYER = 1,
  DITCAL_GRANULARITY_GATE = 2,
} DitcalGranularity;

typedef enum DitcalStatus {
  DITCAL_STATUS_OK = 0,
  DITCAL_STATUS_NULL_POINTER = 1,
  DITCAL_STATUS_INVALID_ARGUMENT = 2,
  DITCAL_STATUS_DIMENSION = 3,
  DITCAL_STATUS_NON_FINITE = 4,
  DITCAL_STATUS_CONTRACT = 5,
  DITCAL_STATUS_NUMERIC = 6,
  DITCAL_STATUS_CALIBRATION_SHAPE = 7,
  DITCAL_STATUS_PROTOCOL = 8,
  DITCAL_STATUS_EVALUATION = 9,
  DITCAL_STATUS_TRAINING = 10,
  DITCAL_STATUS_CONFIG = 11,
  DITCAL_STATUS_CHECKPOINT = 12,
  DITCAL_STATUS_DIMENSION_OVERFLOW = 13,
  DITCAL_STATUS_IO = 14,
  DITCAL_STATUS_PANIC = 15,
} DitcalStatus;

typedef enum DitcalVariant {
  DITCAL_VARIANT_STANDARD_DIT = 0,
  DITCAL_VARIANT_MM_DIT = 1,
} DitcalVariant;

// Opaque CMA-ES handle.
typedef struct DitcalCma DitcalCma;

// Opaque model handle.
typedef struct DitcalModel DitcalModel;

// Architecture description used by [`ditcal_model_new`].
typedef struct DitcalArch {
  enum DitcalVariant variant;
  size_t depth;
  size_t model_dim;
  size_t heads;
  size_t ff_mult;
  size_t text_tokens;
  size_t class_count;
} DitcalArch;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call into this library on the same thread.
const char *ditcal_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *ditcal_version(void);

// Creates a freshly initialized model.
//
// # Safety
// `arch` must point to a valid `DitcalArch`; `out` must be valid for one write.
enum DitcalStatus ditcal_model_new(const struct DitcalArch *arch,
                                   uint64_t seed,
                                   struct DitcalModel **out);

// Loads the model stored in a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for one write.
enum DitcalStatus ditcal_model_load(const char *path, struct DitcalModel **out);

// Releases a model; null is ignored.
//
// # Safety
// `model` must be null or a handle from this library not yet freed.
void ditcal_model_free(struct DitcalModel *model);

// Number of blocks.
//
// # Safety
// `model` must be a live handle; `out` valid for one write.
enum DitcalStatus ditcal_model_depth(const struct DitcalModel *model, size_t *out);

// Number of real classes; the null class is this value.
//
// # Safety
// `model` must be a live handle; `out` valid for one write.
enum DitcalStatus ditcal_model_class_count(const struct DitcalModel *model, size_t *out);

// Length of a calibration vector (output weight first, then scales) at `g`.
//
// # Safety
// `model` must be a live handle; `out` valid for one write.
enum DitcalStatus ditcal_calibration_dimension(const struct DitcalModel *model,
                                               enum DitcalGranularity g,
                                               size_t *out);

// Samples one 8×8 image with `nfe` Euler steps. A null `calibration` with
// zero length samples the unmodified model; otherwise `calibration` holds
// `calibration_len` values at granularity `g`.
//
// # Safety
// `model` must be a live handle; `calibration` valid for `calibration_len`
// reads; `out_pixels` valid for 64 writes.
enum DitcalStatus ditcal_model_sample(const struct DitcalModel *model,
                                      size_t class_id,
                                      uint64_t seed,
                                      size_t nfe,
                                      double guidance_scale,
                                      enum DitcalGranularity g,
                                      const double *calibration,
                                      size_t calibration_len,
                                      double *out_pixels);

// Pearson correlation of 64 pixels with the template of `class_id`.
//
// # Safety
// `pixels` valid for 64 reads; `out` valid for one write.
enum DitcalStatus ditcal_template_correlation(const double *pixels, size_t class_id, double *out);

// Creates an optimizer at `mean0` (length `dim`) with step size `sigma0`.
// `lambda` of zero selects `4 + ⌊3 ln dim⌋`.
//
// # Safety
// `mean0` valid for `dim` reads; `out` valid for one write.
enum DitcalStatus ditcal_cma_new(size_t dim,
                                 const double *mean0,
                                 double sigma0,
                                 size_t lambda,
                                 uint64_t seed,
                                 struct DitcalCma **out);

// Releases an optimizer; null is ignored.
//
// # Safety
// `cma` must be null or a handle from this library not yet freed.
void ditcal_cma_free(struct DitcalCma *cma);

// Population size λ.
//
// # Safety
// `cma` must be a live handle; `out` valid for one write.
enum DitcalStatus ditcal_cma_lambda(const struct DitcalCma *cma, size_t *out);

// Current step size σ.
//
// # Safety
// `cma` must be a live handle; `out` valid for one write.
enum DitcalStatus ditcal_cma_sigma(const struct DitcalCma *cma, double *out);

// Completed generations.
//
// # Safety
// `cma` must be a live handle; `out` valid for one write.
enum DitcalStatus ditcal_cma_generation(const struct DitcalCma *cma, size_t *out);

// Copies the distribution mean into `out[0..len]`; `len` must equal the dimension.
//
// # Safety
// `cma` must be a live handle; `out` valid for `len` writes.
enum DitcalStatus ditcal_cma_mean(const struct DitcalCma *cma, double *out, size_t len);

// Draws λ candidates into `out` as λ rows of `dim` values; `len` must be λ·dim.
//
// # Safety
// `cma` must be a live handle; `out` valid for `len` writes.
enum DitcalStatus ditcal_cma_ask(struct DitcalCma *cma, double *out, size_t len);

// Reports one reward per candidate of the last ask, in candidate order; higher is better.
//
// # Safety
// `cma` must be a live handle; `rewards` valid for `len` reads.
enum DitcalStatus ditcal_cma_tell(struct DitcalCma *cma, const double *rewards, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DITCAL_H */

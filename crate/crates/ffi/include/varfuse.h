/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef VARFUSE_H
#define VARFUSE_H

#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum VfStatus {
  VF_STATUS_OK = 0,
  VF_STATUS_NULL_POINTER = 1,
  VF_STATUS_INVALID_ARGUMENT = 2,
  VF_STATUS_SHAPE = 3,
  VF_STATUS_NUMERIC = 4,
  VF_STATUS_DATA = 5,
  VF_STATUS_CONFIG = 6,
  VF_STATUS_CHECKPOINT = 7,
  VF_STATUS_IO = 8,
  VF_STATUS_PANIC = 9,
} VfStatus;

// Opaque handle to a loaded network.
typedef struct VfModel VfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty if none. The
// pointer stays valid until the next failing call on the same thread.
const char *vf_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *vf_version(void);

// Loads a checkpoint written by `varfuse train`. On success `*out` owns a
// new handle; on failure it is set to null.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum VfStatus vf_model_load(const char *path, struct VfModel **out);

// Releases a handle from [`vf_model_load`]. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void vf_model_free(struct VfModel *model);

// Number of output classes, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t vf_model_classes(const struct VfModel *model);

// Number of fusion levels that produce a fusion-factor map: every level for
// probabilistic and attention fusion, none for addition or a null handle.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t vf_model_factor_levels(const struct VfModel *model);

// Segments one image pair.
//
// `rgb` holds `3 * height * width` values and `thermal` `height * width`,
// both planar row-major in `[0, 1]`. Height and width must be multiples of
// 32. `labels` receives `height * width` class ids. `confidence`, when not
// null, receives `classes * height * width` softmax values. `samples == 1`
// uses the posterior mean; larger counts average that many latent draws
// seeded from `seed`.
//
// # Safety
// All non-null pointers must reference buffers of the sizes above.
enum VfStatus vf_model_infer(const struct VfModel *model,
                             const double *rgb,
                             const double *thermal,
                             uintptr_t height,
                             uintptr_t width,
                             uintptr_t samples,
                             uint64_t seed,
                             uint8_t *labels,
                             double *confidence);

// Fusion-factor map of one level from a posterior-mean pass. Level `l` has
// stride `2^(l+1)`, so `factor` receives `(height >> (l+1)) * (width >> (l+1))`
// values in `[0, 1]`; `len` is its capacity and must match exactly.
//
// # Safety
// All non-null pointers must reference buffers of the sizes described.
enum VfStatus vf_model_fusion_factor(const struct VfModel *model,
                                     const double *rgb,
                                     const double *thermal,
                                     uintptr_t height,
                                     uintptr_t width,
                                     uintptr_t level,
                                     double *factor,
                                     uintptr_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VARFUSE_H */

#ifndef CYTOPAIR_H
#define CYTOPAIR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum {
  CYTOPAIR_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  CYTOPAIR_STATUS_NULL_ARGUMENT = 1,
  /**
   * Arguments were well-formed but rejected, e.g. a zero `k`.
   */
  CYTOPAIR_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A file could not be read.
   */
  CYTOPAIR_STATUS_IO = 3,
  /**
   * A file was read but its contents are malformed or unsupported.
   */
  CYTOPAIR_STATUS_FORMAT = 4,
  /**
   * The output buffer is too small; the required size was written back.
   */
  CYTOPAIR_STATUS_BUFFER_TOO_SMALL = 5,
  /**
   * Any other failure inside the library.
   */
  CYTOPAIR_STATUS_RUNTIME = 6,
  /**
   * The library panicked. The handle involved should be freed.
   */
  CYTOPAIR_STATUS_PANIC = 7,
} CytopairStatus;

/**
 * A labeled embedding gallery.
 */
typedef struct CytopairGallery CytopairGallery;

/**
 * A trained model together with the preprocessing it was trained with.
 */
typedef struct CytopairModel CytopairModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call into the library on this thread.
 */
const char *cytopair_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cytopair_version(void);

/**
 * Loads a checkpoint written by `cytopair train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
CytopairStatus cytopair_model_load(const char *path, CytopairModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`cytopair_model_load`] and not be used afterwards.
 */
void cytopair_model_free(CytopairModel *model);

/**
 * Length of the embeddings the model produces.
 *
 * # Safety
 * `model` must be a live handle and `dim` writable.
 */
CytopairStatus cytopair_model_embedding_dim(const CytopairModel *model, size_t *dim);

/**
 * Unit-norm image embedding of a grayscale raster of `height * width`
 * bytes in row-major order.
 *
 * # Safety
 * `pixels` must hold `height * width` bytes, `out` `capacity` floats and
 * `written` must be writable.
 */
CytopairStatus cytopair_embed_image(const CytopairModel *model,
                                    const uint8_t *pixels,
                                    size_t height,
                                    size_t width,
                                    float *out,
                                    size_t capacity,
                                    size_t *written);

/**
 * Unit-norm profile embedding of `length` time points, each holding the six
 * channel values in order.
 *
 * # Safety
 * `samples` must hold `length * 6` values, `out` `capacity` floats and
 * `written` must be writable.
 */
CytopairStatus cytopair_embed_profile(const CytopairModel *model,
                                      const double *samples,
                                      size_t length,
                                      float *out,
                                      size_t capacity,
                                      size_t *written);

/**
 * Loads a gallery written by `cytopair build-gallery`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
CytopairStatus cytopair_gallery_load(const char *path, CytopairGallery **out);

/**
 * Releases a gallery. Null is ignored.
 *
 * # Safety
 * `gallery` must come from [`cytopair_gallery_load`] and not be used
 * afterwards.
 */
void cytopair_gallery_free(CytopairGallery *gallery);

/**
 * Number of entries in the gallery.
 *
 * # Safety
 * `gallery` must be a live handle and `len` writable.
 */
CytopairStatus cytopair_gallery_len(const CytopairGallery *gallery, size_t *len);

/**
 * Classifies one particle by a k-NN vote over the gallery. Pass null for a
 * modality that was not recorded; at least one must be given. The winning
 * label is written NUL-terminated into `label` and its vote count into
 * `votes`. When `label_capacity` is too small, `BufferTooSmall` is returned
 * and `label_needed` holds the size including the terminator.
 *
 * # Safety
 * Pointers follow the same rules as [`cytopair_embed_image`] and
 * [`cytopair_embed_profile`]; `label` must hold `label_capacity` bytes and
 * `votes` and `label_needed` must be writable or null.
 */
CytopairStatus cytopair_classify(const CytopairModel *model,
                                 const CytopairGallery *gallery,
                                 const uint8_t *pixels,
                                 size_t height,
                                 size_t width,
                                 const double *samples,
                                 size_t length,
                                 size_t k,
                                 char *label,
                                 size_t label_capacity,
                                 size_t *label_needed,
                                 size_t *votes);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CYTOPAIR_H */

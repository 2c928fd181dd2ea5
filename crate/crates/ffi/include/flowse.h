#ifndef FLOWSE_H
#define FLOWSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FlowseScheme {
  FLOWSE_SCHEME_EULER = 0,
  FLOWSE_SCHEME_MIDPOINT = 1,
} FlowseScheme;

/**
 * Result of every fallible call.
 */
typedef enum FlowseStatus {
  FLOWSE_STATUS_OK = 0,
  /**
   * A required pointer was null.
   */
  FLOWSE_STATUS_NULL_ARGUMENT = 1,
  /**
   * Text argument was not valid UTF-8.
   */
  FLOWSE_STATUS_INVALID_UTF8 = 2,
  FLOWSE_STATUS_IO = 3,
  FLOWSE_STATUS_CONFIG = 4,
  FLOWSE_STATUS_DOMAIN = 5,
  /**
   * Malformed or incompatible checkpoint or audio.
   */
  FLOWSE_STATUS_FORMAT = 6,
  FLOWSE_STATUS_DIVERGENCE = 7,
  /**
   * A Rust panic was caught; the handle should not be reused.
   */
  FLOWSE_STATUS_PANIC = 8,
} FlowseStatus;

/**
 * Opaque model handle.
 */
typedef struct FlowseModel FlowseModel;

/**
 * Sampling options. Fill with `flowse_enhance_options_default`.
 */
typedef struct FlowseEnhanceOptions {
  uint64_t seed;
  /**
   * ODE steps; 0 keeps the value stored in the checkpoint.
   */
  uint32_t n_steps;
  enum FlowseScheme scheme;
  /**
   * Griffin-Lim iterations.
   */
  uint32_t gl_iters;
} FlowseEnhanceOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or NULL if none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *flowse_last_error_message(void);

struct FlowseEnhanceOptions flowse_enhance_options_default(void);

/**
 * Loads a checkpoint. On success `*out` owns a handle to release with
 * `flowse_model_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum FlowseStatus flowse_model_load(const char *path, struct FlowseModel **out);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `model` must come from `flowse_model_load` and not be freed twice.
 */
void flowse_model_free(struct FlowseModel *model);

/**
 * Sample rate the model expects, or 0 for a NULL handle.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
uint32_t flowse_model_sample_rate(const struct FlowseModel *model);

/**
 * Enhances `len` mono samples at `sample_rate` into `out`, which must hold
 * `len` floats. `text` may be NULL for text-free enhancement; `options`
 * may be NULL for defaults.
 *
 * # Safety
 * `samples` and `out` must point to `len` floats; `text` must be NULL or
 * NUL-terminated.
 */
enum FlowseStatus flowse_enhance(const struct FlowseModel *model,
                                 const float *samples,
                                 size_t len,
                                 uint32_t sample_rate,
                                 const char *text,
                                 const struct FlowseEnhanceOptions *options,
                                 float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWSE_H */

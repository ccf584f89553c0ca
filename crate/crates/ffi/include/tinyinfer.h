/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef TINYINFER_H
#define TINYINFER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Activation precision between integer convolutions.
 */
typedef enum TiQuantMode {
  TI_QUANT_MODE_REQUANTIZE = 0,
  TI_QUANT_MODE_FLOAT_BETWEEN_LAYERS = 1,
} TiQuantMode;

/**
 * Result of every fallible call.
 */
typedef enum TiStatus {
  TI_STATUS_OK = 0,
  TI_STATUS_NULL_POINTER = 1,
  TI_STATUS_IO = 2,
  TI_STATUS_FORMAT = 3,
  TI_STATUS_VERSION = 4,
  TI_STATUS_CORRUPT = 5,
  TI_STATUS_SHAPE = 6,
  TI_STATUS_DTYPE = 7,
  TI_STATUS_ARGUMENT = 8,
  TI_STATUS_BUILD = 9,
  TI_STATUS_REPORT = 10,
  TI_STATUS_BOUNDS = 11,
  TI_STATUS_PANIC = 12,
} TiStatus;

/**
 * A built network, shareable between sessions.
 */
typedef struct TiGraph TiGraph;

/**
 * Buffers and workers for running one graph.
 */
typedef struct TiSession TiSession;

/**
 * Loaded weights.
 */
typedef struct TiWeights TiWeights;

typedef struct TiBuildOptions {
  bool quantized;
  enum TiQuantMode quant_mode;
  /**
   * Include the attenuation layer.
   */
  bool use_attenuation;
  float attenuation;
} TiBuildOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failed call on this thread, or null.
 * Valid until the next failing call on the same thread.
 */
const char *ti_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ti_version(void);

/**
 * Default options: float, attenuation layer present with coefficient 1.
 */
struct TiBuildOptions ti_build_options_default(void);

/**
 * Reads a TIWF file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TiStatus ti_weights_load(const char *path, struct TiWeights **out);

/**
 * Seeded random SqueezeNet weights.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum TiStatus ti_weights_synthetic(uint64_t seed, struct TiWeights **out);

/**
 * Writes weights to a TIWF file.
 *
 * # Safety
 * `weights` must come from this library; `path` must be NUL-terminated.
 */
enum TiStatus ti_weights_save(const struct TiWeights *weights, const char *path);

/**
 * Records activation ranges from `count` input files so quantized graphs
 * can be built.
 *
 * # Safety
 * `weights` must come from this library; `paths` must hold `count`
 * NUL-terminated strings.
 */
enum TiStatus ti_weights_calibrate(struct TiWeights *weights,
                                   const char *const *paths,
                                   size_t count,
                                   size_t workers);

/**
 * Number of stored entries, including metadata.
 *
 * # Safety
 * `weights` must come from this library or be null.
 */
size_t ti_weights_len(const struct TiWeights *weights);

/**
 * # Safety
 * `weights` must come from this library or be null; it must not be used afterwards.
 */
void ti_weights_free(struct TiWeights *weights);

/**
 * Builds SqueezeNet v1.0 for a 1×3×227×227 input. `options` may be null
 * for the defaults.
 *
 * # Safety
 * `weights` must come from this library; `out` must be a valid pointer.
 */
enum TiStatus ti_graph_build_squeezenet(const struct TiWeights *weights,
                                        const struct TiBuildOptions *options,
                                        struct TiGraph **out);

/**
 * Number of input elements the graph expects.
 *
 * # Safety
 * `graph` must come from this library or be null.
 */
size_t ti_graph_input_len(const struct TiGraph *graph);

/**
 * Number of output probabilities.
 *
 * # Safety
 * `graph` must come from this library or be null.
 */
size_t ti_graph_output_len(const struct TiGraph *graph);

/**
 * # Safety
 * `graph` must come from this library or be null; it must not be used
 * afterwards. Sessions created from it stay valid.
 */
void ti_graph_free(struct TiGraph *graph);

/**
 * Allocates buffers and `workers` threads for running `graph`.
 *
 * # Safety
 * `graph` must come from this library; `out` must be a valid pointer.
 */
enum TiStatus ti_session_new(const struct TiGraph *graph, size_t workers, struct TiSession **out);

/**
 * Runs one inference on a planar float input and copies the
 * probabilities into `probs`.
 *
 * # Safety
 * `input` must hold `input_len` floats and `probs` room for `probs_len`.
 */
enum TiStatus ti_session_run(struct TiSession *session,
                             const float *input,
                             size_t input_len,
                             float *probs,
                             size_t probs_len);

/**
 * # Safety
 * `session` must come from this library or be null; it must not be used afterwards.
 */
void ti_session_free(struct TiSession *session);

/**
 * Reads a TIRAW001 or TIF32001 file into `data` (planar, 3×227×227),
 * using the preprocessing recorded in `weights` or the defaults when
 * `weights` is null.
 *
 * # Safety
 * `path` must be NUL-terminated; `data` must have room for `len` floats.
 */
enum TiStatus ti_input_load(const char *path,
                            const struct TiWeights *weights,
                            float *data,
                            size_t len);

/**
 * The `k` most probable classes, highest first, ties to the lower index.
 *
 * # Safety
 * `probs` must hold `len` floats; `classes` and `values` room for `k` entries.
 */
enum TiStatus ti_top_k(const float *probs, size_t len, size_t k, size_t *classes, float *values);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TINYINFER_H */

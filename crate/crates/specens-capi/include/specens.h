#ifndef SPECENS_H
#define SPECENS_H

/* Generated by cbindgen from the specens-capi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible entry point.
 */
typedef enum SpecensStatus {
  /**
   * Success.
   */
  SPECENS_OK = 0,
  /**
   * Invalid configuration or arguments.
   */
  SPECENS_ERR_CONFIG = 1,
  /**
   * Model, decoding, or I/O failure.
   */
  SPECENS_ERR_RUNTIME = 2,
  /**
   * A required pointer argument was null.
   */
  SPECENS_ERR_NULL_ARG = 3,
  /**
   * A string argument was not valid UTF-8.
   */
  SPECENS_ERR_UTF8 = 4,
} SpecensStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct SpecensModel SpecensModel;

/**
 * Opaque handle to a completed decode trace.
 */
typedef struct SpecensTrace SpecensTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent error on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *specens_last_error(void);

/**
 * Loads a table-model file. On success writes a handle to `out`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum SpecensStatus specens_model_load(const char *path, struct SpecensModel **out);

/**
 * Builds a seeded random table model.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum SpecensStatus specens_model_random_table(uint64_t seed,
                                              size_t vocab_size,
                                              size_t context_length,
                                              double concentration,
                                              double cost,
                                              struct SpecensModel **out);

/**
 * Frees a model handle; accepts null.
 *
 * # Safety
 * `model` must be null or a pointer returned by a `specens_model_*`
 * constructor, not freed before.
 */
void specens_model_free(struct SpecensModel *model);

/**
 * Vocabulary size of a model; 0 for null.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t specens_model_vocab_size(const struct SpecensModel *model);

/**
 * Simulated cost per invocation; NaN for null.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
double specens_model_cost(const struct SpecensModel *model);

/**
 * Runs one decode session. `config_json` is the JSON encoding of the
 * engine's decode configuration, for example:
 *
 * ```json
 * {"strategy":"spec-ensemble",
 *  "ensemble":{"kind":"weighted","lambda":0.5,"temperature":1.0},
 *  "gammas":[2,1],"max_tokens":32,"seed":7}
 * ```
 *
 * # Safety
 * `models` must point to `n_models` live model handles, `prefix` to
 * `prefix_len` readable ids (null allowed when `prefix_len` is 0), and
 * `out` must be a valid pointer.
 */
enum SpecensStatus specens_decode(const struct SpecensModel *const *models,
                                  size_t n_models,
                                  const char *config_json,
                                  const uint32_t *prefix,
                                  size_t prefix_len,
                                  struct SpecensTrace **out);

/**
 * Number of emitted tokens; 0 for null.
 *
 * # Safety
 * `trace` must be null or a live trace handle.
 */
size_t specens_trace_token_count(const struct SpecensTrace *trace);

/**
 * Copies the emitted tokens into `out` (capacity `cap`).
 *
 * # Safety
 * `trace` must be a live trace handle and `out` writable for `cap` ids.
 */
enum SpecensStatus specens_trace_tokens(const struct SpecensTrace *trace,
                                        uint32_t *out,
                                        size_t cap);

/**
 * Total simulated time of the session; NaN for null.
 *
 * # Safety
 * `trace` must be null or a live trace handle.
 */
double specens_trace_simulated_time(const struct SpecensTrace *trace);

/**
 * Accepted verification events.
 *
 * # Safety
 * `trace` must be null or a live trace handle.
 */
uint64_t specens_trace_accepted(const struct SpecensTrace *trace);

/**
 * Rejected verification events.
 *
 * # Safety
 * `trace` must be null or a live trace handle.
 */
uint64_t specens_trace_rejected(const struct SpecensTrace *trace);

/**
 * Empirical acceptance rate; NaN when nothing was verified or for null.
 *
 * # Safety
 * `trace` must be null or a live trace handle.
 */
double specens_trace_empirical_alpha(const struct SpecensTrace *trace);

/**
 * Serializes the full trace as JSON into a newly allocated string; free
 * it with [`specens_string_free`].
 *
 * # Safety
 * `trace` must be a live trace handle and `out` a valid pointer.
 */
enum SpecensStatus specens_trace_to_json(const struct SpecensTrace *trace, char **out);

/**
 * Frees a string returned by this library; accepts null.
 *
 * # Safety
 * `s` must be null or a string returned by this library, not freed
 * before.
 */
void specens_string_free(char *s);

/**
 * Frees a trace handle; accepts null.
 *
 * # Safety
 * `trace` must be null or a pointer returned by [`specens_decode`], not
 * freed before.
 */
void specens_trace_free(struct SpecensTrace *trace);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPECENS_H */

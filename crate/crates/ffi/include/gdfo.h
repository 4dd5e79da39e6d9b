#ifndef GDFO_H
#define GDFO_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GdfoStatus {
  GDFO_STATUS_OK = 0,
  GDFO_STATUS_NULL_POINTER = 1,
  GDFO_STATUS_INVALID_ARGUMENT = 2,
  GDFO_STATUS_DIMENSION = 3,
  GDFO_STATUS_BUFFER_TOO_SMALL = 4,
  GDFO_STATUS_BUDGET = 5,
  GDFO_STATUS_PROTOCOL = 6,
  GDFO_STATUS_IO = 7,
  GDFO_STATUS_CHECKPOINT = 8,
  GDFO_STATUS_NUMERIC = 9,
  GDFO_STATUS_CONTRACT = 10,
  GDFO_STATUS_PANIC = 11,
} GdfoStatus;

/**
 * Client for a teacher, either loaded in process or reached over TCP.
 */
typedef struct GdfoBlackBox GdfoBlackBox;

/**
 * CMA-ES optimizer state.
 */
typedef struct GdfoCma GdfoCma;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *gdfo_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gdfo_version(void);

/**
 * Loads a teacher checkpoint and serves it in process with `budget` calls.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum GdfoStatus gdfo_blackbox_open_checkpoint(const char *path,
                                              uint64_t budget,
                                              struct GdfoBlackBox **out);

/**
 * Connects to a teacher service at `endpoint` (`host:port`).
 *
 * # Safety
 * `endpoint` must be a NUL-terminated string and `out` a writable pointer.
 */
enum GdfoStatus gdfo_blackbox_connect(const char *endpoint, struct GdfoBlackBox **out);

/**
 * Queries one instance. Writes the class logits to `logits` and their count
 * to `n_logits`. Costs one metered call on success.
 *
 * # Safety
 * `handle` must come from a `gdfo_blackbox_*` constructor. Buffers must hold
 * at least the stated number of elements.
 */
enum GdfoStatus gdfo_blackbox_query(const struct GdfoBlackBox *handle,
                                    const double *prompt,
                                    size_t prompt_len,
                                    const uint32_t *token_ids,
                                    size_t n_tokens,
                                    double *logits,
                                    size_t capacity,
                                    size_t *n_logits);

/**
 * Calls counted by the service so far.
 *
 * # Safety
 * `handle` must be live and `out` writable.
 */
enum GdfoStatus gdfo_blackbox_calls_used(const struct GdfoBlackBox *handle, uint64_t *out);

/**
 * # Safety
 * `handle` must be null or a live handle; it is invalid afterwards.
 */
void gdfo_blackbox_free(struct GdfoBlackBox *handle);

/**
 * Creates an optimizer over `dim` coordinates starting at the origin.
 *
 * # Safety
 * `out` must be writable.
 */
enum GdfoStatus gdfo_cma_new(size_t dim,
                             double sigma0,
                             size_t population_size,
                             uint64_t seed,
                             struct GdfoCma **out);

/**
 * Samples a population into `candidates`, row-major `population_size x dim`.
 *
 * # Safety
 * `handle` must be live; `candidates` must hold `capacity` doubles.
 */
enum GdfoStatus gdfo_cma_ask(struct GdfoCma *handle, double *candidates, size_t capacity);

/**
 * Updates the distribution with one fitness per candidate of the last ask.
 *
 * # Safety
 * `handle` must be live; `fitnesses` must hold `n` doubles.
 */
enum GdfoStatus gdfo_cma_tell(struct GdfoCma *handle, const double *fitnesses, size_t n);

/**
 * Copies the current mean into `mean`.
 *
 * # Safety
 * `handle` must be live; `mean` must hold `capacity` doubles.
 */
enum GdfoStatus gdfo_cma_mean(const struct GdfoCma *handle, double *mean, size_t capacity);

/**
 * # Safety
 * `handle` must be null or a live handle; it is invalid afterwards.
 */
void gdfo_cma_free(struct GdfoCma *handle);

/**
 * Writes `alpha * p_gd + (1 - alpha) * (p0 + A z)` to `out`, where `A` is
 * the `prompt_dim x subspace_dim` projection drawn from `projection_seed`.
 * A non-positive `projection_std` selects the default scale.
 *
 * # Safety
 * `p_gd`, `p0` and `out` must hold `prompt_dim` doubles; `z` must hold
 * `subspace_dim` doubles.
 */
enum GdfoStatus gdfo_combine(const double *p_gd,
                             const double *p0,
                             size_t prompt_dim,
                             const double *z,
                             size_t subspace_dim,
                             uint64_t projection_seed,
                             double projection_std,
                             double alpha,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GDFO_H */

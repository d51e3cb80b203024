/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#ifndef INVPROBE_H
#define INVPROBE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IpStatus {
  IP_STATUS_OK = 0,
  IP_STATUS_NULL_POINTER = 1,
  IP_STATUS_INVALID_ARGUMENT = 2,
  IP_STATUS_IO = 3,
  IP_STATUS_FORMAT = 4,
  IP_STATUS_SHAPE = 5,
  IP_STATUS_INFEASIBLE = 6,
  IP_STATUS_NUMERICAL = 7,
  IP_STATUS_PANIC = 8,
} IpStatus;

/**
 * Activation bundle held in memory.
 */
typedef struct IpBundle IpBundle;

/**
 * Dense row-major `f64` matrix.
 */
typedef struct IpMatrix IpMatrix;

/**
 * Per-head scores, sorted by accuracy (highest first).
 */
typedef struct IpScores IpScores;

typedef struct IpHeadScore {
  size_t layer;
  size_t head;
  double accuracy;
  size_t n_correct;
  size_t n_eval;
} IpHeadScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a
 * successful call. Valid until the next library call on this thread.
 */
const char *ip_last_error_message(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *ip_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void ip_string_free(char *s);

/**
 * Loads and validates a bundle directory.
 *
 * # Safety
 * `dir` must be a nul-terminated string; `out` must be writable.
 */
enum IpStatus ip_bundle_load(const char *dir, struct IpBundle **out);

/**
 * Generates a synthetic bundle from a JSON synthesis config.
 *
 * # Safety
 * `config_json` must be a nul-terminated string; `out` must be writable.
 */
enum IpStatus ip_synth_bundle(const char *config_json, struct IpBundle **out);

/**
 * Writes a bundle to `dir` (created if missing).
 *
 * # Safety
 * `bundle` must be a live handle; `dir` a nul-terminated string.
 */
enum IpStatus ip_bundle_write(const struct IpBundle *bundle, const char *dir);

/**
 * Reports class, instance and head counts and the head dimension.
 * Any output pointer may be null.
 *
 * # Safety
 * `bundle` must be a live handle; non-null outputs must be writable.
 */
enum IpStatus ip_bundle_shape(const struct IpBundle *bundle,
                              size_t *n_classes,
                              size_t *n_instances,
                              size_t *n_heads,
                              size_t *head_dim);

/**
 * # Safety
 * `bundle` must be null or a handle not yet freed.
 */
void ip_bundle_free(struct IpBundle *bundle);

/**
 * Zero-shot scores of every head.
 *
 * # Safety
 * `bundle` must be a live handle; `out` must be writable.
 */
enum IpStatus ip_probe_zeroshot(const struct IpBundle *bundle, struct IpScores **out);

/**
 * Trains a contrastive probe per head and scores it. `config_json` may
 * be null for defaults.
 *
 * # Safety
 * `bundle` must be a live handle; `config_json` null or nul-terminated;
 * `out` writable.
 */
enum IpStatus ip_probe_unsupervised(const struct IpBundle *bundle,
                                    const char *config_json,
                                    struct IpScores **out);

/**
 * Trains a sparse autoencoder per head and scores it. `config_json` may
 * be null for defaults.
 *
 * # Safety
 * As for [`ip_probe_unsupervised`].
 */
enum IpStatus ip_sae_classify(const struct IpBundle *bundle,
                              const char *config_json,
                              struct IpScores **out);

/**
 * Number of heads in a score set (0 for null).
 *
 * # Safety
 * `scores` must be null or a live handle.
 */
size_t ip_scores_len(const struct IpScores *scores);

/**
 * # Safety
 * `scores` must be a live handle; `out` writable.
 */
enum IpStatus ip_scores_get(const struct IpScores *scores, size_t index, struct IpHeadScore *out);

/**
 * Scores as a JSON array; release with [`ip_string_free`].
 *
 * # Safety
 * `scores` must be a live handle; `out` writable.
 */
enum IpStatus ip_scores_to_json(const struct IpScores *scores, char **out);

/**
 * # Safety
 * `scores` must be null or a handle not yet freed.
 */
void ip_scores_free(struct IpScores *scores);

/**
 * Zero-shot class of one activation vector at `(layer, head)`.
 *
 * # Safety
 * `bundle` must be a live handle; `h` must point to `len` doubles;
 * `out_class` writable.
 */
enum IpStatus ip_classify(const struct IpBundle *bundle,
                          size_t layer,
                          size_t head,
                          const double *h,
                          size_t len,
                          size_t *out_class);

/**
 * Reads an ACTB file into memory.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` writable.
 */
enum IpStatus ip_matrix_read(const char *path, struct IpMatrix **out);

/**
 * # Safety
 * `matrix` must be a live handle; non-null outputs writable.
 */
enum IpStatus ip_matrix_shape(const struct IpMatrix *matrix, size_t *rows, size_t *cols);

/**
 * Row-major data, `rows * cols` doubles, owned by the handle. Null for a
 * null handle.
 *
 * # Safety
 * `matrix` must be null or a live handle.
 */
const double *ip_matrix_data(const struct IpMatrix *matrix);

/**
 * # Safety
 * `matrix` must be null or a handle not yet freed.
 */
void ip_matrix_free(struct IpMatrix *matrix);

/**
 * Trains one modular-division transformer and returns its metrics as
 * JSON; release with [`ip_string_free`].
 *
 * # Safety
 * `config_json` must be a nul-terminated string; `metrics_json` writable.
 */
enum IpStatus ip_grok_run(const char *config_json, char **metrics_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INVPROBE_H */

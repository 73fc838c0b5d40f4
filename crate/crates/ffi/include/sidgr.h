#ifndef SIDGR_H
#define SIDGR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SidgrStatus {
  SIDGR_STATUS_OK = 0,
  SIDGR_STATUS_NULL_ARGUMENT = 1,
  SIDGR_STATUS_INVALID_ARGUMENT = 2,
  SIDGR_STATUS_CONFIG = 3,
  SIDGR_STATUS_DATA = 4,
  SIDGR_STATUS_NUMERICAL = 5,
  SIDGR_STATUS_BUFFER_TOO_SMALL = 6,
  SIDGR_STATUS_PANIC = 7,
} SidgrStatus;

// Residual-quantization codebooks.
typedef struct SidgrCodebooks SidgrCodebooks;

// A trained encoder-decoder with its SID catalogue.
typedef struct SidgrRecommender SidgrRecommender;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message (NUL-terminated,
// truncated to `cap`) into `buf` and returns the length it needs including
// the terminator. `buf` may be null to query the length.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
size_t sidgr_last_error(char *buf, size_t cap);

// Library version as a static NUL-terminated string.
const char *sidgr_version(void);

// Reads a codebook file written by `sidgr tokenize`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable handle slot.
enum SidgrStatus sidgr_codebooks_open(const char *path, struct SidgrCodebooks **out);

// # Safety
// `h` must be null or a handle from [`sidgr_codebooks_open`] not yet freed.
void sidgr_codebooks_free(struct SidgrCodebooks *h);

// Embedding dimension and number of levels.
//
// # Safety
// `h` must be a live handle; `dim` and `levels` writable.
enum SidgrStatus sidgr_codebooks_shape(const struct SidgrCodebooks *h, size_t *dim, size_t *levels);

// Quantizes one embedding: writes one code per level into `codes` and, when
// `reconstruction` is non-null, the sum of the chosen codewords.
//
// # Safety
// `h` must be a live handle, `embedding` must hold `dim` floats, `codes`
// `codes_len` slots and `reconstruction` (if non-null) `dim` floats.
enum SidgrStatus sidgr_codebooks_assign(const struct SidgrCodebooks *h,
                                        const float *embedding,
                                        size_t dim,
                                        size_t *codes,
                                        size_t codes_len,
                                        float *reconstruction);

// Loads a trained run directory (after `sidgr train-tiger`).
//
// # Safety
// `run_dir` must be a NUL-terminated string and `out` a writable handle slot.
enum SidgrStatus sidgr_recommender_open(const char *run_dir, struct SidgrRecommender **out);

// # Safety
// `h` must be null or a handle from [`sidgr_recommender_open`] not yet freed.
void sidgr_recommender_free(struct SidgrRecommender *h);

// Catalogue size, or 0 for a null handle.
//
// # Safety
// `h` must be null or a live handle.
size_t sidgr_recommender_num_items(const struct SidgrRecommender *h);

// Copies the id of catalogue item `index` into `buf`; `needed` receives the
// length including the terminator.
//
// # Safety
// `h` must be a live handle, `buf` null or `cap` writable bytes, `needed` writable.
enum SidgrStatus sidgr_recommender_item_id(const struct SidgrRecommender *h,
                                           size_t index,
                                           char *buf,
                                           size_t cap,
                                           size_t *needed);

// Beam-decodes the top `k` next items for a history of item ids (oldest
// first). Writes catalogue indices and log-probabilities, best first, and
// the number written to `n_out` (at most `k`).
//
// # Safety
// `history` must hold `history_len` NUL-terminated strings (or be null when
// the length is 0); `items_out` and `scores_out` must hold `k` slots.
enum SidgrStatus sidgr_recommender_recommend(const struct SidgrRecommender *h,
                                             const char *const *history,
                                             size_t history_len,
                                             size_t k,
                                             size_t *items_out,
                                             double *scores_out,
                                             size_t *n_out);

// Fits scaling law `form` (e.g. "eq4") to a JSONL points file with default
// options and the given multistart seed. `json_out` receives the fit as a
// JSON string owned by the caller, released with [`sidgr_string_free`].
//
// # Safety
// `form` and `points_path` must be NUL-terminated strings; `json_out` writable.
enum SidgrStatus sidgr_fit_scaling(const char *form,
                                   const char *points_path,
                                   uint64_t seed,
                                   char **json_out);

// Releases a string returned by this library.
//
// # Safety
// `s` must be null or a string from this library not yet freed.
void sidgr_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SIDGR_H */

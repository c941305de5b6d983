#ifndef DRE_H
#define DRE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum DreStatus {
  DRE_STATUS_OK = 0,
  DRE_STATUS_NULL_POINTER = 1,
  DRE_STATUS_INVALID_UTF8 = 2,
  DRE_STATUS_IO = 3,
  DRE_STATUS_PARSE = 4,
  DRE_STATUS_CHECKPOINT = 5,
  DRE_STATUS_INVALID_ARGUMENT = 6,
  DRE_STATUS_UNKNOWN_RELATION = 7,
  DRE_STATUS_INTERNAL = 8,
  DRE_STATUS_PANIC = 9,
} DreStatus;

/**
 * Opaque model handle.
 */
typedef struct DreModel DreModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint. `split_path` may be null to keep the split stored in
 * the checkpoint. On success `*out` owns a handle to pass to
 * [`dre_model_free`].
 *
 * # Safety
 * `path` and a non-null `split_path` must be NUL-terminated strings; `out`
 * must be a valid pointer.
 */
enum DreStatus dre_model_load(const char *path, const char *split_path, struct DreModel **out);

/**
 * Releases a handle from [`dre_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must come from [`dre_model_load`] and not be freed twice.
 */
void dre_model_free(struct DreModel *model);

/**
 * Scores the candidates of one query. The request is a JSON object with
 * `dialogue` (list of turns), `subject`, `object`, and optional `mode`,
 * `candidates`, `k` and `gold_trigger`. `*out_json` receives the ranked
 * prediction as JSON.
 *
 * # Safety
 * `model` must be a live handle, `request_json` a NUL-terminated string and
 * `out_json` a valid pointer.
 */
enum DreStatus dre_score_json(const struct DreModel *model,
                              const char *request_json,
                              char **out_json);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void dre_string_free(char *s);

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * call into the library from the same thread.
 */
const char *dre_last_error(void);

/**
 * Best trigger span for `len` start/end logits. `mask[i] != 0` marks
 * positions a span may cover; index 0 is the no-trigger span `(0, 0)`.
 *
 * # Safety
 * `start`, `end` and `mask` must point to `len` elements; `out_start` and
 * `out_end` must be valid pointers.
 */
enum DreStatus dre_decode_span(const double *start,
                               const double *end,
                               const uint8_t *mask,
                               uintptr_t len,
                               uintptr_t max_span_len,
                               uintptr_t *out_start,
                               uintptr_t *out_end);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dre_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRE_H */

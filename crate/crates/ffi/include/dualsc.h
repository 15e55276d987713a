/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef DUALSC_H
#define DUALSC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  DUALSC_STATUS_OK = 0,
  DUALSC_STATUS_NULL_POINTER = 1,
  DUALSC_STATUS_INVALID_UTF8 = 2,
  DUALSC_STATUS_INVALID_ARGUMENT = 3,
  DUALSC_STATUS_IO = 4,
  DUALSC_STATUS_CHECKPOINT = 5,
  DUALSC_STATUS_VERSION = 6,
  DUALSC_STATUS_INTERNAL = 7,
  DUALSC_STATUS_PANIC = 8,
} DualscStatus;

/**
 * Opaque handle to a loaded checkpoint.
 */
typedef struct DualscModel DualscModel;

/**
 * Corpus-level scores in percent.
 */
typedef struct {
  double bleu4;
  double rouge_l;
  double meteor;
  double acc;
  size_t pairs;
} DualscScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next library call on the same thread.
 */
const char *dualsc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dualsc_version(void);

/**
 * Loads a checkpoint. `beam_width` of 0 selects the default width.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
DualscStatus dualsc_model_load(const char *path, uint32_t beam_width, DualscModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`dualsc_model_load`] and not be used afterwards.
 */
void dualsc_model_free(DualscModel *model);

/**
 * Vocabulary size of a loaded model, or 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t dualsc_model_vocab_size(const DualscModel *model);

/**
 * Generates assembly for an English intent, optionally repairing operand
 * literals against the intent. The model handle may be shared across
 * threads.
 *
 * # Safety
 * `model` must be a live handle, `intent` a NUL-terminated string and
 * `out` a valid pointer. The result must be freed with
 * [`dualsc_string_free`].
 */
DualscStatus dualsc_generate(const DualscModel *model, const char *intent, bool repair, char **out);

/**
 * Summarizes assembly as English.
 *
 * # Safety
 * As for [`dualsc_generate`].
 */
DualscStatus dualsc_summarize(const DualscModel *model, const char *code, char **out);

/**
 * Rule-based literal repair of one generated line. `changed` may be null.
 *
 * # Safety
 * `generated` and `intent` must be NUL-terminated strings, `out` a valid
 * pointer and `changed` null or valid.
 */
DualscStatus dualsc_repair(const char *generated, const char *intent, char **out, bool *changed);

/**
 * Scores `n` candidate/reference pairs, tokenized on whitespace.
 *
 * # Safety
 * `candidates` and `references` must each point to `n` NUL-terminated
 * strings; `out` must be valid.
 */
DualscStatus dualsc_score(const char *const *candidates,
                          const char *const *references,
                          size_t n,
                          DualscScores *out);

/**
 * Releases a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void dualsc_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUALSC_H */

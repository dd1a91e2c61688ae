#ifndef MAGDI_H
#define MAGDI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by fallible ABI calls.
 */
typedef enum MagdiStatus {
  MagdiStatus_Ok = 0,
  MagdiStatus_NullPointer = 1,
  MagdiStatus_InvalidUtf8 = 2,
  MagdiStatus_InvalidArgument = 3,
  MagdiStatus_Io = 4,
  MagdiStatus_Internal = 5,
} MagdiStatus;

/**
 * Loaded corpus of interaction graphs.
 */
typedef struct MagdiCorpus MagdiCorpus;

/**
 * Loaded student model (inference view of a checkpoint).
 */
typedef struct MagdiModel MagdiModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a caller-owned string.
 */
char *magdi_version(void);

/**
 * Description of the most recent error on this thread, or NULL when the
 * last call succeeded. Caller owns the string.
 */
char *magdi_last_error_message(void);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must be a pointer previously returned by a magdi function and not
 * yet freed; NULL is accepted and ignored.
 */
void magdi_string_free(char *s);

/**
 * Load a newline-delimited JSON corpus from `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid location for a
 * handle pointer.
 */
enum MagdiStatus magdi_corpus_open(const char *path, struct MagdiCorpus **out);

/**
 * Number of graphs in a corpus; 0 for NULL.
 *
 * # Safety
 * `corpus` must be NULL or a live handle from `magdi_corpus_open`.
 */
uintptr_t magdi_corpus_len(const struct MagdiCorpus *corpus);

/**
 * Round/agent/structure breakdown of a corpus as a JSON string.
 *
 * # Safety
 * `corpus` must be a live handle from `magdi_corpus_open`.
 */
char *magdi_corpus_stats_json(const struct MagdiCorpus *corpus);

/**
 * New corpus keeping only graphs with at most `max_rounds` post-initial
 * rounds (0..=3), mirroring the denser-graph removal ablation.
 *
 * # Safety
 * `corpus` must be a live handle; `out` a valid location.
 */
enum MagdiStatus magdi_corpus_filter_max_rounds(const struct MagdiCorpus *corpus,
                                                uint32_t max_rounds,
                                                struct MagdiCorpus **out);

/**
 * Release a corpus handle.
 *
 * # Safety
 * `corpus` must come from this library and not be freed twice.
 */
void magdi_corpus_free(struct MagdiCorpus *corpus);

/**
 * Simulate a corpus described by a JSON `SimConfig` and write it to
 * `out_path`.
 *
 * # Safety
 * Both arguments must be NUL-terminated strings.
 */
enum MagdiStatus magdi_generate_corpus(const char *config_json, const char *out_path);

/**
 * Run a training job described by a JSON `TrainConfig`.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string.
 */
enum MagdiStatus magdi_train(const char *config_json);

/**
 * Load the inference view (student only) of a checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid location.
 */
enum MagdiStatus magdi_model_open(const char *path, struct MagdiModel **out);

/**
 * Greedy zero-shot generation. Returns a JSON object with fields `chain`,
 * `answer`, and `n_tokens`, or NULL on failure.
 *
 * # Safety
 * `model` must be a live handle; `question` a NUL-terminated string.
 */
char *magdi_model_generate(const struct MagdiModel *model,
                           const char *question,
                           uintptr_t max_new_tokens);

/**
 * Evaluate a model on a newline-delimited JSON testset file; returns the
 * evaluation report as JSON, or NULL on failure.
 *
 * # Safety
 * `model` must be a live handle; `test_path` a NUL-terminated string.
 */
char *magdi_model_eval_json(const struct MagdiModel *model, const char *test_path);

/**
 * Release a model handle.
 *
 * # Safety
 * `model` must come from this library and not be freed twice.
 */
void magdi_model_free(struct MagdiModel *model);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* MAGDI_H */

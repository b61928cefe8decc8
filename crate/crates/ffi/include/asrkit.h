#ifndef ASRKIT_H
#define ASRKIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  ASK_STATUS_OK = 0,
  ASK_STATUS_NULL_ARGUMENT = 1,
  ASK_STATUS_INVALID_ARGUMENT = 2,
  ASK_STATUS_IO = 3,
  ASK_STATUS_FORMAT = 4,
  /**
   * Target needs more frames than provided.
   */
  ASK_STATUS_INFEASIBLE = 5,
  ASK_STATUS_SEARCH_FAILED = 6,
  /**
   * Output buffer too small; the required length was still written.
   */
  ASK_STATUS_BUFFER_TOO_SMALL = 7,
  ASK_STATUS_PANIC = 8,
} AskStatus;

typedef struct AskGraph AskGraph;

typedef struct AskLm AskLm;

typedef struct AskModel AskModel;

/**
 * Word-level edit counts between whitespace-separated strings.
 */
typedef struct {
  size_t substitutions;
  size_t deletions;
  size_t insertions;
  size_t reference_words;
  /**
   * Errors over reference words; 0 for an empty pair, 1 per insertion for an empty reference.
   */
  double wer;
} AskWer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ask_version(void);

/**
 * Message of the last failure on this thread, or null. Valid until the next failing call.
 */
const char *ask_last_error(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
AskStatus ask_lm_load(const char *path, AskLm **out);

/**
 * # Safety
 * `lm` must come from `ask_lm_load` and not be used afterwards. Null is ignored.
 */
void ask_lm_free(AskLm *lm);

/**
 * # Safety
 * `lm` must be a live handle.
 */
size_t ask_lm_order(const AskLm *lm);

/**
 * Natural-log probability of a whitespace-separated sentence including the
 * end-of-sentence event. Unknown words without `<unk>` give negative infinity.
 *
 * # Safety
 * `lm` must be a live handle, `sentence` NUL-terminated, `out` valid.
 */
AskStatus ask_lm_sentence_log_prob(const AskLm *lm, const char *sentence, double *out);

/**
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
AskStatus ask_model_load(const char *path, AskModel **out);

/**
 * # Safety
 * `model` must come from `ask_model_load` and not be used afterwards. Null is ignored.
 */
void ask_model_free(AskModel *model);

/**
 * # Safety
 * `model` must be a live handle.
 */
size_t ask_model_input_dim(const AskModel *model);

/**
 * # Safety
 * `model` must be a live handle.
 */
size_t ask_model_num_outputs(const AskModel *model);

/**
 * Row-major natural-log posteriors (`frames` x outputs) for row-major
 * single-precision features (`frames` x input dim).
 *
 * # Safety
 * `features` must hold `frames * dims` values and `out` at least `capacity`.
 */
AskStatus ask_model_posteriors(const AskModel *model,
                               const float *features,
                               size_t frames,
                               size_t dims,
                               double *out,
                               size_t capacity,
                               size_t *out_len);

/**
 * CTC negative log-likelihood of `target` (labels in 1..vocab, blank is 0)
 * given row-major logits. When `grad` is non-null it receives the
 * `frames * vocab` gradient with respect to the logits.
 *
 * # Safety
 * `logits` must hold `frames * vocab` values, `target` `target_len` labels,
 * `grad` null or `frames * vocab` slots.
 */
AskStatus ask_ctc_loss(const double *logits,
                       size_t frames,
                       size_t vocab,
                       const uint32_t *target,
                       size_t target_len,
                       double *loss,
                       double *grad);

/**
 * Best-path decode: per-frame argmax, repeats merged, blanks removed.
 *
 * # Safety
 * `logits` must hold `frames * vocab` values and `out` at least `capacity` labels.
 */
AskStatus ask_ctc_greedy(const double *logits,
                         size_t frames,
                         size_t vocab,
                         uint32_t *out,
                         size_t capacity,
                         size_t *out_len);

/**
 * Loads `<dir>/<stem>.fst` with its symbol tables.
 *
 * # Safety
 * `dir` and `stem` must be NUL-terminated and `out` valid.
 */
AskStatus ask_graph_load(const char *dir, const char *stem, AskGraph **out);

/**
 * # Safety
 * `graph` must come from `ask_graph_load` and not be used afterwards. Null is ignored.
 */
void ask_graph_free(AskGraph *graph);

/**
 * Output symbol for `id`, or null when out of range. Owned by the handle.
 *
 * # Safety
 * `graph` must be a live handle.
 */
const char *ask_graph_word(const AskGraph *graph, uint32_t id);

/**
 * Viterbi decode of row-major logits through the graph. Writes output word
 * ids and the total path cost. `beam <= 0` searches exhaustively.
 *
 * # Safety
 * `logits` must hold `frames * vocab` values, `out` at least `capacity` ids,
 * `cost` null or valid.
 */
AskStatus ask_graph_decode(const AskGraph *graph,
                           const double *logits,
                           size_t frames,
                           size_t vocab,
                           double beam,
                           double acoustic_scale,
                           uint32_t *out,
                           size_t capacity,
                           size_t *out_len,
                           double *cost);

/**
 * # Safety
 * `reference` and `hypothesis` must be NUL-terminated and `out` valid.
 */
AskStatus ask_wer(const char *reference, const char *hypothesis, AskWer *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ASRKIT_H */

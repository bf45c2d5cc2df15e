#ifndef HARMORCH_H
#define HARMORCH_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define HM_OK 0

/**
 * A required pointer argument was null.
 */
#define HM_ERR_NULL 1

/**
 * Malformed MIDI, JSON or checkpoint data.
 */
#define HM_ERR_PARSE 2

/**
 * Too many tracks in a bar, or too many tokens for a cell.
 */
#define HM_ERR_CAPACITY 3

/**
 * Input does not fit the model (window too long, duplicate track, ...).
 */
#define HM_ERR_SHAPE 4

/**
 * An argument is out of range or inconsistent with another.
 */
#define HM_ERR_INVALID 5

#define HM_ERR_IO 6

/**
 * The output buffer is too small; the required size was written.
 */
#define HM_ERR_BUFFER_TOO_SMALL 7

#define HM_ERR_PANIC 8

#define HM_ERR_FAILED 9

/**
 * Hierarchical music model.
 */
typedef struct HmModel HmModel;

/**
 * Parsed score.
 */
typedef struct HmScore HmScore;

/**
 * Harmony skeleton: one chord label and tone set per beat.
 */
typedef struct HmSkeleton HmSkeleton;

/**
 * Byte buffer allocated by the library; release with `hm_bytes_free`.
 */
typedef struct HmBytes {
  uint8_t *data;
  size_t len;
} HmBytes;

typedef struct HmDissonance {
  double total;
  double d_hn;
  double d_nn;
} HmDissonance;

typedef struct HmSamplingParams {
  uint64_t seed;
  double top_p;
  double temperature;
  double lambda_hn;
  double lambda_nn;
} HmSamplingParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *hm_last_error(void);

void hm_string_free(char *s);

void hm_bytes_free(struct HmBytes b);

int32_t hm_score_from_midi(const uint8_t *data, size_t len, struct HmScore **out_score);

int32_t hm_score_to_midi(const struct HmScore *score, struct HmBytes *out_midi);

void hm_score_free(struct HmScore *score);

/**
 * Number of bars; 0 for a null handle.
 */
size_t hm_score_bar_count(const struct HmScore *score);

/**
 * Number of notes over all bars and tracks; 0 for a null handle.
 */
size_t hm_score_note_count(const struct HmScore *score);

/**
 * Token ids of one track in one bar. Pass `capacity = 0` for no limit.
 * When `out_cap` is too small, `*out_len` receives the required length and
 * `HM_ERR_BUFFER_TOO_SMALL` is returned.
 */
int32_t hm_score_tokenize(const struct HmScore *score,
                          size_t bar,
                          uint8_t track_id,
                          size_t capacity,
                          uint32_t *out_tokens,
                          size_t out_cap,
                          size_t *out_len);

int32_t hm_skeleton_analyze(const struct HmScore *score, struct HmSkeleton **out_skeleton);

int32_t hm_skeleton_from_json(const char *json, struct HmSkeleton **out_skeleton);

/**
 * Skeleton as JSON; release the string with `hm_string_free`.
 */
int32_t hm_skeleton_to_json(const struct HmSkeleton *skeleton, char **out_json);

size_t hm_skeleton_beat_count(const struct HmSkeleton *skeleton);

void hm_skeleton_free(struct HmSkeleton *skeleton);

/**
 * Dissonance of `score` against `skeleton` with the default interval weights.
 */
int32_t hm_dissonance(const struct HmScore *score,
                      const struct HmSkeleton *skeleton,
                      double lambda_hn,
                      double lambda_nn,
                      struct HmDissonance *out_d);

/**
 * Chord precision and recall of `generated` against `reference`.
 */
int32_t hm_precision_recall(const struct HmSkeleton *reference,
                            const struct HmSkeleton *generated,
                            double *out_precision,
                            double *out_recall);

/**
 * All window metrics as a JSON object; `reference` may be null.
 */
int32_t hm_metrics_json(const struct HmScore *score,
                        const struct HmSkeleton *reference,
                        char **out_json);

/**
 * Shifts the 128 pitch logits (ids 0..128 of `logits`) away from notes that
 * clash with `active`, keeping total pitch probability unchanged.
 * `allowed_pcs` is a 12-bit pitch-class mask, bit 0 = C.
 */
int32_t hm_adjust_pitch_logits(double *logits,
                               size_t len,
                               const uint8_t *active,
                               size_t active_len,
                               uint16_t allowed_pcs,
                               double lambda_hn,
                               double lambda_nn);

/**
 * Freshly initialized model with the small desk configuration.
 */
int32_t hm_model_new_desk(struct HmModel **out_model);

int32_t hm_model_load(const char *path, struct HmModel **out_model);

int32_t hm_model_save(const struct HmModel *model, const char *path);

void hm_model_free(struct HmModel *model);

/**
 * Library defaults for sampling.
 */
struct HmSamplingParams hm_sampling_defaults(void);

/**
 * Generates one window of music over `skeleton`. Equal seeds give equal
 * output.
 */
int32_t hm_generate(const struct HmModel *model,
                    const struct HmSkeleton *skeleton,
                    const struct HmSamplingParams *params,
                    struct HmScore **out_score);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HARMORCH_H */

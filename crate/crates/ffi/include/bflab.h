#ifndef BFLAB_H
#define BFLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Emulated floating-point format selector.
 */
typedef enum BflabFormat {
  Bf16 = 0,
  Fp32 = 1,
  Wide = 2,
} BflabFormat;

/**
 * Rounding mode selector; `seed` is only read for `Stochastic`.
 */
typedef enum BflabRounding {
  NearestEven = 0,
  Stochastic = 1,
} BflabRounding;

/**
 * Result code for every fallible call.
 */
typedef enum BflabStatus {
  Ok = 0,
  NullPointer = 1,
  InvalidArgument = 2,
  InvalidUtf8 = 3,
  NumericalAbort = 4,
  IoError = 5,
  NoResult = 6,
} BflabStatus;

/**
 * Opaque learning-rate schedule handle.
 */
typedef struct BflabSchedule BflabSchedule;

/**
 * Opaque tokenizer handle.
 */
typedef struct BflabTokenizer BflabTokenizer;

/**
 * Best feasible training configuration for one precision and GPU budget.
 */
typedef struct BflabPlan {
  uint32_t micro_batch;
  bool act_ckpt;
  bool shard_full;
  bool sync_grads;
  bool paged_optimizer;
  double relative_time;
  double total_bytes;
} BflabPlan;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Quantizes `value` into the chosen format and writes it to `out`.
 *
 * # Safety
 * `out` must point to a writable `double`.
 */
enum BflabStatus bflab_quantize(double value,
                                enum BflabFormat format,
                                enum BflabRounding rounding,
                                uint64_t seed,
                                double *out);

/**
 * Heuristic vanishing-update threshold `|w| / 2^mantissa_bits`.
 *
 * # Safety
 * `out` must point to a writable `double`.
 */
enum BflabStatus bflab_heuristic_vanish_threshold(double weight,
                                                  enum BflabFormat format,
                                                  double *out);

/**
 * Exact vanishing-update threshold (half an ulp of the stored weight).
 *
 * # Safety
 * `out` must point to a writable `double`.
 */
enum BflabStatus bflab_exact_vanish_threshold(double weight, enum BflabFormat format, double *out);

/**
 * Warmup + cosine decay to a floor. Returns NULL on invalid arguments.
 */
struct BflabSchedule *bflab_schedule_cosine_floor(uint64_t total_steps,
                                                  uint64_t warmup_steps,
                                                  double lr_peak,
                                                  double end_lr);

/**
 * Warmup / cosine / constant / anneal schedule with pinned fractions.
 */
struct BflabSchedule *bflab_schedule_infinite(uint64_t total_steps);

/**
 * Learning rate at `step` (1-based; step 0 reports 0).
 *
 * # Safety
 * `schedule` must be a live handle from a `bflab_schedule_*` constructor;
 * `out` must point to a writable `double`.
 */
enum BflabStatus bflab_schedule_lr_at(const struct BflabSchedule *schedule,
                                      uint64_t step,
                                      double *out);

/**
 * # Safety
 * `schedule` must be NULL or a handle not yet freed.
 */
void bflab_schedule_free(struct BflabSchedule *schedule);

/**
 * Loads a saved tokenizer from a JSON file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must point to a writable
 * handle slot.
 */
enum BflabStatus bflab_tokenizer_load(const char *path, struct BflabTokenizer **out);

/**
 * Total vocabulary size including specials and byte tokens; 0 for NULL.
 *
 * # Safety
 * `tokenizer` must be NULL or a live handle.
 */
size_t bflab_tokenizer_vocab_size(const struct BflabTokenizer *tokenizer);

/**
 * Encodes UTF-8 text into `out_ids`. Writes the needed length to `out_len`;
 * when `out_ids` is NULL only the length is reported, and when `capacity`
 * is too small the call fails after reporting the length.
 *
 * # Safety
 * `text` must be NUL-terminated; `out_ids` must have room for `capacity`
 * ids when non-NULL; `out_len` must be writable.
 */
enum BflabStatus bflab_tokenizer_encode(const struct BflabTokenizer *tokenizer,
                                        const char *text,
                                        uint32_t *out_ids,
                                        size_t capacity,
                                        size_t *out_len);

/**
 * Decodes ids back to text; the result must be freed with
 * `bflab_string_free`.
 *
 * # Safety
 * `ids` must point to `len` readable ids; `out` must be writable.
 */
enum BflabStatus bflab_tokenizer_decode(const struct BflabTokenizer *tokenizer,
                                        const uint32_t *ids,
                                        size_t len,
                                        char **out);

/**
 * Tokens per whitespace word of `text`.
 *
 * # Safety
 * `text` must be NUL-terminated; `out` must point to a writable `double`.
 */
enum BflabStatus bflab_tokenizer_fertility(const struct BflabTokenizer *tokenizer,
                                           const char *text,
                                           double *out);

/**
 * # Safety
 * `tokenizer` must be NULL or a handle not yet freed.
 */
void bflab_tokenizer_free(struct BflabTokenizer *tokenizer);

/**
 * # Safety
 * `s` must be NULL or a string returned by `bflab_tokenizer_decode`.
 */
void bflab_string_free(char *s);

/**
 * Ranks the full configuration space for a 7B-scale model and returns the
 * fastest feasible point; `NoResult` when everything is out of memory.
 *
 * # Safety
 * `out` must point to a writable `BflabPlan`.
 */
enum BflabStatus bflab_plan_best(bool mixed_precision,
                                 size_t gpu_count,
                                 double per_gpu_memory,
                                 double param_count,
                                 struct BflabPlan *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BFLAB_H */

#ifndef NOESIS_H
#define NOESIS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum NoeStatus {
  NOE_STATUS_OK = 0,
  NOE_STATUS_NULL_POINTER = 1,
  NOE_STATUS_INVALID_ARGUMENT = 2,
  NOE_STATUS_DOMAIN_OUT_OF_RANGE = 3,
  NOE_STATUS_IO = 4,
  NOE_STATUS_FORMAT = 5,
  NOE_STATUS_NUMERIC = 6,
  NOE_STATUS_BUFFER_TOO_SMALL = 7,
  NOE_STATUS_PANIC = 8,
} NoeStatus;

/**
 * A loaded checkpoint.
 */
typedef struct NoeCheckpoint NoeCheckpoint;

typedef struct NoeModelInfo {
  size_t vocab_size;
  size_t context_length;
  size_t num_domains;
  size_t n_pt;
  bool has_prompts;
  bool has_experts;
  /**
   * -1 unless the checkpoint was exported for one domain.
   */
  int64_t deployed_domain;
} NoeModelInfo;

typedef struct NoeCalibration {
  double epsilon;
  double delta;
  double q;
  uint64_t steps;
  double sigma;
  double minimizing_order;
} NoeCalibration;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library and checkpoint-format version, NUL-terminated, static storage.
 */
const char *noe_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `cap > 0`). Returns the full message length
 * including the terminator, or 0 when there is no error.
 *
 * # Safety
 * `buf` must be valid for `cap` bytes or null with `cap == 0`.
 */
size_t noe_last_error(char *buf, size_t cap);

/**
 * Loads a checkpoint file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum NoeStatus noe_checkpoint_load(const char *path, struct NoeCheckpoint **out);

/**
 * Releases a handle. Null is a no-op.
 *
 * # Safety
 * `h` must come from [`noe_checkpoint_load`] and not be used afterwards.
 */
void noe_checkpoint_free(struct NoeCheckpoint *h);

/**
 * # Safety
 * `h` must be a live handle; `out` must be writable.
 */
enum NoeStatus noe_checkpoint_info(const struct NoeCheckpoint *h, struct NoeModelInfo *out);

/**
 * Teacher-forced mean next-token log-likelihood of `tokens` routed to
 * `domain`. At least two tokens are required.
 *
 * # Safety
 * `tokens` must point to `n` values; `out` must be writable.
 */
enum NoeStatus noe_log_likelihood(const struct NoeCheckpoint *h,
                                  size_t domain,
                                  const uint32_t *tokens,
                                  size_t n,
                                  double *out);

/**
 * Argmax next-token predictions for positions 2..=n, `n - 1` values
 * written to `preds`, which must hold at least that many.
 *
 * # Safety
 * `tokens` must point to `n` values and `preds` to `cap` writable values.
 */
enum NoeStatus noe_predict(const struct NoeCheckpoint *h,
                           size_t domain,
                           const uint32_t *tokens,
                           size_t n,
                           uint32_t *preds,
                           size_t cap);

/**
 * Writes the single-domain deployable form of `h` to `path`.
 *
 * # Safety
 * `h` must be a live handle; `path` a NUL-terminated string.
 */
enum NoeStatus noe_checkpoint_export(const struct NoeCheckpoint *h,
                                     size_t domain,
                                     const char *path);

/**
 * Smallest noise multiplier meeting (ε, δ) after `steps` steps at
 * sampling rate `batch / dataset_size`.
 *
 * # Safety
 * `out` must be writable.
 */
enum NoeStatus noe_calibrate(double epsilon,
                             double delta,
                             size_t batch,
                             size_t dataset_size,
                             uint64_t steps,
                             struct NoeCalibration *out);

/**
 * ROC AUC and TPR at 1% FPR of a threshold attack where higher scores
 * mean "member". Either output pointer may be null.
 *
 * # Safety
 * Score pointers must point to the stated number of values.
 */
enum NoeStatus noe_attack_metrics(const double *members,
                                  size_t n_members,
                                  const double *nonmembers,
                                  size_t n_nonmembers,
                                  double *out_auc,
                                  double *out_tpr_at_1);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NOESIS_H */

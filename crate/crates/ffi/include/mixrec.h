#ifndef MIXREC_H
#define MIXREC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MixrecStatus {
  MIXREC_STATUS_OK = 0,
  MIXREC_STATUS_NULL_POINTER = 1,
  MIXREC_STATUS_INVALID_ARGUMENT = 2,
  MIXREC_STATUS_CONFIG = 3,
  MIXREC_STATUS_PARSE = 4,
  MIXREC_STATUS_IO = 5,
  MIXREC_STATUS_DATA = 6,
  MIXREC_STATUS_NUMERIC = 7,
  MIXREC_STATUS_PANIC = 8,
} MixrecStatus;

/**
 * A loaded interaction file with its leave-one-out split.
 */
typedef struct MixrecDataset MixrecDataset;

typedef struct MixrecTrainer MixrecTrainer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *mixrec_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *mixrec_version(void);

/**
 * Loads `user item behavior` triples from `path` and holds out each
 * user's last target interaction with `eval_negatives` sampled negatives.
 * The target is the last behavior.
 *
 * # Safety
 * `path` must be a valid C string; `out_dataset` a valid pointer.
 */
enum MixrecStatus mixrec_dataset_load(const char *path,
                                      size_t num_behaviors,
                                      size_t eval_negatives,
                                      uint64_t split_seed,
                                      struct MixrecDataset **out_dataset);

/**
 * Generates planted-intent synthetic data (3 behaviors, default rates)
 * and splits it with 99 negatives, both seeded by `seed`.
 *
 * # Safety
 * `out_dataset` must be a valid pointer.
 */
enum MixrecStatus mixrec_dataset_synth(size_t num_users,
                                       size_t num_items,
                                       uint64_t seed,
                                       struct MixrecDataset **out_dataset);

/**
 * # Safety
 * `dataset` must come from a dataset constructor and not be freed twice.
 */
void mixrec_dataset_free(struct MixrecDataset *dataset);

/**
 * Users, items, behaviors and evaluation users, written to `out_sizes[0..4]`.
 *
 * # Safety
 * `dataset` must be live; `out_sizes` must hold 4 values.
 */
enum MixrecStatus mixrec_dataset_sizes(const struct MixrecDataset *dataset, size_t *out_sizes);

/**
 * Creates a trainer on the dataset's training part. `config` holds
 * `key=value` lines (null for defaults); unknown keys are rejected.
 *
 * # Safety
 * `dataset` must be live; `config` null or a valid C string.
 */
enum MixrecStatus mixrec_trainer_new(const struct MixrecDataset *dataset,
                                     const char *config,
                                     struct MixrecTrainer **out_trainer);

/**
 * Restores a trainer from a checkpoint file written for the same data.
 *
 * # Safety
 * `dataset` must be live; `path` a valid C string.
 */
enum MixrecStatus mixrec_trainer_load(const struct MixrecDataset *dataset,
                                      const char *path,
                                      struct MixrecTrainer **out_trainer);

/**
 * # Safety
 * `trainer` must come from a trainer constructor and not be freed twice.
 */
void mixrec_trainer_free(struct MixrecTrainer *trainer);

/**
 * Runs one epoch; the total loss and its hinge part go to the optional
 * out-pointers. On divergence the last good parameters are kept and
 * `MIXREC_STATUS_NUMERIC` is returned.
 *
 * # Safety
 * `trainer` must be live; the out-pointers null or valid.
 */
enum MixrecStatus mixrec_trainer_train_epoch(struct MixrecTrainer *trainer,
                                             double *out_loss,
                                             double *out_hinge);

/**
 * Completed epochs.
 *
 * # Safety
 * `trainer` must be live or null (null gives 0).
 */
size_t mixrec_trainer_epoch(const struct MixrecTrainer *trainer);

/**
 * HR@`cutoff` and NDCG@`cutoff` on the dataset's held-out items.
 *
 * # Safety
 * Handles must be live; out-pointers valid.
 */
enum MixrecStatus mixrec_trainer_evaluate(struct MixrecTrainer *trainer,
                                          const struct MixrecDataset *dataset,
                                          size_t cutoff,
                                          double *out_hr,
                                          double *out_ndcg);

/**
 * Scores `num_items` items for one user into `out_scores`.
 *
 * # Safety
 * `items` and `out_scores` must each hold `num_items` values.
 */
enum MixrecStatus mixrec_trainer_score(struct MixrecTrainer *trainer,
                                       size_t user,
                                       const size_t *items,
                                       size_t num_items,
                                       double *out_scores);

/**
 * Writes a resumable checkpoint.
 *
 * # Safety
 * `trainer` must be live; `path` a valid C string.
 */
enum MixrecStatus mixrec_trainer_save(const struct MixrecTrainer *trainer, const char *path);

/**
 * Finite-difference check of the full objective on the built-in tiny
 * instance; the largest relative error goes to `out_max_rel`.
 *
 * # Safety
 * `out_max_rel` must be valid.
 */
enum MixrecStatus mixrec_gradcheck_tiny(uint64_t seed, double *out_max_rel);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIXREC_H */

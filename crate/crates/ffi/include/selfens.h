#ifndef SELFENS_H
#define SELFENS_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes; the non-zero values match the command line exit codes.
 */
typedef enum SelfensStatus {
  SELFENS_STATUS_OK = 0,
  /**
   * Null pointer or otherwise unusable argument.
   */
  SELFENS_STATUS_INVALID_ARGUMENT = 1,
  SELFENS_STATUS_CONFIG = 2,
  SELFENS_STATUS_DATA = 3,
  SELFENS_STATUS_DIVERGENCE = 4,
  /**
   * The library panicked; this is a bug.
   */
  SELFENS_STATUS_INTERNAL = 5,
} SelfensStatus;

/**
 * Validated run configuration.
 */
typedef struct SelfensConfig SelfensConfig;

/**
 * Temporal-ensemble accumulator `Z` with per-row update counters.
 */
typedef struct SelfensEnsemble SelfensEnsemble;

/**
 * Per-epoch metrics of a finished run.
 */
typedef struct SelfensHistory SelfensHistory;

/**
 * One epoch of a [`SelfensHistory`]; error rates are NaN when not measured.
 */
typedef struct SelfensEpoch {
  size_t epoch;
  double lr;
  double w;
  double beta1;
  double sup_loss;
  double unsup_loss;
  double train_err;
  double test_err;
  double wall_time;
  uint64_t forward_passes;
} SelfensEpoch;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *selfens_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void selfens_string_free(char *s);

double selfens_rampup(size_t epoch, size_t rampup_epochs);

double selfens_rampdown(size_t epoch, size_t total_epochs, size_t rampdown_epochs);

/**
 * Learning rate at `epoch` under the default schedule scaled to `lr_max`.
 */
double selfens_learning_rate(size_t epoch, size_t total_epochs, double lr_max);

/**
 * `w_max * M/N * rampup(epoch)`; `temporal` non-zero forces 0 on epoch 0.
 *
 * # Safety
 * `out` must point to a writable `double`.
 */
enum SelfensStatus selfens_unsup_weight(size_t epoch,
                                        size_t rampup_epochs,
                                        double w_max,
                                        size_t labeled,
                                        size_t total,
                                        bool temporal,
                                        double *out);

/**
 * Mean squared consistency penalty `sum |z - target|^2 / (classes * batch)`.
 *
 * # Safety
 * `z` and `target` must hold `batch * classes` doubles; `out` must be writable.
 */
enum SelfensStatus selfens_consistency_mse(const double *z,
                                           const double *target,
                                           size_t batch,
                                           size_t classes,
                                           double *out);

/**
 * Mean cross-entropy over labeled rows; a negative label marks an
 * unlabeled row.
 *
 * # Safety
 * `predictions` must hold `batch * classes` doubles, `labels` `batch`
 * integers; `out` must be writable.
 */
enum SelfensStatus selfens_cross_entropy(const double *predictions,
                                         const int32_t *labels,
                                         size_t batch,
                                         size_t classes,
                                         double *out);

/**
 * # Safety
 * `out` must point to writable storage for a handle pointer.
 */
enum SelfensStatus selfens_ensemble_new(size_t rows,
                                        size_t classes,
                                        double alpha,
                                        struct SelfensEnsemble **out);

/**
 * # Safety
 * `e` must be null or a handle from this library, not used afterwards.
 */
void selfens_ensemble_free(struct SelfensEnsemble *e);

/**
 * # Safety
 * `e` must be a live handle.
 */
size_t selfens_ensemble_rows(const struct SelfensEnsemble *e);

/**
 * # Safety
 * `e` must be a live handle.
 */
size_t selfens_ensemble_classes(const struct SelfensEnsemble *e);

/**
 * Update count of one row, or 0 for an invalid handle or row.
 *
 * # Safety
 * `e` must be a live handle.
 */
uint64_t selfens_ensemble_counter(const struct SelfensEnsemble *e, size_t row);

/**
 * Applies `Z <- alpha Z + (1 - alpha) z` to `count` rows.
 *
 * # Safety
 * `rows` must hold `count` indices and `z` `count * classes` doubles.
 */
enum SelfensStatus selfens_ensemble_update(struct SelfensEnsemble *e,
                                           const size_t *rows,
                                           size_t count,
                                           const double *z);

/**
 * Writes the bias-corrected target of `row` into `out` (`classes` doubles).
 * Fails with `Config` for a row that was never updated.
 *
 * # Safety
 * `out` must have room for `classes` doubles.
 */
enum SelfensStatus selfens_ensemble_target(const struct SelfensEnsemble *e,
                                           size_t row,
                                           double *out);

/**
 * # Safety
 * `e` must be a live handle and `path` a nul-terminated UTF-8 string.
 */
enum SelfensStatus selfens_ensemble_save(const struct SelfensEnsemble *e, const char *path);

/**
 * # Safety
 * `path` must be a nul-terminated UTF-8 string; `out` must be writable.
 */
enum SelfensStatus selfens_ensemble_load(const char *path, struct SelfensEnsemble **out);

/**
 * Parses a TOML configuration; an empty string gives all defaults.
 *
 * # Safety
 * `toml` must be a nul-terminated UTF-8 string; `out` must be writable.
 */
enum SelfensStatus selfens_config_parse(const char *toml, struct SelfensConfig **out);

/**
 * TOML text of the configuration, released with `selfens_string_free`;
 * null on failure.
 *
 * # Safety
 * `c` must be a live handle.
 */
char *selfens_config_to_toml(const struct SelfensConfig *c);

/**
 * # Safety
 * `c` must be null or a handle from this library, not used afterwards.
 */
void selfens_config_free(struct SelfensConfig *c);

/**
 * # Safety
 * `h` must be a live handle.
 */
size_t selfens_history_len(const struct SelfensHistory *h);

/**
 * # Safety
 * `h` must be a live handle and `out` writable.
 */
enum SelfensStatus selfens_history_get(const struct SelfensHistory *h,
                                       size_t index,
                                       struct SelfensEpoch *out);

/**
 * # Safety
 * `h` must be a live handle and `path` a nul-terminated UTF-8 string.
 */
enum SelfensStatus selfens_history_write_jsonl(const struct SelfensHistory *h, const char *path);

/**
 * # Safety
 * `h` must be null or a handle from this library, not used afterwards.
 */
void selfens_history_free(struct SelfensHistory *h);

/**
 * Trains with the configuration's own seed. `history` receives the run
 * history; `ensemble`, when non-null, receives the final ensemble of a
 * temporal run (null for other algorithms).
 *
 * # Safety
 * `c` must be a live handle; `history` must be writable; `ensemble` must be
 * null or writable.
 */
enum SelfensStatus selfens_train(const struct SelfensConfig *c,
                                 struct SelfensHistory **history,
                                 struct SelfensEnsemble **ensemble);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SELFENS_H */

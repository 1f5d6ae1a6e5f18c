#ifndef AIMDT_H
#define AIMDT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AimdtStatus {
  AIMDT_STATUS_OK = 0,
  AIMDT_STATUS_NULL_POINTER = 1,
  AIMDT_STATUS_INVALID_UTF8 = 2,
  AIMDT_STATUS_CONFIG = 3,
  AIMDT_STATUS_INVALID_INPUT = 4,
  AIMDT_STATUS_IO = 5,
  AIMDT_STATUS_DATASET = 6,
  AIMDT_STATUS_CHECKPOINT = 7,
  AIMDT_STATUS_ABORTED = 8,
  AIMDT_STATUS_NON_FINITE = 9,
  AIMDT_STATUS_SCHEDULE = 10,
  AIMDT_STATUS_PATH = 11,
  AIMDT_STATUS_BUFFER_TOO_SMALL = 12,
  AIMDT_STATUS_PANIC = 13,
} AimdtStatus;

/**
 * Run configuration handle.
 */
typedef struct AimdtConfig AimdtConfig;

/**
 * Episode dataset handle.
 */
typedef struct AimdtDataset AimdtDataset;

/**
 * Trained model handle.
 */
typedef struct AimdtModel AimdtModel;

/**
 * Summary of an evaluation run over every episode.
 */
typedef struct AimdtMetrics {
  size_t n_episodes;
  double collision_rate;
  double avg_return;
  double std_return;
  double avg_length_s;
  double std_length_s;
  /**
   * Largest return-to-go bookkeeping error over the rollouts.
   */
  double max_rtg_error;
} AimdtMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call into the library on this thread.
 */
const char *aimdt_last_error(void);

/**
 * Library version as a static string.
 */
const char *aimdt_version(void);

/**
 * Built-in default configuration.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum AimdtStatus aimdt_config_default(struct AimdtConfig **out);

/**
 * Configuration from a TOML document layered over the defaults.
 *
 * # Safety
 * `toml` must be a nul-terminated string; `out` must be valid for writes.
 */
enum AimdtStatus aimdt_config_from_toml(const char *toml, struct AimdtConfig **out);

/**
 * Apply one `section.key=value` override in place. On failure the
 * configuration is unchanged.
 *
 * # Safety
 * `cfg` must be a live handle; `assignment` a nul-terminated string.
 */
enum AimdtStatus aimdt_config_set(struct AimdtConfig *cfg, const char *assignment);

/**
 * Hex digest identifying the configuration, written nul-terminated into
 * `buf`. `buf_len` must be at least 33.
 *
 * # Safety
 * `cfg` must be a live handle; `buf` valid for `buf_len` bytes.
 */
enum AimdtStatus aimdt_config_hash(const struct AimdtConfig *cfg, char *buf, size_t buf_len);

/**
 * # Safety
 * `cfg` must be null or a handle not yet freed.
 */
void aimdt_config_free(struct AimdtConfig *cfg);

/**
 * Collision-free coordinator episodes, `per_combination` for every ordered
 * assignment of approach arms.
 *
 * # Safety
 * `cfg` must be a live handle; `out` valid for writes.
 */
enum AimdtStatus aimdt_dataset_generate(const struct AimdtConfig *cfg,
                                        size_t per_combination,
                                        uint64_t seed,
                                        struct AimdtDataset **out);

/**
 * # Safety
 * `path` must be a nul-terminated string; `out` valid for writes.
 */
enum AimdtStatus aimdt_dataset_read(const char *path, struct AimdtDataset **out);

/**
 * # Safety
 * `ds` must be a live handle; `path` a nul-terminated string.
 */
enum AimdtStatus aimdt_dataset_write(const struct AimdtDataset *ds, const char *path);

/**
 * Number of episodes, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t aimdt_dataset_len(const struct AimdtDataset *ds);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void aimdt_dataset_free(struct AimdtDataset *ds);

/**
 * Train a model on `ds` with the model and training sections of `cfg`.
 *
 * # Safety
 * `cfg` and `ds` must be live handles; `out` valid for writes.
 */
enum AimdtStatus aimdt_model_train(const struct AimdtConfig *cfg,
                                   const struct AimdtDataset *ds,
                                   struct AimdtModel **out);

/**
 * # Safety
 * `path` must be a nul-terminated string; `out` valid for writes.
 */
enum AimdtStatus aimdt_model_load(const char *path, struct AimdtModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` a nul-terminated string.
 */
enum AimdtStatus aimdt_model_save(const struct AimdtModel *model, const char *path);

/**
 * Mean training return, the default initial return-to-go; NaN for a null
 * handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
double aimdt_model_return_mean(const struct AimdtModel *model);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void aimdt_model_free(struct AimdtModel *model);

/**
 * Roll the model out on the configured number of held-out scenarios.
 *
 * # Safety
 * `model` and `cfg` must be live handles; `out` valid for writes.
 */
enum AimdtStatus aimdt_eval_plain(const struct AimdtModel *model,
                                  const struct AimdtConfig *cfg,
                                  uint64_t seed,
                                  struct AimdtMetrics *out);

/**
 * Shortest possible episode length, in seconds, for the random scenario of
 * `n_vehicles` drawn from `seed`.
 *
 * # Safety
 * `cfg` must be a live handle; `out` valid for writes.
 */
enum AimdtStatus aimdt_optimal_makespan(const struct AimdtConfig *cfg,
                                        size_t n_vehicles,
                                        uint64_t seed,
                                        double *out);

/**
 * Returns-to-go of `len` rewards, written into `out` (also `len` long).
 *
 * # Safety
 * `rewards` and `out` must be valid for `len` elements; they may alias.
 */
enum AimdtStatus aimdt_compute_rtgs(const double *rewards, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AIMDT_H */

#ifndef RAMP_H
#define RAMP_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result of every call.
 */
typedef enum {
  RAMP_STATUS_OK = 0,
  RAMP_STATUS_NULL_ARGUMENT = 1,
  RAMP_STATUS_INVALID_UTF8 = 2,
  RAMP_STATUS_IO = 3,
  RAMP_STATUS_PARSE = 4,
  RAMP_STATUS_INVALID = 5,
  RAMP_STATUS_UNKNOWN_MODEL = 6,
  RAMP_STATUS_MISSING_ARTIFACT = 7,
  RAMP_STATUS_HISTOGRAM_LENGTH = 8,
  RAMP_STATUS_EMPTY_TABLE = 9,
  RAMP_STATUS_INTERNAL = 10,
} RampStatus;

/**
 * Opaque per-model dispatch state: coefficient table plus step cache.
 * Not safe for concurrent use; open one per serving stream.
 */
typedef struct RampTable RampTable;

/**
 * A dispatch decision.
 */
typedef struct {
  uint32_t config_id;
  uint32_t bm;
  uint32_t bn;
  uint32_t wn;
  uint32_t stg;
  uint32_t ttn;
  bool group_m;
  uint32_t split_k;
  double predicted_us;
  uint64_t grid;
} RampSelection;

/**
 * Region classification of a geometry.
 */
typedef struct {
  double rho;
  uint64_t lambda;
  double kappa;
  /**
   * 0 for the pipeline-dominated regime, 1 for compute-scaling.
   */
  bool regime_b;
  bool group_m_required;
  bool split_k_eligible;
} RampRegion;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Opens the dispatch table for `model` from a CLI workspace directory.
 * `catalog` may be null to use the bundled model catalog. On success
 * `*out` owns a table that must be released with `ramp_table_free`.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
RampStatus ramp_table_open(const char *workspace,
                           const char *model,
                           const char *catalog,
                           RampTable **out);

/**
 * Releases a table. Null is ignored.
 *
 * # Safety
 * `table` must come from `ramp_table_open` and not be used afterwards.
 */
void ramp_table_free(RampTable *table);

/**
 * Number of experts the table expects in each histogram; 0 for null.
 *
 * # Safety
 * `table` must be null or a live handle.
 */
uint32_t ramp_table_experts(const RampTable *table);

/**
 * Number of configurations in the table's pool; 0 for null.
 *
 * # Safety
 * `table` must be null or a live handle.
 */
uint64_t ramp_table_configs(const RampTable *table);

/**
 * Cost-model evaluations performed so far; repeated selections at the same
 * token count within a step do not add to it.
 *
 * # Safety
 * `table` must be null or a live handle.
 */
uint64_t ramp_table_evaluations(const RampTable *table);

/**
 * Selects a configuration for one step's per-expert assignment counts.
 * Selections are cached by total count until `step_id` changes.
 *
 * # Safety
 * `table` must be a live handle, `counts` must point to `len` values and
 * `out` must be writable.
 */
RampStatus ramp_select(RampTable *table,
                       const uint64_t *counts,
                       size_t len,
                       uint64_t step_id,
                       RampSelection *out);

/**
 * Region variables and regime for an `n x k` expert weight matrix.
 *
 * # Safety
 * `out` must be writable.
 */
RampStatus ramp_classify(uint64_t n, uint64_t k, RampRegion *out);

/**
 * Copies the calling thread's last error message into `buf` (always
 * NUL-terminated when `cap > 0`) and returns the full message length, or 0
 * when there is no error.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t ramp_last_error(char *buf, size_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RAMP_H */

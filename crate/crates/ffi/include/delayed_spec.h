#ifndef DELAYED_SPEC_H
#define DELAYED_SPEC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum DsStatus {
  DS_STATUS_OK = 0,
  DS_STATUS_NULL_POINTER = 1,
  DS_STATUS_INVALID_UTF8 = 2,
  DS_STATUS_INVALID_INPUT = 3,
  DS_STATUS_NUMERICAL = 4,
  DS_STATUS_IO = 5,
  DS_STATUS_PANIC = 6,
} DsStatus;

/**
 * Opaque reward distribution.
 */
typedef struct DsDistribution DsDistribution;

/**
 * Opaque tabular MDP.
 */
typedef struct DsMdp DsMdp;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *ds_last_error_message(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a pointer returned by this library and not yet freed.
 */
void ds_string_free(char *s);

/**
 * Parses an MDP from JSON into a new handle.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out_mdp` must be writable.
 */
enum DsStatus ds_mdp_from_json(const char *json, struct DsMdp **out_mdp);

/**
 * Releases an MDP handle. Null is ignored.
 *
 * # Safety
 * `mdp` must be null or a live handle from [`ds_mdp_from_json`].
 */
void ds_mdp_free(struct DsMdp *mdp);

/**
 * # Safety
 * `mdp` must be a live handle; `out_n` must be writable.
 */
enum DsStatus ds_mdp_n_states(const struct DsMdp *mdp, size_t *out_n);

/**
 * # Safety
 * `mdp` must be a live handle; `out_n` must be writable.
 */
enum DsStatus ds_mdp_n_actions(const struct DsMdp *mdp, size_t *out_n);

/**
 * Optimal policy and values for a state-based reward.
 *
 * `reward`, `out_actions` and `out_values` each hold `n_states` entries.
 *
 * # Safety
 * Pointers must be valid for `n_states` elements.
 */
enum DsStatus ds_policy_iteration(const struct DsMdp *mdp,
                                  const double *reward,
                                  size_t n_states,
                                  double gamma,
                                  uint32_t *out_actions,
                                  double *out_values);

/**
 * `(1 - γ)·V*(state)`; `γ = 1` gives the average-reward limit.
 *
 * # Safety
 * `reward` must hold `n_states` entries; `out_value` must be writable.
 */
enum DsStatus ds_normalized_optimal_value(const struct DsMdp *mdp,
                                          const double *reward,
                                          size_t n_states,
                                          size_t state,
                                          double gamma,
                                          double *out_value);

/**
 * Parses a reward distribution from JSON into a new handle.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out_dist` must be writable.
 */
enum DsStatus ds_distribution_from_json(const char *json, struct DsDistribution **out_dist);

/**
 * Releases a distribution handle. Null is ignored.
 *
 * # Safety
 * `dist` must be null or a live handle from [`ds_distribution_from_json`].
 */
void ds_distribution_free(struct DsDistribution *dist);

/**
 * POWER at `state` with its standard error (zero for finite supports).
 *
 * # Safety
 * Handles must be live; out-pointers must be writable.
 */
enum DsStatus ds_power(const struct DsMdp *mdp,
                       const struct DsDistribution *dist,
                       size_t state,
                       double gamma,
                       size_t mc_samples,
                       uint64_t seed,
                       double *out_power,
                       double *out_std_error);

/**
 * Delayed-specification score of a deterministic prefix policy.
 *
 * # Safety
 * `actions` must hold `n_states` entries; handles must be live.
 */
enum DsStatus ds_delayed_spec_score(const struct DsMdp *mdp,
                                    const uint32_t *actions,
                                    size_t n_states,
                                    const struct DsDistribution *dist,
                                    double gamma,
                                    size_t correct_at,
                                    double *out_score);

/**
 * Runs a gridworld experiment from a JSON config and returns the summary as JSON.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out_json` must be writable.
 * The returned string is released with [`ds_string_free`].
 */
enum DsStatus ds_experiment_run(const char *config_json, char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DELAYED_SPEC_H */

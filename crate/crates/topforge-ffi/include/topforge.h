#ifndef TOPFORGE_H
#define TOPFORGE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum {
  TOPFORGE_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  TOPFORGE_STATUS_NULL_ARGUMENT = 1,
  /**
   * Arguments were structurally valid but semantically rejected.
   */
  TOPFORGE_STATUS_INVALID_ARGUMENT = 2,
  TOPFORGE_STATUS_IO = 3,
  /**
   * The instance admits no feasible tour under its budget.
   */
  TOPFORGE_STATUS_INFEASIBLE = 4,
  TOPFORGE_STATUS_INTERNAL = 5,
} TopforgeStatus;

/**
 * An instance plus the fleet size it was generated for.
 */
typedef struct TopforgeInstance TopforgeInstance;

/**
 * A policy network: parameters, running statistics, and configuration.
 */
typedef struct TopforgePolicy TopforgePolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *topforge_last_error(void);

/**
 * Library version as a static string.
 */
const char *topforge_version(void);

/**
 * Frees a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must have been returned by a `topforge_*` call and not freed since.
 */
void topforge_string_free(char *s);

/**
 * Generates instance number `stream` of the family described by the
 * arguments. `prize_scheme`: 0 constant, 1 uniform, 2 distance-based.
 *
 * # Safety
 * `out` must be valid for writes.
 */
TopforgeStatus topforge_instance_generate(size_t n,
                                          size_t m,
                                          double t_max,
                                          uint32_t prize_scheme,
                                          bool single_depot,
                                          uint64_t seed,
                                          uint64_t stream,
                                          TopforgeInstance **out);

/**
 * Parses one dataset line (JSON) into an instance handle.
 *
 * # Safety
 * `line` must be a valid C string; `out` must be valid for writes.
 */
TopforgeStatus topforge_instance_from_json(const char *line, TopforgeInstance **out);

/**
 * Serializes the instance to its dataset-line JSON form.
 *
 * # Safety
 * Pointers must be valid; free the string with [`topforge_string_free`].
 */
TopforgeStatus topforge_instance_to_json(const TopforgeInstance *instance, char **out);

/**
 * Region count, or 0 for a null handle.
 */
size_t topforge_instance_n(const TopforgeInstance *instance);

/**
 * Fleet size, or 0 for a null handle.
 */
size_t topforge_instance_m(const TopforgeInstance *instance);

/**
 * Time budget, or NaN for a null handle.
 */
double topforge_instance_t_max(const TopforgeInstance *instance);

/**
 * # Safety
 * `instance` must be null or a handle returned by this library, unfreed.
 */
void topforge_instance_free(TopforgeInstance *instance);

/**
 * Builds a freshly initialized policy. `encoder_norm`: 0 batch, 1 layer.
 *
 * # Safety
 * `out` must be valid for writes.
 */
TopforgeStatus topforge_policy_init(size_t hidden_dim,
                                    size_t num_blocks,
                                    size_t num_heads,
                                    double logit_clip,
                                    uint32_t encoder_norm,
                                    uint64_t seed,
                                    TopforgePolicy **out);

/**
 * Loads a policy from a checkpoint archive.
 *
 * # Safety
 * `path` must be a valid C string; `out` must be valid for writes.
 */
TopforgeStatus topforge_policy_load(const char *path, TopforgePolicy **out);

/**
 * Writes the policy to a checkpoint archive.
 *
 * # Safety
 * Pointers must be valid.
 */
TopforgeStatus topforge_policy_save(const TopforgePolicy *policy, const char *path);

/**
 * # Safety
 * `policy` must be null or a handle returned by this library, unfreed.
 */
void topforge_policy_free(TopforgePolicy *policy);

/**
 * Rolls the policy out on the instance. Greedy decoding ignores `seed`;
 * sampled decoding is reproducible in it. On success `out_json` (if
 * non-null) receives a JSON object with the routes, per-agent durations
 * and reward, and `out_reward` (if non-null) the collected prize.
 *
 * # Safety
 * `policy` and `instance` must be valid handles; out pointers must be
 * null or valid for writes. Free the string with [`topforge_string_free`].
 */
TopforgeStatus topforge_solve_policy(const TopforgePolicy *policy,
                                     const TopforgeInstance *instance,
                                     bool greedy,
                                     uint64_t seed,
                                     char **out_json,
                                     double *out_reward);

/**
 * Solves with the prize-per-detour greedy heuristic.
 *
 * # Safety
 * Same contract as [`topforge_solve_policy`].
 */
TopforgeStatus topforge_solve_greedy(const TopforgeInstance *instance,
                                     char **out_json,
                                     double *out_reward);

/**
 * Solves exactly by dynamic programming over region subsets. Refuses
 * instances with more than a handful of regions; see the core crate's
 * oracle guard.
 *
 * # Safety
 * Same contract as [`topforge_solve_policy`].
 */
TopforgeStatus topforge_solve_exact(const TopforgeInstance *instance,
                                    char **out_json,
                                    double *out_reward);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* TOPFORGE_H */

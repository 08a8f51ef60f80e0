#ifndef VAOI_H
#define VAOI_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by all functions.
 */
typedef enum VaoiStatus {
  VAOI_STATUS_OK = 0,
  VAOI_STATUS_NULL_POINTER = 1,
  VAOI_STATUS_INVALID_ARGUMENT = 2,
  VAOI_STATUS_INVALID_CONFIG = 3,
  VAOI_STATUS_INVALID_STATE = 4,
  VAOI_STATUS_NUMERICAL = 5,
  VAOI_STATUS_MISMATCH = 6,
  VAOI_STATUS_IO = 7,
  VAOI_STATUS_PARSE = 8,
  VAOI_STATUS_PANIC = 9,
} VaoiStatus;

/**
 * Simulator handle.
 */
typedef struct VaoiEnv VaoiEnv;

/**
 * Trained policy handle.
 */
typedef struct VaoiPolicy VaoiPolicy;

/**
 * Outcome of one slot.
 */
typedef struct VaoiStep {
  /**
   * `-sum(vaoi) - lambda * cost`.
   */
  double reward;
  /**
   * 1 when the slot transmitted.
   */
  uint8_t cost;
  /**
   * 1 when a transmission was delivered.
   */
  uint8_t delivered;
  /**
   * Slots elapsed after this step.
   */
  uint64_t slot;
} VaoiStep;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or null. Valid until the next
 * failing call on the same thread.
 */
const char *vaoi_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *vaoi_version(void);

/**
 * Create a simulator with `n_users` users. `arrival_rates` holds one rate
 * per user; VAoI is truncated at `d_max`.
 *
 * # Safety
 * `arrival_rates` must point to `n_users` doubles and `out` to writable storage.
 */
enum VaoiStatus vaoi_env_new(const double *arrival_rates,
                             size_t n_users,
                             double success_prob,
                             uint32_t d_max,
                             double eta_max,
                             uint64_t seed,
                             struct VaoiEnv **out);

/**
 * # Safety
 * `env` must come from [`vaoi_env_new`] and not be used afterwards.
 */
void vaoi_env_free(struct VaoiEnv *env);

/**
 * # Safety
 * `env` must be a live handle.
 */
enum VaoiStatus vaoi_env_reset(struct VaoiEnv *env, uint64_t seed);

/**
 * Number of users, or 0 for a null handle.
 *
 * # Safety
 * `env` must be null or a live handle.
 */
size_t vaoi_env_n_users(const struct VaoiEnv *env);

/**
 * Copy the current VAoI vector into `out` (`len` must equal the user count).
 *
 * # Safety
 * `env` must be a live handle and `out` must hold `len` elements.
 */
enum VaoiStatus vaoi_env_vaoi(const struct VaoiEnv *env, uint32_t *out, size_t len);

/**
 * Advance one slot. `action` 0 idles, `n` transmits user `n`.
 *
 * # Safety
 * `env` must be a live handle and `out` null or writable.
 */
enum VaoiStatus vaoi_env_step(struct VaoiEnv *env,
                              size_t action,
                              double lambda,
                              struct VaoiStep *out);

/**
 * Load the actor from a checkpoint file. `seed` drives the sampling noise.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum VaoiStatus vaoi_policy_load(const char *path, uint64_t seed, struct VaoiPolicy **out);

/**
 * # Safety
 * `policy` must come from [`vaoi_policy_load`] and not be used afterwards.
 */
void vaoi_policy_free(struct VaoiPolicy *policy);

/**
 * Number of users the policy was trained for, or 0 for a null handle.
 *
 * # Safety
 * `policy` must be null or a live handle.
 */
size_t vaoi_policy_n_users(const struct VaoiPolicy *policy);

/**
 * Write the `n_users + 1` action probabilities for state `vaoi` into `probs`.
 *
 * # Safety
 * `policy` must be live, `vaoi` must hold `len` values and `probs` `probs_len`.
 */
enum VaoiStatus vaoi_policy_probs(struct VaoiPolicy *policy,
                                  const uint32_t *vaoi,
                                  size_t len,
                                  double *probs,
                                  size_t probs_len);

/**
 * Pick an action for state `vaoi`: the most likely one when `greedy` is
 * nonzero, otherwise a sample.
 *
 * # Safety
 * `policy` must be live, `vaoi` must hold `len` values and `action` be writable.
 */
enum VaoiStatus vaoi_policy_action(struct VaoiPolicy *policy,
                                   const uint32_t *vaoi,
                                   size_t len,
                                   int32_t greedy,
                                   size_t *action);

/**
 * Empirical CVaR at level `alpha` of `len` samples.
 *
 * # Safety
 * `samples` must hold `len` doubles and `out` be writable.
 */
enum VaoiStatus vaoi_empirical_cvar(const double *samples, size_t len, double alpha, double *out);

/**
 * Fraction of nonzero entries in `actions`.
 *
 * # Safety
 * `actions` must hold `len` values and `out` be writable.
 */
enum VaoiStatus vaoi_average_cost(const size_t *actions, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VAOI_H */

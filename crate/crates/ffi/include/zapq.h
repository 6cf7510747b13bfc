#ifndef ZAPQ_H
#define ZAPQ_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ZapqStatus {
  ZAPQ_STATUS_OK = 0,
  ZAPQ_STATUS_NULL_POINTER = 1,
  ZAPQ_STATUS_INVALID_ARGUMENT = 2,
  ZAPQ_STATUS_PARSE = 3,
  ZAPQ_STATUS_NUMERICAL = 4,
  ZAPQ_STATUS_BUFFER_TOO_SMALL = 5,
  ZAPQ_STATUS_PANIC = 6,
} ZapqStatus;

/**
 * Opaque finite MDP.
 */
typedef struct ZapqMdp ZapqMdp;

/**
 * Opaque tabular Zap Q-learning run under the uniform randomized policy.
 */
typedef struct ZapqTrainer ZapqTrainer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on this thread.
 */
const char *zapq_last_error(void);

/**
 * Parses an MDP from its TOML text.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ZapqStatus zapq_mdp_from_toml(const char *toml, struct ZapqMdp **out);

/**
 * # Safety
 * `mdp` must be null or a handle from [`zapq_mdp_from_toml`] not yet freed.
 */
void zapq_mdp_free(struct ZapqMdp *mdp);

/**
 * Writes the state and action counts.
 *
 * # Safety
 * All pointers must be valid.
 */
enum ZapqStatus zapq_mdp_shape(const struct ZapqMdp *mdp, size_t *num_states, size_t *num_actions);

/**
 * Optimal Q-function by value iteration to sup-norm tolerance `tol`,
 * written as a row-major `num_states × num_actions` array.
 *
 * # Safety
 * `mdp` must be a live handle and `out` must hold `capacity` doubles.
 */
enum ZapqStatus zapq_mdp_q_star(const struct ZapqMdp *mdp,
                                double tol,
                                double *out,
                                size_t capacity);

/**
 * Solves `A Σ + Σ Aᵀ + S = 0` for Hurwitz `A` and symmetric PSD `S`.
 *
 * # Safety
 * `a`, `s` and `out` must each hold `dim * dim` doubles.
 */
enum ZapqStatus zapq_solve_lyapunov(const double *a, const double *s, size_t dim, double *out);

/**
 * Regularized matrix gain `−(εI + ÂᵀÂ)^{-1} Âᵀ`.
 *
 * # Safety
 * `a_hat` and `out` must each hold `dim * dim` doubles.
 */
enum ZapqStatus zapq_zap_gain(const double *a_hat, size_t dim, double eps, double *out);

/**
 * Real parts of the eigenvalues of `a`, sorted in descending order.
 *
 * # Safety
 * `a` must hold `dim * dim` doubles and `out` must hold `dim`.
 */
enum ZapqStatus zapq_eig_real_parts(const double *a, size_t dim, double *out);

/**
 * Starts tabular Zap Q-learning on a copy of `mdp` with the default step
 * sizes `α_n = 1/(n+100)`, `β_n = (n+100)^{-0.85}` and `ε = 1e-6`. The
 * initial parameter and the sample path are determined by `seed`.
 *
 * # Safety
 * `mdp` must be a live handle and `out` a valid pointer.
 */
enum ZapqStatus zapq_trainer_new(const struct ZapqMdp *mdp,
                                 uint64_t seed,
                                 struct ZapqTrainer **out);

/**
 * Advances the trainer by `num_steps` samples.
 *
 * # Safety
 * `trainer` must be a live handle.
 */
enum ZapqStatus zapq_trainer_step(struct ZapqTrainer *trainer, uint64_t num_steps);

/**
 * Number of parameters (`num_states · num_actions`).
 *
 * # Safety
 * `trainer` must be null or a live handle.
 */
size_t zapq_trainer_dim(const struct ZapqTrainer *trainer);

/**
 * Steps taken so far.
 *
 * # Safety
 * `trainer` must be null or a live handle.
 */
uint64_t zapq_trainer_steps(const struct ZapqTrainer *trainer);

/**
 * Copies the current parameter; entry `x · num_actions + u` is `Q(x, u)`.
 *
 * # Safety
 * `trainer` must be a live handle and `out` must hold `capacity` doubles.
 */
enum ZapqStatus zapq_trainer_theta(const struct ZapqTrainer *trainer, double *out, size_t capacity);

/**
 * # Safety
 * `trainer` must be null or a handle from [`zapq_trainer_new`] not yet freed.
 */
void zapq_trainer_free(struct ZapqTrainer *trainer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ZAPQ_H */

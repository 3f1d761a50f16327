#ifndef SPIKERATE_H
#define SPIKERATE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every function.
 */
typedef enum SpkStatus {
  SPK_STATUS_OK = 0,
  SPK_STATUS_NULL_POINTER = 1,
  SPK_STATUS_INVALID_ARGUMENT = 2,
  SPK_STATUS_BOUNDS = 3,
  SPK_STATUS_ORDERING = 4,
  SPK_STATUS_GAP = 5,
  SPK_STATUS_INSUFFICIENT_HISTORY = 6,
  SPK_STATUS_NUMERIC = 7,
  SPK_STATUS_PARSE = 8,
  SPK_STATUS_UNDEFINED = 9,
  SPK_STATUS_IO = 10,
  SPK_STATUS_PANIC = 11,
} SpkStatus;

/**
 * Opaque network handle.
 */
typedef struct SpkNetwork SpkNetwork;

/**
 * Opaque trainer handle.
 */
typedef struct SpkTrainer SpkTrainer;

/**
 * Evaluation summary; undefined entries are NaN.
 */
typedef struct SpkEvalReport {
  size_t timesteps;
  size_t recordings;
  double timestep_accuracy;
  double recording_accuracy;
  double inference_sse;
  double prediction_sse;
} SpkEvalReport;

typedef struct SpkBernoulliResult {
  double final_q;
  double oracle_rate;
  double tail_mean;
  double tail_std;
} SpkBernoulliResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, or returns NULL when the
 * previous call succeeded. Release the string with [`spk_string_free`].
 */
char *spk_last_error_message(void);

/**
 * Frees a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void spk_string_free(char *s);

/**
 * Static, NUL-terminated version string.
 */
const char *spk_version(void);

/**
 * Creates a network with uniform `[0, init_scale)` layer weights and zero heads.
 *
 * # Safety
 * `hidden` must point to `hidden_len` sizes; `out` must be writable.
 */
enum SpkStatus spk_network_new(size_t input,
                               const size_t *hidden,
                               size_t hidden_len,
                               size_t classes,
                               size_t k,
                               uint64_t tau_us,
                               double init_scale,
                               uint64_t seed,
                               struct SpkNetwork **out);

/**
 * Loads the network stored in a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SpkStatus spk_network_load(const char *path, struct SpkNetwork **out);

/**
 * Writes the network as a checkpoint at the start of a schedule.
 *
 * # Safety
 * `net` must be a live handle and `path` a NUL-terminated string.
 */
enum SpkStatus spk_network_save(const struct SpkNetwork *net, const char *path);

/**
 * # Safety
 * `net` must be NULL or a handle not yet freed.
 */
void spk_network_free(struct SpkNetwork *net);

/**
 * Silences every history window and rewinds time to before step 0.
 *
 * # Safety
 * `net` must be a live handle.
 */
enum SpkStatus spk_network_reset(struct SpkNetwork *net);

/**
 * Number of hidden layers.
 *
 * # Safety
 * `net` must be a live handle.
 */
size_t spk_network_hidden_count(const struct SpkNetwork *net);

/**
 * Advances the network one timestep on `input` (length = input layer size).
 * Hidden activity is scaled by `retention` (1 for none).
 *
 * # Safety
 * `net` must be a live handle and `input` point to `len` values.
 */
enum SpkStatus spk_network_step(struct SpkNetwork *net,
                                const double *input,
                                size_t len,
                                double retention);

/**
 * Copies the newest activity of `layer` (0 = input) into `out`.
 *
 * # Safety
 * `net` must be a live handle and `out` hold `len` values.
 */
enum SpkStatus spk_network_activity(const struct SpkNetwork *net,
                                    size_t layer,
                                    double *out,
                                    size_t len);

/**
 * Builds a trainer from a TOML config string (same format as the CLI).
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string; `out` must be writable.
 */
enum SpkStatus spk_trainer_new(const char *config_toml, struct SpkTrainer **out);

/**
 * # Safety
 * `trainer` must be NULL or a handle not yet freed.
 */
void spk_trainer_free(struct SpkTrainer *trainer);

/**
 * Runs the remaining schedule. With a non-NULL `out_dir`, checkpoints and
 * the metrics log are written there.
 *
 * # Safety
 * `trainer` must be a live handle; `out_dir` NULL or a NUL-terminated string.
 */
enum SpkStatus spk_trainer_run(struct SpkTrainer *trainer, const char *out_dir);

/**
 * Saves the trainer state as a resumable checkpoint.
 *
 * # Safety
 * `trainer` must be a live handle and `path` a NUL-terminated string.
 */
enum SpkStatus spk_trainer_save(const struct SpkTrainer *trainer, const char *path);

/**
 * Evaluates the trainer's network on its test split.
 *
 * # Safety
 * `trainer` must be a live handle and `out` writable.
 */
enum SpkStatus spk_trainer_evaluate(const struct SpkTrainer *trainer, struct SpkEvalReport *out);

/**
 * Copies the trainer's current network into a new handle.
 *
 * # Safety
 * `trainer` must be a live handle and `out` writable.
 */
enum SpkStatus spk_trainer_network(const struct SpkTrainer *trainer, struct SpkNetwork **out);

/**
 * Single-context Bernoulli benchmark: learned rate versus empirical rate.
 *
 * # Safety
 * `out` must be writable.
 */
enum SpkStatus spk_bernoulli_benchmark(double p,
                                       size_t steps,
                                       double eps,
                                       uint64_t seed,
                                       struct SpkBernoulliResult *out);

/**
 * Drive `Q[j] = sum_i sum_k w[j,i,k] h_i(t-k)` into `q` (length `post`).
 *
 * # Safety
 * `weights` holds `post*pre*k` values, `window` `k*pre`, `q` `post`.
 */
enum SpkStatus spk_compute_drive(const double *weights,
                                 size_t pre,
                                 size_t post,
                                 size_t k,
                                 const double *window,
                                 double *q);

/**
 * The `d` rule in place: `w[j,i,k] -= eps * h_i(t-k) * q[j]`.
 *
 * # Safety
 * `weights` holds `post*pre*k` values, `window` `k*pre`, `q` `post`.
 */
enum SpkStatus spk_apply_d(double *weights,
                           size_t pre,
                           size_t post,
                           size_t k,
                           const double *window,
                           const double *q,
                           double eps);

/**
 * The `u` rule in place: `w[j,i,k] += eps * h_i(t-k) * o[j]`.
 *
 * # Safety
 * `weights` holds `post*pre*k` values, `window` `k*pre`, `o` `post`.
 */
enum SpkStatus spk_apply_u(double *weights,
                           size_t pre,
                           size_t post,
                           size_t k,
                           const double *window,
                           const double *o,
                           double eps);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SPIKERATE_H */

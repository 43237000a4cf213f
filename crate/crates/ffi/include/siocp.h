#ifndef SIOCP_H
#define SIOCP_H

#include <stddef.h>
#include <stdint.h>

// Result codes shared by every entry point.
typedef enum SiocpStatus {
  SIOCP_STATUS_OK = 0,
  SIOCP_STATUS_NULL_POINTER = 1,
  SIOCP_STATUS_INVALID_ARGUMENT = 2,
  SIOCP_STATUS_CONFIG = 3,
  SIOCP_STATUS_DATA_INTEGRITY = 4,
  SIOCP_STATUS_SEQUENCING = 5,
  SIOCP_STATUS_INSUFFICIENT_HISTORY = 6,
  SIOCP_STATUS_SIMULATION_ABORT = 7,
  SIOCP_STATUS_IO = 8,
  SIOCP_STATUS_PARSE = 9,
  SIOCP_STATUS_BUFFER_TOO_SMALL = 10,
  SIOCP_STATUS_PANIC = 11,
} SiocpStatus;

// Which branch of the margin map produced a bound.
typedef enum SiocpMarginCase {
  SIOCP_MARGIN_CASE_SQRT = 0,
  SIOCP_MARGIN_CASE_TRAPEZOID = 1,
  SIOCP_MARGIN_CASE_INITIAL_PHASE = 2,
} SiocpMarginCase;

typedef struct SiocpEstimator SiocpEstimator;

typedef struct SiocpHistory SiocpHistory;

typedef struct SiocpModel SiocpModel;

// Estimator parameters. `decaying != 0` selects `eta / sqrt(k)`.
typedef struct SiocpOcpConfig {
  double alpha;
  double eta;
  uint8_t decaying;
  double q_init;
  double d_init;
  double lipschitz;
  double horizon;
  double dt;
} SiocpOcpConfig;

typedef struct SiocpMarginRecord {
  uint64_t k;
  size_t thread;
  double q_active;
  enum SiocpMarginCase margin_case;
  double d_bar;
} SiocpMarginRecord;

// `f_nom(x, u, theta)` written into `out` (length `state_dim`).
typedef void (*SiocpNominalFn)(const double *x,
                               const double *u,
                               const double *theta,
                               double *out,
                               void *user_data);

typedef struct SiocpScore {
  double value;
  double tau1;
  double tau2;
} SiocpScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or null. The pointer
// stays valid until the next call into this library from the same thread.
const char *siocp_last_error(void);

// One threshold update; ties count as covered.
//
// # Safety
// `out` must point to writable memory for one `double`.
enum SiocpStatus siocp_ocp_update(double q, double score, double eta, double alpha, double *out);

// Pointwise margin for a threshold.
//
// # Safety
// `d_bar` and `margin_case` must be writable.
enum SiocpStatus siocp_margin_from_threshold(double q,
                                             double lipschitz,
                                             double horizon,
                                             double *d_bar,
                                             enum SiocpMarginCase *margin_case);

// Defaults: alpha 0.1, eta 0.2, horizon 0.5 s, dt 0.05 s.
struct SiocpOcpConfig siocp_ocp_config_default(void);

// # Safety
// `cfg` must be readable and `out` writable.
enum SiocpStatus siocp_estimator_new(const struct SiocpOcpConfig *cfg, struct SiocpEstimator **out);

// # Safety
// `est` must come from [`siocp_estimator_new`] and not be used afterwards.
void siocp_estimator_free(struct SiocpEstimator *est);

// Runs step `k` at time `t_k`. `has_score` must be nonzero once
// `t_k >= horizon`.
//
// # Safety
// `est` must be a live handle and `out` writable.
enum SiocpStatus siocp_estimator_step(struct SiocpEstimator *est,
                                      uint64_t k,
                                      double t_k,
                                      double score,
                                      uint8_t has_score,
                                      struct SiocpMarginRecord *out);

// Number of staggered threads.
//
// # Safety
// `est` must be a live handle or null (returns 0).
size_t siocp_estimator_threads(const struct SiocpEstimator *est);

// # Safety
// `est` must be a live handle and `out` writable.
enum SiocpStatus siocp_estimator_threshold(const struct SiocpEstimator *est,
                                           size_t thread,
                                           double *out);

// Writes the JSON checkpoint, NUL-terminated, into `buf`. `needed` receives
// the required size including the terminator, also when the buffer is too
// small.
//
// # Safety
// `buf` must be writable for `capacity` bytes (or null with capacity 0).
enum SiocpStatus siocp_estimator_checkpoint(const struct SiocpEstimator *est,
                                            char *buf,
                                            size_t capacity,
                                            size_t *needed);

// # Safety
// `out` must be writable.
enum SiocpStatus siocp_history_new(double grid_dt,
                                   double window,
                                   size_t state_dim,
                                   size_t input_dim,
                                   size_t theta_dim,
                                   struct SiocpHistory **out);

// # Safety
// `h` must come from [`siocp_history_new`] and not be used afterwards.
void siocp_history_free(struct SiocpHistory *h);

// Appends a grid sample. Arrays have the dimensions given at creation.
//
// # Safety
// `h` must be live; `x`, `u` and `theta` must be readable for their lengths.
enum SiocpStatus siocp_history_push(struct SiocpHistory *h,
                                    double t,
                                    const double *x,
                                    const double *u,
                                    const double *theta);

// Number of stored samples.
//
// # Safety
// `h` must be a live handle or null (returns 0).
size_t siocp_history_len(const struct SiocpHistory *h);

// Integral score of the full window under the caller's nominal dynamics.
//
// # Safety
// `h` must be live, `out` writable, and `f_nom` must write `state_dim`
// values without retaining the pointers it receives.
enum SiocpStatus siocp_history_score(const struct SiocpHistory *h,
                                     SiocpNominalFn f_nom,
                                     void *user_data,
                                     struct SiocpScore *out);

// Parameter count of the residual network.
size_t siocp_model_param_count(void);

// Seeded random network, also used as its own prior.
//
// # Safety
// `out` must be writable.
enum SiocpStatus siocp_model_new_random(uint64_t seed, double scale, struct SiocpModel **out);

// # Safety
// `m` must come from [`siocp_model_new_random`] and not be used afterwards.
void siocp_model_free(struct SiocpModel *m);

// `out[3] = F(xi[5])`.
//
// # Safety
// `m` must be live, `xi` readable for 5 values and `out` writable for 3.
enum SiocpStatus siocp_model_predict(const struct SiocpModel *m, const double *xi, double *out);

// One adaptation step toward the acceleration residual `eps[3]`.
//
// # Safety
// `m` must be live, `xi` readable for 5 values and `eps` for 3.
enum SiocpStatus siocp_model_adapt(struct SiocpModel *m,
                                   const double *xi,
                                   const double *eps,
                                   double gamma,
                                   double lambda,
                                   double dt);

// Euclidean norm of the current parameters; negative for a null handle.
//
// # Safety
// `m` must be a live handle or null.
double siocp_model_theta_norm(const struct SiocpModel *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SIOCP_H */

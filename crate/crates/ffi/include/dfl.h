#ifndef DFL_H
#define DFL_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum DflStatus {
  DFL_STATUS_OK = 0,
  DFL_STATUS_NULL_POINTER = 1,
  DFL_STATUS_INVALID_ARGUMENT = 2,
  DFL_STATUS_INVALID_TOPOLOGY = 3,
  DFL_STATUS_NUMERIC = 4,
  DFL_STATUS_DIVERGED = 5,
  DFL_STATUS_INFEASIBLE_TOPOLOGY = 6,
  DFL_STATUS_INSUFFICIENT_COMMUNICATION = 7,
  DFL_STATUS_IO = 8,
  DFL_STATUS_PANIC = 9,
} DflStatus;

/*
 Opaque experiment config.
 */
typedef struct DflExperiment DflExperiment;

/*
 Opaque mixing matrix.
 */
typedef struct DflMixing DflMixing;

/*
 Opaque run record.
 */
typedef struct DflRecord DflRecord;

typedef struct DflSpectral {
  size_t nodes;
  double zeta;
  double beta;
  double rho;
} DflSpectral;

/*
 Bound constants. `tau2` may be infinite; a NaN `theta` selects the
 default `p / (2 (1 − p))`.
 */
typedef struct DflBoundParams {
  double l;
  double mu;
  double sigma_sq;
  double sigma_bar_sq;
  double g_sq;
  double zeta;
  double beta;
  double delta;
  double eta;
  double tau1;
  double tau2;
  double n;
  double t;
  double f_gap;
  double a;
  double theta;
} DflBoundParams;

typedef struct DflDflBound {
  double sync_sgd;
  double local_drift;
  double total;
  bool feasible;
} DflDflBound;

typedef struct DflCdflBound {
  double s_k;
  double initial;
  double noise;
  double noise_drift;
  double d1;
  double d2;
  double d3;
  double compression;
  double total;
} DflCdflBound;

typedef struct DflSummary {
  size_t seeds;
  size_t diverged_seeds;
  double median_final_loss;
  double median_summary_grad_norm_sq;
  uint64_t total_bytes;
  double f_star;
} DflSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the last error message of this thread into `buf` (NUL-terminated,
 truncated to `len`). Returns the full message length excluding the NUL.

 # Safety
 `buf` must be null or point to `len` writable bytes.
 */
size_t dfl_last_error_message(char *buf, size_t len);

/*
 Library version as a static NUL-terminated string.
 */
const char *dfl_version(void);

/*
 Builds a mixing matrix from a topology string such as `ring`,
 `group_ring:5x2` or `adjacency:<path>`; `nodes` is used when the string
 carries no count (0 means none).

 # Safety
 `spec` must be a NUL-terminated string; `out` must be writable.
 */
enum DflStatus dfl_mixing_new(const char *spec, size_t nodes, struct DflMixing **out);

/*
 # Safety
 `m` must come from [`dfl_mixing_new`] and not be used afterwards.
 */
void dfl_mixing_free(struct DflMixing *m);

/*
 # Safety
 `m` must be a live handle; `out` must be writable.
 */
enum DflStatus dfl_mixing_spectral(const struct DflMixing *m, struct DflSpectral *out);

/*
 Entry `C[row][col]`.

 # Safety
 `m` must be a live handle; `out` must be writable.
 */
enum DflStatus dfl_mixing_entry(const struct DflMixing *m, size_t row, size_t col, double *out);

/*
 # Safety
 `out` must be writable.
 */
enum DflStatus dfl_bound_params_default(struct DflBoundParams *out);

/*
 # Safety
 `params` must be readable; `out` must be writable.
 */
enum DflStatus dfl_bound_dfl(const struct DflBoundParams *params, struct DflDflBound *out);

/*
 Whether the step size satisfies the feasibility condition.

 # Safety
 `params` must be readable; `out` must be writable.
 */
enum DflStatus dfl_bound_lr_feasible(const struct DflBoundParams *params, bool *out);

/*
 # Safety
 `params` must be readable; `out` must be writable.
 */
enum DflStatus dfl_bound_cdfl(const struct DflBoundParams *params,
                              size_t rounds,
                              double u0_dist_sq,
                              struct DflCdflBound *out);

/*
 Parses a TOML experiment config.

 # Safety
 `toml` must be a NUL-terminated string; `out` must be writable.
 */
enum DflStatus dfl_experiment_from_toml(const char *toml, struct DflExperiment **out);

/*
 # Safety
 `e` must be a live handle; `path` a NUL-terminated string.
 */
enum DflStatus dfl_experiment_set_output(struct DflExperiment *e, const char *path);

/*
 # Safety
 `e` must come from [`dfl_experiment_from_toml`] and not be used afterwards.
 */
void dfl_experiment_free(struct DflExperiment *e);

/*
 Runs every seed and writes the output files. Seeds that diverge are
 recorded in the summary, not reported as an error.

 # Safety
 `e` must be a live handle; `out` must be writable.
 */
enum DflStatus dfl_experiment_run(const struct DflExperiment *e, struct DflRecord **out);

/*
 # Safety
 `r` must be a live handle; `out` must be writable.
 */
enum DflStatus dfl_record_summary(const struct DflRecord *r, struct DflSummary *out);

/*
 # Safety
 `r` must come from [`dfl_experiment_run`] and not be used afterwards.
 */
void dfl_record_free(struct DflRecord *r);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DFL_H */

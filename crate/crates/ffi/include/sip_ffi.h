#ifndef SIP_FFI_H
#define SIP_FFI_H

#include <stddef.h>
#include <stdint.h>

typedef enum SipAlgorithm {
  SIP_ALGORITHM_BLANKENSHIP_FALK = 0,
  SIP_ALGORITHM_QCAD = 1,
} SipAlgorithm;

typedef enum SipTermination {
  // Distance to the problem's known solution below `tol_dist`.
  SIP_TERMINATION_KNOWN = 0,
  // Feasibility below `tol_feas` and stationarity below `tol_stat`.
  SIP_TERMINATION_PRACTICAL = 1,
} SipTermination;

typedef enum SipStatus {
  SIP_STATUS_OK = 0,
  SIP_STATUS_NULL_POINTER = 1,
  SIP_STATUS_INVALID_ARGUMENT = 2,
  SIP_STATUS_NOT_FOUND = 3,
  SIP_STATUS_PARSE_ERROR = 4,
  SIP_STATUS_SOLVER_FAILURE = 5,
  SIP_STATUS_OUT_OF_RANGE = 6,
  SIP_STATUS_PANIC = 7,
} SipStatus;

typedef enum SipFinalStatus {
  SIP_FINAL_STATUS_TOLERANCE_MET = 0,
  SIP_FINAL_STATUS_MAX_ITER = 1,
  SIP_FINAL_STATUS_SUBSOLVER_FAILURE = 2,
} SipFinalStatus;

// Opaque problem handle.
typedef struct SipProblem SipProblem;

// Opaque run result handle.
typedef struct SipRunResult SipRunResult;

typedef struct SipRunOptions {
  enum SipAlgorithm algorithm;
  enum SipTermination termination;
  double tol_dist;
  double tol_feas;
  double tol_stat;
  uint32_t max_iter;
} SipRunOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next call into this library on the same thread.
const char *sip_last_error_message(void);

// QCAD, practical termination (1e-6 / 1e-6), at most 50 iterations.
struct SipRunOptions sip_run_options_default(void);

// # Safety
// `name` must be a NUL-terminated string and `out` a valid pointer.
enum SipStatus sip_problem_from_registry(const char *name, struct SipProblem **out);

// Builds a problem from the text of a TOML problem file.
//
// # Safety
// `text` must be a NUL-terminated string and `out` a valid pointer.
enum SipStatus sip_problem_from_spec(const char *text, struct SipProblem **out);

// # Safety
// `problem` must come from this library and not be freed twice. Null is
// ignored.
void sip_problem_free(struct SipProblem *problem);

// Writes `n`, `m` and the number of constraint families `p`. Any output
// pointer may be null.
//
// # Safety
// `problem` must be a live handle.
enum SipStatus sip_problem_dims(const struct SipProblem *problem, size_t *n, size_t *m, size_t *p);

// Runs a solver. `options` may be null for the defaults; `x0` may be null
// for the problem's initial point (or the center of its box).
//
// # Safety
// `problem` must be a live handle, `x0` must point to `x0_len` doubles when
// non-null and `out` must be a valid pointer.
enum SipStatus sip_run(const struct SipProblem *problem,
                       const struct SipRunOptions *options,
                       const double *x0,
                       size_t x0_len,
                       struct SipRunResult **out);

// # Safety
// `result` must come from [`sip_run`] and not be freed twice. Null is
// ignored.
void sip_run_result_free(struct SipRunResult *result);

// Number of recorded iterates (iterations + 1).
//
// # Safety
// `result` must be a live handle and `out` a valid pointer.
enum SipStatus sip_run_result_len(const struct SipRunResult *result, size_t *out);

// # Safety
// `result` must be a live handle and `out` a valid pointer.
enum SipStatus sip_run_result_status(const struct SipRunResult *result, enum SipFinalStatus *out);

// Copies iterate `k` into `x_out` (`len` must equal n) and writes its
// objective, feasibility, stationarity residual and distance to the known
// solution (NaN when unknown). Scalar outputs may be null.
//
// # Safety
// `result` must be a live handle; `x_out` must hold `len` doubles.
enum SipStatus sip_run_result_iterate(const struct SipRunResult *result,
                                      size_t k,
                                      double *x_out,
                                      size_t len,
                                      double *objective,
                                      double *feasibility,
                                      double *stationarity,
                                      double *dist_to_known);

// Copies the final iterate into `x_out` (`len` must equal n).
//
// # Safety
// `result` must be a live handle; `x_out` must hold `len` doubles.
enum SipStatus sip_run_result_final_x(const struct SipRunResult *result, double *x_out, size_t len);

// `max_i max_{y in Y} g_i(x, y)`.
//
// # Safety
// `problem` must be a live handle, `x` must hold `len` doubles and `out`
// must be a valid pointer.
enum SipStatus sip_feasibility(const struct SipProblem *problem,
                               const double *x,
                               size_t len,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SIP_FFI_H */

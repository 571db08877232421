#ifndef HOSTCP_H
#define HOSTCP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum HostcpStatus {
  HOSTCP_STATUS_OK = 0,
  HOSTCP_STATUS_NULL_POINTER = 1,
  HOSTCP_STATUS_INVALID_ARGUMENT = 2,
  HOSTCP_STATUS_CONFIG = 3,
  HOSTCP_STATUS_NUMERICAL = 4,
  HOSTCP_STATUS_IO = 5,
  HOSTCP_STATUS_PANIC = 6,
} HostcpStatus;

typedef struct HostcpDataset HostcpDataset;

/**
 * A selection program and, once solved, its solution.
 */
typedef struct HostcpProblem HostcpProblem;

typedef struct HostcpTrainLog HostcpTrainLog;

/**
 * Message of the last failure on this thread, or NULL. Owned by the library;
 * valid until the next failing call on the same thread.
 */
const char *hostcp_last_error(void);

/**
 * Builds a selection program from row-major distance blocks `d_new_new`
 * `[b x b]` and `d_new_old` `[b x m]` (may be NULL when `m == 0`).
 *
 * # Safety
 * The arrays must hold `b*b` and `b*m` doubles; `out` must be writable.
 */
enum HostcpStatus hostcp_problem_new(const double *d_new_new,
                                     size_t b,
                                     const double *d_new_old,
                                     size_t m,
                                     double gamma,
                                     double epsilon,
                                     double xi,
                                     struct HostcpProblem **out);

/**
 * # Safety
 * `problem` must be NULL or a handle from [`hostcp_problem_new`] not yet freed.
 */
void hostcp_problem_free(struct HostcpProblem *problem);

/**
 * Number of representatives the program may select.
 *
 * # Safety
 * `problem` must be a live handle and `out` writable.
 */
enum HostcpStatus hostcp_problem_budget(const struct HostcpProblem *problem, size_t *out);

/**
 * Solves the program and keeps the solution on the handle. `iterations` and
 * `residual` may be NULL.
 *
 * # Safety
 * `problem` must be a live handle.
 */
enum HostcpStatus hostcp_problem_solve(struct HostcpProblem *problem,
                                       size_t *iterations,
                                       double *residual);

/**
 * Copies the solution. `u` receives `b` values; `z_new` (`b*b`) and
 * `z_old` (`b*m`) are row-major and may be NULL.
 *
 * # Safety
 * Non-NULL arrays must have the stated lengths.
 */
enum HostcpStatus hostcp_problem_solution(const struct HostcpProblem *problem,
                                          double *u,
                                          double *z_new,
                                          double *z_old);

/**
 * Writes the selected positions (ascending) into `indices`, which must hold
 * `b` entries, and their number into `count`.
 *
 * # Safety
 * `problem` must be a live, solved handle; `indices` must hold `b` entries.
 */
enum HostcpStatus hostcp_problem_hard_select(const struct HostcpProblem *problem,
                                             size_t *indices,
                                             size_t *count);

/**
 * Pulls `dJ/du` (`b` values) back to the distance blocks. `grad_new_new`
 * receives `b*b` values; `grad_new_old` receives `b*m` and may be NULL when
 * `m == 0`.
 *
 * # Safety
 * `problem` must be a live, solved handle and the arrays must have the
 * stated lengths.
 */
enum HostcpStatus hostcp_problem_differentiate(const struct HostcpProblem *problem,
                                               const double *dj_du,
                                               double *grad_new_new,
                                               double *grad_new_old);

/**
 * NDCG@k of the ranking by descending `scores` against binary relevance.
 *
 * # Safety
 * `scores` and `relevant` must hold `n` entries; `out` must be writable.
 */
enum HostcpStatus hostcp_ndcg_at_k(const double *scores,
                                   const bool *relevant,
                                   size_t n,
                                   size_t k,
                                   double *out);

/**
 * Seeded synthetic binary classification data.
 *
 * # Safety
 * `out` must be writable.
 */
enum HostcpStatus hostcp_dataset_synthetic(size_t n,
                                           size_t d,
                                           uint64_t seed,
                                           struct HostcpDataset **out);

/**
 * Loads a `f0,...,f{d-1},label` CSV file.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
 */
enum HostcpStatus hostcp_dataset_load_csv(const char *path, struct HostcpDataset **out);

/**
 * # Safety
 * `dataset` must be a live handle; `n` and `d` must be writable.
 */
enum HostcpStatus hostcp_dataset_shape(const struct HostcpDataset *dataset, size_t *n, size_t *d);

/**
 * # Safety
 * `dataset` must be NULL or a live handle.
 */
void hostcp_dataset_free(struct HostcpDataset *dataset);

/**
 * Joint training of predictor and embedder. `config_json` holds trainer
 * settings as a JSON object; NULL or omitted keys take the defaults.
 *
 * # Safety
 * Dataset handles must be live, `config_json` NULL or NUL-terminated, and
 * `out` writable.
 */
enum HostcpStatus hostcp_train(const struct HostcpDataset *train,
                               const struct HostcpDataset *test,
                               const char *config_json,
                               struct HostcpTrainLog **out);

/**
 * Test accuracy of the final predictor.
 *
 * # Safety
 * `log` must be a live handle and `out` writable.
 */
enum HostcpStatus hostcp_train_log_accuracy(const struct HostcpTrainLog *log, double *out);

/**
 * The most valuable `fraction` of training ids, in rank order. `ids` holds
 * `capacity` entries; `count` always receives the required length, and the
 * call fails with `INVALID_ARGUMENT` when it exceeds `capacity`.
 *
 * # Safety
 * `log` must be a live handle, `ids` must hold `capacity` entries and
 * `count` must be writable.
 */
enum HostcpStatus hostcp_train_log_extract(const struct HostcpTrainLog *log,
                                           double fraction,
                                           size_t *ids,
                                           size_t capacity,
                                           size_t *count);

/**
 * Serializes the log as JSON. Release the string with [`hostcp_string_free`].
 *
 * # Safety
 * `log` must be a live handle and `out` writable.
 */
enum HostcpStatus hostcp_train_log_to_json(const struct HostcpTrainLog *log, char **out);

/**
 * # Safety
 * `log` must be NULL or a live handle.
 */
void hostcp_train_log_free(struct HostcpTrainLog *log);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library, not yet freed.
 */
void hostcp_string_free(char *s);

#endif /* HOSTCP_H */

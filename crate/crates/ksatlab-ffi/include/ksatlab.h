#ifndef KSATLAB_H
#define KSATLAB_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum KsatStatus {
  KSAT_STATUS_OK = 0,
  KSAT_STATUS_INVALID_INPUT = 1,
  KSAT_STATUS_UNDEFINED = 2,
  KSAT_STATUS_RESOURCE_LIMIT = 3,
  KSAT_STATUS_SOLVER_FAILURE = 4,
  KSAT_STATUS_PARSE = 5,
  KSAT_STATUS_IO = 6,
  KSAT_STATUS_NULL_POINTER = 7,
  KSAT_STATUS_BUFFER_TOO_SMALL = 8,
  KSAT_STATUS_PANIC = 9,
} KsatStatus;

/**
 * Opaque formula handle.
 */
typedef struct KsatFormula KsatFormula;

/**
 * Opaque population handle.
 */
typedef struct KsatPopulation KsatPopulation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the next call.
 */
const char *ksat_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ksat_version(void);

/**
 * Parses DIMACS CNF text.
 *
 * # Safety
 * `text` must be a valid NUL-terminated string and `out` a writable pointer.
 */
enum KsatStatus ksat_formula_from_dimacs(const char *text, struct KsatFormula **out);

/**
 * Random formula with `Po(dn/k)` clauses.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
enum KsatStatus ksat_formula_random(size_t k,
                                    double d,
                                    double beta,
                                    size_t n,
                                    uint64_t seed,
                                    struct KsatFormula **out);

/**
 * Releases a formula. NULL is ignored.
 *
 * # Safety
 * `f` must come from a `ksat_formula_*` constructor and not be freed twice.
 */
void ksat_formula_free(struct KsatFormula *f);

/**
 * Number of variables, 0 for NULL.
 *
 * # Safety
 * `f` must be NULL or a live formula handle.
 */
size_t ksat_formula_num_vars(const struct KsatFormula *f);

/**
 * Number of clauses, 0 for NULL.
 *
 * # Safety
 * `f` must be NULL or a live formula handle.
 */
size_t ksat_formula_num_clauses(const struct KsatFormula *f);

/**
 * `ln Z` by enumeration.
 *
 * # Safety
 * `f` must be a live formula handle and `out` writable.
 */
enum KsatStatus ksat_exact_log_z(const struct KsatFormula *f, double beta, double *out);

/**
 * Exact marginals `P(σ_x = +1)` written to `buf[0..n]`.
 *
 * # Safety
 * `f` must be a live formula handle and `buf` must hold `len` doubles.
 */
enum KsatStatus ksat_exact_marginals(const struct KsatFormula *f,
                                     double beta,
                                     double *buf,
                                     size_t len);

/**
 * Runs BP from uniform messages. Marginals go to `buf[0..n]`; the Bethe
 * free energy, round count and convergence flag to the optional out pointers.
 *
 * # Safety
 * `f` must be a live formula handle, `buf` must hold `len` doubles and the
 * out pointers must be NULL or writable.
 */
enum KsatStatus ksat_bp_run(const struct KsatFormula *f,
                            double beta,
                            size_t t_max,
                            double tol,
                            double *buf,
                            size_t len,
                            double *bethe,
                            size_t *iterations,
                            bool *converged);

/**
 * Population dynamics from the point mass at 1/2 with `W_1` tolerance `tol`
 * (`tol <= 0` selects `5/sqrt(n)`).
 *
 * # Safety
 * `out` must be writable; `converged` NULL or writable.
 */
enum KsatStatus ksat_population_fixed_point(size_t k,
                                            double d,
                                            double beta,
                                            size_t n,
                                            size_t max_iters,
                                            double tol,
                                            uint64_t seed,
                                            struct KsatPopulation **out,
                                            bool *converged);

/**
 * Population from caller samples in `[0, 1]`.
 *
 * # Safety
 * `samples` must hold `len` doubles and `out` must be writable.
 */
enum KsatStatus ksat_population_new(const double *samples, size_t len, struct KsatPopulation **out);

/**
 * Releases a population. NULL is ignored.
 *
 * # Safety
 * `p` must come from a `ksat_population_*` constructor and not be freed twice.
 */
void ksat_population_free(struct KsatPopulation *p);

/**
 * Population size, 0 for NULL.
 *
 * # Safety
 * `p` must be NULL or a live population handle.
 */
size_t ksat_population_len(const struct KsatPopulation *p);

/**
 * Copies the samples to `buf`.
 *
 * # Safety
 * `p` must be a live population handle and `buf` must hold `len` doubles.
 */
enum KsatStatus ksat_population_samples(const struct KsatPopulation *p, double *buf, size_t len);

/**
 * Monte Carlo Bethe functional of a population.
 *
 * # Safety
 * `pop` must be a live population handle; `value` and `stderr` writable.
 */
enum KsatStatus ksat_bethe_functional(const struct KsatPopulation *pop,
                                      size_t k,
                                      double d,
                                      double beta,
                                      size_t samples,
                                      uint64_t seed,
                                      double *value,
                                      double *stderr);

/**
 * Root of the balance equation for `p` at clause length `k`.
 *
 * # Safety
 * `out` must be writable.
 */
enum KsatStatus ksat_solve_p(size_t k, double beta, double *out);

/**
 * Minimizes the scalar gap function on a uniform grid of `grid` points in `(0, 1]`.
 *
 * # Safety
 * The three out pointers must be writable.
 */
enum KsatStatus ksat_rsb_scalar_gap(double c,
                                    size_t grid,
                                    double *argmin_y,
                                    double *phi_min,
                                    double *phi_at_1);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KSATLAB_H */

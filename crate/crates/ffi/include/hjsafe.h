#ifndef HJSAFE_H
#define HJSAFE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum HjsafeStatus {
  HJSAFE_STATUS_OK = 0,
  HJSAFE_STATUS_NULL_POINTER = 1,
  HJSAFE_STATUS_INVALID_ARGUMENT = 2,
  HJSAFE_STATUS_IO = 3,
  HJSAFE_STATUS_FORMAT = 4,
  HJSAFE_STATUS_NUMERICAL = 5,
  HJSAFE_STATUS_PANIC = 6,
} HjsafeStatus;

// A value function sampled on a grid.
typedef struct HjsafeField HjsafeField;

// Least-restrictive safety filter for one subsystem.
typedef struct HjsafeFilter HjsafeFilter;

// A scenario (models, grids, constraint, solver settings).
typedef struct HjsafeScenario HjsafeScenario;

// Summary of one solve.
typedef struct HjsafeSolveInfo {
  size_t iterations;
  // Zero when no coarse stage ran.
  size_t coarse_iterations;
  bool converged;
  double dt;
  double wall_seconds;
  // Nodes with `V <= 0`.
  size_t safe_nodes;
} HjsafeSolveInfo;

// Result of filtering one control.
typedef struct HjsafeDecision {
  bool overridden;
  double value;
  bool out_of_domain;
} HjsafeDecision;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread (empty after a success).
// The pointer stays valid until the next call on this thread.
const char *hjsafe_last_error(void);

// Loads a built-in scenario (`quad2d_demo` or `near_hover_demo`).
//
// # Safety
// `name` must be a NUL-terminated string; `out` a valid pointer.
enum HjsafeStatus hjsafe_scenario_preset(const char *name, struct HjsafeScenario **out);

// Parses a scenario from JSON (unknown keys are rejected).
//
// # Safety
// `json` must be a NUL-terminated string; `out` a valid pointer.
enum HjsafeStatus hjsafe_scenario_from_json(const char *json, struct HjsafeScenario **out);

// # Safety
// `scenario` must come from this library (or be null) and not be used afterwards.
void hjsafe_scenario_free(struct HjsafeScenario *scenario);

// Number of subsystems, or 0 for a null handle.
//
// # Safety
// `scenario` must be a valid handle or null.
size_t hjsafe_scenario_subsystem_count(const struct HjsafeScenario *scenario);

// Solves subsystem `index` against its prior disturbance bounds
// (coarse-to-fine when the scenario lists a coarse grid).
//
// # Safety
// Handles must be valid; `out_field` and `info` valid pointers.
enum HjsafeStatus hjsafe_solve(const struct HjsafeScenario *scenario,
                               size_t index,
                               struct HjsafeField **out_field,
                               struct HjsafeSolveInfo *info);

// Reads an HJVF file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` a valid pointer.
enum HjsafeStatus hjsafe_field_load(const char *path, struct HjsafeField **out);

// Writes an HJVF file.
//
// # Safety
// `field` must be a valid handle; `path` a NUL-terminated string.
enum HjsafeStatus hjsafe_field_save(const struct HjsafeField *field, const char *path);

// # Safety
// `field` must come from this library (or be null) and not be used afterwards.
void hjsafe_field_free(struct HjsafeField *field);

// Number of grid dimensions, or 0 for a null handle.
//
// # Safety
// `field` must be a valid handle or null.
size_t hjsafe_field_ndims(const struct HjsafeField *field);

// Number of nodes, or 0 for a null handle.
//
// # Safety
// `field` must be a valid handle or null.
size_t hjsafe_field_len(const struct HjsafeField *field);

// Copies the nodes per dimension into `out[0..cap]`; `cap` must be at least
// the number of dimensions.
//
// # Safety
// `out` must point to `cap` writable elements.
enum HjsafeStatus hjsafe_field_shape(const struct HjsafeField *field, size_t *out, size_t cap);

// Copies the node values (row-major, last axis fastest) into `out[0..cap]`.
//
// # Safety
// `out` must point to `cap` writable elements.
enum HjsafeStatus hjsafe_field_values(const struct HjsafeField *field, double *out, size_t cap);

// Multilinear interpolation at `x[0..n]`; states outside the grid are
// clamped and reported through `out_of_domain` (may be null).
//
// # Safety
// `x` must point to `n` elements; `value` must be valid.
enum HjsafeStatus hjsafe_field_value_at(const struct HjsafeField *field,
                                        const double *x,
                                        size_t n,
                                        double *value,
                                        bool *out_of_domain);

// Builds the safety filter of subsystem `index` from a solved value field
// (copied) and the subsystem's prior disturbance bounds.
//
// # Safety
// Handles must be valid; `out` a valid pointer.
enum HjsafeStatus hjsafe_filter_new(const struct HjsafeScenario *scenario,
                                    size_t index,
                                    const struct HjsafeField *field,
                                    struct HjsafeFilter **out);

// # Safety
// `filter` must come from this library (or be null) and not be used afterwards.
void hjsafe_filter_free(struct HjsafeFilter *filter);

// Filters the performance control `u_perf[0..nu]` at state `x[0..nx]`
// (subsystem coordinates) and writes the applied control to `u_out[0..nu]`.
//
// # Safety
// Arrays must hold the stated number of elements; `decision` may be null.
enum HjsafeStatus hjsafe_filter_apply(const struct HjsafeFilter *filter,
                                      const double *x,
                                      size_t nx,
                                      const double *u_perf,
                                      size_t nu,
                                      double *u_out,
                                      struct HjsafeDecision *decision);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HJSAFE_H */

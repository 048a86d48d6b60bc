#ifndef HTE_LAB_H
#define HTE_LAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum HteStatus {
  HTE_STATUS_OK = 0,
  HTE_STATUS_NULL_POINTER = 1,
  HTE_STATUS_INVALID_ARGUMENT = 2,
  HTE_STATUS_INVALID_DATA = 3,
  HTE_STATUS_FIT_FAILED = 4,
  HTE_STATUS_IO = 5,
  HTE_STATUS_FORMAT = 6,
  HTE_STATUS_NO_MEANS = 7,
  HTE_STATUS_PANIC = 8,
} HteStatus;

// Opaque dataset handle.
typedef struct HteDataset HteDataset;

// Opaque fitted model handle.
typedef struct HteModel HteModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *hte_version(void);

// Message of the last failed call on this thread, or NULL. Valid until the
// next call into the library from the same thread.
const char *hte_last_error_message(void);

// Copy `x` (n×p, row-major), `t` (0/1) and `y` into a new dataset. Both
// arms must be present.
//
// # Safety
// `x` must point to `n*p` doubles, `t` and `y` to `n` elements each.
// `out` must be a valid pointer.
enum HteStatus hte_dataset_new(const double *x,
                               const uint8_t *t,
                               const double *y,
                               size_t n,
                               size_t p,
                               struct HteDataset **out);

// # Safety
// `d` must come from [`hte_dataset_new`] and not be freed twice. NULL is a no-op.
void hte_dataset_free(struct HteDataset *d);

// Number of rows, or 0 for NULL.
//
// # Safety
// `d` must be NULL or a live dataset handle.
size_t hte_dataset_n_rows(const struct HteDataset *d);

// Fit a model described by a run configuration JSON document, e.g.
// `{"method":"causal_boost","adjustment":"none","seed":7}`.
//
// # Safety
// `config_json` must be a NUL-terminated string, `d` a live dataset handle
// and `out` a valid pointer.
enum HteStatus hte_model_fit(const char *config_json,
                             const struct HteDataset *d,
                             struct HteModel **out);

// Restore a model from its JSON document.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum HteStatus hte_model_from_json(const char *json, struct HteModel **out);

// Serialize a model. The string is released with [`hte_string_free`].
//
// # Safety
// `m` must be a live model handle and `out` a valid pointer.
enum HteStatus hte_model_to_json(const struct HteModel *m, char **out);

// # Safety
// `s` must come from [`hte_model_to_json`]. NULL is a no-op.
void hte_string_free(char *s);

// Number of features the model expects, or 0 for NULL.
//
// # Safety
// `m` must be NULL or a live model handle.
size_t hte_model_n_features(const struct HteModel *m);

// Write τ̂ for each of `n_rows` rows of `x` into `tau_out`.
//
// # Safety
// `x` must point to `n_rows*n_cols` doubles and `tau_out` to `n_rows`.
enum HteStatus hte_model_predict_effect(const struct HteModel *m,
                                        const double *x,
                                        size_t n_rows,
                                        size_t n_cols,
                                        double *tau_out);

// Write μ̂₁ and μ̂₀ per row. Returns [`HteStatus::NoMeans`] for models
// that estimate only the effect.
//
// # Safety
// `x` must point to `n_rows*n_cols` doubles, `mu1_out` and `mu0_out` to `n_rows` each.
enum HteStatus hte_model_predict_means(const struct HteModel *m,
                                       const double *x,
                                       size_t n_rows,
                                       size_t n_cols,
                                       double *mu1_out,
                                       double *mu0_out);

// # Safety
// `m` must come from a fit or load call and not be freed twice. NULL is a no-op.
void hte_model_free(struct HteModel *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HTE_LAB_H */

#ifndef DIGITALSHADOW_H
#define DIGITALSHADOW_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DsDirection {
  DS_DIRECTION_UP = 0,
  DS_DIRECTION_DOWN = 1,
  DS_DIRECTION_NONE = 2,
} DsDirection;

typedef enum DsStatus {
  DS_STATUS_OK = 0,
  DS_STATUS_NULL_POINTER = 1,
  DS_STATUS_INVALID_ARGUMENT = 2,
  DS_STATUS_DIMENSION_MISMATCH = 3,
  DS_STATUS_NOT_FOUND = 4,
  DS_STATUS_IO = 5,
  DS_STATUS_PARSE = 6,
  DS_STATUS_UNDEFINED = 7,
  DS_STATUS_TRANSPORT = 8,
  DS_STATUS_BUFFER_TOO_SMALL = 9,
  DS_STATUS_INTERNAL = 10,
  DS_STATUS_PANIC = 11,
} DsStatus;

// Opaque identity registry.
typedef struct DsRegistry DsRegistry;

// Result of a nearest-identity lookup. The label is written to the caller's
// buffer; `label_len` excludes the terminating NUL.
typedef struct DsMatch {
  bool found;
  bool accepted;
  double distance;
  size_t label_len;
} DsMatch;

typedef struct DsChangeVerdict {
  enum DsDirection direction;
  double p_value;
  double kl;
  double effect_size;
  double u_statistic;
  bool small_sample;
} DsChangeVerdict;

typedef struct DsRunSummary {
  uint64_t frames_processed;
  uint64_t frames_failed;
  uint64_t faces_detected;
  uint64_t faces_matched;
  uint64_t faces_discarded;
  uint64_t samples_stored;
  uint64_t verdicts_emitted;
  uint64_t reports_written;
} DsRunSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread. Empty if none. The
// pointer stays valid until the next failing call on this thread.
const char *ds_last_error(void);

// Library version as a static NUL-terminated string.
const char *ds_version(void);

// # Safety
// `out_registry` must be valid for writes.
enum DsStatus ds_registry_new(size_t dimension, struct DsRegistry **out_registry);

// # Safety
// `path` must be a NUL-terminated string and `out_registry` valid for writes.
enum DsStatus ds_registry_load(const char *path, struct DsRegistry **out_registry);

// # Safety
// `registry` must come from this library; `path` must be NUL-terminated.
enum DsStatus ds_registry_save(const struct DsRegistry *registry_ptr, const char *path);

// Release a registry. Null is ignored.
//
// # Safety
// `registry` must come from this library and not be used afterwards.
void ds_registry_free(struct DsRegistry *registry_ptr);

// Number of distinct labels. Zero for a null handle.
//
// # Safety
// `registry` must be null or come from this library.
size_t ds_registry_len(const struct DsRegistry *registry_ptr);

// Add one template under `label`. The embedding is stored as given; callers
// that compare unit embeddings should normalize first.
//
// # Safety
// `embedding` must point to `len` doubles; `label` must be NUL-terminated.
enum DsStatus ds_registry_add(struct DsRegistry *registry_ptr,
                              const char *label,
                              const double *embedding,
                              size_t len);

// Nearest identity for `probe` under acceptance radius `tau`.
//
// On an empty registry `found` is false. Otherwise the label is copied into
// `label_buf` (NUL-terminated) when `label_cap` is large enough; if not, the
// call returns `DS_STATUS_BUFFER_TOO_SMALL` with `label_len` set so the
// caller can retry. `label_buf` may be null when `label_cap` is zero.
//
// # Safety
// `probe` must point to `len` doubles, `out_match` must be valid for writes
// and `label_buf` valid for `label_cap` bytes.
enum DsStatus ds_registry_match(const struct DsRegistry *registry_ptr,
                                const double *probe,
                                size_t len,
                                double tau,
                                struct DsMatch *out_match,
                                char *label_buf,
                                size_t label_cap);

// ROC-AUC with ties counted one half. `labels` holds 0 or 1 per score.
//
// # Safety
// `scores` and `labels` must each point to `n` elements.
enum DsStatus ds_roc_auc(const double *scores, const uint8_t *labels, size_t n, double *out_auc);

// `D(p || q)` in nats with `epsilon` smoothing.
//
// # Safety
// `p` and `q` must each point to `n` doubles.
enum DsStatus ds_kl_divergence(const double *p,
                               const double *q,
                               size_t n,
                               double epsilon,
                               double *out_kl);

// Two-sample change test of `current` against `previous`. Pass `bins` 0 to
// use the library default.
//
// # Safety
// The sample pointers must cover their lengths; `out_verdict` must be valid
// for writes.
enum DsStatus ds_change_test(const double *previous,
                             size_t n_previous,
                             const double *current,
                             size_t n_current,
                             double alpha,
                             size_t bins,
                             struct DsChangeVerdict *out_verdict);

// Run the monitoring pipeline described by a JSON config file. Relative
// paths inside the config resolve against the config's directory.
//
// # Safety
// `config_path` must be NUL-terminated; `out_summary` may be null.
enum DsStatus ds_run_pipeline(const char *config_path, struct DsRunSummary *out_summary);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIGITALSHADOW_H */

#ifndef BMB_H
#define BMB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BmbStatus {
  BMB_STATUS_OK = 0,
  BMB_STATUS_NULL_POINTER = 1,
  BMB_STATUS_INVALID_ARGUMENT = 2,
  BMB_STATUS_EMPTY = 3,
  BMB_STATUS_CONFIG_ERROR = 4,
  BMB_STATUS_DIVERGED = 5,
  BMB_STATUS_IO_ERROR = 6,
  BMB_STATUS_PANIC = 7,
} BmbStatus;

typedef struct BmbLedger BmbLedger;

// Memory bank with its own seeded random stream and a fixed feature width.
typedef struct BmbMemoryBank BmbMemoryBank;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next call on the same thread.
const char *bmb_last_error(void);

// Library version as a static NUL-terminated string.
const char *bmb_version(void);

// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum BmbStatus bmb_bank_new(size_t num_classes,
                            size_t capacity,
                            double beta,
                            size_t feature_dim,
                            uint64_t seed,
                            struct BmbMemoryBank **out);

// # Safety
// `bank` must come from `bmb_bank_new` and not be used afterwards. NULL is
// ignored.
void bmb_bank_free(struct BmbMemoryBank *bank);

// Offers one record. `source_view` is 0 for weak, 1 for strong.
// `accepted` (optional) receives whether the record was stored.
//
// # Safety
// `feature` must point to `feature_dim` doubles; pointers must be valid.
enum BmbStatus bmb_bank_enqueue(struct BmbMemoryBank *bank,
                                const double *feature,
                                size_t pseudo_label,
                                double confidence,
                                uint64_t step,
                                uint32_t source_view,
                                bool *accepted);

// Evicts one record; its label and step go to the optional outputs.
//
// # Safety
// Pointers must be valid or NULL.
enum BmbStatus bmb_bank_dequeue(struct BmbMemoryBank *bank, size_t *out_label, uint64_t *out_step);

// Draws `n` records by reversed sampling. Labels go to `out_labels` (length
// `n`), features to `out_features` (length `n * feature_dim`, may be NULL).
// `out_drawn` receives the number drawn: `n`, or 0 for an empty bank.
//
// # Safety
// Buffers must have the stated lengths.
enum BmbStatus bmb_bank_get(struct BmbMemoryBank *bank,
                            const size_t *estimated_counts,
                            size_t num_classes,
                            size_t n,
                            double lambda,
                            size_t *out_labels,
                            double *out_features,
                            size_t *out_drawn);

// Copies per-class record counts into `out` (length `num_classes`).
//
// # Safety
// `out` must hold `num_classes` entries.
enum BmbStatus bmb_bank_counts(const struct BmbMemoryBank *bank, size_t *out, size_t num_classes);

// # Safety
// `out` must be valid.
enum BmbStatus bmb_bank_len(const struct BmbMemoryBank *bank, size_t *out);

// Normalized entropy of class occupancy; `Empty` status for an empty bank.
//
// # Safety
// `out` must be valid.
enum BmbStatus bmb_bank_entropy(const struct BmbMemoryBank *bank, double *out);

// # Safety
// `out` must be valid.
enum BmbStatus bmb_ledger_new(size_t num_classes, struct BmbLedger **out);

// # Safety
// `ledger` must come from `bmb_ledger_new` and not be used afterwards.
void bmb_ledger_free(struct BmbLedger *ledger);

// # Safety
// `ledger` must be valid.
enum BmbStatus bmb_ledger_record(struct BmbLedger *ledger, uint64_t sample_id, size_t label);

// Raw counts when `clamp_min` is 0, otherwise each count raised to at least
// `clamp_min`.
//
// # Safety
// `out` must hold `num_classes` entries.
enum BmbStatus bmb_ledger_counts(const struct BmbLedger *ledger,
                                 size_t clamp_min,
                                 size_t *out,
                                 size_t num_classes);

// # Safety
// `out` must be valid.
enum BmbStatus bmb_ledger_min_count(const struct BmbLedger *ledger, size_t *out);

// Long-tailed class sizes into `out` (length `num_classes`).
//
// # Safety
// `out` must hold `num_classes` entries.
enum BmbStatus bmb_longtail_counts(size_t n1, double gamma, size_t num_classes, size_t *out);

// # Safety
// `counts` must hold `num_classes` entries; `out` must be valid.
enum BmbStatus bmb_labeled_weight(const size_t *counts,
                                  size_t num_classes,
                                  size_t class_idx,
                                  double alpha,
                                  double *out);

// # Safety
// `estimated_counts` must hold `num_classes` entries; `out` must be valid.
enum BmbStatus bmb_unlabeled_weight(const size_t *estimated_counts,
                                    size_t num_classes,
                                    size_t pseudo_label,
                                    double alpha,
                                    double *out);

// Validates a JSON run config and trains every seed into `out_dir`.
//
// # Safety
// Both arguments must be NUL-terminated UTF-8 strings.
enum BmbStatus bmb_train_run(const char *config_json, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BMB_H */

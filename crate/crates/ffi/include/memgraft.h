#ifndef MEMGRAFT_H
#define MEMGRAFT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status of a call. Zero is success.
 */
typedef enum MgStatus {
  MG_STATUS_OK = 0,
  MG_STATUS_NULL_POINTER = 1,
  MG_STATUS_INVALID_ARGUMENT = 2,
  MG_STATUS_IO = 3,
  MG_STATUS_FORMAT = 4,
  MG_STATUS_SHAPE = 5,
  MG_STATUS_CONFIG = 6,
  MG_STATUS_INVARIANT = 7,
  MG_STATUS_PANIC = 8,
} MgStatus;

/**
 * Opaque handle to a loaded memory bank.
 */
typedef struct MgBank MgBank;

typedef struct MgBankInfo {
  uint64_t entries;
  uint64_t d_mem;
  uint64_t max_order;
  /**
   * Size of the bank file in bytes.
   */
  uint64_t total_bytes;
} MgBankInfo;

/**
 * Result of one lookup. `order` is zero and `row` undefined on a miss.
 */
typedef struct MgMatch {
  bool hit;
  uint8_t order;
  uint32_t row;
} MgMatch;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next call on the same thread.
 */
const char *mg_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mg_version(void);

/**
 * Load a bank file. On success `*out` owns a handle.
 */
enum MgStatus mg_bank_open(const char *path, struct MgBank **out);

/**
 * Release a handle. Null is ignored.
 */
void mg_bank_free(struct MgBank *bank);

enum MgStatus mg_bank_info(const struct MgBank *bank, struct MgBankInfo *out);

/**
 * Longest match for the suffix of `context[0..len]`.
 */
enum MgStatus mg_bank_lookup(const struct MgBank *bank,
                             const uint32_t *context,
                             size_t len,
                             struct MgMatch *out);

/**
 * Lookups at every position of a token stream. `doc_starts` lists the
 * first index of each document and must begin with 0; pass `n_docs = 0`
 * for a single document. `out` must hold `n` entries.
 */
enum MgStatus mg_bank_batch_lookup(const struct MgBank *bank,
                                   const uint32_t *ids,
                                   size_t n,
                                   const size_t *doc_starts,
                                   size_t n_docs,
                                   struct MgMatch *out);

/**
 * Decode row `row` into `out[0..len]`; `len` must equal the bank's `d_mem`.
 */
enum MgStatus mg_bank_row(const struct MgBank *bank, uint32_t row, float *out, size_t len);

/**
 * Seeded hash of an id sequence, as used for synthetic embeddings.
 */
uint64_t mg_hash_ids(uint64_t seed, const uint32_t *ids, size_t len);

uint64_t mg_mix64(uint64_t x);

/**
 * Fallback table rows for every position of a token stream, position-major
 * with `n_orders · heads` entries per position. `out` must hold that many
 * times `n`.
 */
enum MgStatus mg_fallback_addresses(const size_t *orders,
                                    size_t n_orders,
                                    size_t heads,
                                    uint32_t table_size,
                                    uint64_t seed,
                                    const uint32_t *ids,
                                    size_t n,
                                    const size_t *doc_starts,
                                    size_t n_docs,
                                    uint32_t *out,
                                    size_t out_len);

/**
 * Linear CKA of two row-major matrices sharing `rows`.
 */
enum MgStatus mg_linear_cka(const double *x,
                            size_t rows,
                            size_t x_cols,
                            const double *y,
                            size_t y_cols,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MEMGRAFT_H */

#ifndef MRCKG_H
#define MRCKG_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum MrckgStatus {
  MRCKG_STATUS_OK = 0,
  MRCKG_STATUS_NULL_POINTER = 1,
  MRCKG_STATUS_INVALID_ARGUMENT = 2,
  MRCKG_STATUS_OUT_OF_RANGE = 3,
  MRCKG_STATUS_IO = 4,
  MRCKG_STATUS_PARSE = 5,
  MRCKG_STATUS_VALIDATION = 6,
  MRCKG_STATUS_NUMERIC = 7,
  MRCKG_STATUS_BUFFER_TOO_SMALL = 8,
  MRCKG_STATUS_PANIC = 9,
} MrckgStatus;

/**
 * Benchmark handle: a validated snapshot sequence with its modality store.
 */
typedef struct MrckgBenchmark MrckgBenchmark;

/**
 * Metric matrix handle, produced by training.
 */
typedef struct MrckgMatrix MrckgMatrix;

/**
 * Model handle loaded from a checkpoint directory.
 */
typedef struct MrckgModel MrckgModel;

/**
 * Metrics of one (model, test set) pair.
 */
typedef struct MrckgCell {
  double mrr;
  double hits1;
  double hits3;
  double hits10;
  uint64_t queries;
} MrckgCell;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mrckg_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes) and returns the full message length in bytes.
 * `buf` may be null to query the length.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes of writes.
 */
size_t mrckg_last_error(char *buf, size_t len);

/**
 * Loads a benchmark directory written by `mrckg bench build`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MrckgStatus mrckg_benchmark_load(const char *dir, struct MrckgBenchmark **out);

/**
 * Builds a synthetic benchmark in memory: an `entities`-node community graph
 * with correlated features, cut into `snapshots` snapshots. `strategy` is 0
 * (entity), 1 (higher) or 2 (equal).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum MrckgStatus mrckg_benchmark_build_synthetic(size_t entities,
                                                 size_t snapshots,
                                                 uint32_t strategy,
                                                 uint64_t seed,
                                                 struct MrckgBenchmark **out);

/**
 * # Safety
 * `bench` must be null or a handle from this library that was not freed yet.
 */
void mrckg_benchmark_free(struct MrckgBenchmark *bench);

/**
 * # Safety
 * `bench` must be a live handle (or null, which yields 0).
 */
size_t mrckg_benchmark_snapshot_count(const struct MrckgBenchmark *bench);

/**
 * Entity, relation and split sizes of snapshot `i`.
 *
 * # Safety
 * `bench` must be a live handle; each output pointer must be valid or null.
 */
enum MrckgStatus mrckg_benchmark_snapshot_sizes(const struct MrckgBenchmark *bench,
                                                size_t i,
                                                size_t *entities,
                                                size_t *train,
                                                size_t *valid,
                                                size_t *test);

/**
 * Loads a checkpoint directory (for a run: `<run>/s<i>/checkpoint`).
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MrckgStatus mrckg_model_load(const char *dir, struct MrckgModel **out);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
void mrckg_model_free(struct MrckgModel *model);

/**
 * # Safety
 * `model` must be a live handle (or null, which yields 0).
 */
size_t mrckg_model_entity_count(const struct MrckgModel *model);

/**
 * Writes the score of every tail entity for `(head, relation)` into
 * `scores[0..entity_count)`.
 *
 * # Safety
 * Handles must be live; `scores` must be valid for `len` writes.
 */
enum MrckgStatus mrckg_model_score_tails(const struct MrckgModel *model,
                                         const struct MrckgBenchmark *bench,
                                         uint32_t head,
                                         uint32_t relation,
                                         double *scores,
                                         size_t len);

/**
 * Filtered metrics of `model` on test_0 .. test_i. `cells` receives `i + 1`
 * entries.
 *
 * # Safety
 * Handles must be live; `cells` must be valid for `len` writes.
 */
enum MrckgStatus mrckg_model_evaluate(const struct MrckgModel *model,
                                      const struct MrckgBenchmark *bench,
                                      size_t i,
                                      struct MrckgCell *cells,
                                      size_t len);

/**
 * Trains over the whole sequence and writes the run directory `out_dir`.
 * `config_json` holds a training configuration (null or "" for defaults).
 *
 * # Safety
 * `bench` must be a live handle, strings NUL-terminated, `out` valid.
 */
enum MrckgStatus mrckg_train(const struct MrckgBenchmark *bench,
                             const char *config_json,
                             const char *out_dir,
                             struct MrckgMatrix **out);

/**
 * # Safety
 * `m` must be null or a live handle.
 */
void mrckg_matrix_free(struct MrckgMatrix *m);

/**
 * Cell `(i, j)`: model after snapshot i on test_j, defined for `j <= i`.
 *
 * # Safety
 * `m` must be a live handle and `cell` valid.
 */
enum MrckgStatus mrckg_matrix_get(const struct MrckgMatrix *m,
                                  size_t i,
                                  size_t j,
                                  struct MrckgCell *cell);

/**
 * Average MRR over the final row and backward transfer.
 *
 * # Safety
 * `m` must be a live handle; output pointers valid or null.
 */
enum MrckgStatus mrckg_matrix_summary(const struct MrckgMatrix *m,
                                      double *avg_mrr,
                                      double *bwt_out);

/**
 * Finite-difference check of every loss term on the toy model. Writes the
 * largest relative error and returns `MRCKG_STATUS_NUMERIC` if it is 1e-4 or
 * more.
 *
 * # Safety
 * `max_rel_error` must be valid or null.
 */
enum MrckgStatus mrckg_selfcheck_grad(uint64_t seed, double *max_rel_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MRCKG_H */

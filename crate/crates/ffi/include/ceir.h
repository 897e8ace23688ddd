#ifndef CEIR_H
#define CEIR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum CeirStatus {
  CEIR_STATUS_OK = 0,
  CEIR_STATUS_NULL_POINTER = 1,
  CEIR_STATUS_INVALID_ARGUMENT = 2,
  CEIR_STATUS_DIMENSION = 3,
  CEIR_STATUS_FORMAT = 4,
  CEIR_STATUS_IO = 5,
  CEIR_STATUS_LINEAGE = 6,
  CEIR_STATUS_NUMERICAL = 7,
  CEIR_STATUS_PANIC = 8,
} CeirStatus;

/**
 * Trained concept bottleneck (M × d0 projection).
 */
typedef struct CeirBottleneck CeirBottleneck;

/**
 * Row-major f32 matrix.
 */
typedef struct CeirMatrix CeirMatrix;

/**
 * Trained VAE.
 */
typedef struct CeirVae CeirVae;

/**
 * Clustering metrics in [0, 1] (ARI may be negative).
 */
typedef struct CeirMetrics {
  double nmi;
  double acc;
  double ari;
} CeirMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *ceir_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ceir_version(void);

/**
 * Copies `rows × cols` row-major values into a new matrix.
 *
 * # Safety
 * `data` must point to `rows * cols` floats; `out` must be writable.
 */
enum CeirStatus ceir_matrix_new(size_t rows,
                                size_t cols,
                                const float *data,
                                struct CeirMatrix **out);

/**
 * Reads a `.cemb` file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CeirStatus ceir_matrix_read(const char *path, struct CeirMatrix **out);

/**
 * Writes a `.cemb` file atomically.
 *
 * # Safety
 * `m` must be a live handle and `path` a NUL-terminated string.
 */
enum CeirStatus ceir_matrix_write(const struct CeirMatrix *m, const char *path);

/**
 * # Safety
 * `m` must be null or a live handle.
 */
size_t ceir_matrix_rows(const struct CeirMatrix *m);

/**
 * # Safety
 * `m` must be null or a live handle.
 */
size_t ceir_matrix_cols(const struct CeirMatrix *m);

/**
 * Borrowed pointer to the row-major values, valid while `m` lives.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
const float *ceir_matrix_data(const struct CeirMatrix *m);

/**
 * # Safety
 * `m` must be null or a handle not yet freed.
 */
void ceir_matrix_free(struct CeirMatrix *m);

/**
 * Concept similarity P (N × M) from image (N × d) and text (M × d) embeddings.
 *
 * # Safety
 * `image` and `text` must be live handles; `out` must be writable.
 */
enum CeirStatus ceir_similarity(const struct CeirMatrix *image,
                                const struct CeirMatrix *text,
                                bool l2_normalize,
                                struct CeirMatrix **out);

/**
 * Cubed alignment loss between concept activations and similarity.
 *
 * # Safety
 * `q` and `p` must be live handles; `out` must be writable.
 */
enum CeirStatus ceir_alignment_loss(const struct CeirMatrix *q,
                                    const struct CeirMatrix *p,
                                    double *out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CeirStatus ceir_bottleneck_load(const char *path, struct CeirBottleneck **out);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ceir_bottleneck_concepts(const struct CeirBottleneck *model);

/**
 * Concept activations Q = X·Wᵀ (N × M) for backbone features X (N × d0).
 *
 * # Safety
 * `model` and `features` must be live handles; `out` must be writable.
 */
enum CeirStatus ceir_bottleneck_project(const struct CeirBottleneck *model,
                                        const struct CeirMatrix *features,
                                        struct CeirMatrix **out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void ceir_bottleneck_free(struct CeirBottleneck *model);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CeirStatus ceir_vae_load(const char *path, struct CeirVae **out);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ceir_vae_input_dim(const struct CeirVae *model);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ceir_vae_latent_dim(const struct CeirVae *model);

/**
 * Posterior means (N × K) for concept vectors (N × M).
 *
 * # Safety
 * `model` and `q` must be live handles; `out` must be writable.
 */
enum CeirStatus ceir_vae_latent(const struct CeirVae *model,
                                const struct CeirMatrix *q,
                                struct CeirMatrix **out);

/**
 * Integrated-gradients importance of each of the `len` concept dimensions
 * of one concept vector, written to `importance` (length `len`).
 *
 * # Safety
 * `q` and `importance` must point to `len` doubles; `gap` may be null.
 */
enum CeirStatus ceir_vae_attribute(const struct CeirVae *model,
                                   const double *q,
                                   size_t len,
                                   size_t steps,
                                   double *importance,
                                   double *gap);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void ceir_vae_free(struct CeirVae *model);

/**
 * K-means with k-means++ seeding; writes one cluster index per row of `h`
 * to `assignments` and the final inertia to `inertia` (may be null).
 *
 * # Safety
 * `h` must be a live handle and `assignments` must hold `rows(h)` entries.
 */
enum CeirStatus ceir_kmeans(const struct CeirMatrix *h,
                            size_t k,
                            size_t restarts,
                            uint64_t seed,
                            size_t *assignments,
                            double *inertia);

/**
 * NMI, Hungarian-matched accuracy and ARI of `pred` against `truth`.
 *
 * # Safety
 * `pred` and `truth` must point to `n` entries; `out` must be writable.
 */
enum CeirStatus ceir_cluster_metrics(const size_t *pred,
                                     const size_t *truth,
                                     size_t n,
                                     struct CeirMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CEIR_H */

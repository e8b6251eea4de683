#ifndef SBCP_H
#define SBCP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum SbcpStatus {
  SBCP_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  SBCP_STATUS_NULL_POINTER = 1,
  /**
   * Bad configuration or argument value, including non-UTF-8 paths.
   */
  SBCP_STATUS_INVALID_ARGUMENT = 2,
  SBCP_STATUS_IO = 3,
  /**
   * Malformed or inconsistent `.sbcp`, checkpoint or metadata file.
   */
  SBCP_STATUS_FORMAT = 4,
  SBCP_STATUS_DIMENSION = 5,
  /**
   * Singular Gram matrix or a zero-norm vector.
   */
  SBCP_STATUS_DEGENERATE = 6,
  SBCP_STATUS_EMPTY_INPUT = 7,
  SBCP_STATUS_NUMERICAL = 8,
  /**
   * The caller's output buffer is too small.
   */
  SBCP_STATUS_BUFFER_TOO_SMALL = 9,
  SBCP_STATUS_PANIC = 10,
} SbcpStatus;

typedef enum SbcpModulation {
  SBCP_MODULATION_SCT = 0,
  SBCP_MODULATION_NONE = 1,
} SbcpModulation;

typedef enum SbcpEncoder {
  SBCP_ENCODER_SURROGATE = 0,
  SBCP_ENCODER_FROZEN = 1,
} SbcpEncoder;

/**
 * An `.sbcp` file loaded into memory.
 */
typedef struct SbcpDataset SbcpDataset;

/**
 * Prompt matrix plus everything needed to score with it.
 */
typedef struct SbcpModel SbcpModel;

/**
 * Training hyperparameters. Fill with [`sbcp_train_options_default`].
 */
typedef struct SbcpTrainOptions {
  size_t prompts;
  double lr;
  size_t batch_size;
  size_t epochs;
  double weight_decay;
  double lambda1;
  double lambda2;
  double lambda3;
  /**
   * An [`SbcpModulation`] value.
   */
  uint32_t modulation;
  double tau;
  size_t rank_c;
  double epsilon;
  uint64_t seed;
  /**
   * Training images per class; 0 uses every record.
   */
  size_t shots;
  /**
   * An [`SbcpEncoder`] value.
   */
  uint32_t encoder;
} SbcpTrainOptions;

typedef struct SbcpReport {
  double fpr95;
  double auroc;
  double id_accuracy;
  double threshold_at_95tpr;
  size_t n_id;
  size_t n_ood;
} SbcpReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL after a
 * successful call. Valid until the next call into the library on this
 * thread; do not free.
 */
const char *sbcp_last_error(void);

/**
 * Library version as a static string.
 */
const char *sbcp_version(void);

/**
 * Opens an `.sbcp` dataset with at least one record.
 *
 * # Safety
 * `path` must be NULL or a NUL-terminated string; `out` must be NULL or
 * writable.
 */
enum SbcpStatus sbcp_dataset_open(const char *path, struct SbcpDataset **out);

/**
 * # Safety
 * `ds` must be NULL or a handle from [`sbcp_dataset_open`], freed once.
 */
void sbcp_dataset_free(struct SbcpDataset *ds);

/**
 * Writes D, K, N and the number of local regions per record. Any output
 * pointer may be NULL.
 *
 * # Safety
 * `ds` must be a live dataset handle; non-NULL outputs must be writable.
 */
enum SbcpStatus sbcp_dataset_shape(const struct SbcpDataset *ds,
                                   size_t *dim,
                                   size_t *num_classes,
                                   size_t *num_records,
                                   size_t *num_regions);

/**
 * Default options for a label space of `num_classes`.
 *
 * # Safety
 * `out` must be NULL or writable.
 */
enum SbcpStatus sbcp_train_options_default(size_t num_classes, struct SbcpTrainOptions *out);

/**
 * Trains a prompt matrix on `train_set`. `options` may be NULL for defaults.
 * `frozen_text` is the class text-feature file, required when
 * `options->encoder` is `SBCP_ENCODER_FROZEN`, otherwise ignored.
 *
 * # Safety
 * Pointers must be NULL or valid for their types; `out` must be writable.
 */
enum SbcpStatus sbcp_model_train(const struct SbcpDataset *train_set,
                                 const struct SbcpTrainOptions *options,
                                 const char *frozen_text,
                                 struct SbcpModel **out);

/**
 * Loads a checkpoint and its `.json` sidecar. `frozen_text` overrides the
 * text-feature path recorded in the sidecar; pass NULL to keep it.
 *
 * # Safety
 * Pointers must be NULL or valid; `out` must be writable.
 */
enum SbcpStatus sbcp_model_load(const char *checkpoint,
                                const char *frozen_text,
                                struct SbcpModel **out);

/**
 * Writes the checkpoint and its `.json` sidecar.
 *
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum SbcpStatus sbcp_model_save(const struct SbcpModel *model, const char *path);

/**
 * # Safety
 * `model` must be NULL or a handle from this library, freed once.
 */
void sbcp_model_free(struct SbcpModel *model);

/**
 * Writes D and M. Either output may be NULL.
 *
 * # Safety
 * `model` must be a live handle; non-NULL outputs must be writable.
 */
enum SbcpStatus sbcp_model_shape(const struct SbcpModel *model, size_t *dim, size_t *prompts);

/**
 * Copies `W` row-major into `out` (`len >= D*M`).
 *
 * # Safety
 * `model` must be a live handle; `out` must hold `len` doubles.
 */
enum SbcpStatus sbcp_model_prompts(const struct SbcpModel *model, double *out, size_t len);

/**
 * Fractions of `f` inside and outside the prompt subspace:
 * `‖P f‖ / ‖f‖` and `‖(I - P) f‖ / ‖f‖`.
 *
 * # Safety
 * `model` must be a live handle; `feature` must hold `len` doubles.
 */
enum SbcpStatus sbcp_model_alignment(const struct SbcpModel *model,
                                     const double *feature,
                                     size_t len,
                                     double *parallel,
                                     double *orthogonal);

/**
 * GL-MCM score and predicted class for every record of `ds`, using its
 * class table. `scores` and `predictions` may be NULL; non-NULL buffers
 * must hold `len >= N` entries. `tau <= 0` uses the model's temperature.
 *
 * # Safety
 * Handles must be live; non-NULL buffers must hold `len` entries.
 */
enum SbcpStatus sbcp_model_score(const struct SbcpModel *model,
                                 const struct SbcpDataset *ds,
                                 double tau,
                                 double *scores,
                                 size_t *predictions,
                                 size_t len);

/**
 * FPR95, AUROC and ID accuracy on an ID / OOD pair. Class embeddings come
 * from `id_test`. `tau <= 0` uses the model's temperature.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum SbcpStatus sbcp_model_evaluate(const struct SbcpModel *model,
                                    const struct SbcpDataset *id_test,
                                    const struct SbcpDataset *ood_test,
                                    double tau,
                                    struct SbcpReport *out);

/**
 * Mann-Whitney AUROC, ID as the positive class, ties counted half.
 *
 * # Safety
 * Arrays must hold their stated lengths; `out` must be writable.
 */
enum SbcpStatus sbcp_auroc(const double *id_scores,
                           size_t n_id,
                           const double *ood_scores,
                           size_t n_ood,
                           double *out);

/**
 * FPR on OOD at the threshold keeping 95% of ID scores; also writes that
 * threshold to `threshold` unless it is NULL.
 *
 * # Safety
 * Arrays must hold their stated lengths; `out` must be writable.
 */
enum SbcpStatus sbcp_fpr95(const double *id_scores,
                           size_t n_id,
                           const double *ood_scores,
                           size_t n_ood,
                           double *out,
                           double *threshold);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SBCP_H */

#ifndef STRATFORMER_H
#define STRATFORMER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum StStatus {
  ST_STATUS_OK = 0,
  ST_STATUS_NULL_POINTER = 1,
  ST_STATUS_INVALID_ARGUMENT = 2,
  ST_STATUS_CONFIG = 3,
  ST_STATUS_PARSE = 4,
  ST_STATUS_IO = 5,
  ST_STATUS_NUMERIC = 6,
  ST_STATUS_BUFFER_TOO_SMALL = 7,
  ST_STATUS_PANIC = 8,
} StStatus;

// Labelled or unlabelled point cloud.
typedef struct StCloud StCloud;

// Segmentation model with 32-bit parameters.
typedef struct StModel StModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Why the most recent call on this thread failed, or null if it succeeded.
// The string stays valid until the next call on the same thread.
const char *st_last_error(void);

// Library version as a static NUL-terminated string.
const char *st_version(void);

// Builds a cloud from `n` positions (`n × 3`), `n × channels` features and
// optional labels (`labels` may be null).
enum StStatus st_cloud_new(const double *positions,
                           size_t n,
                           const double *features,
                           size_t channels,
                           const uint32_t *labels,
                           struct StCloud **out);

// Reads a text or binary cloud file.
enum StStatus st_cloud_read(const char *path, struct StCloud **out);

// Writes a cloud; the format follows the file extension.
enum StStatus st_cloud_write(const struct StCloud *cloud, const char *path);

// Generates a synthetic scene: `two_class`, `shapes` or `long_range`.
enum StStatus st_cloud_synth(const char *preset, uint64_t seed, struct StCloud **out);

enum StStatus st_cloud_len(const struct StCloud *cloud, size_t *out);

// Copies the labels into `out` (`len` entries). Fails with
// `ST_STATUS_INVALID_ARGUMENT` if the cloud has none.
enum StStatus st_cloud_labels(const struct StCloud *cloud, uint32_t *out, size_t len);

void st_cloud_free(struct StCloud *cloud);

// Fresh model from a named preset: `s3dis`, `scannet` or `toy`.
enum StStatus st_model_new(const char *preset, uint64_t seed, struct StModel **out);

// Fresh model from a TOML run configuration file.
enum StStatus st_model_from_config(const char *path, uint64_t seed, struct StModel **out);

enum StStatus st_model_num_classes(const struct StModel *model, size_t *out);

enum StStatus st_model_load(struct StModel *model, const char *path);

enum StStatus st_model_save(const struct StModel *model, const char *path);

// Row-major `N × num_classes` logits into `out` (`len` floats).
enum StStatus st_model_logits(const struct StModel *model,
                              const struct StCloud *cloud,
                              float *out,
                              size_t len);

// Predicted class per point into `out` (`len` entries).
enum StStatus st_model_predict(const struct StModel *model,
                               const struct StCloud *cloud,
                               uint32_t *out,
                               size_t len);

// Trains in place for `steps` steps on a labelled cloud. If `losses` is not
// null it receives one loss per step (`steps` floats).
enum StStatus st_model_train(struct StModel *model,
                             const struct StCloud *cloud,
                             size_t steps,
                             double lr,
                             uint64_t seed,
                             bool augment,
                             double *losses);

void st_model_free(struct StModel *model);

// Largest deviation between the attention kernel and the padded oracle over
// `trials` random instances.
enum StStatus st_oracle_compare(size_t trials, uint64_t seed, double *max_deviation);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STRATFORMER_H */

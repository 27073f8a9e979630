#ifndef DPLS_H
#define DPLS_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum DplsStatus {
  DPLS_STATUS_OK = 0,
  DPLS_STATUS_NULL_POINTER = 1,
  DPLS_STATUS_INVALID_ARGUMENT = 2,
  DPLS_STATUS_IO = 3,
  DPLS_STATUS_FORMAT = 4,
  DPLS_STATUS_EVAL = 5,
  DPLS_STATUS_PROPOSAL = 6,
  DPLS_STATUS_BUFFER_TOO_SMALL = 7,
  DPLS_STATUS_PANIC = 8,
} DplsStatus;

/**
 * Class table (raw ids, train ids, thing flags).
 */
typedef struct DplsClassMap DplsClassMap;

/**
 * Streaming LSTQ accumulator.
 */
typedef struct DplsEvaluator DplsEvaluator;

/**
 * One decoded `.bin` scan.
 */
typedef struct DplsScan DplsScan;

/**
 * Headline scores of an evaluator, all in `[0, 1]`.
 */
typedef struct DplsScores {
  double lstq;
  double s_assoc;
  double s_cls;
  double iou_th;
  double iou_st;
} DplsScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread. Valid until the next call
 * on the same thread; empty if nothing has failed yet.
 */
const char *dpls_last_error_message(void);

/**
 * `sqrt(s_cls * s_assoc)`.
 */
double dpls_lstq(double s_cls, double s_assoc);

/**
 * Built-in SemanticKITTI table. Never fails.
 */
struct DplsClassMap *dpls_class_map_semantic_kitti(void);

/**
 * Loads a class-map file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum DplsStatus dpls_class_map_load(const char *path, struct DplsClassMap **out);

/**
 * Number of train classes, or 0 for a null handle.
 *
 * # Safety
 * `map` must be null or a live handle.
 */
size_t dpls_class_map_num_classes(const struct DplsClassMap *map);

/**
 * # Safety
 * `map` must be null or a live handle.
 */
bool dpls_class_map_is_thing(const struct DplsClassMap *map, uint8_t train_id);

/**
 * # Safety
 * `map` must be null or a handle not yet freed.
 */
void dpls_class_map_free(struct DplsClassMap *map);

/**
 * Reads a `.bin` scan.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum DplsStatus dpls_scan_read(const char *path, struct DplsScan **out);

/**
 * Point count, or 0 for a null handle.
 *
 * # Safety
 * `scan` must be null or a live handle.
 */
size_t dpls_scan_len(const struct DplsScan *scan);

/**
 * Copies `x y z remission` rows into `out`, which holds `capacity` floats.
 *
 * # Safety
 * `scan` must be a live handle and `out` must hold `capacity` floats.
 */
enum DplsStatus dpls_scan_copy_points(const struct DplsScan *scan, float *out, size_t capacity);

/**
 * # Safety
 * `scan` must be null or a handle not yet freed.
 */
void dpls_scan_free(struct DplsScan *scan);

/**
 * Reads a `.label` file into raw semantic and instance ids.
 *
 * `count` receives the number of records. Pass null buffers to query the
 * count only.
 *
 * # Safety
 * `semantic` and `instance` must be null or hold `capacity` values each.
 */
enum DplsStatus dpls_labels_read(const char *path,
                                 uint16_t *semantic,
                                 uint16_t *instance,
                                 size_t capacity,
                                 size_t *count);

/**
 * Writes `n` packed label words.
 *
 * # Safety
 * `semantic` and `instance` must hold `n` values each.
 */
enum DplsStatus dpls_labels_write(const char *path,
                                  const uint16_t *semantic,
                                  const uint16_t *instance,
                                  size_t n);

/**
 * New evaluator over the classes of `map`. Returns null for a null map.
 *
 * # Safety
 * `map` must be null or a live handle.
 */
struct DplsEvaluator *dpls_evaluator_new(const struct DplsClassMap *map);

/**
 * Adds one scan of `n` points. Labels are train ids; 255 is ignore.
 *
 * # Safety
 * All four arrays must hold `n` values.
 */
enum DplsStatus dpls_evaluator_add_scan(struct DplsEvaluator *evaluator,
                                        const uint8_t *pred_semantic,
                                        const uint32_t *pred_instance,
                                        const uint8_t *gt_semantic,
                                        const uint32_t *gt_instance,
                                        size_t n);

/**
 * Later scans belong to a new sequence, so instance ids restart.
 *
 * # Safety
 * `evaluator` must be a live handle.
 */
enum DplsStatus dpls_evaluator_next_sequence(struct DplsEvaluator *evaluator);

/**
 * # Safety
 * `evaluator` must be a live handle and `out` writable.
 */
enum DplsStatus dpls_evaluator_scores(const struct DplsEvaluator *evaluator,
                                      struct DplsScores *out);

/**
 * # Safety
 * `evaluator` must be null or a handle not yet freed.
 */
void dpls_evaluator_free(struct DplsEvaluator *evaluator);

/**
 * Farthest point sampling over `n` xyz triples. Writes `min(k, n)` indices.
 *
 * # Safety
 * `points` must hold `3 * n` values and `out` `k` values.
 */
enum DplsStatus dpls_fps(const double *points, size_t n, size_t k, size_t *out, size_t *out_count);

/**
 * Segments a single scan with default proposal parameters.
 *
 * `xyz` holds `3 * n` sensor-frame coordinates, `semantic` the predicted
 * train id per point, and `offsets` the predicted `3 * n` center offsets.
 * Outputs are per-point train ids and instance ids (0 = none).
 *
 * # Safety
 * Inputs and outputs must hold the stated number of values.
 */
enum DplsStatus dpls_segment_scan(const struct DplsClassMap *map,
                                  const float *xyz,
                                  const uint8_t *semantic,
                                  const double *offsets,
                                  size_t n,
                                  uint8_t *out_semantic,
                                  uint32_t *out_instance);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DPLS_H */

#ifndef AVLOC_H
#define AVLOC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AvlocStatus {
  AVLOC_STATUS_OK = 0,
  AVLOC_STATUS_NULL_ARGUMENT = 1,
  AVLOC_STATUS_INVALID_UTF8 = 2,
  AVLOC_STATUS_INVALID_ARGUMENT = 3,
  AVLOC_STATUS_DEGENERATE_BOX = 4,
  AVLOC_STATUS_PARSE_ERROR = 5,
  AVLOC_STATUS_IO_ERROR = 6,
  AVLOC_STATUS_PANIC = 7,
} AvlocStatus;

/**
 * A pipeline bound to a replay store.
 */
typedef struct AvlocEngine AvlocEngine;

/**
 * Box corners in pixels, `(x1, y1)` top-left.
 */
typedef struct AvlocBox {
  double x1;
  double y1;
  double x2;
  double y2;
} AvlocBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The caller
 * owns the returned string.
 */
char *avloc_last_error_message(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void avloc_string_free(char *s);

/**
 * Clamps `raw` into a `width` x `height` image and checks it is non-empty.
 *
 * # Safety
 * `out` must be null or valid for writes.
 */
enum AvlocStatus avloc_box_validate(struct AvlocBox raw,
                                    uint32_t width,
                                    uint32_t height,
                                    struct AvlocBox *out);

/**
 * # Safety
 * `out` must be null or valid for writes.
 */
enum AvlocStatus avloc_iou(struct AvlocBox a, struct AvlocBox b, double *out);

/**
 * Shifts the box by `(dx, dy)` and each side by its own offset.
 *
 * # Safety
 * `out` must be null or valid for writes.
 */
enum AvlocStatus avloc_box_delta(struct AvlocBox b,
                                 double dx,
                                 double dy,
                                 double d_l,
                                 double d_r,
                                 double d_t,
                                 double d_b,
                                 uint32_t width,
                                 uint32_t height,
                                 struct AvlocBox *out);

/**
 * Grows every side by `a`; negative `a` shrinks.
 *
 * # Safety
 * `out` must be null or valid for writes.
 */
enum AvlocStatus avloc_box_expand_shrink(struct AvlocBox b,
                                         double a,
                                         uint32_t width,
                                         uint32_t height,
                                         struct AvlocBox *out);

/**
 * # Safety
 * `out` must be null or valid for writes.
 */
enum AvlocStatus avloc_box_recenter(struct AvlocBox b,
                                    double cx,
                                    double cy,
                                    uint32_t width,
                                    uint32_t height,
                                    struct AvlocBox *out);

/**
 * Extracts and repairs a model reply for `stage` (`gen_loc`, `gen_aud`,
 * `gen_aud_multi`, `analysis`, `anchors` or `refine`). Writes
 * `{"reply": ..., "repair_notes": [...]}`.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out_json` must be null
 * or valid for writes.
 */
enum AvlocStatus avloc_parse_reply(const char *stage, const char *raw, char **out_json);

/**
 * Builds an engine answering from the replay store at `store_path`.
 * `config_json` holds pipeline settings (`n`, `tau_av`, `variant`, ...);
 * null means defaults.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be null or
 * valid for writes.
 */
enum AvlocStatus avloc_engine_new_replay(const char *config_json,
                                         const char *store_path,
                                         struct AvlocEngine **out);

/**
 * Runs one manifest line, resolving media paths against `base_dir`, and
 * writes the result record as JSON. A sample whose stages failed still
 * returns `Ok`; its `status` field says `failed`.
 *
 * # Safety
 * `engine` must come from [`avloc_engine_new_replay`]; strings must be null
 * or NUL-terminated; `out_json` must be null or valid for writes.
 */
enum AvlocStatus avloc_engine_run_sample(const struct AvlocEngine *engine,
                                         const char *manifest_line,
                                         const char *base_dir,
                                         char **out_json);

/**
 * # Safety
 * `engine` must be null or come from [`avloc_engine_new_replay`], freed once.
 */
void avloc_engine_free(struct AvlocEngine *engine);

/**
 * Scores a results file against a manifest file with default thresholds
 * and writes the reports as JSON.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out_json` must be null
 * or valid for writes.
 */
enum AvlocStatus avloc_evaluate(const char *results_path,
                                const char *manifest_path,
                                char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AVLOC_H */

/* C ABI for the adcal calibration library. Generated by cbindgen. */

#ifndef ADCAL_H
#define ADCAL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible function.
 */
typedef enum AdcalStatus {
  ADCAL_STATUS_OK = 0,
  ADCAL_STATUS_NULL_ARGUMENT = 1,
  ADCAL_STATUS_UTF8 = 2,
  ADCAL_STATUS_IO = 3,
  ADCAL_STATUS_PARSE = 4,
  ADCAL_STATUS_INVALID = 5,
  ADCAL_STATUS_PANIC = 6,
} AdcalStatus;

/**
 * Loaded annotations plus dataset meta.
 */
typedef struct AdcalAnnotations AdcalAnnotations;

/**
 * A fitted calibrator bank (J class maps + 4 variance maps).
 */
typedef struct AdcalBank AdcalBank;

/**
 * Loaded, validated predictions.
 */
typedef struct AdcalPredictions AdcalPredictions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; do not free.
 */
const char *adcal_version(void);

/**
 * Message for the most recent error on this thread; valid until the next
 * failing call. Do not free.
 */
const char *adcal_last_error_message(void);

/**
 * Free a string returned through an out parameter.
 *
 * # Safety
 * `s` must have been returned by this library and not freed before.
 */
void adcal_string_free(char *s);

/**
 * Load and validate an annotations file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum AdcalStatus adcal_annotations_load(const char *path, struct AdcalAnnotations **out);

/**
 * # Safety
 * `ptr` must come from [`adcal_annotations_load`] and not be freed twice.
 */
void adcal_annotations_free(struct AdcalAnnotations *ptr);

/**
 * Number of images in a loaded annotation set.
 *
 * # Safety
 * `ptr` must be a live handle.
 */
size_t adcal_annotations_num_images(const struct AdcalAnnotations *ptr);

/**
 * Load and validate a predictions file against the annotation set's meta.
 *
 * # Safety
 * Pointer arguments must be valid; `out` receives an owned handle.
 */
enum AdcalStatus adcal_predictions_load(const char *path,
                                        const struct AdcalAnnotations *annotations,
                                        struct AdcalPredictions **out);

/**
 * # Safety
 * `ptr` must come from a predictions-producing call and not be freed twice.
 */
void adcal_predictions_free(struct AdcalPredictions *ptr);

/**
 * Number of predictions held by the handle.
 *
 * # Safety
 * `ptr` must be a live handle.
 */
size_t adcal_predictions_len(const struct AdcalPredictions *ptr);

/**
 * Serialize predictions to the canonical JSON text.
 *
 * # Safety
 * `ptr` must be live; `out_json` receives an owned string.
 */
enum AdcalStatus adcal_predictions_to_json(const struct AdcalPredictions *ptr, char **out_json);

/**
 * Run the full evaluation; the metrics report comes back as JSON.
 *
 * `options_json` may be NULL for defaults, or a JSON object with any of
 * `min_iou`, `gamma`, `var_floor`, `zero_iou_guard`, `min_certainty`,
 * `weights`, `per_image`.
 *
 * # Safety
 * Handles must be live; `out_json` receives an owned string.
 */
enum AdcalStatus adcal_evaluate_json(const struct AdcalAnnotations *annotations,
                                     const struct AdcalPredictions *predictions,
                                     const char *options_json,
                                     char **out_json);

/**
 * Fit the J + 4 isotonic calibrators on a validation split.
 *
 * # Safety
 * Handles must be live; `out` receives an owned handle.
 */
enum AdcalStatus adcal_fit_calibrators(const struct AdcalAnnotations *annotations,
                                       const struct AdcalPredictions *predictions,
                                       const char *options_json,
                                       struct AdcalBank **out);

/**
 * # Safety
 * `ptr` must come from a bank-producing call and not be freed twice.
 */
void adcal_bank_free(struct AdcalBank *ptr);

/**
 * Serialize a calibrator bank to its JSON file format.
 *
 * # Safety
 * `ptr` must be live; `out_json` receives an owned string.
 */
enum AdcalStatus adcal_bank_to_json(const struct AdcalBank *ptr, char **out_json);

/**
 * Parse a calibrator bank from its JSON file format.
 *
 * # Safety
 * `json` must be NUL-terminated; `out` receives an owned handle.
 */
enum AdcalStatus adcal_bank_from_json(const char *json, struct AdcalBank **out);

/**
 * Apply a calibrator bank: class probabilities and variances change, means
 * and certainties stay untouched.
 *
 * # Safety
 * Handles must be live; `out` receives an owned handle.
 */
enum AdcalStatus adcal_bank_apply(const struct AdcalBank *bank,
                                  const struct AdcalPredictions *predictions,
                                  struct AdcalPredictions **out);

/**
 * Generate a synthetic dataset from a [`SimulationConfig`] JSON. The
 * annotations file text and the latent-truth file text come back separately.
 *
 * # Safety
 * `config_json` must be NUL-terminated; out parameters receive owned
 * strings.
 */
enum AdcalStatus adcal_simulate_json(const char *config_json,
                                     char **out_annotations_json,
                                     char **out_latent_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADCAL_H */

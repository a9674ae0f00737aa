#ifndef CFX_H
#define CFX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CfxReportFormat {
  CFX_REPORT_FORMAT_JSON = 0,
  CFX_REPORT_FORMAT_CSV = 1,
  CFX_REPORT_FORMAT_HTML = 2,
} CfxReportFormat;

typedef enum CfxStatus {
  CFX_STATUS_OK = 0,
  CFX_STATUS_NULL_POINTER = 1,
  CFX_STATUS_INVALID_UTF8 = 2,
  CFX_STATUS_INVALID_ARGUMENT = 3,
  CFX_STATUS_DATA_ERROR = 4,
  CFX_STATUS_MODEL_ERROR = 5,
  CFX_STATUS_EXPLAIN_ERROR = 6,
  CFX_STATUS_PANIC = 7,
} CfxStatus;

/**
 * Opaque handle: a loaded dataset split and the model to explain.
 */
typedef struct CfxProject CfxProject;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string.
 */
const char *cfx_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next cfx call on the same thread.
 */
const char *cfx_last_error(void);

/**
 * Load data, split it and prepare the model described by `spec_json`
 * (same shape as the service's session request).
 *
 * # Safety
 * `spec_json` must be a valid NUL-terminated string and `out` a valid
 * pointer.
 */
enum CfxStatus cfx_project_open(const char *spec_json, struct CfxProject **out);

/**
 * # Safety
 * `project` must be null or a handle from `cfx_project_open` not yet freed.
 */
void cfx_project_free(struct CfxProject *project);

/**
 * Number of rows in the test partition.
 *
 * # Safety
 * `project` must be a live handle and `out` a valid pointer.
 */
enum CfxStatus cfx_project_test_count(const struct CfxProject *project, size_t *out);

/**
 * Explain test row `observation`. `config_json` holds run-config overrides
 * and may be null. The explanation is written to `*out_json` as JSON.
 *
 * # Safety
 * Pointers must be valid; `config_json` may be null.
 */
enum CfxStatus cfx_explain(const struct CfxProject *project,
                           size_t observation,
                           const char *config_json,
                           uint64_t seed,
                           char **out_json);

/**
 * Explain an observation given as comma-separated raw values.
 *
 * # Safety
 * Pointers must be valid; `config_json` may be null.
 */
enum CfxStatus cfx_explain_values(const struct CfxProject *project,
                                  const char *values_csv,
                                  const char *config_json,
                                  uint64_t seed,
                                  char **out_json);

/**
 * Batch evaluation over the test partition, rendered as a report.
 *
 * # Safety
 * Pointers must be valid; `config_json` may be null.
 */
enum CfxStatus cfx_batch(const struct CfxProject *project,
                         const char *config_json,
                         enum CfxReportFormat format,
                         char **out_text);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void cfx_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CFX_H */

#ifndef CAREFLOW_H
#define CAREFLOW_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CfStatus {
  CF_STATUS_OK = 0,
  CF_STATUS_NULL_ARGUMENT = 1,
  CF_STATUS_INVALID_UTF8 = 2,
  CF_STATUS_PARSE = 3,
  CF_STATUS_VALIDATION = 4,
  CF_STATUS_NOT_FOUND = 5,
  CF_STATUS_INTERNAL = 6,
} CfStatus;

typedef enum CfWorld {
  CF_WORLD_OPEN = 0,
  CF_WORLD_CLOSED = 1,
} CfWorld;

/**
 * Opaque engine handle: a care graph, guideline registry and code map.
 */
typedef struct CfEngine CfEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Engine over the bundled ovarian diagnostic graph and guideline set.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage.
 */
enum CfStatus cf_engine_new_bundled(struct CfEngine **out);

/**
 * Engine from graph, registry and code-map JSON documents. Documents with
 * validation errors are refused with `Validation`.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum CfStatus cf_engine_load(const char *graph_json,
                             const char *registry_json,
                             const char *code_map_json,
                             struct CfEngine **out);

/**
 * # Safety
 * `engine` must come from this library and not be used afterwards. Null is
 * ignored.
 */
void cf_engine_free(struct CfEngine *engine);

/**
 * Validation issues of the engine's assets as a JSON array.
 *
 * # Safety
 * `engine` must be a live handle; `out` must be writable.
 */
enum CfStatus cf_engine_validate(const struct CfEngine *engine, char **out);

/**
 * Medical-necessity determination for `code` as JSON. `as_of` is an
 * optional `YYYY-MM-DD` date; null means the record's latest date.
 *
 * # Safety
 * `engine` must be a live handle; strings NUL-terminated; `out` writable.
 */
enum CfStatus cf_determine(const struct CfEngine *engine,
                           const char *patient_json,
                           const char *code,
                           const char *as_of_date,
                           enum CfWorld world,
                           char **out);

/**
 * CPT code (as `cpt:NNNNN`) for a procedure spec given as JSON.
 *
 * # Safety
 * `engine` must be a live handle; strings NUL-terminated; `out` writable.
 */
enum CfStatus cf_select_cpt(const struct CfEngine *engine, const char *spec_json, char **out);

/**
 * Ranked next-step recommendations, annotated with determinations, as JSON.
 *
 * # Safety
 * `engine` must be a live handle; strings NUL-terminated; `out` writable.
 */
enum CfStatus cf_next_steps(const struct CfEngine *engine,
                            const char *patient_json,
                            const char *as_of_date,
                            enum CfWorld world,
                            char **out);

/**
 * Canonical text of a criteria expression. Syntax errors return `Parse`
 * with the line and column in the error message.
 *
 * # Safety
 * `rule` must be NUL-terminated; `out` writable.
 */
enum CfStatus cf_rule_canonicalize(const char *rule, char **out);

/**
 * Runs a scenario document. Asset references must be `bundled:` names or
 * inline documents. Writes the result JSON and the audit export.
 *
 * # Safety
 * `scenario_json` must be NUL-terminated; both outs writable.
 */
enum CfStatus cf_run_scenario(const char *scenario_json, char **result_out, char **audit_out);

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *cf_last_error_message(void);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards. Null is
 * ignored.
 */
void cf_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAREFLOW_H */

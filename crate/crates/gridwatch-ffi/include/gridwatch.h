#ifndef GRIDWATCH_H
#define GRIDWATCH_H

/* Generated by cbindgen from gridwatch-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum GwStatus {
  GW_STATUS_OK = 0,
  GW_STATUS_NULL_ARGUMENT = 1,
  GW_STATUS_INVALID_UTF8 = 2,
  GW_STATUS_PARSE_ERROR = 3,
  GW_STATUS_VALIDATION_ERROR = 4,
  GW_STATUS_INTERNAL = 5,
} GwStatus;

/**
 * Inspection engine handle: rules, connection table and alert sink.
 */
typedef struct GwEngine GwEngine;

/**
 * Compiled rule set handle.
 */
typedef struct GwRules GwRules;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or NULL.
 * The pointer stays valid until the next failing call on the thread.
 */
const char *gw_last_error(void);

/**
 * Compile a rule document from model and configuration JSON.
 *
 * # Safety
 * `gim_json` and `config_json` must be NUL-terminated strings; `out` must
 * be a valid pointer. On success `*out` owns a new handle, released with
 * `gw_rules_free`.
 */
enum GwStatus gw_rules_compile(const char *gim_json, const char *config_json, struct GwRules **out);

/**
 * Parse and verify an exported rule document.
 *
 * # Safety
 * `document` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GwStatus gw_rules_import(const char *document, struct GwRules **out);

/**
 * Serialize a rule handle to its canonical document.
 *
 * # Safety
 * `rules` must be a live handle from this library; `out` must be valid.
 * The returned string is released with `gw_string_free`.
 */
enum GwStatus gw_rules_export(const struct GwRules *rules, char **out);

/**
 * Release a rule handle.
 *
 * # Safety
 * `rules` must come from this library and not be freed twice.
 */
void gw_rules_free(struct GwRules *rules);

/**
 * Create an engine bound to a rule set.
 *
 * # Safety
 * `rules` must be a live handle; `out` must be valid. The rules are
 * copied, so the handle may be freed afterwards.
 */
enum GwStatus gw_engine_new(const struct GwRules *rules,
                            bool assume_started,
                            struct GwEngine **out);

/**
 * Inspect one Ethernet frame. `out_alerts` receives the number of alerts
 * this packet raised.
 *
 * # Safety
 * `engine` must be a live handle, `data` must point to `len` readable
 * bytes, and `out_alerts` must be valid or NULL.
 */
enum GwStatus gw_engine_inspect(struct GwEngine *engine,
                                uint64_t ts_sec,
                                uint32_t ts_nsec,
                                const uint8_t *data,
                                uintptr_t len,
                                uintptr_t *out_alerts);

/**
 * Drain alerts emitted since the last drain, as one JSON record per line.
 *
 * # Safety
 * `engine` must be a live handle and `out` valid. The returned string is
 * released with `gw_string_free`.
 */
enum GwStatus gw_engine_drain_alerts(struct GwEngine *engine, char **out);

/**
 * Release an engine handle.
 *
 * # Safety
 * `engine` must come from this library and not be freed twice.
 */
void gw_engine_free(struct GwEngine *engine);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void gw_string_free(char *s);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* GRIDWATCH_H */

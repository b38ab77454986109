#ifndef HAM_LEVY_H
#define HAM_LEVY_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum HlStatus {
  HL_STATUS_OK = 0,
  HL_STATUS_NULL_POINTER = 1,
  HL_STATUS_INVALID_UTF8 = 2,
  HL_STATUS_CONFIG = 3,
  HL_STATUS_DOMAIN = 4,
  HL_STATUS_NUMERIC = 5,
  HL_STATUS_RESOURCE = 6,
  HL_STATUS_UNSUPPORTED = 7,
  HL_STATUS_IO = 8,
  HL_STATUS_NOT_FOUND = 9,
  HL_STATUS_PANIC = 10,
} HlStatus;

// Experiment verdict; the values match the CLI exit codes.
typedef enum HlVerdict {
  HL_VERDICT_PASS = 0,
  HL_VERDICT_FAIL = 2,
  HL_VERDICT_INCONCLUSIVE = 3,
} HlVerdict;

// Parsed experiment configuration (opaque).
typedef struct HlConfig HlConfig;

// Finished experiment report (opaque).
typedef struct HlReport HlReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *hl_last_error(void);

// Library version, a static string.
const char *hl_version(void);

// Parses and validates config text. On success `*out` owns a new handle.
enum HlStatus hl_config_parse(const char *text, struct HlConfig **out);

enum HlStatus hl_config_set_seed(struct HlConfig *cfg, uint64_t seed);

// Sets the worker count; 0 means the global thread pool.
enum HlStatus hl_config_set_workers(struct HlConfig *cfg, size_t workers);

void hl_config_free(struct HlConfig *cfg);

// Runs the configured experiment. On success `*out` owns a new report handle.
enum HlStatus hl_run(const struct HlConfig *cfg, struct HlReport **out);

enum HlStatus hl_report_verdict(const struct HlReport *rep, enum HlVerdict *out);

// First value of the named statistic; `NotFound` if absent.
enum HlStatus hl_report_value(const struct HlReport *rep, const char *statistic, double *out);

// CSV body (no timestamp line). Free with `hl_string_free`.
enum HlStatus hl_report_csv(const struct HlReport *rep, char **out);

// JSON report with the config embedded. Free with `hl_string_free`.
enum HlStatus hl_report_json(const struct HlReport *rep, char **out);

void hl_report_free(struct HlReport *rep);

// Preset table as printed by `ham-levy list-presets`. Free with `hl_string_free`.
enum HlStatus hl_list_presets(char **out);

void hl_string_free(char *s);

// ‖G_t‖_{L^p} of the wave kernel.
enum HlStatus hl_wave_kernel_lp_norm(double t, double p, double *out);

// Normalizing constant of the Riesz kernel R_{1,α}.
enum HlStatus hl_riesz_constant(double alpha, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HAM_LEVY_H */

#ifndef UQMD_H
#define UQMD_H

/* C interface to the model-discovery pipeline. All entry points return a
 * status code; on failure uqmd_last_error() describes the problem for the
 * calling thread. Strings returned through char** are heap-allocated and
 * must be released with uqmd_string_free(). */

#include <stdint.h>

#if defined(_WIN32)
#define UQMD_API __declspec(dllexport)
#else
#define UQMD_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum uqmd_status {
  UQMD_OK = 0,
  UQMD_ERR_CONFIG = 2,  /* bad config, bad input data, bad arguments */
  UQMD_ERR_NUMERIC = 3, /* numerical failure while fitting or sampling */
  UQMD_ERR_STAGE = 4    /* missing stage artifacts, I/O, internal errors */
} uqmd_status;

typedef struct uqmd_config uqmd_config;

UQMD_API const char* uqmd_version(void);

/* Message from the most recent failing call on this thread. */
UQMD_API const char* uqmd_last_error(void);

/* Fresh config with built-in defaults. */
UQMD_API uqmd_status uqmd_config_default(uqmd_config** out);

/* Named preset ("treloar", "cardiac-synthetic", "cardiac-experimental",
 * "desk-isotropic", "desk-calibration"). */
UQMD_API uqmd_status uqmd_config_preset(const char* name, uqmd_config** out);

/* Merge JSON settings onto the current values. Unknown keys are errors. */
UQMD_API uqmd_status uqmd_config_load(uqmd_config* cfg, const char* json_text);
UQMD_API uqmd_status uqmd_config_load_file(uqmd_config* cfg, const char* path);

UQMD_API uqmd_status uqmd_config_set_seed(uqmd_config* cfg, uint64_t seed);
UQMD_API uqmd_status uqmd_config_set_out_dir(uqmd_config* cfg, const char* dir);
UQMD_API uqmd_status uqmd_config_set_threads(uqmd_config* cfg, int threads);
UQMD_API uqmd_status uqmd_config_out_dir(const uqmd_config* cfg, char** out_dir);
UQMD_API uqmd_status uqmd_config_to_json(const uqmd_config* cfg, char** out_text);
UQMD_API void uqmd_config_free(uqmd_config* cfg);

/* Full discovery (GP fit, flow distillation, sensitivity reduction,
 * refinement, metrics). stage narrows the run to "gp", "distill", "sobol"
 * or "refine"; NULL or "all" runs everything. Narrow stages read their
 * prerequisites from the run directory. */
UQMD_API uqmd_status uqmd_discover(const uqmd_config* cfg, const char* stage);

/* Posterior fit of a fixed model form: GP plus distillation, no reduction. */
UQMD_API uqmd_status uqmd_calibrate(const uqmd_config* cfg);

/* Recompute fit metrics for an existing run directory; returns the same
 * JSON that is written to metrics.json. */
UQMD_API uqmd_status uqmd_metrics(const char* run_dir, char** out_json);

/* Write per-function curve, parameter and sensitivity CSVs under
 * <run_dir>/plots. */
UQMD_API uqmd_status uqmd_export_plots(const char* run_dir);

UQMD_API void uqmd_string_free(char* text);

#ifdef __cplusplus
}
#endif

#endif /* UQMD_H */

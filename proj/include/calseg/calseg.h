/* C API of the calseg pipeline. All functionality is reachable through an
 * opaque run handle; functions return a status code and keep a human-readable
 * message retrievable via calseg_run_last_error(). */

#ifndef CALSEG_CALSEG_H
#define CALSEG_CALSEG_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum calseg_status {
    CALSEG_OK = 0,
    CALSEG_INVALID_ARGUMENT = 1,
    CALSEG_IO_ERROR = 2,
    CALSEG_STATE_ERROR = 3, /* missing prerequisite artifact, wrong stage */
    CALSEG_NUMERIC_ERROR = 4,
    CALSEG_INTERNAL_ERROR = 5
} calseg_status;

typedef struct calseg_run calseg_run;

const char* calseg_version(void);

calseg_status calseg_run_create(calseg_run** out_run);
void calseg_run_destroy(calseg_run* run);

/* Message describing the most recent failure on this handle; empty string if
 * the last call succeeded. The pointer stays valid until the next call on the
 * same handle. */
const char* calseg_run_last_error(const calseg_run* run);

/* Configuration: load a key=value file, then apply individual overrides.
 * Unknown keys are rejected. */
calseg_status calseg_run_load_config(calseg_run* run, const char* path);
calseg_status calseg_run_set(calseg_run* run, const char* key, const char* value);

/* Fully resolved configuration echo. Writes up to buffer_size bytes
 * (NUL-terminated); *needed receives the full length including the NUL. */
calseg_status calseg_run_config_text(calseg_run* run, char* buffer, size_t buffer_size,
                                     size_t* needed);

/* Documented schema of every config key with its default. Static storage. */
const char* calseg_config_schema(void);

/* Pipeline stages. Artifacts land in the configured out_dir. */
calseg_status calseg_run_generate(calseg_run* run, int overwrite);
calseg_status calseg_run_train_source(calseg_run* run);
calseg_status calseg_run_select_source(calseg_run* run);
calseg_status calseg_run_train_valuenet(calseg_run* run);
calseg_status calseg_run_adapt(calseg_run* run);

/* Evaluates a checkpoint on one dataset split; writes metrics, the per-class
 * IoU table and the reliability diagram under <out_dir>/eval/<name>/. */
calseg_status calseg_run_evaluate(calseg_run* run, const char* checkpoint_path,
                                  const char* split, const char* name);

/* Aggregates all runs below runs_root into <runs_root>/report/. */
calseg_status calseg_run_report(calseg_run* run, const char* runs_root);

#ifdef __cplusplus
}
#endif

#endif /* CALSEG_CALSEG_H */

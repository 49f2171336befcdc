/* C interface for the vqcd continual diffusion pipeline.
 *
 * Maintained by hand alongside crates/ffi/src/lib.rs; the Rust side is the
 * source of truth.
 *
 * Conventions:
 *   - functions return VQCD_OK (0) or a nonzero status code; the message
 *     for the most recent failure on the calling thread is available from
 *     vqcd_last_error_message()
 *   - char* results are owned by the caller and released with
 *     vqcd_string_free(); vqcd_version() is static and must not be freed
 *   - handles are released by exactly one matching *_free call
 */

#ifndef VQCD_H
#define VQCD_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

enum {
  VQCD_OK = 0,
  VQCD_ERR_NULL_ARGUMENT = 1,
  VQCD_ERR_INVALID_UTF8 = 2,
  VQCD_ERR_CONFIG = 3,
  VQCD_ERR_IO = 4,
  VQCD_ERR_RUNTIME = 5,
};

/* Opaque closed-loop policy over a finished run's artifacts. */
typedef struct VqcdAgent VqcdAgent;

/* Static version string; do not free. */
const char *vqcd_version(void);

/* Most recent error message on this thread, or NULL. Caller frees. */
char *vqcd_last_error_message(void);

/* Release a string allocated by this library. NULL is a no-op. */
void vqcd_string_free(char *s);

/* Default pipeline configuration as pretty-printed JSON. Caller frees. */
char *vqcd_default_config_json(void);

/* Generate an offline dataset.
 *   task_json: TaskSpec JSON object
 *   mix:       quality:fraction pairs, e.g. "expert:0.5,random:0.5"
 *   out_path:  dataset file to write
 */
int vqcd_gen_data(const char *task_json, const char *mix, uint64_t episodes,
                  uint64_t seed, const char *out_path);

/* Run the full pipeline described by a config JSON document. */
int vqcd_run_pipeline(const char *config_json);

/* Re-evaluate saved artifacts with `rollouts` episodes per task (0 keeps
 * the config value). Returns the summary JSON or NULL. Caller frees. */
char *vqcd_evaluate_json(const char *config_json, uint64_t rollouts);

/* Load an agent for one task of a finished run. NULL on failure. */
VqcdAgent *vqcd_agent_load(const char *config_json, size_t task_index,
                           uint64_t seed);

/* One closed-loop action from the current raw state. `action_out` must
 * hold `action_cap` floats; the true action length lands in *action_len
 * when non-NULL. */
int vqcd_agent_act(VqcdAgent *agent, const float *state, size_t state_len,
                   float *action_out, size_t action_cap, size_t *action_len);

/* Release an agent handle. NULL is a no-op. */
void vqcd_agent_free(VqcdAgent *agent);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* VQCD_H */

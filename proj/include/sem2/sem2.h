/* C API for the sem2 shared library: opaque handles plus status codes.
 * All functions return SEM2_OK on success; on failure the thread-local
 * message from sem2_last_error() describes the problem. */
#ifndef SEM2_SEM2_H
#define SEM2_SEM2_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum sem2_status {
    SEM2_OK = 0,
    SEM2_ERR_USAGE = 1,    /* bad arguments, config, or missing files */
    SEM2_ERR_NUMERIC = 2,  /* non-finite values during training/inference */
    SEM2_ERR_STATE = 3,    /* API misuse, e.g. stepping a finished episode */
    SEM2_ERR_INTERNAL = 4
} sem2_status;

const char* sem2_version(void);
/* Message for the most recent failure on this thread; never NULL. */
const char* sem2_last_error(void);

/* ---- environment ---- */

typedef struct sem2_env sem2_env;

typedef enum sem2_termination {
    SEM2_TERM_NONE = 0,
    SEM2_TERM_OUT_LANE = 1,
    SEM2_TERM_COLLISION = 2,
    SEM2_TERM_TIMEOUT = 3
} sem2_termination;

/* config_json: same schema as the CLI config's "env" section; NULL for
 * defaults. The handle must be released with sem2_env_destroy. */
sem2_status sem2_env_create(const char* config_json, sem2_env** out);
void sem2_env_destroy(sem2_env* env);

sem2_status sem2_env_reset(sem2_env* env, uint64_t seed, const char* layout_or_null);
sem2_status sem2_env_step(sem2_env* env, double throttle, double steer);

/* Valid after a reset/step. Image buffers are H*W*3 interleaved RGB. */
sem2_status sem2_env_image_shape(const sem2_env* env, int* h, int* w, int* c);
sem2_status sem2_env_observation(const sem2_env* env, uint8_t* buf, size_t len);
sem2_status sem2_env_mask(const sem2_env* env, uint8_t* buf, size_t len);
sem2_status sem2_env_reward(const sem2_env* env, double* out);
sem2_status sem2_env_termination(const sem2_env* env, int* out);
/* x, y, yaw, v_lon */
sem2_status sem2_env_vehicle_state(const sem2_env* env, double state[4]);

/* ---- pipeline entry points (what the CLI calls) ---- */

/* overrides/variant/seed may be NULL/negative to keep the config file's
 * values. overrides is a comma or semicolon separated key.path=value list. */
sem2_status sem2_train(const char* config_path, const char* variant_or_null,
                       int64_t seed_or_negative, const char* overrides_or_null);

/* Writes one line per weather to stdout; out_json_or_null additionally
 * stores the table. */
sem2_status sem2_evaluate(const char* checkpoint_path, const char* weathers_path,
                          int episodes, uint64_t seed, const char* out_json_or_null,
                          const char* frames_dir_or_null);

sem2_status sem2_inspect(const char* checkpoint_path, const char* episode_path,
                         const char* out_dir);

sem2_status sem2_plot(const char* metrics_path, const char* out_dir);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* SEM2_SEM2_H */

#ifndef SOLAR_H
#define SOLAR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SolarStatus {
  SOLAR_STATUS_OK = 0,
  SOLAR_STATUS_NULL_POINTER = 1,
  SOLAR_STATUS_INVALID_ARGUMENT = 2,
  SOLAR_STATUS_DIMENSION = 3,
  SOLAR_STATUS_NUMERICAL = 4,
  SOLAR_STATUS_IO = 5,
  SOLAR_STATUS_PARSE = 6,
  SOLAR_STATUS_VERSION_MISMATCH = 7,
  SOLAR_STATUS_CONFIG = 8,
  // `solar_env_step` before `solar_env_reset`, or after the episode ended.
  SOLAR_STATUS_BAD_STATE = 9,
  SOLAR_STATUS_PANIC = 10,
} SolarStatus;

typedef enum SolarEnvKind {
  SOLAR_ENV_KIND_NAV_RANDOM_GOAL = 0,
  SOLAR_ENV_KIND_NAV_FIXED_GOAL = 1,
  SOLAR_ENV_KIND_CAR = 2,
} SolarEnvKind;

// A trained model together with its time-varying policy and local dynamics.
typedef struct SolarAgent SolarAgent;

// A simulator instance with its own random stream.
typedef struct SolarEnv SolarEnv;

// A trained encoder, decoder, dynamics and cost model.
typedef struct SolarModel SolarModel;

typedef struct SolarEvalSummary {
  size_t episodes;
  double mean_cost;
  double final_distance;
  double success_rate;
} SolarEvalSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf`, truncated and NUL-terminated.
//
// Returns the full message length in bytes, excluding the terminator, or 0 when there is none.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t solar_last_error(char *buf, size_t len);

// Creates an environment from a preset; `image` selects pixel observations.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum SolarStatus solar_env_new(enum SolarEnvKind kind,
                               bool image,
                               uint64_t seed,
                               struct SolarEnv **out);

// Creates an environment from the `[env]` table syntax of a run configuration.
//
// # Safety
// `toml` must be a NUL-terminated string and `out` a valid pointer.
enum SolarStatus solar_env_from_toml(const char *toml, struct SolarEnv **out);

// # Safety
// `env` must be null or a handle from `solar_env_new`/`solar_env_from_toml` not yet freed.
void solar_env_free(struct SolarEnv *env);

// # Safety
// `env` must be a live handle; the out pointers must be valid or null.
enum SolarStatus solar_env_dims(const struct SolarEnv *env,
                                size_t *obs_dim,
                                size_t *action_dim,
                                size_t *horizon);

// Starts a new episode and writes the first observation.
//
// # Safety
// `env` must be a live handle and `obs` must point to `obs_len` writable doubles.
enum SolarStatus solar_env_reset(struct SolarEnv *env, double *obs, size_t obs_len);

// Applies `action`, writes the next observation and the cost of the step.
//
// `done` is set once the episode horizon is reached; a further step fails with `BadState`.
//
// # Safety
// `env` must be a live handle; `action` must hold `action_len` doubles, `obs` must have room for
// `obs_len`, and `cost`/`done` must be valid or null.
enum SolarStatus solar_env_step(struct SolarEnv *env,
                                const double *action,
                                size_t action_len,
                                double *obs,
                                size_t obs_len,
                                double *cost,
                                bool *done);

// Distance from the current position to the goal.
//
// # Safety
// `env` must be a live handle and `out` a valid pointer.
enum SolarStatus solar_env_distance(const struct SolarEnv *env, double *out);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SolarStatus solar_model_load(const char *path, struct SolarModel **out);

// # Safety
// `model` must be null or a handle from `solar_model_load` not yet freed.
void solar_model_free(struct SolarModel *model);

// # Safety
// `model` must be a live handle; the out pointers must be valid or null.
enum SolarStatus solar_model_dims(const struct SolarModel *model,
                                  size_t *latent_dim,
                                  size_t *obs_dim,
                                  size_t *action_dim);

// Encodes one observation into the mean and variance of its latent Gaussian.
//
// # Safety
// `obs` must hold `obs_len` doubles; `mean` and `var` must each have room for `latent_len`.
enum SolarStatus solar_model_encode(const struct SolarModel *model,
                                    const double *obs,
                                    size_t obs_len,
                                    double *mean,
                                    double *var,
                                    size_t latent_len);

// Loads a model file and the policy file written next to it by a training run.
//
// # Safety
// Both paths must be NUL-terminated strings and `out` a valid pointer.
enum SolarStatus solar_agent_load(const char *model_path,
                                  const char *policy_path,
                                  struct SolarAgent **out);

// # Safety
// `agent` must be null or a handle from `solar_agent_load` not yet freed.
void solar_agent_free(struct SolarAgent *agent);

// Rolls the agent out for `episodes` episodes in `env`'s configuration.
//
// The environment handle's own episode state is not touched.
//
// # Safety
// `agent` and `env` must be live handles and `out` a valid pointer.
enum SolarStatus solar_agent_evaluate(const struct SolarAgent *agent,
                                      const struct SolarEnv *env,
                                      size_t episodes,
                                      uint64_t seed,
                                      struct SolarEvalSummary *out);

// Runs a full training loop from a TOML run configuration.
//
// `out_dir` may be null to use the configuration's own setting. Checkpoints and `report.json`
// are written there.
//
// # Safety
// `config_path` must be a NUL-terminated string; `out_dir` must be one or null.
enum SolarStatus solar_train(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOLAR_H */

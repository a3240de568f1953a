#ifndef CORRNAV_H
#define CORRNAV_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CnStatus {
  CN_STATUS_OK = 0,
  CN_STATUS_NULL_POINTER = 1,
  CN_STATUS_INVALID_ARGUMENT = 2,
  CN_STATUS_WORLD = 3,
  CN_STATUS_IO = 4,
  CN_STATUS_EPISODE_DONE = 5,
  CN_STATUS_BUFFER_TOO_SMALL = 6,
  CN_STATUS_MODEL = 7,
  CN_STATUS_PANIC = 8,
} CnStatus;

typedef enum CnAction {
  CN_ACTION_FORWARD = 0,
  CN_ACTION_LEFT = 1,
  CN_ACTION_RIGHT = 2,
  CN_ACTION_STOP = 3,
} CnAction;

typedef enum CnSetting {
  CN_SETTING_AGENT_MATCHED = 0,
  CN_SETTING_USER_MATCHED = 1,
  CN_SETTING_EXTREME = 2,
} CnSetting;

/**
 * One navigation episode.
 */
typedef struct CnEnv CnEnv;

/**
 * A trained policy with its recurrent state for one episode.
 */
typedef struct CnPolicy CnPolicy;

/**
 * A scene and its navigation graph.
 */
typedef struct CnScene CnScene;

/**
 * Position in meters, heading in radians.
 */
typedef struct CnPose {
  double x;
  double y;
  double theta;
} CnPose;

typedef struct CnStepInfo {
  struct CnPose pose;
  /**
   * Geodesic distance to the goal.
   */
  double distance;
  /**
   * Heading error against the goal view.
   */
  double angle;
  uint32_t steps;
  bool done;
  bool success;
  bool collided;
} CnStepInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next call on the same thread.
 */
const char *cn_last_error_message(void);

/**
 * Procedural scene of `size` x `size` cells.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum CnStatus cn_scene_generate(uint64_t seed,
                                size_t size,
                                double wall_density,
                                struct CnScene **out);

/**
 * Scene from a JSON file written by `corrnav gen`.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` valid for writes.
 */
enum CnStatus cn_scene_load(const char *path, struct CnScene **out);

/**
 * # Safety
 * `scene` must be null or come from this library and not be used again.
 */
void cn_scene_free(struct CnScene *scene);

/**
 * Grid dimensions in cells and the cell side in meters.
 *
 * # Safety
 * `scene` must be a live handle; the out pointers valid for writes.
 */
enum CnStatus cn_scene_dims(const struct CnScene *scene,
                            size_t *width,
                            size_t *height,
                            double *cell_size);

/**
 * # Safety
 * `scene` must be a live handle and `out` valid for writes.
 */
enum CnStatus cn_scene_is_wall(const struct CnScene *scene, size_t cx, size_t cy, bool *out);

/**
 * Geodesic distance between two points of the scene.
 *
 * # Safety
 * `scene` must be a live handle and `out` valid for writes.
 */
enum CnStatus cn_scene_geodesic(const struct CnScene *scene,
                                struct CnPose from,
                                struct CnPose to,
                                double *out);

/**
 * Episode between two poses; the goal view uses the agent camera.
 *
 * # Safety
 * `scene` must be a live handle and `out` valid for writes.
 */
enum CnStatus cn_env_new(const struct CnScene *scene,
                         struct CnPose start,
                         struct CnPose goal,
                         size_t image_size,
                         struct CnEnv **out);

/**
 * Episode with start, goal and goal camera drawn from `seed`;
 * `goal_setting` is a [`CnSetting`].
 *
 * # Safety
 * `scene` must be a live handle and `out` valid for writes.
 */
enum CnStatus cn_env_sample(const struct CnScene *scene,
                            uint64_t seed,
                            uint32_t goal_setting,
                            size_t image_size,
                            struct CnEnv **out);

/**
 * # Safety
 * `env` must be null or come from this library and not be used again.
 */
void cn_env_free(struct CnEnv *env);

/**
 * Applies a [`CnAction`].
 *
 * # Safety
 * `env` must be a live handle; `out` null or valid for writes.
 */
enum CnStatus cn_env_step(struct CnEnv *env, uint32_t action, struct CnStepInfo *out);

/**
 * # Safety
 * `env` must be a live handle and `out` valid for writes.
 */
enum CnStatus cn_env_state(const struct CnEnv *env, struct CnStepInfo *out);

/**
 * Current view as `image_size * image_size * 3` floats in `[0, 1]`, row
 * major, RGB interleaved. Pass a null `buf` with `len` 0 to query the size.
 *
 * # Safety
 * `env` must be a live handle; `buf` valid for `len` floats; `needed`
 * null or valid for writes.
 */
enum CnStatus cn_env_observation(const struct CnEnv *env, float *buf, size_t len, size_t *needed);

/**
 * Goal image, laid out like [`cn_env_observation`].
 *
 * # Safety
 * Same as [`cn_env_observation`].
 */
enum CnStatus cn_env_goal_image(const struct CnEnv *env, float *buf, size_t len, size_t *needed);

/**
 * Loads a checkpoint written by `corrnav train`.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` valid for writes.
 */
enum CnStatus cn_policy_load(const char *path, struct CnPolicy **out);

/**
 * # Safety
 * `policy` must be null or come from this library and not be used again.
 */
void cn_policy_free(struct CnPolicy *policy);

/**
 * Image side the policy expects.
 *
 * # Safety
 * `policy` must be a live handle and `out` valid for writes.
 */
enum CnStatus cn_policy_image_size(const struct CnPolicy *policy, size_t *out);

/**
 * Clears the recurrent state and encodes the goal of `env`. Call at the
 * start of every episode.
 *
 * # Safety
 * `policy` and `env` must be live handles.
 */
enum CnStatus cn_policy_reset(struct CnPolicy *policy, const struct CnEnv *env);

/**
 * Greedy action for the current view of `env`, as a [`CnAction`].
 *
 * # Safety
 * `policy` and `env` must be live handles and `out` valid for writes.
 */
enum CnStatus cn_policy_act(struct CnPolicy *policy, const struct CnEnv *env, uint32_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CORRNAV_H */

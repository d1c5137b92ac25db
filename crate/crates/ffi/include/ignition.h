#ifndef IGNITION_H
#define IGNITION_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IgnStatus {
  IGN_STATUS_OK = 0,
  IGN_STATUS_NULL_ARGUMENT = 1,
  IGN_STATUS_INVALID_ARGUMENT = 2,
  IGN_STATUS_IO = 3,
  IGN_STATUS_BAD_CHECKPOINT = 4,
  IGN_STATUS_MISMATCH = 5,
  IGN_STATUS_NON_FINITE = 6,
  IGN_STATUS_OFF_TRACK = 7,
  IGN_STATUS_PANIC = 8,
} IgnStatus;

/**
 * A loaded model with its input normalization.
 */
typedef struct IgnModel IgnModel;

/**
 * A track with the car, oracle and camera parameters used to drive and
 * render on it.
 */
typedef struct IgnTrack IgnTrack;

typedef struct IgnCommand {
  /**
   * Steering wheel degrees, negative = left.
   */
  double steer_deg;
  double throttle;
  double brake;
} IgnCommand;

typedef struct IgnCarState {
  double x;
  double y;
  /**
   * Radians, counterclockwise from +x.
   */
  double heading;
  /**
   * m/s.
   */
  double speed;
  double sim_time;
  uint64_t step_count;
} IgnCarState;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or an empty string.
 * Valid until the next ignition call on the same thread.
 */
const char *ign_last_error(void);

/**
 * Static name of a status code; unknown codes map to "unknown status".
 */
const char *ign_status_name(int32_t status);

const char *ign_version(void);

/**
 * Loads a checkpoint. On success `*out` owns a model to release with
 * `ign_model_free`; on failure it is set to NULL.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum IgnStatus ign_model_load(const char *path, struct IgnModel **out);

/**
 * # Safety
 * `model` must come from `ign_model_load` and not be used afterwards.
 * NULL is ignored.
 */
void ign_model_free(struct IgnModel *model);

/**
 * Frame size the model expects.
 *
 * # Safety
 * All pointers must be valid.
 */
enum IgnStatus ign_model_input_size(const struct IgnModel *model,
                                    uint32_t *width,
                                    uint32_t *height);

/**
 * Predicts a command for one row-major grayscale frame of exactly the
 * model's input size.
 *
 * # Safety
 * `pixels` must point to `len` readable bytes; other pointers must be valid.
 */
enum IgnStatus ign_model_predict(const struct IgnModel *model,
                                 const uint8_t *pixels,
                                 size_t len,
                                 uint32_t width,
                                 uint32_t height,
                                 double speed_mph,
                                 struct IgnCommand *out);

/**
 * Loads a bundled track by name or a track JSON file, with default car,
 * oracle and camera parameters.
 *
 * # Safety
 * `name_or_path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum IgnStatus ign_track_load(const char *name_or_path, struct IgnTrack **out);

/**
 * # Safety
 * `track` must come from `ign_track_load` and not be used afterwards.
 * NULL is ignored.
 */
void ign_track_free(struct IgnTrack *track);

/**
 * The car at rest on the start line.
 *
 * # Safety
 * Pointers must be valid.
 */
enum IgnStatus ign_track_start(const struct IgnTrack *track, struct IgnCarState *out);

/**
 * Signed lateral offset from the centerline in meters (positive = left)
 * and arc length of the nearest centerline sample.
 *
 * # Safety
 * Pointers must be valid.
 */
enum IgnStatus ign_track_locate(const struct IgnTrack *track,
                                const struct IgnCarState *state,
                                double *s,
                                double *lateral_offset);

/**
 * Renders the hood camera view into `out` (`width * height` bytes).
 * `noise` toggles the camera's pixel noise.
 *
 * # Safety
 * `out` must point to `out_len` writable bytes; other pointers must be valid.
 */
enum IgnStatus ign_render(const struct IgnTrack *track,
                          const struct IgnCarState *state,
                          uint32_t width,
                          uint32_t height,
                          uint64_t seed,
                          bool noise,
                          uint8_t *out,
                          size_t out_len);

/**
 * The oracle's command for a state.
 *
 * # Safety
 * Pointers must be valid.
 */
enum IgnStatus ign_oracle_command(const struct IgnTrack *track,
                                  const struct IgnCarState *state,
                                  struct IgnCommand *out);

/**
 * Advances the car by one 100 Hz physics step. The command is clamped to
 * its valid ranges first.
 *
 * # Safety
 * Pointers must be valid; `out` may alias `state`.
 */
enum IgnStatus ign_vehicle_step(const struct IgnTrack *track,
                                const struct IgnCarState *state,
                                const struct IgnCommand *command,
                                struct IgnCarState *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IGNITION_H */

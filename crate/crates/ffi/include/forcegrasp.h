#ifndef FORCEGRASP_H
#define FORCEGRASP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Bumped on any breaking change to the exported functions or structs.
 */
#define FG_ABI_VERSION 1

typedef enum FgStatus {
  FG_STATUS_OK = 0,
  FG_STATUS_NULL_POINTER = 1,
  FG_STATUS_INVALID_ARGUMENT = 2,
  FG_STATUS_IO = 3,
  FG_STATUS_BUFFER_TOO_SMALL = 4,
  FG_STATUS_PANIC = 5,
} FgStatus;

/**
 * A trained diffusion policy.
 */
typedef struct FgPolicy FgPolicy;

/**
 * One simulated gripper grasping one object.
 */
typedef struct FgSim FgSim;

typedef struct FgSimConfig {
  /**
   * s
   */
  double dt;
  /**
   * mm
   */
  double max_aperture;
  /**
   * mm/s
   */
  double closing_speed;
  double gravity;
  /**
   * N
   */
  double sensor_noise_std;
  /**
   * N
   */
  double sensor_quantum;
} FgSimConfig;

/**
 * Physical parameters of a graspable object.
 */
typedef struct FgObjectSpec {
  /**
   * mm
   */
  double rest_width;
  /**
   * kg
   */
  double mass;
  double friction_mu;
  /**
   * N/mm
   */
  double stiffness_k;
  /**
   * N
   */
  double crush_force;
  /**
   * N
   */
  double yield_force;
  double plasticity;
} FgObjectSpec;

typedef struct FgObservation {
  double aperture;
  double applied_force;
  double contact_force;
  double timestamp;
} FgObservation;

typedef struct FgCommand {
  double target_aperture;
  double force_limit;
} FgCommand;

/**
 * Noise-free view of the simulated object.
 */
typedef struct FgSimState {
  double aperture;
  double current_rest_width;
  double true_contact_force;
  double cumulative_plastic;
  bool crushed;
} FgSimState;

/**
 * Shape of the inputs and outputs of a loaded policy.
 */
typedef struct FgPolicyInfo {
  size_t obs_horizon;
  size_t pred_horizon;
  size_t obs_dim;
  size_t act_dim;
  size_t instruction_dim;
  /**
   * Constant force limit of a position-only policy, or 0 for a policy
   * that commands force.
   */
  double constant_force;
} FgPolicyInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

uint32_t fg_abi_version(void);

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *fg_last_error_message(void);

struct FgSimConfig fg_sim_config_default(void);

/**
 * Create a simulation with the fingers open at `start_aperture`. `config`
 * may be null for defaults.
 *
 * # Safety
 * `spec` must point to a valid `FgObjectSpec`, `config` must be null or
 * valid, and `out` must be writable.
 */
enum FgStatus fg_sim_new(const struct FgObjectSpec *spec,
                         const struct FgSimConfig *config,
                         double start_aperture,
                         uint64_t seed,
                         struct FgSim **out);

/**
 * # Safety
 * `sim` must be null or a handle from `fg_sim_new` not yet freed.
 */
void fg_sim_free(struct FgSim *sim);

/**
 * Sensor reading before any command, with the given force limit.
 *
 * # Safety
 * `sim` must be a live handle and `out` writable.
 */
enum FgStatus fg_sim_observe(struct FgSim *sim, double applied_force, struct FgObservation *out);

/**
 * Advance one control period.
 *
 * # Safety
 * `sim` must be a live handle and `out` writable.
 */
enum FgStatus fg_sim_step(struct FgSim *sim, struct FgCommand command, struct FgObservation *out);

/**
 * # Safety
 * `sim` must be a live handle and `out` writable.
 */
enum FgStatus fg_sim_state(const struct FgSim *sim, struct FgSimState *out);

/**
 * Whether friction at the current true contact force carries the object.
 *
 * # Safety
 * `sim` must be a live handle and `held` writable.
 */
enum FgStatus fg_sim_lift_test(const struct FgSim *sim, bool *held);

/**
 * Spring contact force of an undeformed object at `aperture`.
 *
 * # Safety
 * `spec` must point to a valid `FgObjectSpec` and `out` be writable.
 */
enum FgStatus fg_true_contact_force(const struct FgObjectSpec *spec, double aperture, double *out);

/**
 * Slip-safe force the adaptive expert aims for, with default gains and
 * gravity.
 *
 * # Safety
 * `out` must be writable.
 */
enum FgStatus fg_target_force(double mass, double friction_mu, double slip_margin, double *out);

/**
 * Write the instruction embedding into `out[0..len]`; `len` must equal the
 * embedding width.
 *
 * # Safety
 * `instruction` must be a NUL-terminated string and `out` writable for
 * `len` doubles.
 */
enum FgStatus fg_embed_instruction(const char *instruction, double *out, size_t len);

/**
 * Load a checkpoint and its `.policy.json` sidecar.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum FgStatus fg_policy_load(const char *path, struct FgPolicy **out);

/**
 * # Safety
 * `policy` must be null or a handle from `fg_policy_load` not yet freed.
 */
void fg_policy_free(struct FgPolicy *policy);

/**
 * # Safety
 * `policy` must be a live handle and `out` writable.
 */
enum FgStatus fg_policy_info(const struct FgPolicy *policy, struct FgPolicyInfo *out);

/**
 * Sample an action sequence. `obs_window` holds `obs_horizon` rows of
 * `obs_dim` raw readings, oldest first; `out` receives `pred_horizon` rows
 * of `act_dim` denormalized actions. The same seed gives the same sample.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `instruction` must be
 * NUL-terminated.
 */
enum FgStatus fg_policy_sample(const struct FgPolicy *policy,
                               const double *obs_window,
                               size_t obs_len,
                               const char *instruction,
                               uint64_t seed,
                               double *out,
                               size_t out_len);

/**
 * First sampled action as a gripper command, the way evaluation executes
 * it: position-only policies get their constant force limit, forceful ones
 * are floored at the minimum force.
 *
 * # Safety
 * As for `fg_policy_sample`; `out` must be writable.
 */
enum FgStatus fg_policy_act(const struct FgPolicy *policy,
                            const double *obs_window,
                            size_t obs_len,
                            const char *instruction,
                            uint64_t seed,
                            struct FgCommand *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FORCEGRASP_H */

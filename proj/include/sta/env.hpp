#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "sta/tensor.hpp"

namespace sta::env {

// Desk-scale 2D manipulation task: a 2-joint arm moves its end effector over a
// grid, auto-grasps the object within reach, and carries it to the goal.
// Occlusion hides the object from the rendered grid (so an observer needs
// memory); perception noise corrupts the scripted controller's target (so the
// demonstrations contain detour-and-recovery segments).
struct EnvConfig {
  int grid_size = 16;
  int horizon = 60;
  int n_joints = 2;
  double grasp_radius = 0.75;
  double gain = 0.5;
  double home_x = 8.0;
  double home_y = 8.0;
  double min_separation = 3.0;  // object-to-goal Euclidean distance at reset

  double occlusion_prob = 0.5;   // per episode: hide the object after first sight
  int occlusion_visible_min = 1;  // visible steps before the blackout
  int occlusion_visible_max = 4;

  double noise_prob = 0.7;  // per episode: one corrupted-perception segment
  int noise_start_min = 2;
  int noise_start_max = 30;
  int noise_len_min = 3;
  int noise_len_max = 8;
  double noise_mag_min = 2.0;  // offset magnitude in grid units
  double noise_mag_max = 4.0;

  void validate() const;
  nlohmann::json to_json() const;
};

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

double dist(const Vec2& a, const Vec2& b);

struct EnvState {
  std::vector<double> arm;  // joint j drives axis j of the end effector
  Vec2 object_pos;
  Vec2 goal_pos;
  bool holding = false;
  int step_index = 0;
  std::vector<char> occlusion_schedule;  // per step: object hidden from the grid
  std::uint64_t rng_seed = 0;
};

Vec2 end_effector(const EnvState& state);
bool occluded_now(const EnvState& state);

struct StepOutcome {
  EnvState state;
  bool done = false;
  bool success = false;
};

// Object and goal land on distinct integer cells >= min_separation apart and
// away from the home pose; the arm starts at home. Same seed, same state.
EnvState env_reset(std::uint64_t seed, const EnvConfig& cfg = {});

// Per-joint deltas clamped to +-1 (non-finite entries absorbed as zero); the
// grasp closes automatically inside grasp_radius and the object rides the end
// effector afterwards. Success: holding with the end effector within
// grasp_radius of the goal.
StepOutcome env_step(const EnvState& state, const Tensor& action, const EnvConfig& cfg = {});

// Proportional controller on the perceived object position: approach it while
// free; while holding, steer so the perceived object lands on the goal. With
// clean perception that is exactly "head for the goal".
Tensor expert_action(const EnvState& state, const Vec2& perceived_object,
                     const EnvConfig& cfg = {});

struct NoiseSegment {
  int start = 0;
  int length = 0;
};

// At most one segment per episode (probability noise_prob when enabled), never
// touching steps 0 or 1.
std::vector<NoiseSegment> inject_noise_schedule(std::mt19937_64& rng, int episode_length,
                                                bool noise_on, const EnvConfig& cfg = {});

// One recorded control step. obs/proprio/expert_act/noise_active/success_so_far
// are serialized; the trailing diagnostics (holding, object_true, perceived)
// exist only in memory so tests can recompute the controller independently.
struct StepRecord {
  Tensor obs;        // [1 x grid x grid], additive cell codes arm=1 object=2 goal=4
  Tensor proprio;    // [n_joints]
  Tensor expert_act; // [n_joints]
  bool noise_active = false;
  bool success_so_far = false;
  bool occluded = false;
  bool holding = false;
  Vec2 object_true;
  Vec2 perceived;
};

struct Episode {
  std::vector<StepRecord> steps;  // always exactly horizon entries
  bool success = false;           // success reached at any step (latched)
  std::uint64_t seed = 0;
  std::vector<NoiseSegment> noise_segments;
  Vec2 object_start;
  Vec2 goal;
  int occluded_from = -1;  // first hidden step, -1 when never hidden
};

// Rolls the scripted controller for the full horizon (the latch keeps
// post-success steps labeled), applying the per-segment perception offset.
Episode roll_expert_episode(std::uint64_t seed, bool noise_on, const EnvConfig& cfg = {});

// Render the observation grid for the state's current step.
Tensor render_obs(const EnvState& state, const EnvConfig& cfg = {});

constexpr double kArmCode = 1.0;
constexpr double kObjectCode = 2.0;
constexpr double kGoalCode = 4.0;

struct DatasetInfo {
  int n_episodes = 0;
  std::uint64_t seed = 0;
  bool noise_on = false;
  int total_attempts = 0;
  int discarded_failures = 0;
  int episodes_with_noise = 0;
  std::string config_hash;
};

// Writes <prefix>.jsonl (episode + step records, one JSON object per line),
// <prefix>.f64 (observation grids, little-endian float64, row-major, in step
// order), and <prefix>.manifest.json. Episode i derives its seed from
// seed + i, so generation order and worker layout cannot change the bytes;
// failed attempts are redrawn on a disjoint seed stream and counted.
DatasetInfo generate_dataset(const std::string& path_prefix, int n_episodes, bool noise_on,
                             std::uint64_t seed, const EnvConfig& cfg = {});

struct Dataset {
  std::vector<Episode> episodes;
  nlohmann::json manifest;
};

Dataset load_dataset(const std::string& path_prefix);

// FNV-1a over the canonical config serialization; stored in the manifest so
// mismatched datasets are detectable.
std::string config_hash(const EnvConfig& cfg);

}  // namespace sta::env

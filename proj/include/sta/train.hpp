#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sta/env.hpp"
#include "sta/policy.hpp"
#include "sta/tensor.hpp"

namespace sta::train {

struct TrainConfig {
  int seq_len = 16;  // L, the training window
  int batch_size = 16;
  double lr = 8e-5;
  int epochs = 50;
  bool mask_enabled = true;
  // 0 means ceil(#episodes / batch_size), one nominal pass per epoch.
  int batches_per_epoch = 0;
  // Per-epoch validation rollouts; the mean over eval_seeds is logged.
  int eval_episodes = 100;
  int eval_seeds = 3;
  int eval_history = -1;  // -1 means the policy's own k_max
  bool eval_masked = false;

  void validate() const;
};

// One training window. Step tensors alias the dataset's storage; treat them
// as read-only. loss_mask excludes corrupted-perception steps and padding,
// visual_masked marks the temporal-mask span fed to the encoder.
struct TrainingSequence {
  std::vector<env::StepRecord> steps;  // exactly seq_len entries
  std::vector<char> visual_masked;
  std::vector<char> padded;     // front fill, repeats of the first real step
  std::vector<char> loss_mask;  // include this step's action in the loss
  int episode_index = 0;
  int start_offset = 0;  // offset of steps.front() within the episode
  int mask_start = -1;   // temporal-mask span, -1 when none applied
  int mask_len = 0;
};

// Uniform over (episode, start offset). Episodes shorter than seq_len are
// front-padded with copies of their first step, flagged and loss-excluded.
// Empty dataset -> std::invalid_argument.
TrainingSequence sample_training_sequence(const env::Dataset& dataset, std::mt19937_64& rng,
                                          const TrainConfig& cfg);
std::vector<TrainingSequence> sample_training_sequences(const env::Dataset& dataset,
                                                        std::mt19937_64& rng,
                                                        const TrainConfig& cfg);

// Hides the visual stream on a contiguous span: length k ~ U[2, L/2], start
// ~ U[1, L-k]. Step 0 always keeps its observation. Requires seq_len >= 4.
void apply_temporal_mask(TrainingSequence& seq, std::mt19937_64& rng, const TrainConfig& cfg);

struct LossResult {
  Tensor loss;               // scalar on the active tape unless nothing counted
  double value = 0.0;
  long included_steps = 0;   // loss-mask-in (sequence, step) pairs
  long total_steps = 0;
  bool all_excluded = false; // every step masked out; loss is a plain zero
};

// Mean squared action error over loss-mask-in steps, joints, and sequences.
// Each step's prediction comes from the causal sequence pass, so step t sees
// only steps [0, t]. Excluded steps do not enter the denominator.
LossResult compute_loss(const Policy& policy, const std::vector<TrainingSequence>& batch);

struct EvalResult {
  int episodes = 0;
  int successes = 0;
  double success_rate = 0.0;
};

// Stochastic observation blackouts for evaluation: spans of n ~ U[0, limit-1]
// consecutive masked steps; after a span ends at least one step keeps its
// observation, then a new span starts with probability 0.1.
class InferenceMasker {
 public:
  explicit InferenceMasker(int span_limit) : span_limit_(span_limit) {}
  bool step(std::mt19937_64& rng);

 private:
  int span_limit_;
  int remaining_ = 0;
};

// Closed-loop rollouts of the streaming policy. inference_history must lie in
// [-1, k_max] of the declared config (-1 means k_max); the no-history variant
// clamps to an empty window whatever is passed. Same seed, same result.
EvalResult evaluate_policy(const Policy& policy, const env::EnvConfig& env_cfg, int n_episodes,
                           std::uint64_t seed, int inference_history = -1,
                           bool masked_inference = false, int mask_span_limit = 16);

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double eval_success = 0.0;
  double wall_time = 0.0;  // seconds, the one field allowed to vary run-to-run
};

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  int best_epoch = -1;
  double best_success = 0.0;
  std::string metrics_path;
  std::string best_checkpoint_path;
  std::string final_checkpoint_path;
};

// Adam on sampled windows with per-sequence gradient accumulation, one
// validation pass per epoch on fresh seeds, JSONL metrics, and best-epoch
// checkpointing (ties keep the earliest). Non-finite loss aborts with the
// epoch and batch in the message.
TrainResult train(Policy& policy, const env::Dataset& dataset, const TrainConfig& cfg,
                  const env::EnvConfig& eval_env, std::uint64_t seed,
                  const std::string& out_dir);

}  // namespace sta::train

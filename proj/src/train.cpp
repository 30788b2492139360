#include "sta/train.hpp"

#include <chrono>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include <json.hpp>

#include "sta/ops.hpp"
#include "sta/optim.hpp"

namespace sta::train {

namespace {

long masked_in_count(const TrainingSequence& seq) {
  long n = 0;
  for (char c : seq.loss_mask) n += (c != 0);
  return n;
}

void check_sequence(const TrainingSequence& seq) {
  if (seq.steps.empty()) throw std::invalid_argument("training sequence has no steps");
  if (seq.visual_masked.size() != seq.steps.size() || seq.loss_mask.size() != seq.steps.size()) {
    throw std::invalid_argument("training sequence mask arrays do not match its step count");
  }
}

// Sum of squared action errors over the sequence's loss-mask-in steps, built
// on the active tape. Undefined when no step counts.
Tensor sequence_squared_error(const Policy& policy, const TrainingSequence& seq) {
  const std::size_t L = seq.steps.size();
  std::vector<Tensor> obs, proprio;
  obs.reserve(L);
  proprio.reserve(L);
  for (const env::StepRecord& s : seq.steps) {
    obs.push_back(s.obs);
    proprio.push_back(s.proprio);
  }
  std::vector<Tensor> actions = policy.forward_sequence(obs, proprio, seq.visual_masked);
  Tensor total;
  for (std::size_t t = 0; t < L; ++t) {
    if (!seq.loss_mask[t]) continue;
    Tensor d = sub(actions[t], seq.steps[t].expert_act);
    Tensor sq = sum_all(mul(d, d));
    total = total.defined() ? add(total, sq) : sq;
  }
  return total;
}

}  // namespace

void TrainConfig::validate() const {
  if (seq_len < 1) throw std::invalid_argument("TrainConfig: seq_len must be positive");
  if (mask_enabled && seq_len < 4) {
    throw std::invalid_argument(
        "TrainConfig: temporal masking draws span lengths from [2, seq_len/2], which is empty "
        "for seq_len " +
        std::to_string(seq_len) + "; need seq_len >= 4");
  }
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr)) {
    throw std::invalid_argument("TrainConfig: lr must be positive and finite");
  }
  if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be positive");
  if (batches_per_epoch < 0) {
    throw std::invalid_argument("TrainConfig: batches_per_epoch must be >= 0");
  }
  if (eval_episodes < 1) throw std::invalid_argument("TrainConfig: eval_episodes must be positive");
  if (eval_seeds < 1) throw std::invalid_argument("TrainConfig: eval_seeds must be positive");
  if (eval_history < -1) throw std::invalid_argument("TrainConfig: eval_history must be >= -1");
}

TrainingSequence sample_training_sequence(const env::Dataset& dataset, std::mt19937_64& rng,
                                          const TrainConfig& cfg) {
  if (cfg.seq_len < 1) throw std::invalid_argument("sample_training_sequence: seq_len must be positive");
  if (dataset.episodes.empty()) {
    throw std::invalid_argument("sample_training_sequence: dataset has no episodes");
  }
  const int L = cfg.seq_len;
  std::uniform_int_distribution<int> ep_dist(0, static_cast<int>(dataset.episodes.size()) - 1);
  const int e = ep_dist(rng);
  const env::Episode& ep = dataset.episodes[static_cast<std::size_t>(e)];
  const int n = static_cast<int>(ep.steps.size());
  if (n == 0) {
    throw std::invalid_argument("sample_training_sequence: episode " + std::to_string(e) +
                                " has no steps");
  }

  TrainingSequence seq;
  seq.episode_index = e;
  seq.visual_masked.assign(static_cast<std::size_t>(L), 0);
  seq.padded.assign(static_cast<std::size_t>(L), 0);
  seq.loss_mask.assign(static_cast<std::size_t>(L), 0);
  if (n >= L) {
    std::uniform_int_distribution<int> off_dist(0, n - L);
    seq.start_offset = off_dist(rng);
    seq.steps.assign(ep.steps.begin() + seq.start_offset, ep.steps.begin() + seq.start_offset + L);
  } else {
    seq.start_offset = 0;
    const int pad = L - n;
    seq.steps.assign(static_cast<std::size_t>(pad), ep.steps.front());
    seq.steps.insert(seq.steps.end(), ep.steps.begin(), ep.steps.end());
    std::fill_n(seq.padded.begin(), pad, static_cast<char>(1));
  }
  for (int t = 0; t < L; ++t) {
    const std::size_t i = static_cast<std::size_t>(t);
    seq.loss_mask[i] = static_cast<char>(!seq.padded[i] && !seq.steps[i].noise_active);
  }
  return seq;
}

std::vector<TrainingSequence> sample_training_sequences(const env::Dataset& dataset,
                                                        std::mt19937_64& rng,
                                                        const TrainConfig& cfg) {
  std::vector<TrainingSequence> batch;
  batch.reserve(static_cast<std::size_t>(cfg.batch_size));
  for (int i = 0; i < cfg.batch_size; ++i) {
    batch.push_back(sample_training_sequence(dataset, rng, cfg));
  }
  return batch;
}

void apply_temporal_mask(TrainingSequence& seq, std::mt19937_64& rng, const TrainConfig& cfg) {
  const int L = cfg.seq_len;
  if (L < 4) {
    throw std::invalid_argument("apply_temporal_mask: seq_len must be >= 4, got " +
                                std::to_string(L));
  }
  if (static_cast<int>(seq.steps.size()) != L) {
    throw std::invalid_argument("apply_temporal_mask: sequence length " +
                                std::to_string(seq.steps.size()) + " does not match seq_len " +
                                std::to_string(L));
  }
  std::uniform_int_distribution<int> len_dist(2, L / 2);
  const int k = len_dist(rng);
  std::uniform_int_distribution<int> start_dist(1, L - k);
  const int start = start_dist(rng);
  std::fill(seq.visual_masked.begin() + start, seq.visual_masked.begin() + start + k,
            static_cast<char>(1));
  seq.mask_start = start;
  seq.mask_len = k;
}

LossResult compute_loss(const Policy& policy, const std::vector<TrainingSequence>& batch) {
  if (batch.empty()) throw std::invalid_argument("compute_loss: empty batch");
  LossResult res;
  for (const TrainingSequence& seq : batch) {
    check_sequence(seq);
    res.total_steps += static_cast<long>(seq.steps.size());
    res.included_steps += masked_in_count(seq);
  }
  if (res.included_steps == 0) {
    std::cerr << "[train] warning: every step in the batch is excluded from the loss\n";
    res.all_excluded = true;
    res.loss = Tensor::scalar(0.0);
    return res;
  }
  Tensor total;
  for (const TrainingSequence& seq : batch) {
    Tensor sq = sequence_squared_error(policy, seq);
    if (sq.defined()) total = total.defined() ? add(total, sq) : sq;
  }
  const long denom = res.included_steps * policy.config().n_joints;
  res.loss = scale(total, 1.0 / static_cast<double>(denom));
  res.value = res.loss.values()[0];
  return res;
}

bool InferenceMasker::step(std::mt19937_64& rng) {
  if (remaining_ > 0) {
    remaining_ -= 1;
    return true;
  }
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (coin(rng) < 0.1) {
    std::uniform_int_distribution<int> span(0, span_limit_ - 1);
    remaining_ = span(rng);
  }
  return false;
}

EvalResult evaluate_policy(const Policy& policy, const env::EnvConfig& env_cfg, int n_episodes,
                           std::uint64_t seed, int inference_history, bool masked_inference,
                           int mask_span_limit) {
  if (n_episodes < 1) throw std::invalid_argument("evaluate_policy: n_episodes must be positive");
  const PolicyConfig& pc = policy.config();
  const bool ignores_history = pc.variant == Variant::kNoHistory;
  if (inference_history < -1 || (!ignores_history && inference_history > pc.k_max)) {
    throw std::invalid_argument("evaluate_policy: inference_history " +
                                std::to_string(inference_history) + " outside [0, " +
                                std::to_string(pc.k_max) + "]");
  }
  if (masked_inference && mask_span_limit < 1) {
    throw std::invalid_argument("evaluate_policy: mask_span_limit must be positive");
  }
  if (pc.n_joints != env_cfg.n_joints || pc.obs_channels != 1 ||
      pc.obs_height != env_cfg.grid_size || pc.obs_width != env_cfg.grid_size ||
      pc.proprio_dim != env_cfg.n_joints) {
    throw std::invalid_argument("evaluate_policy: policy io shape does not match the environment");
  }

  NoGradGuard ng;
  EvalResult res;
  res.episodes = n_episodes;
  for (int e = 0; e < n_episodes; ++e) {
    const std::uint64_t ep_seed = seed + static_cast<std::uint64_t>(e);
    env::EnvState state = env::env_reset(ep_seed, env_cfg);
    PolicyStream stream(policy, inference_history);
    InferenceMasker masker(mask_span_limit);
    std::mt19937_64 prng(ep_seed * 0x100000001b3ULL + 0x6d61736bULL);
    bool success = false;
    while (true) {
      Tensor obs = env::render_obs(state, env_cfg);
      Tensor proprio = Tensor::from(state.arm, {env_cfg.n_joints});
      const bool blind = masked_inference && masker.step(prng);
      Tensor action = stream.step(obs, proprio, blind);
      env::StepOutcome out = env::env_step(state, action, env_cfg);
      state = out.state;
      if (out.success) {
        success = true;
        break;
      }
      if (out.done) break;
    }
    if (success) res.successes += 1;
  }
  res.success_rate = static_cast<double>(res.successes) / static_cast<double>(n_episodes);
  return res;
}

TrainResult train(Policy& policy, const env::Dataset& dataset, const TrainConfig& cfg,
                  const env::EnvConfig& eval_env, std::uint64_t seed,
                  const std::string& out_dir) {
  cfg.validate();
  if (dataset.episodes.empty()) throw std::invalid_argument("train: dataset has no episodes");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  ParamList named;
  policy.collect_params(named);
  std::vector<Tensor> params;
  params.reserve(named.size());
  for (const NamedParam& np : named) params.push_back(np.value);
  AdamState adam;
  adam.lr = cfg.lr;

  const int m = policy.config().n_joints;
  const int n_batches =
      cfg.batches_per_epoch > 0
          ? cfg.batches_per_epoch
          : static_cast<int>((dataset.episodes.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                             static_cast<std::size_t>(cfg.batch_size));

  TrainResult result;
  result.metrics_path = (fs::path(out_dir) / "metrics.jsonl").string();
  result.best_checkpoint_path = (fs::path(out_dir) / "best.ckpt").string();
  result.final_checkpoint_path = (fs::path(out_dir) / "final.ckpt").string();
  std::ofstream metrics_out(result.metrics_path, std::ios::trunc);
  if (!metrics_out) throw std::runtime_error("train: cannot open " + result.metrics_path);

  std::mt19937_64 rng(seed);
  double best = -1.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    int counted_batches = 0;
    for (int b = 0; b < n_batches; ++b) {
      std::vector<TrainingSequence> batch = sample_training_sequences(dataset, rng, cfg);
      if (cfg.mask_enabled) {
        for (TrainingSequence& seq : batch) apply_temporal_mask(seq, rng, cfg);
      }
      long included = 0;
      for (const TrainingSequence& seq : batch) included += masked_in_count(seq);
      if (included == 0) {
        std::cerr << "[train] warning: epoch " << epoch << " batch " << b
                  << " has no loss-mask-in steps; skipped\n";
        continue;
      }
      // One graph per sequence keeps peak tape size independent of batch_size;
      // scaling each term by the shared denominator reproduces the batch mean.
      const double denom = static_cast<double>(included) * static_cast<double>(m);
      for (Tensor& p : params) p.zero_grad();
      double batch_loss = 0.0;
      for (const TrainingSequence& seq : batch) {
        Tape::active().clear();
        Tensor sq = sequence_squared_error(policy, seq);
        if (!sq.defined()) continue;
        Tensor term = scale(sq, 1.0 / denom);
        backward(term);
        batch_loss += term.values()[0];
      }
      Tape::active().clear();
      if (!std::isfinite(batch_loss)) {
        throw std::runtime_error("train: loss diverged at epoch " + std::to_string(epoch) +
                                 ", batch " + std::to_string(b) + " (loss " +
                                 std::to_string(batch_loss) + ")");
      }
      adam_step(params, adam);
      loss_sum += batch_loss;
      counted_batches += 1;
    }
    const double train_loss = counted_batches > 0 ? loss_sum / counted_batches : 0.0;

    double success_sum = 0.0;
    for (int s = 0; s < cfg.eval_seeds; ++s) {
      // Fresh, disjoint seed blocks per (epoch, seed slot); the stride clears
      // the eval_episodes-wide range env_reset consumes.
      const std::uint64_t eval_seed =
          seed + 7919ULL * (static_cast<std::uint64_t>(epoch) *
                                static_cast<std::uint64_t>(cfg.eval_seeds) +
                            static_cast<std::uint64_t>(s) + 1ULL);
      success_sum += evaluate_policy(policy, eval_env, cfg.eval_episodes, eval_seed,
                                     cfg.eval_history, cfg.eval_masked, cfg.seq_len)
                         .success_rate;
    }
    const double eval_success = success_sum / cfg.eval_seeds;
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    result.metrics.push_back({epoch, train_loss, eval_success, wall});
    const nlohmann::json line{{"epoch", epoch},
                              {"train_loss", train_loss},
                              {"eval_success", eval_success},
                              {"wall_time", wall}};
    metrics_out << line.dump() << "\n";
    metrics_out.flush();

    if (eval_success > best) {
      best = eval_success;
      result.best_epoch = epoch;
      result.best_success = eval_success;
      save_checkpoint(result.best_checkpoint_path, policy, &adam,
                      nlohmann::json{{"epoch", epoch},
                                     {"eval_success", eval_success},
                                     {"train_loss", train_loss}});
    }
  }
  save_checkpoint(result.final_checkpoint_path, policy, &adam,
                  nlohmann::json{{"epoch", cfg.epochs - 1}, {"role", "final"}});
  return result;
}

}  // namespace sta::train

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "sta/attention.hpp"
#include "sta/nn.hpp"
#include "sta/optim.hpp"
#include "sta/tensor.hpp"

namespace sta {

enum class Variant { kSTA, kStandardXAttn, kNoHistory };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct PolicyConfig {
  Variant variant = Variant::kSTA;
  int n_layers = 4;
  int d_model = 512;
  int n_heads = 8;
  int n_joints = 2;        // m decoder tokens, one per joint
  int n_state_tokens = 2;  // n: n-1 visual tokens + 1 proprioceptive token
  int k_max = 15;
  int obs_channels = 1;
  int obs_height = 16;
  int obs_width = 16;
  int proprio_dim = 2;
  double action_scale = 1.0;

  void validate() const;
  // The no-history variant runs with an empty window by definition.
  PolicyConfig normalized() const;
  AttentionConfig attention_config() const;
};

struct StateTokens {
  int timestep = 0;
  bool visual_masked = false;
  Tensor tokens;  // n x d_model
};

class Policy {
 public:
  Policy(PolicyConfig cfg, std::uint64_t seed);

  StateTokens encode_state(int timestep, const Tensor& obs, const Tensor& proprio,
                           bool visual_masked) const;
  Tensor init_input_tokens(const Tensor& proprio) const;  // m x d_model

  struct SequenceResult {
    std::vector<Tensor> actions;       // per step, [m]
    std::vector<Tensor> final_tokens;  // per step, m x d_model, before the head
  };

  // Whole-trajectory pass; step t attends over its trailing window of at most
  // k_max past steps. Used for training and as the no-cache reference.
  SequenceResult forward_sequence_full(const std::vector<Tensor>& obs,
                                       const std::vector<Tensor>& proprio,
                                       const std::vector<char>& visual_masked) const;
  std::vector<Tensor> forward_sequence(const std::vector<Tensor>& obs,
                                       const std::vector<Tensor>& proprio,
                                       const std::vector<char>& visual_masked) const;

  // Action for the final step of a short history (length in [1, k_max+1]).
  Tensor forward_policy(const std::vector<Tensor>& obs, const std::vector<Tensor>& proprio,
                        const std::vector<char>& visual_masked) const;

  void collect_params(ParamList& out) const;
  std::size_t parameter_count() const;
  const PolicyConfig& config() const { return cfg_; }

 private:
  friend class PolicyStream;

  Tensor visual_tokens(const Tensor& obs) const;
  Tensor head_forward(const Tensor& tokens) const;  // m x d_model -> [m], clamped

  struct Layer {
    MultiHeadCrossAttention xattn;
    MultiHeadSelfAttention self;
    Tensor norm1, norm2, norm3;  // rmsnorm gains
    Linear ffn1, ffn2;
  };

  PolicyConfig cfg_;
  // Encoder
  Tensor conv1_k_, conv1_b_, conv2_k_, conv2_b_;
  Linear vis_proj_;
  Tensor mask_emb_;  // (n-1) x d_model, replaces visual tokens when masked
  Linear pp1_, pp2_;
  Tensor enc_norm_;  // output gain: state tokens leave the encoder row-normalized
  // Input tokens
  Tensor joint_emb_;  // m x d_model absolute per-joint embedding
  Linear tok_in_;     // (1 + proprio_dim) -> d_model, shared across joints
  std::vector<Layer> layers_;
  Tensor final_norm_;
  Linear head1_, head2_;
};

// Streaming evaluator holding per-layer caches; equals the whole-trajectory
// pass on the shared window.
class PolicyStream {
 public:
  // inference_history < 0 means the policy's own k_max.
  explicit PolicyStream(const Policy& policy, int inference_history = -1);

  Tensor step(const Tensor& obs, const Tensor& proprio, bool visual_masked);
  void reset();
  int timestep() const { return t_; }
  int window_capacity() const { return capacity_; }

 private:
  const Policy* policy_;
  int capacity_;
  int t_ = 0;
  std::vector<HistoryCache> xattn_caches_;
  std::vector<HistoryCache> self_caches_;
};

// ---------------------------------------------------------------------------
// Checkpoints: magic line, one JSON header line (config, metadata, array
// index), then raw little-endian float64 payload in index order.
// ---------------------------------------------------------------------------

nlohmann::json policy_config_to_json(const PolicyConfig& cfg);
PolicyConfig policy_config_from_json(const nlohmann::json& j);

void save_checkpoint(const std::string& path, const Policy& policy,
                     const AdamState* adam = nullptr,
                     const nlohmann::json& metadata = nlohmann::json::object());

Policy load_checkpoint(const std::string& path, nlohmann::json* metadata_out = nullptr,
                       AdamState* adam_out = nullptr);

// Canonical probe history derived from the config alone; the resulting action
// is stored in checkpoint metadata so a reload can be verified behaviorally.
struct ProbeInput {
  std::vector<Tensor> obs;
  std::vector<Tensor> proprio;
  std::vector<char> visual_masked;
};
ProbeInput make_probe_input(const PolicyConfig& cfg);
std::vector<double> probe_action(const Policy& policy);

}  // namespace sta

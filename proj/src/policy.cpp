#include "sta/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "sta/ops.hpp"

namespace sta {

namespace {
constexpr const char* kCheckpointMagic = "STALAB-CKPT v1";
constexpr int kConv1Channels = 8;
constexpr int kConv2Channels = 16;
constexpr int kHeadHidden = 128;

int half_up(int v) { return (v - 1) / 2 + 1; }
}  // namespace

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kSTA: return "STA";
    case Variant::kStandardXAttn: return "STANDARD_XATTN";
    case Variant::kNoHistory: return "NO_HISTORY";
  }
  throw std::logic_error("variant_name: unreachable");
}

Variant variant_from_name(const std::string& name) {
  if (name == "STA") return Variant::kSTA;
  if (name == "STANDARD_XATTN") return Variant::kStandardXAttn;
  if (name == "NO_HISTORY") return Variant::kNoHistory;
  throw std::invalid_argument("unknown variant '" + name +
                              "' (expected STA, STANDARD_XATTN, or NO_HISTORY)");
}

void PolicyConfig::validate() const {
  if (n_layers < 1) throw std::invalid_argument("policy config: n_layers must be >= 1");
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
    throw std::invalid_argument("policy config: d_model " + std::to_string(d_model) +
                                " must be a positive multiple of n_heads " +
                                std::to_string(n_heads));
  }
  if (n_joints < 1) throw std::invalid_argument("policy config: n_joints must be >= 1");
  if (n_state_tokens < 2) {
    throw std::invalid_argument("policy config: n_state_tokens must be >= 2 "
                                "(visual tokens plus the proprioceptive token)");
  }
  if (k_max < 0) throw std::invalid_argument("policy config: k_max must be >= 0");
  if (obs_channels < 1 || obs_height < 3 || obs_width < 3) {
    throw std::invalid_argument("policy config: observation grid must be at least 1x3x3");
  }
  if (proprio_dim < n_joints) {
    throw std::invalid_argument("policy config: proprio_dim must cover every joint");
  }
  if (action_scale <= 0.0) {
    throw std::invalid_argument("policy config: action_scale must be positive");
  }
}

PolicyConfig PolicyConfig::normalized() const {
  PolicyConfig c = *this;
  if (c.variant == Variant::kNoHistory) c.k_max = 0;
  return c;
}

AttentionConfig PolicyConfig::attention_config() const {
  AttentionConfig a;
  a.d_model = d_model;
  a.n_heads = n_heads;
  a.max_history = normalized().k_max;
  // Residual branches start quiet, scaled down with depth so the stacked
  // block outputs stay near the identity at init.
  a.wo_stddev = 0.02 / std::sqrt(2.0 * n_layers);
  return a;
}

Policy::Policy(PolicyConfig cfg, std::uint64_t seed) : cfg_(cfg.normalized()) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const int d = cfg_.d_model;
  const int h2 = half_up(half_up(cfg_.obs_height));
  const int w2 = half_up(half_up(cfg_.obs_width));
  const int flat = kConv2Channels * h2 * w2;
  const int n_vis = cfg_.n_state_tokens - 1;

  conv1_k_ = normal_init(rng, {kConv1Channels, cfg_.obs_channels, 3, 3});
  conv1_b_ = Tensor::zeros({kConv1Channels}, true);
  conv2_k_ = normal_init(rng, {kConv2Channels, kConv1Channels, 3, 3});
  conv2_b_ = Tensor::zeros({kConv2Channels}, true);
  vis_proj_ = Linear::create(rng, flat, n_vis * d, true);
  mask_emb_ = normal_init(rng, {n_vis, d});
  pp1_ = Linear::create(rng, cfg_.proprio_dim, d, true);
  pp2_ = Linear::create(rng, d, d, true);
  enc_norm_ = Tensor::full({d}, 1.0);
  enc_norm_.set_requires_grad(true);

  joint_emb_ = normal_init(rng, {cfg_.n_joints, d});
  tok_in_ = Linear::create(rng, 1 + cfg_.proprio_dim, d, true);

  const AttentionConfig acfg = cfg_.attention_config();
  const auto mode = cfg_.variant == Variant::kSTA
                        ? MultiHeadCrossAttention::Mode::kStateTransition
                        : MultiHeadCrossAttention::Mode::kStandard;
  for (int l = 0; l < cfg_.n_layers; ++l) {
    layers_.push_back(Layer{
        MultiHeadCrossAttention(acfg, mode, rng),
        MultiHeadSelfAttention(acfg, rng),
        Tensor::full({d}, 1.0),
        Tensor::full({d}, 1.0),
        Tensor::full({d}, 1.0),
        Linear::create(rng, d, 4 * d, true),
        Linear::create(rng, 4 * d, d, true, acfg.wo_stddev),
    });
    layers_.back().norm1.set_requires_grad(true);
    layers_.back().norm2.set_requires_grad(true);
    layers_.back().norm3.set_requires_grad(true);
  }
  final_norm_ = Tensor::full({d}, 1.0);
  final_norm_.set_requires_grad(true);
  head1_ = Linear::create(rng, d, kHeadHidden, true);
  head2_ = Linear::create(rng, kHeadHidden, 1, true);
}

Tensor Policy::visual_tokens(const Tensor& obs) const {
  if (obs.ndim() != 3 || obs.dim(0) != cfg_.obs_channels || obs.dim(1) != cfg_.obs_height ||
      obs.dim(2) != cfg_.obs_width) {
    throw std::invalid_argument("encode: observation shape " + obs.shape_str() +
                                " does not match the configured grid");
  }
  Tensor x = scale(obs, 0.25);  // additive cell codes span [0, 7]
  x = gelu(add_channel_bias(conv2d(x, conv1_k_, 2), conv1_b_));
  x = gelu(add_channel_bias(conv2d(x, conv2_k_, 2), conv2_b_));
  Tensor flat = reshape(x, {1, static_cast<int>(x.numel())});
  return reshape(vis_proj_.forward(flat), {cfg_.n_state_tokens - 1, cfg_.d_model});
}

StateTokens Policy::encode_state(int timestep, const Tensor& obs, const Tensor& proprio,
                                 bool visual_masked) const {
  if (static_cast<int>(proprio.numel()) != cfg_.proprio_dim) {
    throw std::invalid_argument("encode: proprio length " + std::to_string(proprio.numel()) +
                                " does not match proprio_dim " +
                                std::to_string(cfg_.proprio_dim));
  }
  Tensor pn = scale(reshape(proprio, {1, cfg_.proprio_dim}),
                    1.0 / static_cast<double>(cfg_.obs_height));
  Tensor pt = pp2_.forward(gelu(pp1_.forward(pn)));
  Tensor vis = visual_masked ? mask_emb_ : visual_tokens(obs);
  StateTokens st;
  st.timestep = timestep;
  st.visual_masked = visual_masked;
  st.tokens = rmsnorm(concat_rows({vis, pt}), enc_norm_);
  return st;
}

Tensor Policy::init_input_tokens(const Tensor& proprio) const {
  if (static_cast<int>(proprio.numel()) != cfg_.proprio_dim) {
    throw std::invalid_argument("input tokens: proprio length " +
                                std::to_string(proprio.numel()) + " does not match proprio_dim " +
                                std::to_string(cfg_.proprio_dim));
  }
  Tensor pn = scale(reshape(proprio, {1, cfg_.proprio_dim}),
                    1.0 / static_cast<double>(cfg_.obs_height));
  std::vector<Tensor> rows;
  rows.reserve(static_cast<std::size_t>(cfg_.n_joints));
  for (int j = 0; j < cfg_.n_joints; ++j) {
    rows.push_back(concat_cols({slice_cols(pn, j, j + 1), pn}));
  }
  return add(tok_in_.forward(concat_rows(rows)), joint_emb_);
}

Tensor Policy::head_forward(const Tensor& tokens) const {
  Tensor fin = rmsnorm(tokens, final_norm_);
  Tensor out = head2_.forward(gelu(head1_.forward(fin)));
  return clamp(reshape(out, {cfg_.n_joints}), -cfg_.action_scale, cfg_.action_scale);
}

Policy::SequenceResult Policy::forward_sequence_full(const std::vector<Tensor>& obs,
                                                     const std::vector<Tensor>& proprio,
                                                     const std::vector<char>& visual_masked) const {
  if (obs.empty()) throw std::invalid_argument("forward: empty history");
  if (obs.size() != proprio.size() || obs.size() != visual_masked.size()) {
    throw std::invalid_argument("forward: history components differ in length");
  }
  const int steps = static_cast<int>(obs.size());
  const int m = cfg_.n_joints;
  const int k_cap = cfg_.k_max;
  AttentionTrace* tr = active_trace();

  std::vector<Tensor> enc, x;
  enc.reserve(static_cast<std::size_t>(steps));
  x.reserve(static_cast<std::size_t>(steps));
  for (int t = 0; t < steps; ++t) {
    enc.push_back(encode_state(t, obs[static_cast<std::size_t>(t)],
                               proprio[static_cast<std::size_t>(t)],
                               visual_masked[static_cast<std::size_t>(t)] != 0)
                      .tokens);
    x.push_back(init_input_tokens(proprio[static_cast<std::size_t>(t)]));
  }

  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    if (tr) tr->layer = static_cast<int>(l);
    std::vector<Tensor> normed;
    normed.reserve(static_cast<std::size_t>(steps));
    for (int t = 0; t < steps; ++t) normed.push_back(rmsnorm(x[static_cast<std::size_t>(t)], layer.norm1));
    std::vector<Tensor> att = layer.xattn.forward_sequence(normed, enc, k_cap);
    for (int t = 0; t < steps; ++t) {
      x[static_cast<std::size_t>(t)] = add(x[static_cast<std::size_t>(t)], att[static_cast<std::size_t>(t)]);
    }

    std::vector<Tensor> normed2;
    normed2.reserve(static_cast<std::size_t>(steps));
    for (int t = 0; t < steps; ++t) normed2.push_back(rmsnorm(x[static_cast<std::size_t>(t)], layer.norm2));
    Tensor self_out = layer.self.forward(
        steps == 1 ? normed2[0] : concat_rows(normed2), m, k_cap);
    for (int t = 0; t < steps; ++t) {
      x[static_cast<std::size_t>(t)] =
          add(x[static_cast<std::size_t>(t)], slice_rows(self_out, t * m, (t + 1) * m));
    }

    for (int t = 0; t < steps; ++t) {
      Tensor ff = layer.ffn2.forward(
          gelu(layer.ffn1.forward(rmsnorm(x[static_cast<std::size_t>(t)], layer.norm3))));
      x[static_cast<std::size_t>(t)] = add(x[static_cast<std::size_t>(t)], ff);
    }
  }
  if (tr) tr->layer = -1;

  SequenceResult res;
  res.final_tokens = x;
  res.actions.reserve(static_cast<std::size_t>(steps));
  for (int t = 0; t < steps; ++t) res.actions.push_back(head_forward(x[static_cast<std::size_t>(t)]));
  return res;
}

std::vector<Tensor> Policy::forward_sequence(const std::vector<Tensor>& obs,
                                             const std::vector<Tensor>& proprio,
                                             const std::vector<char>& visual_masked) const {
  return forward_sequence_full(obs, proprio, visual_masked).actions;
}

Tensor Policy::forward_policy(const std::vector<Tensor>& obs, const std::vector<Tensor>& proprio,
                              const std::vector<char>& visual_masked) const {
  if (obs.empty()) throw std::invalid_argument("forward_policy: empty history");
  if (static_cast<int>(obs.size()) > cfg_.k_max + 1) {
    throw std::invalid_argument("forward_policy: history of " + std::to_string(obs.size()) +
                                " steps exceeds the window of " + std::to_string(cfg_.k_max + 1));
  }
  return forward_sequence_full(obs, proprio, visual_masked).actions.back();
}

void Policy::collect_params(ParamList& out) const {
  out.push_back({"enc.conv1.k", conv1_k_});
  out.push_back({"enc.conv1.b", conv1_b_});
  out.push_back({"enc.conv2.k", conv2_k_});
  out.push_back({"enc.conv2.b", conv2_b_});
  vis_proj_.collect_params("enc.vis", out);
  out.push_back({"enc.mask", mask_emb_});
  pp1_.collect_params("enc.pp1", out);
  pp2_.collect_params("enc.pp2", out);
  out.push_back({"enc.norm", enc_norm_});
  out.push_back({"tok.joint", joint_emb_});
  tok_in_.collect_params("tok.in", out);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string p = "layer" + std::to_string(l);
    layers_[l].xattn.collect_params(p + ".xattn", out);
    layers_[l].self.collect_params(p + ".self", out);
    out.push_back({p + ".norm1", layers_[l].norm1});
    out.push_back({p + ".norm2", layers_[l].norm2});
    out.push_back({p + ".norm3", layers_[l].norm3});
    layers_[l].ffn1.collect_params(p + ".ffn1", out);
    layers_[l].ffn2.collect_params(p + ".ffn2", out);
  }
  out.push_back({"final_norm", final_norm_});
  head1_.collect_params("head1", out);
  head2_.collect_params("head2", out);
}

std::size_t Policy::parameter_count() const {
  ParamList params;
  collect_params(params);
  std::size_t total = 0;
  for (const NamedParam& p : params) total += p.value.numel();
  return total;
}

// ---------------------------------------------------------------------------
// Streaming
// ---------------------------------------------------------------------------

PolicyStream::PolicyStream(const Policy& policy, int inference_history) : policy_(&policy) {
  const int k_max = policy.config().k_max;
  const int hist = inference_history < 0 ? k_max : std::min(inference_history, k_max);
  capacity_ = hist + 1;
  for (int l = 0; l < policy.config().n_layers; ++l) {
    xattn_caches_.emplace_back(capacity_);
    self_caches_.emplace_back(capacity_);
  }
}

void PolicyStream::reset() {
  for (HistoryCache& c : xattn_caches_) c.clear();
  for (HistoryCache& c : self_caches_) c.clear();
  t_ = 0;
}

Tensor PolicyStream::step(const Tensor& obs, const Tensor& proprio, bool visual_masked) {
  const Policy& p = *policy_;
  AttentionTrace* tr = active_trace();
  if (tr) tr->timestep = t_;
  Tensor enc = p.encode_state(t_, obs, proprio, visual_masked).tokens;
  Tensor x = p.init_input_tokens(proprio);
  for (std::size_t l = 0; l < p.layers_.size(); ++l) {
    const Policy::Layer& layer = p.layers_[l];
    if (tr) tr->layer = static_cast<int>(l);
    x = add(x, layer.xattn.forward_streaming(xattn_caches_[l], t_, rmsnorm(x, layer.norm1), enc));
    x = add(x, layer.self.forward_streaming(self_caches_[l], t_, rmsnorm(x, layer.norm2)));
    x = add(x, layer.ffn2.forward(gelu(layer.ffn1.forward(rmsnorm(x, layer.norm3)))));
  }
  if (tr) tr->layer = -1;
  t_ += 1;
  return p.head_forward(x);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

nlohmann::json policy_config_to_json(const PolicyConfig& cfg) {
  return nlohmann::json{{"variant", variant_name(cfg.variant)},
                        {"n_layers", cfg.n_layers},
                        {"d_model", cfg.d_model},
                        {"n_heads", cfg.n_heads},
                        {"n_joints", cfg.n_joints},
                        {"n_state_tokens", cfg.n_state_tokens},
                        {"k_max", cfg.k_max},
                        {"obs_channels", cfg.obs_channels},
                        {"obs_height", cfg.obs_height},
                        {"obs_width", cfg.obs_width},
                        {"proprio_dim", cfg.proprio_dim},
                        {"action_scale", cfg.action_scale}};
}

PolicyConfig policy_config_from_json(const nlohmann::json& j) {
  PolicyConfig cfg;
  cfg.variant = variant_from_name(j.at("variant").get<std::string>());
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.n_joints = j.at("n_joints").get<int>();
  cfg.n_state_tokens = j.at("n_state_tokens").get<int>();
  cfg.k_max = j.at("k_max").get<int>();
  cfg.obs_channels = j.at("obs_channels").get<int>();
  cfg.obs_height = j.at("obs_height").get<int>();
  cfg.obs_width = j.at("obs_width").get<int>();
  cfg.proprio_dim = j.at("proprio_dim").get<int>();
  cfg.action_scale = j.at("action_scale").get<double>();
  return cfg;
}

void save_checkpoint(const std::string& path, const Policy& policy, const AdamState* adam,
                     const nlohmann::json& metadata) {
  ParamList params;
  policy.collect_params(params);

  nlohmann::json arrays = nlohmann::json::array();
  for (const NamedParam& p : params) {
    arrays.push_back({{"name", p.name}, {"shape", p.value.shape()}});
  }
  nlohmann::json header{{"format_version", 1},
                        {"config", policy_config_to_json(policy.config())},
                        {"metadata", metadata},
                        {"arrays", arrays}};
  if (adam) {
    header["adam"] = {{"step_count", adam->step_count}, {"lr", adam->lr},
                      {"beta1", adam->beta1},           {"beta2", adam->beta2},
                      {"eps", adam->eps}};
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot write '" + path + "'");
  out << kCheckpointMagic << "\n" << header.dump() << "\n";
  for (const NamedParam& p : params) {
    out.write(reinterpret_cast<const char*>(p.value.values().data()),
              static_cast<std::streamsize>(p.value.numel() * sizeof(double)));
  }
  if (adam) {
    // Moments are lazily allocated; an untouched state saves as zeros.
    auto write_moments = [&](const std::vector<std::vector<double>>& mo) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        const std::size_t count = params[i].value.numel();
        if (i < mo.size() && mo[i].size() == count) {
          out.write(reinterpret_cast<const char*>(mo[i].data()),
                    static_cast<std::streamsize>(count * sizeof(double)));
        } else {
          const std::vector<double> zeros(count, 0.0);
          out.write(reinterpret_cast<const char*>(zeros.data()),
                    static_cast<std::streamsize>(count * sizeof(double)));
        }
      }
    };
    write_moments(adam->first_moment);
    write_moments(adam->second_moment);
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

namespace {
void read_payload(std::ifstream& in, double* dst, std::size_t count, const std::string& name) {
  in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(count * sizeof(double)));
  if (static_cast<std::size_t>(in.gcount()) != count * sizeof(double)) {
    throw std::runtime_error("checkpoint payload truncated in array '" + name + "'");
  }
}
}  // namespace

Policy load_checkpoint(const std::string& path, nlohmann::json* metadata_out,
                       AdamState* adam_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot read '" + path + "'");
  std::string magic;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) {
    if (magic.rfind("STALAB-CKPT", 0) == 0) {
      throw std::runtime_error("checkpoint: unsupported version '" + magic + "'");
    }
    throw std::runtime_error("checkpoint: corrupt header in '" + path + "'");
  }
  std::string header_line;
  std::getline(in, header_line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception&) {
    throw std::runtime_error("checkpoint: corrupt header in '" + path + "'");
  }
  if (header.value("format_version", -1) != 1) {
    throw std::runtime_error("checkpoint: unsupported format_version");
  }

  Policy policy(policy_config_from_json(header.at("config")), 0);
  ParamList params;
  policy.collect_params(params);
  const nlohmann::json& arrays = header.at("arrays");
  if (arrays.size() != params.size()) {
    throw std::runtime_error("checkpoint: index lists " + std::to_string(arrays.size()) +
                             " arrays, this build has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name = arrays[i].at("name").get<std::string>();
    const std::vector<int> shape = arrays[i].at("shape").get<std::vector<int>>();
    if (name != params[i].name || shape != params[i].value.shape()) {
      throw std::runtime_error("checkpoint: array '" + name +
                               "' does not match parameter '" + params[i].name + "'");
    }
    read_payload(in, params[i].value.ptr(), params[i].value.numel(), name);
  }
  if (header.contains("adam") && adam_out) {
    AdamState st;
    st.step_count = header["adam"].at("step_count").get<std::int64_t>();
    st.lr = header["adam"].at("lr").get<double>();
    st.beta1 = header["adam"].at("beta1").get<double>();
    st.beta2 = header["adam"].at("beta2").get<double>();
    st.eps = header["adam"].at("eps").get<double>();
    st.first_moment.resize(params.size());
    st.second_moment.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      st.first_moment[i].resize(params[i].value.numel());
      read_payload(in, st.first_moment[i].data(), params[i].value.numel(),
                   "adam.m." + params[i].name);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      st.second_moment[i].resize(params[i].value.numel());
      read_payload(in, st.second_moment[i].data(), params[i].value.numel(),
                   "adam.v." + params[i].name);
    }
    *adam_out = std::move(st);
  }
  if (metadata_out) *metadata_out = header.value("metadata", nlohmann::json::object());
  return policy;
}

// ---------------------------------------------------------------------------
// Probe
// ---------------------------------------------------------------------------

ProbeInput make_probe_input(const PolicyConfig& raw) {
  const PolicyConfig cfg = raw.normalized();
  ProbeInput probe;
  const int steps = std::min(3, cfg.k_max + 1);
  for (int t = 0; t < steps; ++t) {
    Tensor obs = Tensor::zeros({cfg.obs_channels, cfg.obs_height, cfg.obs_width});
    for (std::size_t i = 0; i < obs.numel(); ++i) {
      obs.values()[i] = static_cast<double>((t * 31 + static_cast<int>(i) * 7) % 8);
    }
    Tensor pp = Tensor::zeros({cfg.proprio_dim});
    for (int i = 0; i < cfg.proprio_dim; ++i) {
      pp.values()[static_cast<std::size_t>(i)] =
          0.5 * static_cast<double>((t + i) % cfg.obs_height);
    }
    probe.obs.push_back(obs);
    probe.proprio.push_back(pp);
    probe.visual_masked.push_back(0);
  }
  return probe;
}

std::vector<double> probe_action(const Policy& policy) {
  NoGradGuard ng;
  ProbeInput probe = make_probe_input(policy.config());
  return policy.forward_policy(probe.obs, probe.proprio, probe.visual_masked).values();
}

}  // namespace sta

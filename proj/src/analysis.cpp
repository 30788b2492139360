#include "sta/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <stdexcept>
#include <utility>

#include <json.hpp>
#include "sta/attention.hpp"
#include "sta/nn.hpp"
#include "sta/ops.hpp"

namespace sta::analysis {
namespace {

namespace fs = std::filesystem;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct TraceScope {
  explicit TraceScope(AttentionTrace* t) { set_active_trace(t); }
  ~TraceScope() { set_active_trace(nullptr); }
  TraceScope(const TraceScope&) = delete;
  TraceScope& operator=(const TraceScope&) = delete;
};

// Per-offset score matrix for one record, window x n, row 0 = oldest offset.
// Transition path: column sums of the stacked S~_tau S~_t^T blocks. Standard
// path: softmax mass per key token, averaged over decoder rows.
std::vector<double> score_matrix(const AttentionTraceRecord& r) {
  const int w = r.window, n = r.n, m = r.m;
  std::vector<double> out(static_cast<std::size_t>(w) * static_cast<std::size_t>(n), 0.0);
  if (!r.transition.empty()) {
    for (int idx = 0; idx < w; ++idx)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          out[static_cast<std::size_t>(idx) * n + j] +=
              r.transition[(static_cast<std::size_t>(idx) * n + i) * n + j];
  } else {
    for (int idx = 0; idx < w; ++idx)
      for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int row = 0; row < m; ++row)
          s += r.weights[static_cast<std::size_t>(row) * (static_cast<std::size_t>(w) * n) +
                         static_cast<std::size_t>(idx) * n + j];
        out[static_cast<std::size_t>(idx) * n + j] = s / m;
      }
  }
  return out;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot open for writing: " + p.string());
  return f;
}

}  // namespace

InspectResult inspect_attention(const Policy& policy, const env::EnvConfig& env_cfg,
                                std::uint64_t seed, const std::string& out_dir,
                                const InspectOptions& opts) {
  const PolicyConfig& pc = policy.config();
  if (pc.variant != Variant::kSTA && !opts.standard_traces) {
    throw std::invalid_argument(
        "inspect: this policy has no transition path; request standard traces explicitly");
  }
  if (pc.n_joints != env_cfg.n_joints || pc.obs_channels != 1 ||
      pc.obs_height != env_cfg.grid_size || pc.obs_width != env_cfg.grid_size ||
      pc.proprio_dim != env_cfg.n_joints) {
    throw std::invalid_argument("inspect: policy io shape does not match the environment");
  }
  fs::create_directories(out_dir);

  NoGradGuard ng;
  env::EnvState state = env::env_reset(seed, env_cfg);
  const std::vector<char> schedule = state.occlusion_schedule;
  PolicyStream stream(policy);
  AttentionTrace trace;

  if (opts.preinit_history) {
    // Warm pushes are not episode steps; they stay outside the trace and the
    // exported timestep axis starts at the first acted step.
    Tensor obs0 = env::render_obs(state, env_cfg);
    Tensor pr0 = Tensor::from(state.arm, {env_cfg.n_joints});
    for (int i = 0; i < pc.k_max; ++i) (void)stream.step(obs0, pr0, false);
  }
  const int t_base = opts.preinit_history ? pc.k_max : 0;

  InspectResult res;
  {
    TraceScope scope(&trace);
    while (true) {
      Tensor obs = env::render_obs(state, env_cfg);
      Tensor proprio = Tensor::from(state.arm, {env_cfg.n_joints});
      Tensor action = stream.step(obs, proprio, false);
      env::StepOutcome out = env::env_step(state, action, env_cfg);
      state = out.state;
      ++res.steps;
      if (out.success) res.success = true;
      if (out.done || out.success) break;
    }
  }
  for (int t = 0; t < res.steps && t < static_cast<int>(schedule.size()); ++t) {
    if (schedule[static_cast<std::size_t>(t)]) {
      res.occluded_from = t;
      break;
    }
  }

  // Last layer only, one record per (step, head).
  std::map<std::pair<int, int>, const AttentionTraceRecord*> by_step_head;
  for (const AttentionTraceRecord& r : trace.records) {
    if (r.layer != pc.n_layers - 1) continue;
    const int e = r.timestep - t_base;
    if (e < 0 || e >= res.steps) {
      throw std::logic_error("inspect: trace record outside the episode step range");
    }
    if (!by_step_head.emplace(std::make_pair(e, r.head), &r).second) {
      throw std::logic_error("inspect: duplicate trace record for a step and head");
    }
  }
  const int H = pc.n_heads;
  if (static_cast<int>(by_step_head.size()) != res.steps * H) {
    throw std::logic_error("inspect: trace is missing records for some steps");
  }
  auto rec = [&](int e, int h) -> const AttentionTraceRecord& {
    return *by_step_head.at(std::make_pair(e, h));
  };

  // Head-averaged per-offset matrices, one per step, plus the offset>=5 share.
  std::vector<std::vector<double>> head_avg(static_cast<std::size_t>(res.steps));
  std::vector<double> far_frac(static_cast<std::size_t>(res.steps), 0.0);
  for (int e = 0; e < res.steps; ++e) {
    const int w = rec(e, 0).window, n = rec(e, 0).n;
    std::vector<double> avg(static_cast<std::size_t>(w) * n, 0.0);
    for (int h = 0; h < H; ++h) {
      const AttentionTraceRecord& r = rec(e, h);
      if (r.window != w || r.n != n) {
        throw std::logic_error("inspect: heads disagree on the window shape");
      }
      std::vector<double> sm = score_matrix(r);
      for (std::size_t i = 0; i < sm.size(); ++i) avg[i] += sm[i] / H;
    }
    double far = 0.0, tot = 0.0;
    for (int idx = 0; idx < w; ++idx) {
      const int offset = w - 1 - idx;
      for (int j = 0; j < n; ++j) {
        const double a = std::abs(avg[static_cast<std::size_t>(idx) * n + j]);
        tot += a;
        if (offset >= 5) far += a;
      }
    }
    far_frac[static_cast<std::size_t>(e)] = tot > 0.0 ? far / tot : 0.0;
    head_avg[static_cast<std::size_t>(e)] = std::move(avg);
  }
  const int early_n = std::min(res.steps, 5);
  for (int e = 0; e < early_n; ++e) res.early_far_mass += far_frac[static_cast<std::size_t>(e)];
  if (early_n > 0) res.early_far_mass /= early_n;
  if (res.occluded_from >= 0 && res.occluded_from < res.steps) {
    int count = 0;
    for (int e = res.occluded_from; e < res.steps; ++e) {
      res.post_onset_far_mass += far_frac[static_cast<std::size_t>(e)];
      ++count;
    }
    res.post_onset_far_mass /= count;
    res.far_mass_defined = early_n > 0;
  }

  // Per-head score and weight tables.
  for (int h = 0; h < H; ++h) {
    const std::string name = "trace_head" + std::to_string(h) + ".csv";
    std::ofstream f = open_out(fs::path(out_dir) / name);
    f << "timestep,offset,token,score\n";
    for (int e = 0; e < res.steps; ++e) {
      const AttentionTraceRecord& r = rec(e, h);
      std::vector<double> sm = score_matrix(r);
      for (int idx = 0; idx < r.window; ++idx)
        for (int j = 0; j < r.n; ++j)
          f << e << ',' << (r.window - 1 - idx) << ',' << j << ','
            << fmt(sm[static_cast<std::size_t>(idx) * r.n + j]) << '\n';
    }
    res.files.push_back(name);
  }
  for (int h = 0; h < H; ++h) {
    const std::string name = "weights_head" + std::to_string(h) + ".csv";
    std::ofstream f = open_out(fs::path(out_dir) / name);
    f << "timestep,row,col,weight\n";
    for (int e = 0; e < res.steps; ++e) {
      const AttentionTraceRecord& r = rec(e, h);
      const int cols = static_cast<int>(r.weights.size()) / r.m;
      for (int row = 0; row < r.m; ++row)
        for (int c = 0; c < cols; ++c)
          f << e << ',' << row << ',' << c << ','
            << fmt(r.weights[static_cast<std::size_t>(row) * cols + c]) << '\n';
    }
    res.files.push_back(name);
  }

  // One head-averaged heatmap per step, oldest offset first.
  for (int e = 0; e < res.steps; ++e) {
    const int w = rec(e, 0).window, n = rec(e, 0).n;
    const std::string name = "heatmap_t" + std::to_string(e) + ".csv";
    std::ofstream f = open_out(fs::path(out_dir) / name);
    f << "offset";
    for (int j = 0; j < n; ++j) f << ",token" << j;
    f << '\n';
    const std::vector<double>& avg = head_avg[static_cast<std::size_t>(e)];
    for (int idx = 0; idx < w; ++idx) {
      f << (w - 1 - idx);
      for (int j = 0; j < n; ++j) f << ',' << fmt(avg[static_cast<std::size_t>(idx) * n + j]);
      f << '\n';
    }
    res.files.push_back(name);
  }

  // Per-head token-summed series.
  {
    std::ofstream f = open_out(fs::path(out_dir) / "head_series.csv");
    f << "timestep,head,offset,value\n";
    for (int e = 0; e < res.steps; ++e)
      for (int h = 0; h < H; ++h) {
        const AttentionTraceRecord& r = rec(e, h);
        std::vector<double> sm = score_matrix(r);
        for (int idx = 0; idx < r.window; ++idx) {
          double s = 0.0;
          for (int j = 0; j < r.n; ++j) s += sm[static_cast<std::size_t>(idx) * r.n + j];
          f << e << ',' << h << ',' << (r.window - 1 - idx) << ',' << fmt(s) << '\n';
        }
      }
    res.files.push_back("head_series.csv");
  }

  {
    nlohmann::ordered_json man;
    man["format_version"] = 1;
    man["mode"] = pc.variant == Variant::kSTA ? "transition" : "softmax_mass";
    man["score_definition"] = pc.variant == Variant::kSTA
                                  ? "column sums of S~_tau S~_t^T per offset, last layer"
                                  : "softmax mass per key token averaged over rows, last layer";
    man["seed"] = seed;
    man["variant"] = variant_name(pc.variant);
    man["preinit_history"] = opts.preinit_history;
    man["steps"] = res.steps;
    man["success"] = res.success;
    man["occluded_from"] = res.occluded_from;
    man["early_far_mass"] = res.early_far_mass;
    man["post_onset_far_mass"] = res.post_onset_far_mass;
    man["far_mass_defined"] = res.far_mass_defined;
    man["heads"] = H;
    man["state_tokens"] = pc.n_state_tokens;
    man["decoder_tokens"] = pc.n_joints;
    man["window_capacity"] = pc.k_max + 1;
    man["files"] = res.files;
    std::ofstream f = open_out(fs::path(out_dir) / "manifest.json");
    f << man.dump(2) << '\n';
    res.files.push_back("manifest.json");
  }
  return res;
}

void BenchConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
    throw std::invalid_argument("bench config: d_model must be a positive multiple of n_heads");
  }
  if (m <= 0 || n <= 0) {
    throw std::invalid_argument("bench config: token counts must be positive");
  }
  if (history.empty()) {
    throw std::invalid_argument("bench config: history list must not be empty");
  }
  for (int k : history) {
    if (k < 0) throw std::invalid_argument("bench config: history lengths must be non-negative");
  }
  if (timing_reps <= 0) {
    throw std::invalid_argument("bench config: timing_reps must be positive");
  }
}

namespace {

struct StepInputs {
  Tensor x_dec, x_enc;
};

StepInputs fresh_inputs(std::mt19937_64& rng, const BenchConfig& cfg) {
  return {normal_init(rng, {cfg.m, cfg.d_model}, 1.0),
          normal_init(rng, {cfg.n, cfg.d_model}, 1.0)};
}

int logged_width(const std::vector<int>& log, const char* variant) {
  if (log.empty()) throw std::logic_error(std::string("bench: no softmax width logged for ") + variant);
  for (int w : log) {
    if (w != log.front()) {
      throw std::logic_error(std::string("bench: softmax width disagrees across heads for ") + variant);
    }
  }
  return log.front();
}

double time_per_step_us(const std::function<void()>& body, int reps) {
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) body();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::micro>(t1 - t0).count() / reps;
}

}  // namespace

BenchReport bench_inference(const BenchConfig& cfg) {
  cfg.validate();
  NoGradGuard ng;
  BenchReport rep;
  rep.config = cfg;

  const int max_k = *std::max_element(cfg.history.begin(), cfg.history.end());
  AttentionConfig acfg;
  acfg.d_model = cfg.d_model;
  acfg.n_heads = cfg.n_heads;
  acfg.max_history = max_k;
  std::mt19937_64 init_rng(cfg.seed);
  const MultiHeadCrossAttention sta(acfg, MultiHeadCrossAttention::Mode::kStateTransition,
                                    init_rng);
  const MultiHeadCrossAttention std_attn(acfg, MultiHeadCrossAttention::Mode::kStandard, init_rng);

  // One emitted step on a warm cache: push the new step, attend over the
  // window the cache already holds.
  auto cached_row = [&](const MultiHeadCrossAttention& attn, const std::vector<int>& width_source,
                        const std::string& variant, int k, std::uint64_t stream_salt) {
    std::mt19937_64 rng(cfg.seed ^ stream_salt);
    HistoryCache cache(k + 1);
    int t = 0;
    for (; t < k; ++t) {
      StepInputs in = fresh_inputs(rng, cfg);
      cache.push(attn.project(t, in.x_dec, in.x_enc));
    }
    StepInputs in = fresh_inputs(rng, cfg);
    clear_softmax_width_log();
    reset_mac_count();
    (void)attn.forward_streaming(cache, t, in.x_dec, in.x_enc);
    ++t;
    BenchRow row;
    row.variant = variant;
    row.k = k;
    row.macs = mac_count();
    row.softmax_width = logged_width(width_source, variant.c_str());
    row.per_step_us = time_per_step_us(
        [&] {
          StepInputs next = fresh_inputs(rng, cfg);
          (void)attn.forward_streaming(cache, t, next.x_dec, next.x_enc);
          ++t;
        },
        cfg.timing_reps);
    return row;
  };

  // One emitted step rebuilt from nothing: project and push the whole window,
  // attend once at the end.
  auto scratch_row = [&](int k) {
    std::mt19937_64 rng(cfg.seed ^ 0x73637261ULL);
    std::vector<StepInputs> window;
    window.reserve(static_cast<std::size_t>(k) + 1);
    for (int i = 0; i <= k; ++i) window.push_back(fresh_inputs(rng, cfg));
    auto run = [&] {
      HistoryCache cache(k + 1);
      for (int i = 0; i < k; ++i) cache.push(sta.project(i, window[static_cast<std::size_t>(i)].x_dec,
                                                         window[static_cast<std::size_t>(i)].x_enc));
      (void)sta.forward_streaming(cache, k, window[static_cast<std::size_t>(k)].x_dec,
                                  window[static_cast<std::size_t>(k)].x_enc);
    };
    clear_softmax_width_log();
    reset_mac_count();
    run();
    BenchRow row;
    row.variant = "sta_scratch";
    row.k = k;
    row.macs = mac_count();
    row.softmax_width = logged_width(transition_softmax_widths(), "sta_scratch");
    row.per_step_us = time_per_step_us(run, cfg.timing_reps);
    return row;
  };

  std::vector<int> ks = cfg.history;
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  for (int k : ks) {
    rep.rows.push_back(cached_row(sta, transition_softmax_widths(), "sta_cached", k, 0x63616368ULL));
    rep.rows.push_back(scratch_row(k));
    rep.rows.push_back(cached_row(std_attn, standard_softmax_widths(), "standard", k, 0x7374640aULL));
  }
  clear_softmax_width_log();

  // Slope of cached transition-path MACs per unit history, exact or nothing.
  std::vector<std::pair<int, std::uint64_t>> pts;
  for (const BenchRow& r : rep.rows) {
    if (r.variant == "sta_cached") pts.emplace_back(r.k, r.macs);
  }
  const int d_s = acfg.d_s();
  rep.predicted_slope =
      static_cast<std::uint64_t>(cfg.n_heads) *
      (static_cast<std::uint64_t>(cfg.n) * cfg.n * d_s +
       static_cast<std::uint64_t>(cfg.m) * cfg.n * cfg.n);
  bool exact = pts.size() >= 2;
  std::uint64_t slope = 0;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const std::uint64_t dm = pts[i].second - pts[i - 1].second;
    const int dk = pts[i].first - pts[i - 1].first;
    if (dm % static_cast<std::uint64_t>(dk) != 0) {
      exact = false;
      break;
    }
    const std::uint64_t s = dm / static_cast<std::uint64_t>(dk);
    if (i == 1) {
      slope = s;
    } else if (s != slope) {
      exact = false;
      break;
    }
  }
  rep.measured_slope = slope;
  rep.slope_exact = exact && slope == rep.predicted_slope;

  // Dominance checked at k = 15 when the sweep includes it, else at the
  // largest history measured.
  int k_dom = ks.back();
  if (std::find(ks.begin(), ks.end(), 15) != ks.end()) k_dom = 15;
  std::uint64_t cached_macs = 0, scratch_macs = 0;
  for (const BenchRow& r : rep.rows) {
    if (r.k != k_dom) continue;
    if (r.variant == "sta_cached") cached_macs = r.macs;
    if (r.variant == "sta_scratch") scratch_macs = r.macs;
  }
  rep.cached_dominates_at_15 = cached_macs <= scratch_macs;
  return rep;
}

void write_bench_csv(const std::string& path, const BenchReport& report) {
  std::ofstream f = open_out(path);
  f << "variant,k,macs_per_step,softmax_width,per_step_us\n";
  for (const BenchRow& r : report.rows) {
    f << r.variant << ',' << r.k << ',' << r.macs << ',' << r.softmax_width << ','
      << fmt(r.per_step_us) << '\n';
  }
}

std::uint64_t param_fingerprint(const Policy& policy) {
  ParamList params;
  policy.collect_params(params);
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* p, std::size_t nbytes) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < nbytes; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const NamedParam& p : params) {
    mix(p.name.data(), p.name.size());
    for (double v : p.value.values()) mix(&v, sizeof v);
  }
  return h;
}

}  // namespace sta::analysis

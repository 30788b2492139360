#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sta/env.hpp"
#include "sta/policy.hpp"

namespace sta::analysis {

// ---------------------------------------------------------------------------
// Attention inspection
// ---------------------------------------------------------------------------

struct InspectOptions {
  // Policies without a transition path refuse inspection unless this is set;
  // with it, the export carries per-key softmax mass instead of transition
  // column sums.
  bool standard_traces = false;
  // Fill the window with copies of the first state before rolling, so every
  // exported step sees a full history instead of a growing one.
  bool preinit_history = false;
};

struct InspectResult {
  bool success = false;
  int steps = 0;
  int occluded_from = -1;  // first occluded step, -1 when the object stays visible
  // Share of absolute head-averaged score mass at offsets >= 5, averaged over
  // the first five steps and over the steps from occlusion onset onward.
  bool far_mass_defined = false;
  double early_far_mass = 0.0;
  double post_onset_far_mass = 0.0;
  std::vector<std::string> files;  // names written under out_dir
};

// Rolls one closed-loop episode with tracing active and writes, for the last
// layer only: per-head score and softmax-weight tables, one head-averaged
// heatmap per step (rows ordered oldest offset first), a per-head series of
// token-summed scores, and a manifest. Same seed, same bytes.
InspectResult inspect_attention(const Policy& policy, const env::EnvConfig& env_cfg,
                                std::uint64_t seed, const std::string& out_dir,
                                const InspectOptions& opts = {});

// ---------------------------------------------------------------------------
// Inference cost measurement
// ---------------------------------------------------------------------------

struct BenchConfig {
  int d_model = 64;
  int n_heads = 2;
  int m = 2;  // decoder tokens per step
  int n = 2;  // state tokens per step
  std::vector<int> history = {0, 3, 7, 15, 31};
  int timing_reps = 25;
  std::uint64_t seed = 0x5eedULL;
  void validate() const;
};

struct BenchRow {
  std::string variant;  // "sta_cached" | "sta_scratch" | "standard"
  int k = 0;
  std::uint64_t macs = 0;  // multiply-accumulates for one emitted step
  int softmax_width = 0;   // columns under one softmax, identical across heads
  double per_step_us = 0.0;
};

struct BenchReport {
  BenchConfig config;
  std::vector<BenchRow> rows;
  // Cached-path cost is affine in k; the slope per unit history is pinned to
  // the closed form n_heads * (n^2 d_s + m n^2) with zero tolerance.
  std::uint64_t measured_slope = 0;
  std::uint64_t predicted_slope = 0;
  bool slope_exact = false;
  bool cached_dominates_at_15 = false;  // cached MACs <= scratch MACs at k = 15
};

BenchReport bench_inference(const BenchConfig& cfg);
void write_bench_csv(const std::string& path, const BenchReport& report);

// ---------------------------------------------------------------------------
// Integrity helpers
// ---------------------------------------------------------------------------

// FNV-1a over parameter names and raw double bits, in collection order.
// Read-only passes over a policy must leave this unchanged.
std::uint64_t param_fingerprint(const Policy& policy);

}  // namespace sta::analysis

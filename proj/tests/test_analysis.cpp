#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include "sta/analysis.hpp"
#include "sta/env.hpp"
#include "sta/policy.hpp"

using namespace sta;
namespace fs = std::filesystem;

namespace {

PolicyConfig small_policy_config(Variant v) {
  PolicyConfig pc;
  pc.variant = v;
  pc.n_layers = 2;
  pc.d_model = 16;
  pc.n_heads = 2;
  pc.k_max = 4;
  return pc;
}

env::EnvConfig short_env() {
  env::EnvConfig ec;
  ec.horizon = 12;
  ec.occlusion_prob = 1.0;
  return ec;
}

fs::path fresh_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("sta_analysis_" + tag);
  fs::remove_all(p);
  return p;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream f(p);
  REQUIRE_MESSAGE(f.good(), "missing file: " << p.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    std::vector<std::string> cells;
    std::string cur;
    std::istringstream ss(line);
    while (std::getline(ss, cur, ',')) cells.push_back(cur);
    rows.push_back(cells);
  }
  return rows;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE_MESSAGE(f.good(), "missing file: " << p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("inspect exports last-layer transition traces with the expected shapes") {
  Policy policy(small_policy_config(Variant::kSTA), 77);
  env::EnvConfig ec = short_env();
  fs::path dir = fresh_dir("shapes");
  analysis::InspectResult res = analysis::inspect_attention(policy, ec, 5, dir.string());

  CHECK(res.steps > 0);
  const PolicyConfig& pc = policy.config();
  const int n = pc.n_state_tokens;

  // Growing window: step t carries offsets 0..min(t, k_max), each token once.
  for (int h = 0; h < pc.n_heads; ++h) {
    auto rows = read_csv(dir / ("trace_head" + std::to_string(h) + ".csv"));
    REQUIRE(rows.size() > 1);
    CHECK(rows[0] == std::vector<std::string>{"timestep", "offset", "token", "score"});
    std::map<int, std::set<std::pair<int, int>>> seen;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      REQUIRE(rows[i].size() == 4);
      const int t = std::stoi(rows[i][0]);
      const int off = std::stoi(rows[i][1]);
      const int tok = std::stoi(rows[i][2]);
      CHECK(off <= std::min(t, pc.k_max));
      CHECK(seen[t].insert({off, tok}).second);
    }
    for (int t = 0; t < res.steps; ++t) {
      CHECK(static_cast<int>(seen[t].size()) == (std::min(t, pc.k_max) + 1) * n);
    }
  }

  // Softmax rows stay normalized over the n current state tokens.
  for (int h = 0; h < pc.n_heads; ++h) {
    auto rows = read_csv(dir / ("weights_head" + std::to_string(h) + ".csv"));
    std::map<std::pair<int, int>, double> sums;
    std::map<std::pair<int, int>, int> counts;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const std::pair<int, int> key{std::stoi(rows[i][0]), std::stoi(rows[i][1])};
      sums[key] += std::stod(rows[i][3]);
      counts[key] += 1;
    }
    for (const auto& [key, s] : sums) {
      CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
      CHECK(counts[key] == n);
    }
  }

  // Heatmap row count follows the window, oldest offset first.
  for (int t = 0; t < res.steps; ++t) {
    auto rows = read_csv(dir / ("heatmap_t" + std::to_string(t) + ".csv"));
    const int w = std::min(t, pc.k_max) + 1;
    REQUIRE(static_cast<int>(rows.size()) == w + 1);
    REQUIRE(static_cast<int>(rows[0].size()) == n + 1);
    for (int r = 1; r <= w; ++r) CHECK(std::stoi(rows[static_cast<std::size_t>(r)][0]) == w - r);
  }

  // Heatmap is the head average of the per-head scores; series sums tokens.
  {
    std::map<std::tuple<int, int, int, int>, double> score;  // (head, t, off, tok)
    for (int h = 0; h < pc.n_heads; ++h) {
      auto rows = read_csv(dir / ("trace_head" + std::to_string(h) + ".csv"));
      for (std::size_t i = 1; i < rows.size(); ++i) {
        score[{h, std::stoi(rows[i][0]), std::stoi(rows[i][1]), std::stoi(rows[i][2])}] =
            std::stod(rows[i][3]);
      }
    }
    auto hm = read_csv(dir / "heatmap_t3.csv");
    for (std::size_t r = 1; r < hm.size(); ++r) {
      const int off = std::stoi(hm[r][0]);
      for (int j = 0; j < n; ++j) {
        double avg = 0.0;
        for (int h = 0; h < pc.n_heads; ++h) avg += score.at({h, 3, off, j}) / pc.n_heads;
        CHECK(std::stod(hm[r][static_cast<std::size_t>(j) + 1]) == doctest::Approx(avg).epsilon(1e-9));
      }
    }
    auto series = read_csv(dir / "head_series.csv");
    CHECK(series[0] == std::vector<std::string>{"timestep", "head", "offset", "value"});
    for (std::size_t i = 1; i < series.size(); ++i) {
      const int t = std::stoi(series[i][0]);
      const int h = std::stoi(series[i][1]);
      const int off = std::stoi(series[i][2]);
      double sum = 0.0;
      for (int j = 0; j < n; ++j) sum += score.at({h, t, off, j});
      CHECK(std::stod(series[i][3]) == doctest::Approx(sum).epsilon(1e-9));
    }
  }

  // Manifest agrees with the returned result.
  {
    nlohmann::json man = nlohmann::json::parse(read_bytes(dir / "manifest.json"));
    CHECK(man["format_version"] == 1);
    CHECK(man["mode"] == "transition");
    CHECK(man["steps"] == res.steps);
    CHECK(man["occluded_from"] == res.occluded_from);
    CHECK(man["far_mass_defined"] == res.far_mass_defined);
    CHECK(man["files"].size() == res.files.size() - 1);  // manifest lists the data files
  }
}

TEST_CASE("inspect reports the occlusion onset and bounded far-mass shares") {
  Policy policy(small_policy_config(Variant::kSTA), 78);
  env::EnvConfig ec = short_env();
  const std::uint64_t seed = 11;
  env::EnvState ref = env::env_reset(seed, ec);
  int onset = -1;
  for (std::size_t i = 0; i < ref.occlusion_schedule.size(); ++i) {
    if (ref.occlusion_schedule[i]) {
      onset = static_cast<int>(i);
      break;
    }
  }
  REQUIRE(onset >= 0);  // occlusion_prob = 1

  fs::path dir = fresh_dir("onset");
  analysis::InspectResult res = analysis::inspect_attention(policy, ec, seed, dir.string());
  CHECK(res.occluded_from == onset);
  CHECK(res.far_mass_defined);
  CHECK(res.early_far_mass >= 0.0);
  CHECK(res.early_far_mass <= 1.0);
  CHECK(res.post_onset_far_mass >= 0.0);
  CHECK(res.post_onset_far_mass <= 1.0);
}

TEST_CASE("inspect is byte-deterministic and leaves the policy untouched") {
  Policy policy(small_policy_config(Variant::kSTA), 79);
  env::EnvConfig ec = short_env();
  const std::uint64_t before = analysis::param_fingerprint(policy);

  fs::path a = fresh_dir("det_a");
  fs::path b = fresh_dir("det_b");
  analysis::InspectResult ra = analysis::inspect_attention(policy, ec, 21, a.string());
  analysis::InspectResult rb = analysis::inspect_attention(policy, ec, 21, b.string());

  CHECK(analysis::param_fingerprint(policy) == before);
  REQUIRE(ra.files == rb.files);
  for (const std::string& f : ra.files) CHECK(read_bytes(a / f) == read_bytes(b / f));
}

TEST_CASE("policies without a transition path need the explicit standard-trace flag") {
  Policy policy(small_policy_config(Variant::kStandardXAttn), 80);
  env::EnvConfig ec = short_env();
  fs::path dir = fresh_dir("std");
  CHECK_THROWS_AS(analysis::inspect_attention(policy, ec, 3, dir.string()), std::invalid_argument);

  analysis::InspectOptions opts;
  opts.standard_traces = true;
  analysis::InspectResult res = analysis::inspect_attention(policy, ec, 3, dir.string(), opts);
  CHECK(res.steps > 0);
  nlohmann::json man = nlohmann::json::parse(read_bytes(dir / "manifest.json"));
  CHECK(man["mode"] == "softmax_mass");

  // The flattened softmax spans the whole window: min(t, k_max)+1 groups of n
  // columns, rows normalized across all of them.
  const PolicyConfig& pc = policy.config();
  auto rows = read_csv(dir / "weights_head0.csv");
  std::map<std::pair<int, int>, double> sums;
  std::map<std::pair<int, int>, int> counts;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const std::pair<int, int> key{std::stoi(rows[i][0]), std::stoi(rows[i][1])};
    sums[key] += std::stod(rows[i][3]);
    counts[key] += 1;
  }
  for (const auto& [key, s] : sums) {
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(counts[key] == (std::min(key.first, pc.k_max) + 1) * pc.n_state_tokens);
  }
}

TEST_CASE("history-free policies trace a single-step window") {
  Policy policy(small_policy_config(Variant::kNoHistory), 81);
  env::EnvConfig ec = short_env();
  fs::path dir = fresh_dir("nohist");
  analysis::InspectOptions opts;
  opts.standard_traces = true;
  analysis::InspectResult res = analysis::inspect_attention(policy, ec, 4, dir.string(), opts);
  CHECK(res.steps > 0);
  auto rows = read_csv(dir / "trace_head0.csv");
  for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i][1] == "0");
}

TEST_CASE("pre-initialized history gives every step a full window") {
  Policy policy(small_policy_config(Variant::kSTA), 82);
  env::EnvConfig ec = short_env();
  fs::path dir = fresh_dir("preinit");
  analysis::InspectOptions opts;
  opts.preinit_history = true;
  analysis::InspectResult res = analysis::inspect_attention(policy, ec, 6, dir.string(), opts);
  const int w = policy.config().k_max + 1;
  for (int t = 0; t < res.steps; ++t) {
    auto rows = read_csv(dir / ("heatmap_t" + std::to_string(t) + ".csv"));
    CHECK(static_cast<int>(rows.size()) == w + 1);
  }
  nlohmann::json man = nlohmann::json::parse(read_bytes(dir / "manifest.json"));
  CHECK(man["preinit_history"] == true);
}

TEST_CASE("per-step cost is affine in history with the predicted transition slope") {
  analysis::BenchConfig bc;
  bc.d_model = 32;
  bc.n_heads = 2;
  bc.m = 2;
  bc.n = 3;
  bc.history = {0, 3, 7, 15};
  bc.timing_reps = 2;
  bc.seed = 99;
  analysis::BenchReport rep = analysis::bench_inference(bc);

  const int d_s = bc.d_model / bc.n_heads;
  CHECK(rep.predicted_slope ==
        static_cast<std::uint64_t>(bc.n_heads) * (bc.n * bc.n * d_s + bc.m * bc.n * bc.n));
  CHECK(rep.slope_exact);
  CHECK(rep.measured_slope == rep.predicted_slope);
  CHECK(rep.cached_dominates_at_15);
  REQUIRE(rep.rows.size() == bc.history.size() * 3);

  std::map<std::pair<std::string, int>, analysis::BenchRow> by_key;
  for (const analysis::BenchRow& r : rep.rows) by_key[{r.variant, r.k}] = r;
  for (int k : bc.history) {
    CHECK(by_key.at({"sta_cached", k}).softmax_width == bc.n);
    CHECK(by_key.at({"sta_scratch", k}).softmax_width == bc.n);
    CHECK(by_key.at({"standard", k}).softmax_width == (k + 1) * bc.n);
    CHECK(by_key.at({"sta_cached", k}).macs <= by_key.at({"sta_scratch", k}).macs);
  }
  // With no history to replay, scratch and cached do the same work.
  CHECK(by_key.at({"sta_cached", 0}).macs == by_key.at({"sta_scratch", 0}).macs);
  // Scratch replays the whole window, so its cost grows faster than cached.
  CHECK(by_key.at({"sta_scratch", 15}).macs > by_key.at({"sta_cached", 15}).macs);

  fs::path dir = fresh_dir("bench");
  fs::create_directories(dir);
  analysis::write_bench_csv((dir / "bench.csv").string(), rep);
  auto rows = read_csv(dir / "bench.csv");
  CHECK(rows.size() == rep.rows.size() + 1);
  CHECK(rows[0] == std::vector<std::string>{"variant", "k", "macs_per_step", "softmax_width",
                                            "per_step_us"});
}

TEST_CASE("bench rejects degenerate configurations") {
  analysis::BenchConfig bc;
  bc.d_model = 30;
  bc.n_heads = 4;
  CHECK_THROWS_AS(analysis::bench_inference(bc), std::invalid_argument);
  bc = {};
  bc.history = {};
  CHECK_THROWS_AS(analysis::bench_inference(bc), std::invalid_argument);
  bc = {};
  bc.history = {-1};
  CHECK_THROWS_AS(analysis::bench_inference(bc), std::invalid_argument);
  bc = {};
  bc.timing_reps = 0;
  CHECK_THROWS_AS(analysis::bench_inference(bc), std::invalid_argument);
}

TEST_CASE("parameter fingerprints tell policies apart") {
  Policy a(small_policy_config(Variant::kSTA), 1);
  Policy b(small_policy_config(Variant::kSTA), 2);
  CHECK(analysis::param_fingerprint(a) != analysis::param_fingerprint(b));
  CHECK(analysis::param_fingerprint(a) == analysis::param_fingerprint(a));
}

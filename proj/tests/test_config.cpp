#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "sta/config.hpp"
#include "test_util.hpp"

using namespace sta;
using namespace sta::config;
using doctest::Contains;

namespace fs = std::filesystem;

TEST_CASE("empty text resolves to the documented defaults") {
  RunConfig cfg = parse_config("");
  RunConfig defaults;
  CHECK(cfg == defaults);

  // Reference architecture table values.
  CHECK(cfg.policy.d_model == 512);
  CHECK(cfg.policy.n_layers == 4);
  CHECK(cfg.policy.n_heads == 8);
  CHECK(cfg.train.batch_size == 16);
  CHECK(cfg.train.seq_len == 16);
  CHECK(cfg.train.lr == 8e-5);
  CHECK(cfg.train.epochs == 50);
  CHECK(cfg.train.eval_episodes == 100);
  CHECK(cfg.train.eval_seeds == 3);
  CHECK(cfg.policy.k_max == 15);
  CHECK(cfg.policy.variant == Variant::kSTA);
}

TEST_CASE("comments, blank lines, and loose spacing parse") {
  const std::string text =
      "# leading comment\n"
      "\n"
      "  model.d_model   =  64   # trailing comment\n"
      "model.n_heads=2\n"
      "\t model.n_layers = 2 \n"
      "variant = STANDARD_XATTN\n";
  RunConfig cfg = parse_config(text);
  CHECK(cfg.policy.d_model == 64);
  CHECK(cfg.policy.n_heads == 2);
  CHECK(cfg.policy.n_layers == 2);
  CHECK(cfg.policy.variant == Variant::kStandardXAttn);
  // Untouched keys keep their defaults.
  CHECK(cfg.train.lr == 8e-5);
}

TEST_CASE("every key assigns its field") {
  const std::string text =
      "format_version = 1\n"
      "variant = NO_HISTORY\n"
      "model.n_layers = 3\n"
      "model.d_model = 48\n"
      "model.n_heads = 4\n"
      "model.n_joints = 2\n"
      "model.n_state_tokens = 5\n"
      "model.k_max = 7\n"
      "model.obs_channels = 1\n"
      "model.obs_height = 12\n"
      "model.obs_width = 12\n"
      "model.proprio_dim = 2\n"
      "model.action_scale = 1.5\n"
      "train.seq_len = 8\n"
      "train.batch_size = 4\n"
      "train.lr = 0.00012999999999999999\n"
      "train.epochs = 3\n"
      "train.mask_enabled = false\n"
      "train.batches_per_epoch = 11\n"
      "train.eval_episodes = 9\n"
      "train.eval_seeds = 2\n"
      "train.eval_history = 5\n"
      "train.eval_masked = true\n"
      "env.grid_size = 12\n"
      "env.horizon = 40\n"
      "env.n_joints = 2\n"
      "env.grasp_radius = 0.9\n"
      "env.gain = 0.4\n"
      "env.home_x = 6\n"
      "env.home_y = 6\n"
      "env.min_separation = 2.5\n"
      "env.occlusion_prob = 0.25\n"
      "env.occlusion_visible_min = 2\n"
      "env.occlusion_visible_max = 5\n"
      "env.noise_prob = 0.5\n"
      "env.noise_start_min = 3\n"
      "env.noise_start_max = 20\n"
      "env.noise_len_min = 2\n"
      "env.noise_len_max = 6\n"
      "env.noise_mag_min = 1.5\n"
      "env.noise_mag_max = 3.5\n"
      "data.episodes = 12\n"
      "data.noise = false\n"
      "eval.mask_span_limit = 9\n";
  RunConfig cfg = parse_config(text);
  CHECK(cfg.policy.variant == Variant::kNoHistory);
  CHECK(cfg.policy.n_layers == 3);
  CHECK(cfg.policy.d_model == 48);
  CHECK(cfg.policy.n_heads == 4);
  CHECK(cfg.policy.n_joints == 2);
  CHECK(cfg.policy.n_state_tokens == 5);
  CHECK(cfg.policy.k_max == 7);
  CHECK(cfg.policy.obs_height == 12);
  CHECK(cfg.policy.obs_width == 12);
  CHECK(cfg.policy.proprio_dim == 2);
  CHECK(cfg.policy.action_scale == 1.5);
  CHECK(cfg.train.seq_len == 8);
  CHECK(cfg.train.batch_size == 4);
  CHECK(cfg.train.lr == 0.00012999999999999999);
  CHECK(cfg.train.epochs == 3);
  CHECK_FALSE(cfg.train.mask_enabled);
  CHECK(cfg.train.batches_per_epoch == 11);
  CHECK(cfg.train.eval_episodes == 9);
  CHECK(cfg.train.eval_seeds == 2);
  CHECK(cfg.train.eval_history == 5);
  CHECK(cfg.train.eval_masked);
  CHECK(cfg.env.grid_size == 12);
  CHECK(cfg.env.horizon == 40);
  CHECK(cfg.env.n_joints == 2);
  CHECK(cfg.env.grasp_radius == 0.9);
  CHECK(cfg.env.gain == 0.4);
  CHECK(cfg.env.home_x == 6.0);
  CHECK(cfg.env.home_y == 6.0);
  CHECK(cfg.env.min_separation == 2.5);
  CHECK(cfg.env.occlusion_prob == 0.25);
  CHECK(cfg.env.occlusion_visible_min == 2);
  CHECK(cfg.env.occlusion_visible_max == 5);
  CHECK(cfg.env.noise_prob == 0.5);
  CHECK(cfg.env.noise_start_min == 3);
  CHECK(cfg.env.noise_start_max == 20);
  CHECK(cfg.env.noise_len_min == 2);
  CHECK(cfg.env.noise_len_max == 6);
  CHECK(cfg.env.noise_mag_min == 1.5);
  CHECK(cfg.env.noise_mag_max == 3.5);
  CHECK(cfg.data_episodes == 12);
  CHECK_FALSE(cfg.data_noise);
  CHECK(cfg.mask_span_limit == 9);
}

TEST_CASE("resolved echo is a fixpoint") {
  const std::string text =
      "model.d_model = 24\n"
      "model.n_heads = 2\n"
      "model.n_layers = 2\n"
      "train.lr = 0.000333\n"
      "env.grasp_radius = 0.6000000000000001\n";
  RunConfig cfg = parse_config(text);
  const std::string echo = resolved_config(cfg);
  RunConfig back = parse_config(echo);
  CHECK(back == cfg);
  CHECK(resolved_config(back) == echo);

  // The awkward double survives the round trip bitwise.
  CHECK(back.env.grasp_radius == 0.6000000000000001);

  // Defaults round-trip too.
  RunConfig defaults;
  CHECK(parse_config(resolved_config(defaults)) == defaults);
}

TEST_CASE("unknown keys are rejected with line number and suggestion") {
  const std::string text =
      "model.d_model = 64\n"
      "model.n_heads = 2\n"
      "modle.n_layers = 2\n";
  CHECK_THROWS_WITH_AS(parse_config(text, "run.cfg"),
                       Contains("run.cfg:3"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config(text, "run.cfg"),
                       Contains("did you mean 'model.n_layers'?"), std::runtime_error);

  // A key nothing resembles gets no suggestion, only the rejection.
  try {
    parse_config("zzqqxx = 1\n");
    FAIL("expected a parse error");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("unknown key 'zzqqxx'") != std::string::npos);
    CHECK(msg.find("did you mean") == std::string::npos);
  }
}

TEST_CASE("malformed lines carry their line numbers") {
  CHECK_THROWS_WITH_AS(parse_config("model.d_model 64\n", "c"),
                       Contains("c:1: expected 'key = value'"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config("\n\n= 3\n", "c"), Contains("c:3: missing key"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config("model.d_model = twelve\n", "c"),
                       Contains("c:1: key 'model.d_model' expects an integer"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config("train.lr = fast\n", "c"),
                       Contains("expects a number"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config("train.mask_enabled = yes\n", "c"),
                       Contains("expects true or false"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config("variant = MYSTERY\n", "c"),
                       Contains("expects STA, STANDARD_XATTN, or NO_HISTORY"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config("model.d_model = \n", "c"), Contains("empty value"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config("model.d_model = 64\nmodel.d_model = 32\n", "c"),
                       Contains("c:2: duplicate key 'model.d_model'"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config("model.d_model = 99999999999999999999\n", "c"),
                       Contains("expects an integer"), std::runtime_error);
}

TEST_CASE("range violations name the field and the bound") {
  CHECK_THROWS_WITH_AS(parse_config("train.seq_len = 1\ntrain.mask_enabled = false\n"),
                       Contains("train.seq_len must be >= 2"), std::runtime_error);
  // A masked run needs room for a span: the library validator owns this bound.
  CHECK_THROWS_WITH_AS(parse_config("train.seq_len = 3\n"), Contains("seq_len >= 4"),
                       std::invalid_argument);
  CHECK_THROWS_AS(parse_config("model.d_model = 30\nmodel.n_heads = 4\n"),
                  std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("data.episodes = 0\n"),
                       Contains("data.episodes must be >= 1"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config("eval.mask_span_limit = 0\n"),
                       Contains("eval.mask_span_limit must be >= 1"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config("format_version = 2\n"),
                       Contains("format_version 2 is not supported"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config("env.grid_size = 12\n"),
                       Contains("must equal env.grid_size"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config("model.obs_channels = 2\n"),
                       Contains("model.obs_channels must be 1"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config("model.n_joints = 3\nmodel.proprio_dim = 3\n"),
                       Contains("model.n_joints"), std::runtime_error);
}

TEST_CASE("files load and the resolved echo lands on disk") {
  const fs::path dir = fs::temp_directory_path() / "sta_config_test";
  fs::create_directories(dir);
  const fs::path cfg_path = dir / "run.cfg";
  {
    std::ofstream out(cfg_path);
    out << "model.d_model = 40\nmodel.n_heads = 4\n";
  }
  RunConfig cfg = load_config(cfg_path.string());
  CHECK(cfg.policy.d_model == 40);

  const fs::path echo_path = dir / "resolved.cfg";
  write_resolved_config(echo_path.string(), cfg);
  RunConfig back = load_config(echo_path.string());
  CHECK(back == cfg);

  CHECK_THROWS_WITH_AS(load_config((dir / "absent.cfg").string()), Contains("cannot open"),
                       std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("edit distance backs plausible suggestions") {
  CHECK(edit_distance("train", "train") == 0);
  CHECK(edit_distance("train", "tarin") == 2);
  CHECK(edit_distance("bench", "brunch") == 2);
  CHECK(edit_distance("", "abc") == 3);
  CHECK(nearest_candidate("evla", {"eval", "train", "bench"}) == "eval");
  CHECK(nearest_candidate("qqqqq", {"eval", "train", "bench"}).empty());
}

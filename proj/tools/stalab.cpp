#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sta/analysis.hpp"
#include "sta/config.hpp"
#include "sta/env.hpp"
#include "sta/policy.hpp"
#include "sta/train.hpp"

namespace fs = std::filesystem;
using namespace sta;

namespace {

// Bad invocations exit 1; failures while doing the work exit 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommandInfo {
  const char* name;
  const char* blurb;
};

constexpr CommandInfo kCommands[] = {
    {"generate-data", "roll scripted demonstrations into a dataset"},
    {"train", "train a policy on a dataset"},
    {"eval", "measure closed-loop success of a checkpoint"},
    {"ablate-masking", "masked vs unmasked training under blacked-out inference"},
    {"ablate-history", "one checkpoint across inference history lengths"},
    {"inspect-attention", "export attention traces from one closed-loop episode"},
    {"bench", "per-step inference cost against history length"},
};

void print_usage(std::ostream& os) {
  os << "usage: stalab <command> [options]\n\ncommands:\n";
  for (const CommandInfo& c : kCommands) {
    os << "  " << std::left << std::setw(19) << c.name << c.blurb << '\n';
  }
  os << "\ncommon options (every command):\n"
        "  --config PATH  run configuration file (omitted: built-in defaults)\n"
        "  --seed N       base random seed (default 0)\n"
        "  --out DIR      output directory (default stalab_out)\n"
        "\nrun 'stalab <command> --help' for command-specific options\n";
}

struct CommonArgs {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out = "stalab_out";
};

void add_common(CLI::App& app, CommonArgs& c) {
  app.add_option("--config", c.config_path, "run configuration file");
  app.add_option("--seed", c.seed, "base random seed");
  app.add_option("--out", c.out, "output directory");
}

// CLI11 errors are invocation problems; help is a clean exit.
bool parse_or_stop(CLI::App& app, int argc, char** argv, int& code) {
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    code = 0;
    return true;
  } catch (const CLI::ParseError& e) {
    std::cerr << "stalab: " << e.what() << '\n';
    code = 1;
    return true;
  }
  return false;
}

config::RunConfig load_run_config(const CommonArgs& c) {
  config::RunConfig cfg;
  if (!c.config_path.empty()) {
    cfg = config::load_config(c.config_path);
  } else {
    cfg.validate();
  }
  return cfg;
}

// Every command leaves the fully resolved configuration next to its outputs.
void prepare_out(const CommonArgs& c, const config::RunConfig& cfg) {
  fs::create_directories(c.out);
  config::write_resolved_config((fs::path(c.out) / "resolved.cfg").string(), cfg);
}

Policy load_policy(const std::string& checkpoint) {
  if (checkpoint.empty()) throw UsageError("a checkpoint path is required");
  return load_checkpoint(checkpoint);
}

void check_history_range(int history, const PolicyConfig& pc) {
  if (history < -1 || history > pc.k_max) {
    throw UsageError("history must lie in [-1, " + std::to_string(pc.k_max) +
                     "] for this checkpoint (-1 means its own window)");
  }
}

int run_generate_data(int argc, char** argv) {
  CLI::App app{"roll scripted demonstrations into a dataset"};
  CommonArgs c;
  add_common(app, c);
  int code = 0;
  if (parse_or_stop(app, argc, argv, code)) return code;

  config::RunConfig cfg = load_run_config(c);
  prepare_out(c, cfg);
  const std::string prefix = (fs::path(c.out) / "dataset").string();
  env::DatasetInfo info =
      env::generate_dataset(prefix, cfg.data_episodes, cfg.data_noise, c.seed, cfg.env);
  std::cout << "wrote " << info.n_episodes << " episodes to " << prefix
            << ".{jsonl,f64,manifest.json}\n"
            << "  episodes with perception noise: " << info.episodes_with_noise
            << "; attempts: " << info.total_attempts << " (" << info.discarded_failures
            << " discarded)\n";
  return 0;
}

int run_train(int argc, char** argv) {
  CLI::App app{"train a policy on a dataset"};
  CommonArgs c;
  add_common(app, c);
  std::string data;
  app.add_option("--data", data, "dataset path prefix from generate-data")->required();
  int code = 0;
  if (parse_or_stop(app, argc, argv, code)) return code;

  config::RunConfig cfg = load_run_config(c);
  prepare_out(c, cfg);
  env::Dataset ds = env::load_dataset(data);
  const std::string want = env::config_hash(cfg.env);
  const std::string got = ds.manifest.value("config_hash", "");
  if (got != want) {
    throw std::runtime_error(
        "train: dataset '" + data +
        "' was generated under a different environment configuration (hash " + got +
        ", expected " + want + ")");
  }
  Policy policy(cfg.policy, c.seed);
  train::TrainResult tr = train::train(policy, ds, cfg.train, cfg.env, c.seed, c.out);
  std::cout << "variant " << variant_name(cfg.policy.variant) << ": best epoch " << tr.best_epoch
            << " with success " << tr.best_success << '\n'
            << "  metrics: " << tr.metrics_path << '\n'
            << "  best checkpoint: " << tr.best_checkpoint_path << '\n'
            << "  final checkpoint: " << tr.final_checkpoint_path << '\n';
  return 0;
}

int run_eval(int argc, char** argv) {
  CLI::App app{"measure closed-loop success of a checkpoint"};
  CommonArgs c;
  add_common(app, c);
  std::string checkpoint;
  int episodes = 100, repeats = 3, history = -1;
  bool masked = false;
  app.add_option("--checkpoint", checkpoint, "policy checkpoint to evaluate")->required();
  app.add_option("--episodes", episodes, "episodes per repeat");
  app.add_option("--repeats", repeats, "independent seeds to average over");
  app.add_option("--history", history, "inference window (-1: the checkpoint's own)");
  app.add_flag("--masked", masked, "black out observations in random spans");
  int code = 0;
  if (parse_or_stop(app, argc, argv, code)) return code;
  if (episodes < 1 || repeats < 1) throw UsageError("episodes and repeats must be positive");

  config::RunConfig cfg = load_run_config(c);
  Policy policy = load_policy(checkpoint);
  check_history_range(history, policy.config());
  prepare_out(c, cfg);

  nlohmann::ordered_json out;
  out["format_version"] = 1;
  out["checkpoint"] = checkpoint;
  out["variant"] = variant_name(policy.config().variant);
  out["episodes"] = episodes;
  out["repeats"] = repeats;
  out["history"] = history;
  out["masked"] = masked;
  out["mask_span_limit"] = cfg.mask_span_limit;
  out["per_seed"] = nlohmann::ordered_json::array();
  double mean = 0.0;
  for (int s = 0; s < repeats; ++s) {
    const std::uint64_t es = c.seed + 1000003ULL * static_cast<std::uint64_t>(s);
    train::EvalResult er = train::evaluate_policy(policy, cfg.env, episodes, es, history, masked,
                                                  cfg.mask_span_limit);
    out["per_seed"].push_back({{"seed", es},
                               {"successes", er.successes},
                               {"success_rate", er.success_rate}});
    mean += er.success_rate / repeats;
  }
  out["mean_success"] = mean;
  std::ofstream f(fs::path(c.out) / "eval.json");
  if (!f) throw std::runtime_error("cannot write eval.json under " + c.out);
  f << out.dump(2) << '\n';
  std::cout << "success " << mean << " over " << repeats << " x " << episodes << " episodes ("
            << variant_name(policy.config().variant) << ", history "
            << (history < 0 ? policy.config().k_max : history) << (masked ? ", masked" : "")
            << ")\n";
  return 0;
}

int run_ablate_masking(int argc, char** argv) {
  CLI::App app{"masked vs unmasked training under blacked-out inference"};
  CommonArgs c;
  add_common(app, c);
  std::string data;
  int episodes = 100, repeats = 3;
  app.add_option("--data", data, "dataset path prefix from generate-data")->required();
  app.add_option("--episodes", episodes, "evaluation episodes per repeat");
  app.add_option("--repeats", repeats, "independent evaluation seeds");
  int code = 0;
  if (parse_or_stop(app, argc, argv, code)) return code;
  if (episodes < 1 || repeats < 1) throw UsageError("episodes and repeats must be positive");

  config::RunConfig cfg = load_run_config(c);
  prepare_out(c, cfg);
  env::Dataset ds = env::load_dataset(data);

  nlohmann::ordered_json report;
  report["format_version"] = 1;
  report["episodes"] = episodes;
  report["repeats"] = repeats;
  report["mask_span_limit"] = cfg.mask_span_limit;
  double masked_training_success = 0.0, unmasked_training_success = 0.0;
  for (const bool mask_on : {true, false}) {
    config::RunConfig arm = cfg;
    arm.train.mask_enabled = mask_on;
    const std::string arm_dir =
        (fs::path(c.out) / (mask_on ? "train_masked" : "train_unmasked")).string();
    Policy policy(arm.policy, c.seed);
    train::TrainResult tr = train::train(policy, ds, arm.train, arm.env, c.seed, arm_dir);
    Policy best = load_checkpoint(fs::exists(tr.best_checkpoint_path)
                                      ? tr.best_checkpoint_path
                                      : tr.final_checkpoint_path);
    double masked_eval = 0.0, plain_eval = 0.0;
    for (int s = 0; s < repeats; ++s) {
      const std::uint64_t es = c.seed + 1000003ULL * static_cast<std::uint64_t>(s);
      masked_eval += train::evaluate_policy(best, arm.env, episodes, es, -1, true,
                                            cfg.mask_span_limit)
                         .success_rate /
                     repeats;
      plain_eval += train::evaluate_policy(best, arm.env, episodes, es, -1, false,
                                           cfg.mask_span_limit)
                        .success_rate /
                    repeats;
    }
    const char* key = mask_on ? "masked_training" : "unmasked_training";
    report[key] = {{"best_epoch", tr.best_epoch},
                   {"masked_eval_success", masked_eval},
                   {"plain_eval_success", plain_eval}};
    (mask_on ? masked_training_success : unmasked_training_success) = masked_eval;
    std::cout << key << ": masked-inference success " << masked_eval << ", plain " << plain_eval
              << '\n';
  }
  report["masked_inference_delta"] = masked_training_success - unmasked_training_success;
  std::ofstream f(fs::path(c.out) / "ablate_masking.json");
  if (!f) throw std::runtime_error("cannot write ablate_masking.json under " + c.out);
  f << report.dump(2) << '\n';
  std::cout << "masked-inference delta (masked - unmasked training): "
            << report["masked_inference_delta"].get<double>() << '\n';
  return 0;
}

int run_ablate_history(int argc, char** argv) {
  CLI::App app{"one checkpoint across inference history lengths"};
  CommonArgs c;
  add_common(app, c);
  std::string checkpoint;
  std::vector<int> histories = {15, 7, 3, 1};
  int episodes = 100, repeats = 3;
  app.add_option("--checkpoint", checkpoint, "policy checkpoint to evaluate")->required();
  app.add_option("--histories", histories, "inference windows to sweep")->delimiter(',');
  app.add_option("--episodes", episodes, "episodes per repeat");
  app.add_option("--repeats", repeats, "independent seeds per window");
  int code = 0;
  if (parse_or_stop(app, argc, argv, code)) return code;
  if (episodes < 1 || repeats < 1) throw UsageError("episodes and repeats must be positive");
  if (histories.empty()) throw UsageError("at least one history length is required");

  config::RunConfig cfg = load_run_config(c);
  Policy policy = load_policy(checkpoint);
  for (int h : histories) {
    if (h < 0 || h > policy.config().k_max) {
      throw UsageError("history " + std::to_string(h) + " lies outside [0, " +
                       std::to_string(policy.config().k_max) + "] for this checkpoint");
    }
  }
  prepare_out(c, cfg);

  std::ofstream csv(fs::path(c.out) / "ablate_history.csv");
  if (!csv) throw std::runtime_error("cannot write ablate_history.csv under " + c.out);
  csv << "history,seed,successes,success_rate\n";
  std::cout << "history  mean_success\n";
  nlohmann::ordered_json means = nlohmann::ordered_json::array();
  for (int h : histories) {
    double mean = 0.0;
    for (int s = 0; s < repeats; ++s) {
      const std::uint64_t es = c.seed + 1000003ULL * static_cast<std::uint64_t>(s);
      train::EvalResult er =
          train::evaluate_policy(policy, cfg.env, episodes, es, h, false, cfg.mask_span_limit);
      csv << h << ',' << es << ',' << er.successes << ',' << er.success_rate << '\n';
      mean += er.success_rate / repeats;
    }
    means.push_back({{"history", h}, {"mean_success", mean}});
    std::cout << std::left << std::setw(9) << h << mean << '\n';
  }
  nlohmann::ordered_json man;
  man["format_version"] = 1;
  man["checkpoint"] = checkpoint;
  man["variant"] = variant_name(policy.config().variant);
  man["episodes"] = episodes;
  man["repeats"] = repeats;
  man["means"] = means;
  std::ofstream f(fs::path(c.out) / "ablate_history.json");
  if (!f) throw std::runtime_error("cannot write ablate_history.json under " + c.out);
  f << man.dump(2) << '\n';
  return 0;
}

int run_inspect_attention(int argc, char** argv) {
  CLI::App app{"export attention traces from one closed-loop episode"};
  CommonArgs c;
  add_common(app, c);
  std::string checkpoint;
  analysis::InspectOptions opts;
  app.add_option("--checkpoint", checkpoint, "policy checkpoint to roll")->required();
  app.add_flag("--standard-traces", opts.standard_traces,
               "export per-key softmax mass for policies without a transition path");
  app.add_flag("--preinit", opts.preinit_history,
               "fill the window with copies of the first state before rolling");
  int code = 0;
  if (parse_or_stop(app, argc, argv, code)) return code;

  config::RunConfig cfg = load_run_config(c);
  Policy policy = load_policy(checkpoint);
  if (policy.config().variant != Variant::kSTA && !opts.standard_traces) {
    throw UsageError("checkpoint variant " + variant_name(policy.config().variant) +
                     " has no transition path; pass --standard-traces to export softmax mass");
  }
  prepare_out(c, cfg);
  analysis::InspectResult res =
      analysis::inspect_attention(policy, cfg.env, c.seed, c.out, opts);
  std::cout << "rolled " << res.steps << " steps (" << (res.success ? "success" : "no success")
            << "), wrote " << res.files.size() << " files to " << c.out << '\n';
  if (res.occluded_from >= 0) {
    std::cout << "  object occluded from step " << res.occluded_from << '\n';
  }
  if (res.far_mass_defined) {
    std::cout << "  offset>=5 score mass: first five steps " << res.early_far_mass
              << ", from occlusion onset " << res.post_onset_far_mass << '\n';
  }
  return 0;
}

int run_bench(int argc, char** argv) {
  CLI::App app{"per-step inference cost against history length"};
  CommonArgs c;
  add_common(app, c);
  analysis::BenchConfig bc;
  app.add_option("--histories", bc.history, "history lengths to sweep")->delimiter(',');
  app.add_option("--reps", bc.timing_reps, "timed repetitions per row");
  int code = 0;
  if (parse_or_stop(app, argc, argv, code)) return code;
  if (bc.history.empty()) throw UsageError("at least one history length is required");
  for (int k : bc.history) {
    if (k < 0) throw UsageError("history lengths must be non-negative");
  }
  if (bc.timing_reps < 1) throw UsageError("reps must be positive");

  config::RunConfig cfg = load_run_config(c);
  bc.d_model = cfg.policy.d_model;
  bc.n_heads = cfg.policy.n_heads;
  bc.m = cfg.policy.n_joints;
  bc.n = cfg.policy.n_state_tokens;
  bc.seed = c.seed;
  prepare_out(c, cfg);

  analysis::BenchReport rep = analysis::bench_inference(bc);
  analysis::write_bench_csv((fs::path(c.out) / "bench.csv").string(), rep);
  nlohmann::ordered_json man;
  man["format_version"] = 1;
  man["d_model"] = bc.d_model;
  man["n_heads"] = bc.n_heads;
  man["decoder_tokens"] = bc.m;
  man["state_tokens"] = bc.n;
  man["histories"] = bc.history;
  man["timing_reps"] = bc.timing_reps;
  man["measured_slope"] = rep.measured_slope;
  man["predicted_slope"] = rep.predicted_slope;
  man["slope_exact"] = rep.slope_exact;
  man["cached_dominates_at_15"] = rep.cached_dominates_at_15;
  std::ofstream f(fs::path(c.out) / "bench_manifest.json");
  if (!f) throw std::runtime_error("cannot write bench_manifest.json under " + c.out);
  f << man.dump(2) << '\n';

  std::cout << "transition-path MACs per step: affine in history, slope " << rep.measured_slope
            << " (closed form " << rep.predicted_slope << ", exact "
            << (rep.slope_exact ? "yes" : "NO") << ")\n"
            << "cached window beats scratch recompute: "
            << (rep.cached_dominates_at_15 ? "yes" : "NO") << '\n'
            << "  table: " << (fs::path(c.out) / "bench.csv").string() << '\n';
  if (!rep.slope_exact || !rep.cached_dominates_at_15) {
    throw std::runtime_error("bench: measured cost deviates from the closed form");
  }
  return 0;
}

int dispatch(int argc, char** argv) {
  const std::string cmd = argv[1];
  if (cmd == "--help" || cmd == "-h" || cmd == "help") {
    print_usage(std::cout);
    return 0;
  }
  for (const CommandInfo& info : kCommands) {
    if (cmd != info.name) continue;
    if (cmd == "generate-data") return run_generate_data(argc - 1, argv + 1);
    if (cmd == "train") return run_train(argc - 1, argv + 1);
    if (cmd == "eval") return run_eval(argc - 1, argv + 1);
    if (cmd == "ablate-masking") return run_ablate_masking(argc - 1, argv + 1);
    if (cmd == "ablate-history") return run_ablate_history(argc - 1, argv + 1);
    if (cmd == "inspect-attention") return run_inspect_attention(argc - 1, argv + 1);
    if (cmd == "bench") return run_bench(argc - 1, argv + 1);
  }
  std::cerr << "stalab: unknown command '" << cmd << "'\n";
  std::vector<std::string> names;
  for (const CommandInfo& info : kCommands) names.push_back(info.name);
  const std::string near = config::nearest_candidate(cmd, names);
  if (!near.empty()) std::cerr << "did you mean '" << near << "'?\n";
  std::cerr << '\n';
  print_usage(std::cerr);
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    print_usage(std::cerr);
    return 1;
  }
  try {
    return dispatch(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "stalab: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "stalab: " << e.what() << '\n';
    return 2;
  }
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include "sta/config.hpp"
#include "sta/policy.hpp"

using namespace sta;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("sta_cli_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunResult run_cli(const std::string& args, const fs::path& scratch) {
  const fs::path out_f = scratch / "_stdout.txt";
  const fs::path err_f = scratch / "_stderr.txt";
  const std::string cmd = std::string(STALAB_CLI_PATH) + (args.empty() ? "" : " " + args) +
                          " > " + out_f.string() + " 2> " + err_f.string();
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out_f);
  r.err = slurp(err_f);
  return r;
}

// Small enough that the training commands finish in seconds.
const char* kTinyConfig =
    "data.episodes = 3\n"
    "env.horizon = 14\n"
    "model.d_model = 16\n"
    "model.n_heads = 2\n"
    "model.n_layers = 1\n"
    "model.k_max = 4\n"
    "train.seq_len = 8\n"
    "train.batch_size = 2\n"
    "train.epochs = 1\n"
    "train.batches_per_epoch = 2\n"
    "train.eval_episodes = 1\n"
    "train.eval_seeds = 1\n";

fs::path write_config(const fs::path& dir, const std::string& extra = "") {
  fs::path p = dir / "run.cfg";
  std::ofstream f(p);
  f << kTinyConfig << extra;
  return p;
}

bool contains(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

}  // namespace

TEST_CASE("bad invocations are usage errors with suggestions") {
  fs::path dir = fresh_dir("usage");
  CHECK(run_cli("", dir).code == 1);

  RunResult typo = run_cli("trian", dir);
  CHECK(typo.code == 1);
  CHECK(contains(typo.err, "unknown command 'trian'"));
  CHECK(contains(typo.err, "did you mean 'train'?"));

  RunResult typo2 = run_cli("inspect-attenton", dir);
  CHECK(typo2.code == 1);
  CHECK(contains(typo2.err, "did you mean 'inspect-attention'?"));

  CHECK(run_cli("--help", dir).code == 0);
  RunResult sub_help = run_cli("train --help", dir);
  CHECK(sub_help.code == 0);
  CHECK(contains(sub_help.out, "--data"));

  RunResult missing = run_cli("train", dir);
  CHECK(missing.code == 1);
  CHECK(contains(missing.err, "--data"));

  RunResult unknown_flag = run_cli("bench --wat", dir);
  CHECK(unknown_flag.code == 1);
}

TEST_CASE("generate-data writes the dataset and echoes the resolved configuration") {
  fs::path dir = fresh_dir("gen");
  fs::path cfg_path = write_config(dir);
  RunResult r = run_cli("generate-data --config " + cfg_path.string() + " --seed 5 --out " +
                            (dir / "data").string(),
                        dir);
  CHECK(r.code == 0);
  CHECK(contains(r.out, "wrote 3 episodes"));
  for (const char* f : {"dataset.jsonl", "dataset.f64", "dataset.manifest.json", "resolved.cfg"}) {
    CHECK_MESSAGE(fs::exists(dir / "data" / f), f);
  }
  // The echoed configuration is a fixpoint of the parser.
  config::RunConfig loaded = config::load_config(cfg_path.string());
  config::RunConfig echoed = config::load_config((dir / "data" / "resolved.cfg").string());
  CHECK(loaded == echoed);
}

TEST_CASE("train, eval, and the ablations run end to end on a tiny setup") {
  fs::path dir = fresh_dir("train");
  fs::path cfg_path = write_config(dir);
  const std::string cfg = " --config " + cfg_path.string();
  const std::string data_dir = (dir / "data").string();
  REQUIRE(run_cli("generate-data" + cfg + " --seed 5 --out " + data_dir, dir).code == 0);
  const std::string data = data_dir + "/dataset";

  RunResult tr = run_cli("train" + cfg + " --seed 5 --out " + (dir / "run").string() +
                             " --data " + data,
                         dir);
  CHECK(tr.code == 0);
  CHECK(contains(tr.out, "variant STA"));
  CHECK(fs::exists(dir / "run" / "best.ckpt"));
  CHECK(fs::exists(dir / "run" / "final.ckpt"));
  {
    std::ifstream m(dir / "run" / "metrics.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(m, line)) {
      nlohmann::json j = nlohmann::json::parse(line);
      CHECK(j.contains("train_loss"));
      ++lines;
    }
    CHECK(lines == 1);  // one epoch
  }
  const std::string ckpt = (dir / "run" / "final.ckpt").string();

  RunResult ev = run_cli("eval" + cfg + " --checkpoint " + ckpt +
                             " --episodes 2 --repeats 1 --out " + (dir / "eval").string(),
                         dir);
  CHECK(ev.code == 0);
  {
    nlohmann::json j = nlohmann::json::parse(slurp(dir / "eval" / "eval.json"));
    CHECK(j["episodes"] == 2);
    const double mean = j["mean_success"].get<double>();
    CHECK(mean >= 0.0);
    CHECK(mean <= 1.0);
  }

  // Out-of-range inference window is an invocation problem.
  CHECK(run_cli("eval" + cfg + " --checkpoint " + ckpt + " --history 99 --out " +
                    (dir / "eval2").string(),
                dir)
            .code == 1);

  RunResult ah = run_cli("ablate-history" + cfg + " --checkpoint " + ckpt +
                             " --histories 4,1,0 --episodes 1 --repeats 1 --out " +
                             (dir / "hist").string(),
                         dir);
  CHECK(ah.code == 0);
  {
    std::ifstream csvf(dir / "hist" / "ablate_history.csv");
    std::string line;
    int lines = 0;
    while (std::getline(csvf, line)) ++lines;
    CHECK(lines == 1 + 3);  // header + one row per window
    nlohmann::json j = nlohmann::json::parse(slurp(dir / "hist" / "ablate_history.json"));
    CHECK(j["means"].size() == 3);
  }

  RunResult am = run_cli("ablate-masking" + cfg + " --data " + data +
                             " --episodes 1 --repeats 1 --seed 5 --out " +
                             (dir / "mask").string(),
                         dir);
  CHECK(am.code == 0);
  {
    nlohmann::json j = nlohmann::json::parse(slurp(dir / "mask" / "ablate_masking.json"));
    CHECK(j.contains("masked_training"));
    CHECK(j.contains("unmasked_training"));
    CHECK(j.contains("masked_inference_delta"));
  }
}

TEST_CASE("train rejects a dataset generated under a different environment") {
  fs::path dir = fresh_dir("mismatch");
  fs::path cfg_path = write_config(dir);
  REQUIRE(run_cli("generate-data --config " + cfg_path.string() + " --seed 5 --out " +
                      (dir / "data").string(),
                  dir)
              .code == 0);
  fs::path other_cfg = dir / "other.cfg";
  {
    std::string text = kTinyConfig;
    const std::string from = "env.horizon = 14";
    text.replace(text.find(from), from.size(), "env.horizon = 20");
    std::ofstream f(other_cfg);
    f << text;
  }
  RunResult r = run_cli("train --config " + other_cfg.string() + " --out " +
                            (dir / "run").string() + " --data " + (dir / "data" / "dataset").string(),
                        dir);
  CHECK(r.code == 2);
  CHECK(contains(r.err, "different environment"));
}

TEST_CASE("malformed configurations fail with a line number and a suggestion") {
  fs::path dir = fresh_dir("badcfg");
  fs::path bad = dir / "bad.cfg";
  {
    std::ofstream f(bad);
    f << "model.n_layerz = 3\n";
  }
  RunResult r = run_cli("generate-data --config " + bad.string() + " --out " +
                            (dir / "out").string(),
                        dir);
  CHECK(r.code == 2);
  CHECK(contains(r.err, "bad.cfg:1"));
  CHECK(contains(r.err, "did you mean 'model.n_layers'?"));
}

TEST_CASE("inspect-attention gates standard policies behind the explicit flag") {
  fs::path dir = fresh_dir("inspect");
  fs::path cfg_path = write_config(dir);
  const std::string cfg = " --config " + cfg_path.string();

  PolicyConfig pc;
  pc.n_layers = 1;
  pc.d_model = 16;
  pc.n_heads = 2;
  pc.k_max = 4;
  pc.variant = Variant::kStandardXAttn;
  Policy std_policy(pc, 7);
  const std::string std_ckpt = (dir / "std.ckpt").string();
  save_checkpoint(std_ckpt, std_policy);
  pc.variant = Variant::kSTA;
  Policy sta_policy(pc, 7);
  const std::string sta_ckpt = (dir / "sta.ckpt").string();
  save_checkpoint(sta_ckpt, sta_policy);

  RunResult refused = run_cli("inspect-attention" + cfg + " --checkpoint " + std_ckpt +
                                  " --out " + (dir / "a").string(),
                              dir);
  CHECK(refused.code == 1);
  CHECK(contains(refused.err, "--standard-traces"));

  RunResult allowed = run_cli("inspect-attention" + cfg + " --checkpoint " + std_ckpt +
                                  " --standard-traces --out " + (dir / "b").string(),
                              dir);
  CHECK(allowed.code == 0);
  CHECK(fs::exists(dir / "b" / "manifest.json"));

  // Same seed, same bytes, for the transition-path export.
  const std::string base = "inspect-attention" + cfg + " --checkpoint " + sta_ckpt + " --seed 3";
  REQUIRE(run_cli(base + " --out " + (dir / "c").string(), dir).code == 0);
  REQUIRE(run_cli(base + " --out " + (dir / "d").string(), dir).code == 0);
  for (const char* f : {"manifest.json", "trace_head0.csv", "head_series.csv"}) {
    CHECK(slurp(dir / "c" / f) == slurp(dir / "d" / f));
  }

  RunResult pre = run_cli(base + " --preinit --out " + (dir / "e").string(), dir);
  CHECK(pre.code == 0);
  CHECK(fs::exists(dir / "e" / ("heatmap_t0.csv")));
}

TEST_CASE("bench writes the cost table and pins the closed form") {
  fs::path dir = fresh_dir("bench");
  fs::path cfg_path = write_config(dir);
  RunResult r = run_cli("bench --config " + cfg_path.string() +
                            " --reps 2 --histories 0,3,7,15 --out " + (dir / "out").string(),
                        dir);
  CHECK(r.code == 0);
  CHECK(contains(r.out, "exact yes"));
  {
    std::ifstream csvf(dir / "out" / "bench.csv");
    std::string line;
    int lines = 0;
    while (std::getline(csvf, line)) ++lines;
    CHECK(lines == 1 + 4 * 3);  // header + three variants per window
    nlohmann::json j = nlohmann::json::parse(slurp(dir / "out" / "bench_manifest.json"));
    CHECK(j["slope_exact"] == true);
    CHECK(j["cached_dominates_at_15"] == true);
  }
  CHECK(run_cli("bench --histories -3 --out " + (dir / "bad").string(), dir).code == 1);
}

#include "sta/env.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace sta::env {

namespace {
constexpr std::uint64_t kRetryStride = 0x100000001b3ULL;
constexpr int kMaxAttempts = 64;

double clamp_unit(double v) {
  if (!std::isfinite(v)) return 0.0;
  return std::clamp(v, -1.0, 1.0);
}

double clamp_workspace(double v, const EnvConfig& cfg) {
  return std::clamp(v, 0.0, static_cast<double>(cfg.grid_size - 1));
}

int cell_of(double v, const EnvConfig& cfg) {
  return std::clamp(static_cast<int>(std::llround(v)), 0, cfg.grid_size - 1);
}
}  // namespace

void EnvConfig::validate() const {
  if (grid_size < 6) throw std::invalid_argument("env config: grid_size must be >= 6");
  if (horizon < 1) throw std::invalid_argument("env config: horizon must be >= 1");
  if (n_joints != 2) throw std::invalid_argument("env config: the arm drives two axes");
  if (grasp_radius <= 0.0 || gain <= 0.0) {
    throw std::invalid_argument("env config: grasp_radius and gain must be positive");
  }
  if (noise_start_min < 2) {
    throw std::invalid_argument("env config: noise segments may not start before step 2");
  }
  if (noise_len_min < 1 || noise_len_max < noise_len_min ||
      noise_start_max < noise_start_min) {
    throw std::invalid_argument("env config: noise segment ranges are inverted");
  }
}

nlohmann::json EnvConfig::to_json() const {
  return nlohmann::json{{"grid_size", grid_size},
                        {"horizon", horizon},
                        {"n_joints", n_joints},
                        {"grasp_radius", grasp_radius},
                        {"gain", gain},
                        {"home", {home_x, home_y}},
                        {"min_separation", min_separation},
                        {"occlusion_prob", occlusion_prob},
                        {"occlusion_visible", {occlusion_visible_min, occlusion_visible_max}},
                        {"noise_prob", noise_prob},
                        {"noise_start", {noise_start_min, noise_start_max}},
                        {"noise_len", {noise_len_min, noise_len_max}},
                        {"noise_mag", {noise_mag_min, noise_mag_max}}};
}

double dist(const Vec2& a, const Vec2& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

Vec2 end_effector(const EnvState& state) {
  return {state.arm[0], state.arm[1]};
}

bool occluded_now(const EnvState& state) {
  const std::size_t t = static_cast<std::size_t>(state.step_index);
  return t < state.occlusion_schedule.size() && state.occlusion_schedule[t] != 0;
}

namespace {
EnvState reset_from_rng(std::mt19937_64& rng, std::uint64_t seed, const EnvConfig& cfg) {
  std::uniform_int_distribution<int> cell(0, cfg.grid_size - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  EnvState st;
  st.rng_seed = seed;
  st.arm = {cfg.home_x, cfg.home_y};
  const Vec2 home{cfg.home_x, cfg.home_y};

  // The object spawns outside the gripper so the first step never grasps.
  do {
    st.object_pos = {static_cast<double>(cell(rng)), static_cast<double>(cell(rng))};
  } while (dist(st.object_pos, home) <= cfg.grasp_radius);
  do {
    st.goal_pos = {static_cast<double>(cell(rng)), static_cast<double>(cell(rng))};
  } while (dist(st.goal_pos, st.object_pos) < cfg.min_separation);

  st.occlusion_schedule.assign(static_cast<std::size_t>(cfg.horizon + 1), 0);
  if (unit(rng) < cfg.occlusion_prob) {
    std::uniform_int_distribution<int> vis(cfg.occlusion_visible_min, cfg.occlusion_visible_max);
    const int first_hidden = vis(rng);
    for (int t = first_hidden; t <= cfg.horizon; ++t) {
      st.occlusion_schedule[static_cast<std::size_t>(t)] = 1;
    }
  }
  return st;
}
}  // namespace

EnvState env_reset(std::uint64_t seed, const EnvConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  return reset_from_rng(rng, seed, cfg);
}

StepOutcome env_step(const EnvState& state, const Tensor& action, const EnvConfig& cfg) {
  if (static_cast<int>(action.numel()) != cfg.n_joints) {
    throw std::invalid_argument("env_step: action has " + std::to_string(action.numel()) +
                                " entries for " + std::to_string(cfg.n_joints) + " joints");
  }
  StepOutcome out;
  out.state = state;
  EnvState& st = out.state;
  for (int j = 0; j < cfg.n_joints; ++j) {
    st.arm[static_cast<std::size_t>(j)] = clamp_workspace(
        st.arm[static_cast<std::size_t>(j)] + clamp_unit(action.values()[static_cast<std::size_t>(j)]),
        cfg);
  }
  const Vec2 ee = end_effector(st);
  if (st.holding) {
    st.object_pos = ee;
  } else if (dist(ee, st.object_pos) <= cfg.grasp_radius) {
    st.holding = true;
    st.object_pos = ee;
  }
  out.success = st.holding && dist(ee, st.goal_pos) <= cfg.grasp_radius;
  st.step_index += 1;
  out.done = out.success || st.step_index >= cfg.horizon;
  return out;
}

Tensor expert_action(const EnvState& state, const Vec2& perceived_object, const EnvConfig& cfg) {
  const Vec2 ee = end_effector(state);
  Vec2 target;
  if (!state.holding) {
    target = perceived_object;
  } else {
    // The carried object sits at the gripper, so believing it is at
    // `perceived_object` means steering by goal minus perception. Clean
    // perception collapses this to "head for the goal".
    target = {ee.x + state.goal_pos.x - perceived_object.x,
              ee.y + state.goal_pos.y - perceived_object.y};
  }
  Tensor a = Tensor::zeros({cfg.n_joints});
  a.values()[0] = clamp_unit(cfg.gain * (target.x - ee.x));
  a.values()[1] = clamp_unit(cfg.gain * (target.y - ee.y));
  return a;
}

std::vector<NoiseSegment> inject_noise_schedule(std::mt19937_64& rng, int episode_length,
                                                bool noise_on, const EnvConfig& cfg) {
  std::vector<NoiseSegment> segments;
  if (!noise_on) return segments;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (unit(rng) >= cfg.noise_prob) return segments;
  std::uniform_int_distribution<int> start_dist(cfg.noise_start_min,
                                                std::min(cfg.noise_start_max, episode_length - 1));
  std::uniform_int_distribution<int> len_dist(cfg.noise_len_min, cfg.noise_len_max);
  NoiseSegment seg;
  seg.start = start_dist(rng);
  seg.length = std::min(len_dist(rng), episode_length - seg.start);
  segments.push_back(seg);
  return segments;
}

Tensor render_obs(const EnvState& state, const EnvConfig& cfg) {
  Tensor obs = Tensor::zeros({1, cfg.grid_size, cfg.grid_size});
  const Vec2 ee = end_effector(state);
  auto put = [&](const Vec2& p, double code) {
    obs.values()[static_cast<std::size_t>(cell_of(p.y, cfg) * cfg.grid_size + cell_of(p.x, cfg))] +=
        code;
  };
  put(ee, kArmCode);
  if (!occluded_now(state)) put(state.object_pos, kObjectCode);
  put(state.goal_pos, kGoalCode);
  return obs;
}

Episode roll_expert_episode(std::uint64_t seed, bool noise_on, const EnvConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  EnvState st = reset_from_rng(rng, seed, cfg);

  Episode ep;
  ep.seed = seed;
  ep.object_start = st.object_pos;
  ep.goal = st.goal_pos;
  for (std::size_t t = 0; t < st.occlusion_schedule.size(); ++t) {
    if (st.occlusion_schedule[t] != 0) {
      ep.occluded_from = static_cast<int>(t);
      break;
    }
  }
  ep.noise_segments = inject_noise_schedule(rng, cfg.horizon, noise_on, cfg);

  Vec2 offset{0.0, 0.0};
  if (!ep.noise_segments.empty()) {
    std::uniform_real_distribution<double> angle(0.0, 2.0 * 3.14159265358979323846);
    std::uniform_real_distribution<double> mag(cfg.noise_mag_min, cfg.noise_mag_max);
    const double th = angle(rng);
    const double r = mag(rng);
    offset = {r * std::cos(th), r * std::sin(th)};
  }

  bool latched = false;
  for (int t = 0; t < cfg.horizon; ++t) {
    bool in_noise = false;
    for (const NoiseSegment& seg : ep.noise_segments) {
      in_noise = in_noise || (t >= seg.start && t < seg.start + seg.length);
    }
    Vec2 perceived = st.object_pos;
    if (in_noise) {
      perceived = {clamp_workspace(st.object_pos.x + offset.x, cfg),
                   clamp_workspace(st.object_pos.y + offset.y, cfg)};
    }

    StepRecord rec;
    rec.obs = render_obs(st, cfg);
    rec.proprio = Tensor::zeros({cfg.n_joints});
    rec.proprio.values()[0] = st.arm[0];
    rec.proprio.values()[1] = st.arm[1];
    rec.expert_act = expert_action(st, perceived, cfg);
    rec.noise_active = in_noise;
    rec.occluded = occluded_now(st);
    rec.holding = st.holding;
    rec.object_true = st.object_pos;
    rec.perceived = perceived;

    StepOutcome outcome = env_step(st, rec.expert_act, cfg);
    st = outcome.state;
    latched = latched || outcome.success;
    rec.success_so_far = latched;
    ep.steps.push_back(std::move(rec));
  }
  ep.success = latched;
  return ep;
}

std::string config_hash(const EnvConfig& cfg) {
  const std::string blob = cfg.to_json().dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : blob) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

DatasetInfo generate_dataset(const std::string& path_prefix, int n_episodes, bool noise_on,
                             std::uint64_t seed, const EnvConfig& cfg) {
  if (n_episodes < 0) throw std::invalid_argument("generate_dataset: negative episode count");
  cfg.validate();

  DatasetInfo info;
  info.n_episodes = n_episodes;
  info.seed = seed;
  info.noise_on = noise_on;
  info.config_hash = config_hash(cfg);

  std::ostringstream lines;
  std::ofstream sidecar(path_prefix + ".f64", std::ios::binary | std::ios::trunc);
  if (!sidecar) {
    throw std::runtime_error("generate_dataset: cannot write '" + path_prefix + ".f64'");
  }

  for (int i = 0; i < n_episodes; ++i) {
    Episode ep;
    int attempt = 0;
    for (; attempt < kMaxAttempts; ++attempt) {
      ep = roll_expert_episode(seed + static_cast<std::uint64_t>(i) +
                                   kRetryStride * static_cast<std::uint64_t>(attempt),
                               noise_on, cfg);
      info.total_attempts += 1;
      if (ep.success) break;
      info.discarded_failures += 1;
    }
    if (!ep.success) {
      throw std::runtime_error("generate_dataset: episode " + std::to_string(i) +
                               " failed " + std::to_string(kMaxAttempts) + " attempts");
    }
    if (!ep.noise_segments.empty()) info.episodes_with_noise += 1;

    nlohmann::json segs = nlohmann::json::array();
    for (const NoiseSegment& s : ep.noise_segments) segs.push_back({s.start, s.length});
    nlohmann::json eline{{"type", "episode"},
                         {"index", i},
                         {"seed", ep.seed},
                         {"success", ep.success},
                         {"noise_segments", segs},
                         {"object", {ep.object_start.x, ep.object_start.y}},
                         {"goal", {ep.goal.x, ep.goal.y}},
                         {"occluded_from", ep.occluded_from},
                         {"n_steps", static_cast<int>(ep.steps.size())}};
    lines << eline.dump() << "\n";
    for (std::size_t t = 0; t < ep.steps.size(); ++t) {
      const StepRecord& r = ep.steps[t];
      nlohmann::json sline{{"type", "step"},
                           {"episode", i},
                           {"t", static_cast<int>(t)},
                           {"proprio", r.proprio.values()},
                           {"action", r.expert_act.values()},
                           {"noise", r.noise_active ? 1 : 0},
                           {"succ", r.success_so_far ? 1 : 0},
                           {"occ", r.occluded ? 1 : 0},
                           {"hold", r.holding ? 1 : 0}};
      lines << sline.dump() << "\n";
      sidecar.write(reinterpret_cast<const char*>(r.obs.values().data()),
                    static_cast<std::streamsize>(r.obs.numel() * sizeof(double)));
    }
  }
  if (!sidecar) {
    throw std::runtime_error("generate_dataset: write failed for '" + path_prefix + ".f64'");
  }
  sidecar.close();

  std::ofstream jf(path_prefix + ".jsonl", std::ios::binary | std::ios::trunc);
  if (!jf) {
    throw std::runtime_error("generate_dataset: cannot write '" + path_prefix + ".jsonl'");
  }
  jf << lines.str();
  if (!jf) {
    throw std::runtime_error("generate_dataset: write failed for '" + path_prefix + ".jsonl'");
  }
  jf.close();

  nlohmann::json manifest{{"format_version", 1},
                          {"seed", seed},
                          {"n_episodes", n_episodes},
                          {"noise_on", noise_on},
                          {"obs_shape", {1, cfg.grid_size, cfg.grid_size}},
                          {"config", cfg.to_json()},
                          {"config_hash", info.config_hash},
                          {"total_attempts", info.total_attempts},
                          {"discarded_failures", info.discarded_failures},
                          {"episodes_with_noise", info.episodes_with_noise}};
  std::ofstream mf(path_prefix + ".manifest.json", std::ios::binary | std::ios::trunc);
  if (!mf) {
    throw std::runtime_error("generate_dataset: cannot write '" + path_prefix +
                             ".manifest.json'");
  }
  mf << manifest.dump(2) << "\n";
  if (!mf) {
    throw std::runtime_error("generate_dataset: write failed for '" + path_prefix +
                             ".manifest.json'");
  }
  return info;
}

Dataset load_dataset(const std::string& path_prefix) {
  Dataset ds;
  {
    std::ifstream mf(path_prefix + ".manifest.json");
    if (!mf) {
      throw std::runtime_error("load_dataset: cannot read '" + path_prefix +
                               ".manifest.json'");
    }
    try {
      mf >> ds.manifest;
    } catch (const nlohmann::json::exception&) {
      throw std::runtime_error("load_dataset: corrupt manifest '" + path_prefix +
                               ".manifest.json'");
    }
  }
  if (ds.manifest.value("format_version", -1) != 1) {
    throw std::runtime_error("load_dataset: unsupported manifest format_version");
  }
  const std::vector<int> obs_shape = ds.manifest.at("obs_shape").get<std::vector<int>>();
  std::size_t obs_count = 1;
  for (int d : obs_shape) obs_count *= static_cast<std::size_t>(d);

  std::ifstream jf(path_prefix + ".jsonl");
  if (!jf) throw std::runtime_error("load_dataset: cannot read '" + path_prefix + ".jsonl'");
  std::ifstream sidecar(path_prefix + ".f64", std::ios::binary);
  if (!sidecar) throw std::runtime_error("load_dataset: cannot read '" + path_prefix + ".f64'");

  std::string line;
  int line_no = 0;
  while (std::getline(jf, line)) {
    line_no += 1;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw std::runtime_error("load_dataset: bad JSON at " + path_prefix + ".jsonl:" +
                               std::to_string(line_no));
    }
    const std::string type = j.at("type").get<std::string>();
    if (type == "episode") {
      Episode ep;
      ep.seed = j.at("seed").get<std::uint64_t>();
      ep.success = j.at("success").get<bool>();
      for (const auto& s : j.at("noise_segments")) {
        ep.noise_segments.push_back({s.at(0).get<int>(), s.at(1).get<int>()});
      }
      ep.object_start = {j.at("object").at(0).get<double>(), j.at("object").at(1).get<double>()};
      ep.goal = {j.at("goal").at(0).get<double>(), j.at("goal").at(1).get<double>()};
      ep.occluded_from = j.at("occluded_from").get<int>();
      ds.episodes.push_back(std::move(ep));
    } else if (type == "step") {
      if (ds.episodes.empty()) {
        throw std::runtime_error("load_dataset: step before any episode at " + path_prefix +
                                 ".jsonl:" + std::to_string(line_no));
      }
      StepRecord rec;
      const std::vector<double> pp = j.at("proprio").get<std::vector<double>>();
      const std::vector<double> ac = j.at("action").get<std::vector<double>>();
      rec.proprio = Tensor::zeros({static_cast<int>(pp.size())});
      std::copy(pp.begin(), pp.end(), rec.proprio.values().begin());
      rec.expert_act = Tensor::zeros({static_cast<int>(ac.size())});
      std::copy(ac.begin(), ac.end(), rec.expert_act.values().begin());
      rec.noise_active = j.at("noise").get<int>() != 0;
      rec.success_so_far = j.at("succ").get<int>() != 0;
      rec.occluded = j.at("occ").get<int>() != 0;
      rec.holding = j.at("hold").get<int>() != 0;
      rec.obs = Tensor::zeros(obs_shape);
      sidecar.read(reinterpret_cast<char*>(rec.obs.ptr()),
                   static_cast<std::streamsize>(obs_count * sizeof(double)));
      if (static_cast<std::size_t>(sidecar.gcount()) != obs_count * sizeof(double)) {
        throw std::runtime_error("load_dataset: sidecar truncated at " + path_prefix +
                                 ".jsonl:" + std::to_string(line_no));
      }
      ds.episodes.back().steps.push_back(std::move(rec));
    } else {
      throw std::runtime_error("load_dataset: unknown record type '" + type + "' at " +
                               path_prefix + ".jsonl:" + std::to_string(line_no));
    }
  }
  return ds;
}

}  // namespace sta::env

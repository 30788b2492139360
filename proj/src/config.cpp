#include "sta/config.hpp"

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace sta::config {
namespace {

enum class Kind { kInt, kDouble, kBool, kVariant };

struct Field {
  const char* key;
  Kind kind;
  void* (*ref)(RunConfig&);
};

// One table drives parsing, the resolved echo, and equality, so the three
// can never disagree about the key set.
const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      {"format_version", Kind::kInt, [](RunConfig& c) -> void* { return &c.format_version; }},
      {"variant", Kind::kVariant, [](RunConfig& c) -> void* { return &c.policy.variant; }},
      {"model.n_layers", Kind::kInt, [](RunConfig& c) -> void* { return &c.policy.n_layers; }},
      {"model.d_model", Kind::kInt, [](RunConfig& c) -> void* { return &c.policy.d_model; }},
      {"model.n_heads", Kind::kInt, [](RunConfig& c) -> void* { return &c.policy.n_heads; }},
      {"model.n_joints", Kind::kInt, [](RunConfig& c) -> void* { return &c.policy.n_joints; }},
      {"model.n_state_tokens", Kind::kInt,
       [](RunConfig& c) -> void* { return &c.policy.n_state_tokens; }},
      {"model.k_max", Kind::kInt, [](RunConfig& c) -> void* { return &c.policy.k_max; }},
      {"model.obs_channels", Kind::kInt,
       [](RunConfig& c) -> void* { return &c.policy.obs_channels; }},
      {"model.obs_height", Kind::kInt, [](RunConfig& c) -> void* { return &c.policy.obs_height; }},
      {"model.obs_width", Kind::kInt, [](RunConfig& c) -> void* { return &c.policy.obs_width; }},
      {"model.proprio_dim", Kind::kInt,
       [](RunConfig& c) -> void* { return &c.policy.proprio_dim; }},
      {"model.action_scale", Kind::kDouble,
       [](RunConfig& c) -> void* { return &c.policy.action_scale; }},
      {"train.seq_len", Kind::kInt, [](RunConfig& c) -> void* { return &c.train.seq_len; }},
      {"train.batch_size", Kind::kInt, [](RunConfig& c) -> void* { return &c.train.batch_size; }},
      {"train.lr", Kind::kDouble, [](RunConfig& c) -> void* { return &c.train.lr; }},
      {"train.epochs", Kind::kInt, [](RunConfig& c) -> void* { return &c.train.epochs; }},
      {"train.mask_enabled", Kind::kBool,
       [](RunConfig& c) -> void* { return &c.train.mask_enabled; }},
      {"train.batches_per_epoch", Kind::kInt,
       [](RunConfig& c) -> void* { return &c.train.batches_per_epoch; }},
      {"train.eval_episodes", Kind::kInt,
       [](RunConfig& c) -> void* { return &c.train.eval_episodes; }},
      {"train.eval_seeds", Kind::kInt, [](RunConfig& c) -> void* { return &c.train.eval_seeds; }},
      {"train.eval_history", Kind::kInt,
       [](RunConfig& c) -> void* { return &c.train.eval_history; }},
      {"train.eval_masked", Kind::kBool,
       [](RunConfig& c) -> void* { return &c.train.eval_masked; }},
      {"env.grid_size", Kind::kInt, [](RunConfig& c) -> void* { return &c.env.grid_size; }},
      {"env.horizon", Kind::kInt, [](RunConfig& c) -> void* { return &c.env.horizon; }},
      {"env.n_joints", Kind::kInt, [](RunConfig& c) -> void* { return &c.env.n_joints; }},
      {"env.grasp_radius", Kind::kDouble,
       [](RunConfig& c) -> void* { return &c.env.grasp_radius; }},
      {"env.gain", Kind::kDouble, [](RunConfig& c) -> void* { return &c.env.gain; }},
      {"env.home_x", Kind::kDouble, [](RunConfig& c) -> void* { return &c.env.home_x; }},
      {"env.home_y", Kind::kDouble, [](RunConfig& c) -> void* { return &c.env.home_y; }},
      {"env.min_separation", Kind::kDouble,
       [](RunConfig& c) -> void* { return &c.env.min_separation; }},
      {"env.occlusion_prob", Kind::kDouble,
       [](RunConfig& c) -> void* { return &c.env.occlusion_prob; }},
      {"env.occlusion_visible_min", Kind::kInt,
       [](RunConfig& c) -> void* { return &c.env.occlusion_visible_min; }},
      {"env.occlusion_visible_max", Kind::kInt,
       [](RunConfig& c) -> void* { return &c.env.occlusion_visible_max; }},
      {"env.noise_prob", Kind::kDouble, [](RunConfig& c) -> void* { return &c.env.noise_prob; }},
      {"env.noise_start_min", Kind::kInt,
       [](RunConfig& c) -> void* { return &c.env.noise_start_min; }},
      {"env.noise_start_max", Kind::kInt,
       [](RunConfig& c) -> void* { return &c.env.noise_start_max; }},
      {"env.noise_len_min", Kind::kInt,
       [](RunConfig& c) -> void* { return &c.env.noise_len_min; }},
      {"env.noise_len_max", Kind::kInt,
       [](RunConfig& c) -> void* { return &c.env.noise_len_max; }},
      {"env.noise_mag_min", Kind::kDouble,
       [](RunConfig& c) -> void* { return &c.env.noise_mag_min; }},
      {"env.noise_mag_max", Kind::kDouble,
       [](RunConfig& c) -> void* { return &c.env.noise_mag_max; }},
      {"data.episodes", Kind::kInt, [](RunConfig& c) -> void* { return &c.data_episodes; }},
      {"data.noise", Kind::kBool, [](RunConfig& c) -> void* { return &c.data_noise; }},
      {"eval.mask_span_limit", Kind::kInt,
       [](RunConfig& c) -> void* { return &c.mask_span_limit; }},
  };
  return f;
}

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

[[noreturn]] void fail(const std::string& source, int line, const std::string& what) {
  throw std::runtime_error(source + ":" + std::to_string(line) + ": " + what);
}

std::string render_value(const Field& f, const RunConfig& cfg) {
  RunConfig& c = const_cast<RunConfig&>(cfg);  // read-only access through ref()
  switch (f.kind) {
    case Kind::kInt:
      return std::to_string(*static_cast<int*>(f.ref(c)));
    case Kind::kDouble: {
      char buf[40];
      std::snprintf(buf, sizeof(buf), "%.17g", *static_cast<double*>(f.ref(c)));
      return buf;
    }
    case Kind::kBool:
      return *static_cast<bool*>(f.ref(c)) ? "true" : "false";
    case Kind::kVariant:
      return variant_name(*static_cast<Variant*>(f.ref(c)));
  }
  throw std::logic_error("render_value: unreachable");
}

void assign_value(const Field& f, RunConfig& cfg, const std::string& raw,
                  const std::string& source, int line) {
  const std::string v = trim(raw);
  if (v.empty()) fail(source, line, std::string("key '") + f.key + "' has an empty value");
  switch (f.kind) {
    case Kind::kInt: {
      errno = 0;
      char* end = nullptr;
      const long long parsed = std::strtoll(v.c_str(), &end, 10);
      if (errno != 0 || end != v.c_str() + v.size() ||
          parsed < std::numeric_limits<int>::min() || parsed > std::numeric_limits<int>::max()) {
        fail(source, line,
             std::string("key '") + f.key + "' expects an integer, got '" + v + "'");
      }
      *static_cast<int*>(f.ref(cfg)) = static_cast<int>(parsed);
      return;
    }
    case Kind::kDouble: {
      errno = 0;
      char* end = nullptr;
      const double parsed = std::strtod(v.c_str(), &end);
      if (errno != 0 || end != v.c_str() + v.size()) {
        fail(source, line, std::string("key '") + f.key + "' expects a number, got '" + v + "'");
      }
      *static_cast<double*>(f.ref(cfg)) = parsed;
      return;
    }
    case Kind::kBool: {
      if (v == "true") {
        *static_cast<bool*>(f.ref(cfg)) = true;
      } else if (v == "false") {
        *static_cast<bool*>(f.ref(cfg)) = false;
      } else {
        fail(source, line,
             std::string("key '") + f.key + "' expects true or false, got '" + v + "'");
      }
      return;
    }
    case Kind::kVariant: {
      try {
        *static_cast<Variant*>(f.ref(cfg)) = variant_from_name(v);
      } catch (const std::invalid_argument&) {
        fail(source, line,
             "key 'variant' expects STA, STANDARD_XATTN, or NO_HISTORY, got '" + v + "'");
      }
      return;
    }
  }
}

}  // namespace

int edit_distance(const std::string& a, const std::string& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<int> row(m + 1);
  for (std::size_t j = 0; j <= m; ++j) row[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    int diag = row[0];
    row[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= m; ++j) {
      const int sub = diag + (a[i - 1] == b[j - 1] ? 0 : 1);
      diag = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, sub});
    }
  }
  return row[m];
}

std::string nearest_candidate(const std::string& word,
                              const std::vector<std::string>& candidates) {
  std::string best;
  int best_dist = std::numeric_limits<int>::max();
  for (const std::string& c : candidates) {
    const int d = edit_distance(word, c);
    if (d < best_dist) {
      best_dist = d;
      best = c;
    }
  }
  const int radius = std::max<int>(2, static_cast<int>(word.size()) / 3);
  return best_dist <= radius ? best : std::string();
}

void RunConfig::validate() const {
  if (format_version != 1) {
    throw std::runtime_error("config: format_version " + std::to_string(format_version) +
                             " is not supported (this build reads version 1)");
  }
  policy.validate();
  train.validate();
  env.validate();
  if (train.seq_len < 2) {
    throw std::runtime_error("config: train.seq_len must be >= 2, got " +
                             std::to_string(train.seq_len));
  }
  if (data_episodes < 1) {
    throw std::runtime_error("config: data.episodes must be >= 1, got " +
                             std::to_string(data_episodes));
  }
  if (mask_span_limit < 1) {
    throw std::runtime_error("config: eval.mask_span_limit must be >= 1, got " +
                             std::to_string(mask_span_limit));
  }
  if (policy.obs_height != env.grid_size || policy.obs_width != env.grid_size) {
    throw std::runtime_error(
        "config: model.obs_height/model.obs_width (" + std::to_string(policy.obs_height) + "x" +
        std::to_string(policy.obs_width) + ") must equal env.grid_size (" +
        std::to_string(env.grid_size) + ")");
  }
  if (policy.obs_channels != 1) {
    throw std::runtime_error("config: model.obs_channels must be 1, the environment renders "
                             "a single channel; got " +
                             std::to_string(policy.obs_channels));
  }
  if (policy.n_joints != env.n_joints) {
    throw std::runtime_error("config: model.n_joints (" + std::to_string(policy.n_joints) +
                             ") must equal env.n_joints (" + std::to_string(env.n_joints) + ")");
  }
  if (policy.proprio_dim != env.n_joints) {
    throw std::runtime_error("config: model.proprio_dim (" + std::to_string(policy.proprio_dim) +
                             ") must equal env.n_joints (" + std::to_string(env.n_joints) +
                             "), the environment reports one coordinate per joint");
  }
}

bool operator==(const RunConfig& a, const RunConfig& b) {
  return resolved_config(a) == resolved_config(b);
}

bool operator!=(const RunConfig& a, const RunConfig& b) { return !(a == b); }

RunConfig parse_config(const std::string& text, const std::string& source) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::size_t hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    const std::string line = trim(raw);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      fail(source, line_no, "expected 'key = value', got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) fail(source, line_no, "missing key before '='");
    const Field* field = nullptr;
    for (const Field& f : fields()) {
      if (key == f.key) {
        field = &f;
        break;
      }
    }
    if (!field) {
      std::vector<std::string> names;
      names.reserve(fields().size());
      for (const Field& f : fields()) names.emplace_back(f.key);
      const std::string near = nearest_candidate(key, names);
      std::string msg = "unknown key '" + key + "'";
      if (!near.empty()) msg += " (did you mean '" + near + "'?)";
      fail(source, line_no, msg);
    }
    if (!seen.insert(key).second) {
      fail(source, line_no, "duplicate key '" + key + "'");
    }
    assign_value(*field, cfg, line.substr(eq + 1), source, line_no);
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path);
}

std::string resolved_config(const RunConfig& cfg) {
  std::ostringstream out;
  out << "# resolved configuration: every key explicit, defaults filled in\n";
  for (const Field& f : fields()) {
    out << f.key << " = " << render_value(f, cfg) << "\n";
  }
  return out.str();
}

void write_resolved_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("config: cannot write '" + path + "'");
  out << resolved_config(cfg);
  if (!out) throw std::runtime_error("config: short write to '" + path + "'");
}

}  // namespace sta::config

#pragma once

#include <string>
#include <vector>

#include "sta/env.hpp"
#include "sta/policy.hpp"
#include "sta/train.hpp"

namespace sta::config {

// Every run setting in one place, loadable from a key = value text file.
// Defaults follow the reference architecture table where it specifies a
// value; the rest are the library defaults.
struct RunConfig {
  int format_version = 1;
  PolicyConfig policy;
  train::TrainConfig train;
  env::EnvConfig env;

  int data_episodes = 300;   // dataset size for generate-data
  bool data_noise = true;    // inject corrupted-perception segments
  int mask_span_limit = 16;  // masked-inference span cap

  // Ranges plus cross-module consistency (observation grid, joint counts).
  void validate() const;
};

// Echo-based equality: two configs are equal iff every field renders the
// same. Doubles render with max precision, so this is exact.
bool operator==(const RunConfig& a, const RunConfig& b);
bool operator!=(const RunConfig& a, const RunConfig& b);

// Parses `key = value` lines; '#' starts a comment, blank lines are skipped.
// Unknown or duplicate keys, malformed values, and range violations throw
// std::runtime_error whose message carries `source:line`. The result is
// validated.
RunConfig parse_config(const std::string& text, const std::string& source = "<config>");

// parse_config over the file's contents; unreadable path throws.
RunConfig load_config(const std::string& path);

// Full key = value dump with every field explicit. Re-parsing it yields an
// equal config, and re-echoing that reproduces the text byte for byte.
std::string resolved_config(const RunConfig& cfg);

// Writes resolved_config(cfg) to `path`.
void write_resolved_config(const std::string& path, const RunConfig& cfg);

// Levenshtein distance, used for did-you-mean suggestions here and in the
// command-line front end.
int edit_distance(const std::string& a, const std::string& b);

// Closest candidate within a small edit radius, or empty when nothing is
// plausibly close.
std::string nearest_candidate(const std::string& word,
                              const std::vector<std::string>& candidates);

}  // namespace sta::config

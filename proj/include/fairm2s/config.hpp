#pragma once
// Run configuration: a flat `key = value` text file with [backbone], [meta],
// [weights], [data] and [experiment] sections. Keys may also be written
// fully qualified (`meta.epochs = 10`) outside any section. Every field has a
// default; unknown keys and malformed values are all reported together.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fairm2s/backbone.hpp"
#include "fairm2s/data.hpp"
#include "fairm2s/meta_learner.hpp"

namespace fairm2s {

struct DataConfig {
  double test_fraction = 0.25;
  std::uint64_t split_seed = 0;
  bool standardize = true;

  // Synthetic source, used when no manifest is given to grid/ablate.
  int synthetic_n = 400;
  BiasSpec bias;
};

inline const std::vector<std::string>& ablation_arms() {
  static const std::vector<std::string> arms{"All", "No_AGM", "No_Eodd", "No_FCGP", "No_LS", "No_M"};
  return arms;
}

struct ExperimentSpec {
  std::vector<int> shot_list{5};
  std::vector<std::uint64_t> seed_list{0, 1, 2, 3, 4};
  std::vector<double> gamma_grid{0.01, 0.05, 0.1, 0.2, 0.5, 1.0};
  std::vector<double> lambda_grid{0.05, 0.1, 0.2};
  std::vector<double> alpha_grid{0.1, 0.2, 0.3};
  std::vector<std::string> ablations = ablation_arms();
  int n_eval_tasks = 200;
  std::uint64_t eval_seed = 12345;

  void validate() const;
};

struct RunConfig {
  BackboneConfig backbone;
  MetaConfig meta;
  DataConfig data;
  ExperimentSpec experiment;
  int eval_every = 0;  // training-log evaluation snapshot period (epochs), 0 = off

  void validate() const;
};

struct ConfigParseResult {
  RunConfig config;
  std::vector<std::string> errors;  // empty on success
};

/// Applies `text` on top of `base`; never throws.
ConfigParseResult parse_config(const std::string& text, const RunConfig& base = {});

/// Reads and parses a file; throws ConfigError listing every problem.
RunConfig load_config(const std::filesystem::path& path);

/// Applies one `section.key=value` override; throws ConfigError on failure.
void apply_override(RunConfig& cfg, const std::string& assignment);

/// Every field as `section.key -> value` (canonical text).
std::map<std::string, std::string> config_fields(const RunConfig& cfg);

/// Sectioned text that parse_config() maps back to the same fields.
std::string to_text(const RunConfig& cfg);

}  // namespace fairm2s

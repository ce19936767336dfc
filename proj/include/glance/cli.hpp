#pragma once

// Command-line front end. Every command resolves defaults, an optional JSON
// config file and flag overrides (in that order) into an ExperimentConfig and
// writes it back as config.resolved.json next to its outputs.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "glance/manage.hpp"
#include "glance/pipeline.hpp"
#include "json.hpp"

namespace glance::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumerical = 3;

/// Default output root when --out is not given.
inline constexpr const char* kOutputRootEnv = "GLANCE_OUTPUT_ROOT";

struct ManageSettings {
  int instances = 20;
  std::vector<int> kpis{0, 1, 2, 3};
  GdOptions gd;
  int n_init = 100;
  int n_rand = 5;
};

struct ExperimentConfig {
  std::string scenario = "reggrid-fixed";
  std::uint64_t seed = 1;
  std::string output;
  int jobs = 1;

  // gen-data
  int n_train = 200, n_val = 50, n_test = 50, n_runs_test = 4;
  int flows = 10;
  int max_links = 3;
  nlohmann::json sim = nlohmann::json::object();  // overrides of the scenario's SimConfig

  // train / eval / manage
  std::string data_dir;
  TrainConfig train;
  std::optional<double> lr;  // scenario default when empty
  bool cv = false;
  bool resume = false;
  std::string pretrained;
  std::vector<std::string> models;
  ManageSettings manage;
};

nlohmann::json config_to_json(const ExperimentConfig& c);
/// Overrides the fields present in j; throws std::invalid_argument on
/// unknown keys or malformed values.
ExperimentConfig config_from_json(const nlohmann::json& j, ExperimentConfig base = {});

/// Runs one command; args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace glance::cli

#pragma once

#include "so3flow/distributions.hpp"
#include "so3flow/flow.hpp"
#include "so3flow/training.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace so3flow {

/// Invalid configuration; the message carries "source:line: " when the
/// offending key can be located in the input text.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& message, int line = 0) : std::runtime_error(message), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

struct TargetConfig {
  TargetKind kind = TargetKind::Cube24;
  double kappa = 40.0;
  Rotation mode;

  TargetSpec build() const { return make_target(kind, kappa, mode); }
};

struct EvalConfig {
  std::size_t grid_size = 500000;
  std::size_t envelope_grid_size = 500000;
  std::size_t samples = 10000;
  double tol = 1e-7;
  int threads = 1;
};

/// A full run. More than one target makes a conditional model with one-hot
/// conditions (model.cond_dim is set to the target count).
struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  std::vector<TargetConfig> targets{TargetConfig{}};
  FlowArchitecture model = FlowArchitecture::desk();
  TrainConfig train;
  EvalConfig eval;

  std::vector<TargetSpec> build_targets() const;
};

/// Parses JSON text; unknown keys and bad values throw ConfigError.
RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);

/// Fully resolved config (every default spelled out), pretty-printed.
std::string to_json(const RunConfig& config);
/// 16 hex digits of FNV-1a over the compact resolved config.
std::string config_hash(const RunConfig& config);

std::string architecture_to_json(const FlowArchitecture& arch);
FlowArchitecture architecture_from_json(const std::string& text);

std::string to_string(AffineParameterization p);
std::string to_string(ConditionalAffine c);

}  // namespace so3flow

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bamrl/attack.hpp"
#include "bamrl/env.hpp"
#include "bamrl/metrics.hpp"
#include "bamrl/policy.hpp"
#include "bamrl/ppo.hpp"
#include "bamrl/recovery.hpp"

namespace bamrl {

inline constexpr int kRunConfigSchemaVersion = 1;

/// PGD settings as written in a run config; a missing step size follows
/// 2.5 * eps / iterations for whatever eps is in use.
struct AttackSpec {
  double epsilon = 0.1;
  std::size_t iterations = 10;
  std::optional<double> step_size;
  bool random_start = false;

  AttackConfig resolve(double eps) const;
  AttackConfig resolve() const { return resolve(epsilon); }
};

struct AdvTrainingSpec {
  std::size_t every_k = 10;
  AttackSpec attack;
};

struct TrainingSpec {
  TrainConfig train;  // adv_training is taken from `adv` below
  std::optional<AdvTrainingSpec> adv;

  TrainConfig resolve(std::uint64_t seed) const;
};

struct EvaluationSpec {
  std::size_t episodes = 10;
  std::vector<double> epsilons = kEpsilonGrid;
  std::vector<Regime> regimes = {Regime::clean, Regime::attacked, Regime::recovered};
};

struct DumpSpec {
  std::size_t states = 5;
  double epsilon = 0.1;
  std::string source = "env";
};

/// Fully resolved settings of one CLI run.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "run";
  std::size_t workers = 1;
  ArchitectureConfig architecture = ArchitectureConfig::nature_lite(true);
  PixelCatchConfig env;
  ObservationConfig observation;
  TrainingSpec training;
  AttackSpec attack;
  RecoveryConfig recovery;
  EvaluationSpec evaluation;
  DumpSpec dump;

  /// ConfigError on any inconsistency.
  void validate() const;
};

/// "baseline", "bam", "nature_cnn" or "nature_cnn_bam"; ConfigError otherwise.
ArchitectureConfig architecture_preset(const std::string& name);

nlohmann::ordered_json to_json(const RunConfig& c);
/// Applies the keys present in `j` on top of `base`; unknown keys and bad
/// types raise ConfigError. "architecture" may be a preset name or an object.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});
void save_run_config(const RunConfig& c, const std::filesystem::path& path);

/// Parses "every_k=10 eps=0.1 ..." style overrides for adversarial training.
AdvTrainingSpec parse_adv_tokens(const std::vector<std::string>& tokens, AdvTrainingSpec base = {});

}  // namespace bamrl

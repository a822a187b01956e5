#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "bamrl/policy.hpp"

namespace bamrl {

/// Per-step clean (p), attacked (q) and recovered (r) outcomes.
struct StepRecord {
  ActionDistribution p;
  ActionDistribution q;
  ActionDistribution r;
  std::size_t a_p = 0;
  std::size_t a_q = 0;
  std::size_t a_r = 0;
  std::array<std::size_t, 2> top2_p{0, 1};

  /// Fills the derived argmaxes and top-2 set; throws std::invalid_argument
  /// on invalid distributions or mismatched action counts.
  static StepRecord from_distributions(ActionDistribution p, ActionDistribution q,
                                       ActionDistribution r);
};

struct MetricCount {
  std::size_t count = 0;
  double percent = 0.0;
};

struct RewardStats {
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> episodes;
};

enum class Regime { clean, attacked, recovered };
const char* to_string(Regime regime);
Regime regime_from_string(const std::string& name);

/// Aggregates over every evaluated step (successful and unsuccessful attacks).
struct MetricsReport {
  double epsilon = 0.0;
  std::string environment;
  std::size_t steps = 0;
  MetricCount successful;
  MetricCount reversed_top1;
  MetricCount reversed_top2;
  MetricCount reversed_any;
  std::optional<RewardStats> reward_clean;
  std::optional<RewardStats> reward_attacked;
  std::optional<RewardStats> reward_recovered;
};

/// std::invalid_argument on an empty list or a record with a degenerate top-2 set.
MetricsReport compute_metrics(const std::vector<StepRecord>& records);

/// Mean and population standard deviation; std::invalid_argument when empty.
RewardStats summarize_rewards(std::vector<double> episodes);

/// defended / baseline, or nullopt when the baseline is not positive.
std::optional<double> improvement_ratio(double defended, double best_baseline);

inline constexpr int kReportSchemaVersion = 1;

/// Full reports, one entry per epsilon.
std::string reports_to_json(const std::vector<MetricsReport>& reports);
/// One row per epsilon x regime.
void write_reports_csv(std::ostream& out, const std::vector<MetricsReport>& reports);

}  // namespace bamrl

#include "bamrl/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace bamrl {

StepRecord StepRecord::from_distributions(ActionDistribution p, ActionDistribution q,
                                          ActionDistribution r) {
  if (p.size() < 2 || q.size() != p.size() || r.size() != p.size()) {
    throw std::invalid_argument("step record needs three distributions over the same >= 2 actions");
  }
  if (!p.valid() || !q.valid() || !r.valid()) {
    throw std::invalid_argument("step record holds an invalid distribution");
  }
  StepRecord s;
  s.a_p = p.argmax();
  s.a_q = q.argmax();
  s.a_r = r.argmax();
  s.top2_p = p.top2();
  s.p = std::move(p);
  s.q = std::move(q);
  s.r = std::move(r);
  return s;
}

const char* to_string(Regime regime) {
  switch (regime) {
    case Regime::clean: return "clean";
    case Regime::attacked: return "attacked";
    case Regime::recovered: return "recovered";
  }
  return "?";
}

Regime regime_from_string(const std::string& name) {
  if (name == "clean") return Regime::clean;
  if (name == "attacked") return Regime::attacked;
  if (name == "recovered") return Regime::recovered;
  throw ConfigError("unknown regime '" + name + "' (expected clean, attacked or recovered)");
}

MetricsReport compute_metrics(const std::vector<StepRecord>& records) {
  if (records.empty()) throw std::invalid_argument("compute_metrics: no records");
  MetricsReport m;
  m.steps = records.size();
  for (const auto& s : records) {
    if (s.top2_p[0] == s.top2_p[1]) {
      throw std::invalid_argument("compute_metrics: top-2 set must hold two distinct actions");
    }
    if (s.a_q != s.a_p) ++m.successful.count;
    if (s.a_r == s.a_p) ++m.reversed_top1.count;
    if (s.a_r == s.top2_p[0] || s.a_r == s.top2_p[1]) ++m.reversed_top2.count;
    if (s.a_r != s.a_q || s.a_q == s.a_p) ++m.reversed_any.count;
  }
  const double n = static_cast<double>(m.steps);
  for (MetricCount* c : {&m.successful, &m.reversed_top1, &m.reversed_top2, &m.reversed_any}) {
    c->percent = 100.0 * static_cast<double>(c->count) / n;
  }
  return m;
}

RewardStats summarize_rewards(std::vector<double> episodes) {
  if (episodes.empty()) throw std::invalid_argument("summarize_rewards: no episodes");
  RewardStats s;
  const double n = static_cast<double>(episodes.size());
  s.mean = std::accumulate(episodes.begin(), episodes.end(), 0.0) / n;
  double var = 0.0;
  for (double e : episodes) var += (e - s.mean) * (e - s.mean);
  s.std = std::sqrt(var / n);
  s.episodes = std::move(episodes);
  return s;
}

std::optional<double> improvement_ratio(double defended, double best_baseline) {
  if (!(best_baseline > 0.0)) return std::nullopt;
  return defended / best_baseline;
}

namespace {

// Reports without attacked steps carry no attack metrics.
nlohmann::ordered_json count_json(const MetricsReport& m, const MetricCount& c) {
  if (m.steps == 0) return nullptr;
  return {{"count", c.count}, {"percent", c.percent}};
}

nlohmann::ordered_json reward_json(const std::optional<RewardStats>& r) {
  if (!r) return nullptr;
  return {{"mean", r->mean}, {"std", r->std}, {"episodes", r->episodes}};
}

}  // namespace

std::string reports_to_json(const std::vector<MetricsReport>& reports) {
  nlohmann::ordered_json doc;
  doc["schema_version"] = kReportSchemaVersion;
  doc["reports"] = nlohmann::ordered_json::array();
  for (const auto& m : reports) {
    doc["reports"].push_back({
        {"epsilon", m.epsilon},
        {"environment", m.environment},
        {"steps", m.steps},
        {"successful_attacks", count_json(m, m.successful)},
        {"reversed_top1", count_json(m, m.reversed_top1)},
        {"reversed_top2", count_json(m, m.reversed_top2)},
        {"reversed_any", count_json(m, m.reversed_any)},
        {"reward",
         {{"clean", reward_json(m.reward_clean)},
          {"attacked", reward_json(m.reward_attacked)},
          {"recovered", reward_json(m.reward_recovered)}}},
    });
  }
  return doc.dump(2) + "\n";
}

void write_reports_csv(std::ostream& out, const std::vector<MetricsReport>& reports) {
  out << "epsilon,environment,regime,steps,successful_pct,reversed_top1_pct,reversed_top2_pct,"
         "reversed_any_pct,reward_mean,reward_std,episodes\n";
  const auto pct = [](const MetricsReport& m, const MetricCount& c) {
    std::ostringstream s;
    if (m.steps == 0) return s.str();
    s << std::setprecision(10) << c.percent;
    return s.str();
  };
  for (const auto& m : reports) {
    const std::pair<Regime, const std::optional<RewardStats>*> rows[] = {
        {Regime::clean, &m.reward_clean},
        {Regime::attacked, &m.reward_attacked},
        {Regime::recovered, &m.reward_recovered}};
    for (const auto& [regime, reward] : rows) {
      out << std::setprecision(10) << m.epsilon << ',' << m.environment << ',' << to_string(regime)
          << ',' << m.steps << ',' << pct(m, m.successful) << ',' << pct(m, m.reversed_top1)
          << ',' << pct(m, m.reversed_top2) << ',' << pct(m, m.reversed_any) << ',';
      if (*reward) {
        out << (*reward)->mean << ',' << (*reward)->std << ',' << (*reward)->episodes.size();
      } else {
        out << ",,0";
      }
      out << '\n';
    }
  }
}

}  // namespace bamrl

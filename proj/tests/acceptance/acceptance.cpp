// Acceptance runner: one PASS/FAIL line per criterion, exit status 0 only
// when every selected criterion passes.

#include <sys/wait.h>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <iterator>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <CLI11.hpp>

#include "bamrl/attack.hpp"
#include "bamrl/bam.hpp"
#include "bamrl/checkpoint.hpp"
#include "bamrl/env.hpp"
#include "bamrl/evaluation.hpp"
#include "bamrl/metrics.hpp"
#include "bamrl/policy.hpp"
#include "bamrl/ppo.hpp"
#include "bamrl/recovery.hpp"
#include "gradcheck.hpp"
#include "metrics_oracle.hpp"

namespace fs = std::filesystem;
using namespace bamrl;
using bamrl::testing::grad_check;
using bamrl::testing::project;
using bamrl::testing::random_tensor;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 3) {
  std::ostringstream out;
  out.precision(precision);
  out << std::fixed << v;
  return out.str();
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

constexpr double kGradTol = 1e-4;
constexpr int kGradInstances = 20;

struct GradTally {
  std::map<std::string, std::pair<int, double>> per_group;  // instances, worst error

  void add(const std::string& group, const bamrl::testing::GradCheckResult& r) {
    auto& [n, worst] = per_group[group];
    ++n;
    worst = std::max(worst, r.max_rel_error);
  }
};

Verdict criterion_gradients() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  GradTally tally;
  std::uniform_int_distribution<std::size_t> small(1, 3);
  std::uniform_int_distribution<std::size_t> bit(0, 1);

  for (int i = 0; i < kGradInstances; ++i) {
    const ConvGeometry g{1 + bit(rng), bit(rng) + bit(rng), 1 + bit(rng)};
    const std::size_t cin = small(rng);
    const std::size_t cout = small(rng);
    const std::size_t k = 1 + 2 * bit(rng);
    auto x = random_tensor(Shape{small(rng), cin, 5 + small(rng), 5 + small(rng)}, rng);
    auto w = random_tensor(Shape{cout, cin, k, k}, rng);
    auto b = random_tensor(Shape{cout}, rng);
    tally.add("conv2d", grad_check([&](Tape<double>&, const auto& v) {
                          return project(conv2d(v[0], v[1], v[2], g), 1);
                        },
                        {&x, &w, &b}));
  }
  for (int i = 0; i < kGradInstances; ++i) {
    const std::size_t in = 1 + small(rng) * 2;
    const std::size_t out = small(rng) + 1;
    auto x = random_tensor(Shape{small(rng), in}, rng);
    auto w = random_tensor(Shape{out, in}, rng);
    auto b = random_tensor(Shape{out}, rng);
    tally.add("dense", grad_check([](Tape<double>&, const auto& v) {
                         return project(dense(v[0], v[1], v[2]), 2);
                       },
                       {&x, &w, &b}));
  }
  for (int i = 0; i < kGradInstances; ++i) {
    const std::size_t n = small(rng);
    const std::size_t c = small(rng) + 1;
    auto a = random_tensor(Shape{n, c, 4}, rng);
    auto b = random_tensor(Shape{n, 1, 4}, rng);
    tally.add("elementwise", grad_check([](Tape<double>&, const auto& v) {
                               auto y = add(mul(relu(v[0]), sigmoid(v[1])), sub(v[0], v[1]));
                               y = add(minimum(scale(y, 1.5), add_scalar(v[0], 0.1)),
                                       clamp(v[0], -0.4, 0.6));
                               return project(bamrl::exp(scale(y, 0.5)), 3);
                             },
                             {&a, &b}));
  }
  for (int i = 0; i < kGradInstances; ++i) {
    const std::size_t n = small(rng);
    const std::size_t c = small(rng) + 1;
    auto x = random_tensor(Shape{n, c, 3, 3}, rng);
    std::vector<std::size_t> picks;
    for (std::size_t r = 0; r < n; ++r) picks.push_back(r % c);
    tally.add("reductions", grad_check([&](Tape<double>&, const auto& v) {
                              auto pooled = reshape(global_avg_pool(v[0]), Shape{n, c});
                              auto lp = log_softmax(pooled, 1);
                              auto p = softmax(reshape(v[0], Shape{n * c, 9}), 1);
                              return add(add(project(lp, 4), project(sum(p, 1), 5)),
                                         add(mean(pick(lp, picks)), sum(v[0])));
                            },
                            {&x}));
  }
  for (int i = 0; i < kGradInstances; ++i) {
    const std::size_t c = 2 * small(rng) + 2;
    const std::size_t r = 2;
    const std::size_t d = 1 + bit(rng);
    auto p = BamParams<double>::zeros(c, r, d);
    for (auto& np : p.named_parameters("")) *np.tensor = random_tensor(np.tensor->shape(), rng, -0.5, 0.5);
    auto f = random_tensor(Shape{small(rng), c, 5, 5}, rng);
    std::vector<Tensor<double>*> inputs{&f};
    for (auto& np : p.named_parameters("")) inputs.push_back(np.tensor);
    tally.add("bam_channel", grad_check([&](Tape<double>&, const auto& v) {
                               return project(bam_channel_branch(v[0], p, true), 10);
                             },
                             inputs));
    tally.add("bam_spatial", grad_check([&](Tape<double>&, const auto& v) {
                               return project(bam_spatial_branch(v[0], p, true), 11);
                             },
                             inputs));
    tally.add("bam_forward", grad_check([&](Tape<double>&, const auto& v) {
                               return project(bam_forward(v[0], p, true), 12);
                             },
                             inputs));
  }
  for (int i = 0; i < kGradInstances; ++i) {
    const std::size_t n = 2 + small(rng) * 2;
    auto logits = random_tensor(Shape{n, 3}, rng);
    auto values = random_tensor(Shape{n}, rng);
    std::uniform_real_distribution<double> u(-1, 1);
    std::uniform_int_distribution<std::size_t> act(0, 2);
    std::vector<std::size_t> actions;
    std::vector<double> old, adv, ret;
    for (std::size_t j = 0; j < n; ++j) {
      actions.push_back(act(rng));
      old.push_back(std::log(1.0 / 3.0) + 0.5 * u(rng));
      adv.push_back(u(rng));
      ret.push_back(u(rng));
    }
    tally.add("ppo_loss", grad_check([&](Tape<double>&, const auto& x) {
                            return ppo_objective(x[0], x[1], actions, old, adv, ret, PpoCoefficients{})
                                .total;
                          },
                          {&logits, &values}));
  }
  for (int i = 0; i < kGradInstances; ++i) {
    PolicyNetwork<double> net(ArchitectureConfig::nature_lite(true));
    net.initialize(200 + static_cast<std::uint64_t>(i));
    // The fresh policy head is zero; give it weights so every path carries
    // gradient. Zero biases leave ReLU inputs exactly on the kink wherever a
    // receptive field is all zeros, so biases are drawn at random too.
    auto& head = net.layer(net.num_layers()).weight;
    head = random_tensor(head.shape(), rng, -0.3, 0.3);
    for (auto& np : net.named_parameters()) {
      if (np.name.ends_with("bias")) *np.tensor = random_tensor(np.tensor->shape(), rng, -0.1, 0.1);
    }
    auto obs = random_tensor(Shape{1, 4, 32, 32}, rng, 0.0, 1.0);
    std::vector<Tensor<double>*> inputs{&obs};
    for (auto& np : net.named_parameters()) inputs.push_back(np.tensor);
    tally.add("nature_lite", grad_check(
                                 [&](Tape<double>&, const auto& v) {
                                   const auto h = net.run(v[0], true);
                                   return add(project(log_softmax(h.logits, 1), 1), project(h.values, 2));
                                 },
                                 inputs, 1e-6, 6, static_cast<std::uint64_t>(i)));
  }

  const double elapsed = seconds_since(t0);
  bool ok = elapsed <= 60.0;
  std::string worst;
  for (const auto& [name, v] : tally.per_group) {
    ok = ok && v.first >= kGradInstances && v.second <= kGradTol;
    worst += " " + name + "=" + [&] {
      std::ostringstream s;
      s.precision(1);
      s << std::scientific << v.second;
      return s.str();
    }();
  }
  return {ok, "max rel error per group (" + std::to_string(kGradInstances) + " instances each):" + worst +
                  "; " + fmt(elapsed, 1) + " s"};
}

// ---------------------------------------------------------------------------
// Shared helpers

PolicyNetwork<float> scrambled_bam_net(std::uint64_t seed) {
  PolicyNetwork<float> net(ArchitectureConfig::nature_lite(true));
  net.initialize(seed);
  std::mt19937_64 rng(seed + 1);
  auto& head = net.layer(net.num_layers()).weight;
  head = tensor_cast<float>(random_tensor(head.shape(), rng, -0.3, 0.3));
  for (auto& np : net.bam_params().named_parameters("")) {
    *np.tensor = tensor_cast<float>(random_tensor(np.tensor->shape(), rng, -0.5, 0.5));
  }
  return net;
}

// Real PixelCatch observations from random play.
std::vector<Tensor<float>> env_observations(std::size_t n, std::uint64_t seed) {
  CatchTask task(PixelCatchConfig{}, ObservationConfig{});
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> act(0, 2);
  std::vector<Tensor<float>> out;
  auto obs = task.reset(seed);
  while (out.size() < n) {
    const auto s = task.step(act(rng));
    obs = s.observation;
    out.push_back(obs);
    if (s.done) obs = task.reset(seed + out.size());
  }
  return out;
}

// ---------------------------------------------------------------------------
// 2. Attack feasibility

Verdict criterion_attack_feasibility() {
  const auto net = scrambled_bam_net(7);
  const auto env_obs = env_observations(500, 3);
  std::mt19937_64 data_rng(5);
  std::mt19937_64 attack_rng(6);
  std::size_t attacks = 0;
  std::size_t violations = 0;
  double worst_excess = -1.0;
  for (std::size_t i = 0; i < 1000; ++i) {
    const double eps = kEpsilonGrid[i % kEpsilonGrid.size()];
    AttackConfig cfg = AttackConfig::standard(eps);
    cfg.random_start = (i / kEpsilonGrid.size()) % 2 == 1;
    const Tensor<float> s = i % 2 == 0 ? env_obs[i / 2]
                                       : tensor_cast<float>(random_tensor(Shape{4, 32, 32}, data_rng, 0.0, 1.0));
    const auto adv = pgd_attack(net, s, cfg, attack_rng);
    ++attacks;
    bool bad = adv.observation.shape() != s.shape();
    for (std::size_t k = 0; k < s.size() && !bad; ++k) {
      const double a = adv.observation[k];
      const double excess = std::abs(a - static_cast<double>(s[k])) - eps;
      worst_excess = std::max(worst_excess, excess);
      if (excess > 1e-6 || !(a >= 0.0 && a <= 1.0)) bad = true;
    }
    if (bad) ++violations;
  }
  std::size_t zero_mismatch = 0;
  for (std::size_t i = 0; i < 40; ++i) {
    AttackConfig cfg = AttackConfig::standard(0.0);
    cfg.random_start = i % 2 == 1;
    const Tensor<float> s = i % 4 < 2 ? env_obs[i]
                                      : tensor_cast<float>(random_tensor(Shape{4, 32, 32}, data_rng, 0.0, 1.0));
    const auto adv = pgd_attack(net, s, cfg, attack_rng);
    if (!std::equal(s.data().begin(), s.data().end(), adv.observation.data().begin(),
                    [](float a, float b) { return std::bit_cast<std::uint32_t>(a) == std::bit_cast<std::uint32_t>(b); })) {
      ++zero_mismatch;
    }
  }
  std::ostringstream d;
  d << attacks << " attacks over eps {0.01,0.05,0.1,0.5}, " << violations
    << " violations (max |s_A - s| - eps = " << std::scientific << std::setprecision(1) << worst_excess
    << "); eps=0: " << zero_mismatch << "/40 not bit-identical";
  return {violations == 0 && zero_mismatch == 0, d.str()};
}

// ---------------------------------------------------------------------------
// 3. Recovery algebra

Verdict criterion_recovery_algebra() {
  std::size_t splice_checks = 0;
  std::size_t splice_failures = 0;
  std::size_t hadamard_calls = 0;
  std::size_t hadamard_failures = 0;
  std::mt19937_64 rng(17);
  std::mt19937_64 attack_rng(18);
  const auto env_obs = env_observations(60, 9);
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const auto net = scrambled_bam_net(30 + seed);
    const std::size_t l = *net.bam_index();
    const std::size_t n = net.num_layers();
    for (std::size_t j = 0; j < 10; ++j) {
      Tensor<float> s = j % 2 == 0 ? env_obs[seed * 10 + j]
                                   : tensor_cast<float>(random_tensor(Shape{4, 32, 32}, rng, 0.0, 1.0));
      s = pgd_attack(net, s, AttackConfig::standard(kEpsilonGrid[j % 4]), attack_rng).observation;
      const Tensor<float> batch = s.reshaped(Shape{1, 4, 32, 32});
      const auto f_pre = forward_prefix(net, batch, 1, l - 1);
      const Tensor<float> ones(f_pre.shape(), 1.0f);
      const Tensor<float> zeros(f_pre.shape(), 0.0f);
      for (Reentry re : {Reentry::after_bam, Reentry::at_bam}) {
        const std::size_t from = re == Reentry::after_bam ? l + 1 : l;
        const auto [id_logits, id_rec] = detail::recover_with_mask(net, batch, {re}, ones);
        const auto [zero_logits, zero_rec] = detail::recover_with_mask(net, batch, {re}, zeros);
        splice_checks += 2;
        if (!(id_rec == f_pre && id_logits == forward_prefix(net, batch, from, n, &f_pre))) ++splice_failures;
        if (!(zero_rec == zeros && zero_logits == forward_prefix(net, batch, from, n, &zeros))) {
          ++splice_failures;
        }
        const auto r = recover(net, batch, {re});
        ++hadamard_calls;
        for (std::size_t k = 0; k < r.tap.f_rec.size(); ++k) {
          if (r.tap.f_rec[k] != r.tap.f_pre[k] * r.tap.f_bam.values()[k]) {
            ++hadamard_failures;
            break;
          }
        }
        if (!(r.logits == forward_prefix(net, batch, from, n, &r.tap.f_rec))) ++splice_failures;
      }
    }
  }
  std::ostringstream d;
  d << splice_failures << " of " << splice_checks + hadamard_calls
    << " identity/zero/attention splices differ from the forward_prefix oracle; f_rec != f_pre*f_bam on "
    << hadamard_failures << " of " << hadamard_calls << " calls";
  return {splice_failures == 0 && hadamard_failures == 0, d.str()};
}

// ---------------------------------------------------------------------------
// 4. Metric oracle equivalence

ActionDistribution peaked(std::size_t at, std::size_t second) {
  ActionDistribution d;
  d.probs.assign(3, 0.1);
  d.probs[at] = 0.6;
  d.probs[second] = 0.3;
  for (double p : d.probs) d.logits.push_back(std::log(p));
  return d;
}

Verdict criterion_metrics() {
  std::mt19937_64 rng(4242);
  std::uniform_int_distribution<std::size_t> len(1, 1000);
  std::size_t mismatches = 0;
  std::size_t order_violations = 0;
  std::size_t records = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto recs = bamrl::testing::random_records(len(rng), rng);
    records += recs.size();
    const auto m = compute_metrics(recs);
    const auto c = bamrl::testing::brute_force_counts(recs);
    const double n = static_cast<double>(c.steps);
    const auto same = [&](const MetricCount& mc, std::size_t count) {
      return mc.count == count && mc.percent == 100.0 * static_cast<double>(count) / n;
    };
    if (m.steps != c.steps || !same(m.successful, c.successful) || !same(m.reversed_top1, c.rt1) ||
        !same(m.reversed_top2, c.rt2) || !same(m.reversed_any, c.rany)) {
      ++mismatches;
    }
    if (m.reversed_top2.percent < m.reversed_top1.percent) ++order_violations;
  }
  const std::vector<StepRecord> example{
      StepRecord::from_distributions(peaked(0, 1), peaked(1, 0), peaked(0, 1)),
      StepRecord::from_distributions(peaked(1, 2), peaked(1, 0), peaked(2, 0)),
      StepRecord::from_distributions(peaked(2, 1), peaked(0, 1), peaked(2, 0)),
      StepRecord::from_distributions(peaked(0, 1), peaked(2, 0), peaked(2, 0)),
  };
  const auto e = compute_metrics(example);
  const bool example_ok = e.successful.percent == 75.0 && e.reversed_top1.percent == 50.0 &&
                          e.reversed_top2.percent == 75.0 && e.reversed_any.percent == 75.0;
  std::ostringstream d;
  d << mismatches << "/100 random lists (" << records << " records) differ from the brute-force count; "
    << "4-record example " << fmt(e.successful.percent, 0) << "/" << fmt(e.reversed_top1.percent, 0) << "/"
    << fmt(e.reversed_top2.percent, 0) << "/" << fmt(e.reversed_any.percent, 0) << "; RT2<RT1 on "
    << order_violations << " lists";
  return {mismatches == 0 && example_ok && order_violations == 0, d.str()};
}

// ---------------------------------------------------------------------------
// 5-7. Trained agents

constexpr std::uint64_t kTrainSeed = 0;
constexpr std::uint64_t kEvalSeed = 777;
constexpr std::size_t kEvalEpisodes = 100;
constexpr double kRewardTarget = 0.9 * 8;
constexpr double kTimeLimit = 20 * 60;

struct Agent {
  std::string name;
  bool bam = false;
  bool adv = false;
  std::optional<PolicyNetwork<float>> net;
  double train_seconds = 0.0;
  std::size_t env_steps = 0;
  bool trained_here = false;
  std::optional<RewardStats> clean;
};

class AgentPool {
 public:
  explicit AgentPool(fs::path dir) : dir_(std::move(dir)) {
    for (const auto& [name, bam, adv] : {std::tuple{"bam_adv", true, true}, std::tuple{"baseline", false, false},
                                         std::tuple{"bam", true, false}}) {
      Agent a;
      a.name = name;
      a.bam = bam;
      a.adv = adv;
      agents_.push_back(std::move(a));
    }
  }

  Agent& train(const std::string& name) {
    Agent& a = find(name);
    TrainConfig cfg;
    cfg.seed = kTrainSeed;
    if (a.adv) cfg.adv_training = AdvTrainingConfig{AttackConfig::standard(0.1), 10};
    PolicyNetwork<float> net(ArchitectureConfig::nature_lite(a.bam));
    net.initialize(kTrainSeed);
    std::cerr << "training " << name << " for " << cfg.total_steps << " steps\n";
    const auto t0 = Clock::now();
    const auto result = train_agent(net, cfg, name);
    a.train_seconds = seconds_since(t0);
    a.env_steps = result.env_steps;
    a.trained_here = true;
    fs::create_directories(dir_);
    save_checkpoint(net, dir_ / (name + ".bin"));
    a.net = std::move(net);
    a.clean.reset();
    return a;
  }

  /// Trained agent, loaded from the work directory when a previous run left
  /// one there.
  Agent& get(const std::string& name) {
    Agent& a = find(name);
    if (a.net) return a;
    const fs::path path = dir_ / (name + ".bin");
    if (fs::exists(path)) {
      std::cerr << "loading " << path.string() << '\n';
      a.net = load_checkpoint<float>(path, ArchitectureConfig::nature_lite(a.bam));
      return a;
    }
    return train(name);
  }

  const RewardStats& clean_reward(Agent& a) {
    if (!a.clean) {
      EvalSetup setup;
      setup.episodes = kEvalEpisodes;
      setup.seed = kEvalSeed;
      a.clean = evaluate_reward(*a.net, setup, Regime::clean, AttackConfig::standard(0.0));
    }
    return *a.clean;
  }

 private:
  static TrainResult train_agent(PolicyNetwork<float>& net, const TrainConfig& cfg, const std::string& name) {
    return bamrl::train(net, cfg, {}, {}, [&](const TrainLogRow& row) {
      if (row.update_index % 10 == 9) {
        std::cerr << "  " << name << " update " << row.update_index + 1 << " steps " << row.env_steps
                  << " reward " << (row.mean_episode_reward ? fmt(*row.mean_episode_reward, 2) : "-") << '\n';
      }
    });
  }

  Agent& find(const std::string& name) {
    for (auto& a : agents_) {
      if (a.name == name) return a;
    }
    throw std::logic_error("unknown agent " + name);
  }

  fs::path dir_;
  std::vector<Agent> agents_;
};

Verdict criterion_training(AgentPool& pool) {
  std::vector<double> means;
  bool ok = true;
  std::ostringstream d;
  for (const std::string name : {"bam_adv", "baseline", "bam"}) {
    Agent& a = pool.train(name);
    const auto& clean = pool.clean_reward(a);
    means.push_back(clean.mean);
    const bool fast = a.train_seconds <= kTimeLimit && a.env_steps <= 200000;
    ok = ok && fast && clean.mean >= kRewardTarget;
    d << name << " " << fmt(clean.mean, 2) << "+-" << fmt(clean.std, 2) << " (" << a.env_steps << " steps, "
      << fmt(a.train_seconds, 0) << " s); ";
  }
  const double hi = *std::max_element(means.begin(), means.end());
  const double lo = *std::min_element(means.begin(), means.end());
  const double spread = hi > 0.0 ? (hi - lo) / hi : 1.0;
  ok = ok && spread <= 0.1;
  d << "target >= " << fmt(kRewardTarget, 1) << " over " << kEvalEpisodes << " episodes, spread "
    << fmt(100.0 * spread, 1) << "% (<= 10%)";
  return {ok, d.str()};
}

Verdict criterion_attack_potency(AgentPool& pool) {
  Agent& a = pool.get("baseline");
  const auto& clean = pool.clean_reward(a);
  EvalSetup setup;
  setup.episodes = kEvalEpisodes;
  setup.seed = kEvalSeed;
  const auto attacked = evaluate_reward(*a.net, setup, Regime::attacked, AttackConfig::standard(0.1));
  const bool ok = clean.mean > 0.0 && attacked.mean <= 0.5 * clean.mean;
  return {ok, "undefended baseline clean " + fmt(clean.mean, 2) + ", all-frame PGD eps=0.1 " +
                  fmt(attacked.mean, 2) + " (" + fmt(clean.mean > 0 ? 100.0 * attacked.mean / clean.mean : 0.0, 1) +
                  "% of clean, limit 50%)"};
}

Verdict criterion_defense(AgentPool& pool) {
  Agent& a = pool.get("bam_adv");
  const auto& net = *a.net;
  const AttackConfig attack = AttackConfig::standard(0.1);
  std::size_t wins = 0;
  std::vector<StepRecord> pooled;
  double sum_attacked = 0.0;
  double sum_recovered = 0.0;
  for (std::uint64_t i = 0; i < 10; ++i) {
    EvalSetup setup;
    setup.episodes = 10;
    setup.seed = 5000 + i;
    const auto attacked = evaluate_reward(net, setup, Regime::attacked, attack);
    const auto recovered = evaluate_reward(net, setup, Regime::recovered, attack, {}, &pooled);
    if (recovered.mean >= attacked.mean) ++wins;
    sum_attacked += attacked.mean;
    sum_recovered += recovered.mean;
    std::cerr << "  seed " << i << " attacked " << attacked.mean << " recovered " << recovered.mean << '\n';
  }
  const auto m = compute_metrics(pooled);
  const double rt1 = m.reversed_top1.percent;
  const double control = 100.0 - m.successful.percent;

  std::vector<double> sweep;
  for (double eps : kEpsilonGrid) {
    std::vector<StepRecord> recs;
    for (std::uint64_t i = 0; i < 2; ++i) {
      EvalSetup setup;
      setup.episodes = 10;
      setup.seed = 6000 + i;
      evaluate_reward(net, setup, Regime::recovered, AttackConfig::standard(eps), {}, &recs);
    }
    sweep.push_back(compute_metrics(recs).reversed_top1.percent);
  }
  bool monotone = true;
  for (std::size_t i = 1; i < sweep.size(); ++i) monotone = monotone && sweep[i] <= sweep[i - 1] + 5.0;

  const bool ok = wins >= 8 && rt1 > 0.0 && rt1 - control >= 10.0 && monotone;
  std::ostringstream d;
  d << "recovery >= no recovery in " << wins << "/10 seeds (means " << fmt(sum_recovered / 10, 2) << " vs "
    << fmt(sum_attacked / 10, 2) << "); RT1 " << fmt(rt1, 1) << "% vs control " << fmt(control, 1)
    << "% (need +10); RT1 over eps grid";
  for (double v : sweep) d << " " << fmt(v, 1);
  d << (monotone ? " (non-increasing within 5)" : " (not monotone within 5)");
  return {ok, d.str()};
}

// ---------------------------------------------------------------------------
// 8. Determinism and persistence

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

std::string quote(const std::string& s) { return "'" + s + "'"; }

int run_cli(const std::string& cli, const std::string& args, const fs::path& log) {
  const std::string cmd = quote(cli) + " " + args + " >" + quote(log.string()) + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Every file below `dir`, keyed by relative path.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return out;
}

Verdict criterion_persistence(const std::string& cli, const fs::path& work) {
  std::vector<std::string> problems;
  const fs::path root = work / "determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path config = root / "small.json";
  spit(config, R"({"env": {"drops_per_episode": 2}, "training": {"n_envs": 4, "rollout_length": 256, "minibatch_size": 64}})");

  std::size_t files = 0;
  if (cli.empty()) {
    problems.push_back("no CLI binary given (--cli)");
  } else {
    for (const std::string run : {"a", "b"}) {
      const fs::path out = root / run;
      const std::string common = " --config " + quote(config.string()) + " --seed 5 --workers 1";
      int rc = run_cli(cli, "train" + common + " --arch bam --adv --steps 1024 --out " + quote((out / "train").string()),
                       root / (run + "_train.log"));
      const std::string ckpt = (out / "train" / "checkpoint.bin").string();
      if (rc == 0) {
        rc = run_cli(cli, "eval" + common + " --checkpoint " + quote(ckpt) +
                              " --eps 0.05,0.1 --episodes 2 --out " + quote((out / "eval").string()),
                     root / (run + "_eval.log"));
      }
      if (rc == 0) {
        rc = run_cli(cli, "dump-maps" + common + " --checkpoint " + quote(ckpt) + " --states 2 --out " +
                              quote((out / "maps").string()),
                     root / (run + "_dump.log"));
      }
      if (rc != 0) problems.push_back("CLI run " + run + " exited " + std::to_string(rc));
    }
    if (problems.empty()) {
      const auto a = snapshot(root / "a");
      const auto b = snapshot(root / "b");
      files = a.size();
      if (a.size() < 10) problems.push_back("only " + std::to_string(a.size()) + " output files");
      // run_config.json records the output directory, which differs by design.
      for (const auto& [name, bytes] : a) {
        const auto it = b.find(name);
        if (it == b.end()) {
          problems.push_back(name + " missing in second run");
        } else if (it->second != bytes && name.find("run_config.json") == std::string::npos) {
          problems.push_back(name + " differs between runs");
        }
      }
    }
  }

  // Roundtrip: parameters bit-exact, re-saved bytes identical.
  for (bool bam : {true, false}) {
    PolicyNetwork<float> net(ArchitectureConfig::nature_lite(bam));
    net.initialize(11);
    std::mt19937_64 rng(12);
    for (auto& np : net.named_parameters()) {
      *np.tensor = tensor_cast<float>(random_tensor(np.tensor->shape(), rng, -2.0, 2.0));
    }
    const fs::path p1 = root / "roundtrip1.bin";
    const fs::path p2 = root / "roundtrip2.bin";
    save_checkpoint(net, p1);
    const auto back = load_checkpoint<float>(p1);
    save_checkpoint(back, p2);
    bool same = back.config() == net.config();
    const auto pa = net.named_parameters();
    const auto pb = back.named_parameters();
    same = same && pa.size() == pb.size();
    for (std::size_t i = 0; same && i < pa.size(); ++i) {
      same = pa[i].name == pb[i].name &&
             std::equal(pa[i].tensor->data().begin(), pa[i].tensor->data().end(), pb[i].tensor->data().begin(),
                        [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); });
    }
    if (!same || slurp(p1) != slurp(p2)) problems.push_back("checkpoint roundtrip not bit-exact");
  }
  {
    PolicyNetwork<double> net(ArchitectureConfig::nature_lite(true));
    net.initialize(13);
    const fs::path p = root / "roundtrip_f64.bin";
    save_checkpoint(net, p);
    const auto back = load_checkpoint<double>(p);
    const auto pa = net.named_parameters();
    const auto pb = back.named_parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) {
      if (!(*pa[i].tensor == *pb[i].tensor)) {
        problems.push_back("f64 checkpoint roundtrip not exact");
        break;
      }
    }
  }

  // Corruptions.
  PolicyNetwork<float> net(ArchitectureConfig::nature_lite(true));
  net.initialize(14);
  const fs::path good = root / "good.bin";
  save_checkpoint(net, good);
  const std::string bytes = slurp(good);
  std::vector<std::pair<std::string, std::string>> corrupt;
  auto flip = [&](std::size_t at, char v) {
    std::string b = bytes;
    b[at] = v;
    return b;
  };
  corrupt.emplace_back("magic", flip(0, 'X'));
  corrupt.emplace_back("version", flip(4, 7));
  corrupt.emplace_back("metadata length", flip(11, 0x7f));
  corrupt.emplace_back("metadata text", flip(14, '#'));
  corrupt.emplace_back("truncated header", bytes.substr(0, 8));
  corrupt.emplace_back("truncated payload", bytes.substr(0, bytes.size() - 3));
  corrupt.emplace_back("trailing bytes", bytes + "xyz");
  {
    std::string b = bytes;
    for (std::size_t i = b.size() - 4; i < b.size(); ++i) b[i] = static_cast<char>(0xff);
    corrupt.emplace_back("NaN payload", b);
  }
  std::size_t rejected = 0;
  for (const auto& [name, b] : corrupt) {
    const fs::path p = root / "corrupt.bin";
    spit(p, b);
    try {
      (void)load_checkpoint<float>(p);
      problems.push_back("corruption '" + name + "' accepted");
    } catch (const FormatError&) {
      ++rejected;
    } catch (const std::exception& e) {
      problems.push_back("corruption '" + name + "' raised a non-format error: " + e.what());
    }
  }
  if (!cli.empty()) {
    spit(root / "corrupt.bin", corrupt.front().second);
    const int rc = run_cli(cli, "eval --checkpoint " + quote((root / "corrupt.bin").string()) + " --out " +
                                    quote((root / "corrupt_eval").string()),
                           root / "corrupt.log");
    const std::string log = slurp(root / "corrupt.log");
    if (rc != 3 || log.find("format error") == std::string::npos) {
      problems.push_back("CLI on a corrupted checkpoint exited " + std::to_string(rc));
    }
  }

  std::ostringstream d;
  d << files << " CLI output files compared (train, eval, dump-maps, seed 5, 1 worker); roundtrip f32/f64; "
    << rejected << "/" << corrupt.size() << " corruptions rejected with FormatError";
  for (const auto& p : problems) d << "; " << p;
  return {problems.empty(), d.str()};
}

// ---------------------------------------------------------------------------
// 9. Parameter accounting

// BAM(C, r), m = C/r: channel MLP C*m + m + m*C + C; spatial 1x1 reduce C*m + m,
// two 3x3 dilated m->m convs 2*(9*m*m + m), 1x1 out m + 1.
std::size_t bam_closed_form(std::size_t c, std::size_t r) {
  const std::size_t m = c / r;
  return (c * m + m + m * c + c) + (c * m + m) + 2 * (9 * m * m + m) + (m + 1);
}

Verdict criterion_parameters() {
  std::vector<std::string> problems;
  ArchitectureConfig conv;
  conv.stack = 2;
  conv.height = 5;
  conv.width = 5;
  conv.convs = {{4, 3, 1, 0}};
  conv.hidden = 0;
  conv.actions = 0;
  conv.value_head = false;
  ArchitectureConfig fc;
  fc.stack = 10;
  fc.height = 1;
  fc.width = 1;
  fc.hidden = 5;
  fc.actions = 0;
  fc.value_head = false;
  // nature-lite by hand: conv1 8*(4*25)+8 = 808, conv2 16*(8*9)+16 = 1168,
  // conv3 16*(16*9)+16 = 2320, dense 1024*128+128 = 131200, policy 128*3+3 = 387,
  // value 129.
  const std::size_t lite = 808 + 1168 + 2320 + 131200 + 387 + 129;
  const std::vector<std::pair<std::size_t, std::size_t>> hand{
      {count_parameters(conv), 76}, {count_parameters(fc), 55},
      {count_parameters(ArchitectureConfig::nature_lite(false)), lite}};
  for (const auto& [got, want] : hand) {
    if (got != want) problems.push_back("count " + std::to_string(got) + " != hand " + std::to_string(want));
  }

  std::size_t deltas = 0;
  std::vector<std::pair<ArchitectureConfig, std::size_t>> bam_configs;
  for (std::size_t r : {1, 2, 4, 8}) {
    auto lite_bam = ArchitectureConfig::nature_lite(true);
    lite_bam.bam_reduction = r;
    bam_configs.emplace_back(lite_bam, 8);
    auto cnn = ArchitectureConfig::nature_cnn(true);
    cnn.bam_reduction = r;
    bam_configs.emplace_back(cnn, 32);
  }
  {
    ArchitectureConfig t;
    t.stack = 2;
    t.height = 7;
    t.width = 7;
    t.convs = {{4, 3, 1, 0}, {3, 3, 2, 1}};
    t.bam_index = 2;
    t.bam_reduction = 2;
    t.bam_dilation = 1;
    t.hidden = 5;
    t.actions = 3;
    bam_configs.emplace_back(t, 4);
  }
  for (const auto& [with, channels] : bam_configs) {
    auto without = with;
    without.bam_index.reset();
    const std::size_t delta = count_parameters(with) - count_parameters(without);
    ++deltas;
    if (delta != bam_closed_form(channels, with.bam_reduction)) {
      problems.push_back("BAM delta " + std::to_string(delta) + " != closed form " +
                         std::to_string(bam_closed_form(channels, with.bam_reduction)));
    }
    PolicyNetwork<float> net(with);
    std::size_t n = 0;
    for (const auto& np : net.named_parameters()) n += np.tensor->size();
    if (n != count_parameters(with)) problems.push_back("instantiated tensors disagree with count");
  }
  std::ostringstream d;
  d << "76/55/" << lite << " hand counts vs " << hand[0].first << "/" << hand[1].first << "/" << hand[2].first
    << "; BAM delta closed form on " << deltas << " configs";
  for (const auto& p : problems) d << "; " << p;
  return {problems.empty(), d.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  std::vector<int> only;
  std::string cli;
  std::string work = (fs::temp_directory_path() / "bamrl_acceptance").string();
  app.add_option("--only", only, "Criteria to run (default: all)")->check(CLI::Range(1, 9));
  app.add_option("--cli", cli, "Path to the bamrl executable");
  app.add_option("--workdir", work, "Scratch directory; trained agents are kept in <workdir>/agents");
  // Known failures still print FAIL; the exit status is 0 only when the set of
  // failures is exactly this list, so an unexpected pass is reported too.
  std::vector<int> expect_fail;
  app.add_option("--expect-fail", expect_fail, "Criteria known to fail at this scale")
      ->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  const std::set<int> selected = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8, 9}
                                              : std::set<int>(only.begin(), only.end());
  fs::create_directories(work);
  AgentPool pool(fs::path(work) / "agents");

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient correctness", criterion_gradients},
      {"attack feasibility", criterion_attack_feasibility},
      {"recovery algebra", criterion_recovery_algebra},
      {"metric oracle equivalence", criterion_metrics},
      {"desk-scale training", [&] { return criterion_training(pool); }},
      {"attack potency", [&] { return criterion_attack_potency(pool); }},
      {"defense benefit", [&] { return criterion_defense(pool); }},
      {"determinism and persistence", [&] { return criterion_persistence(cli, work); }},
      {"parameter accounting", criterion_parameters},
  };

  const std::set<int> expected(expect_fail.begin(), expect_fail.end());
  bool as_expected = true;
  for (int id : selected) {
    const auto& [name, run] = criteria[static_cast<std::size_t>(id - 1)];
    Verdict v;
    try {
      v = run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const bool known = expected.count(id) > 0;
    as_expected = as_expected && v.pass != known;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << name << "): " << v.detail;
    if (known) std::cout << (v.pass ? " [listed in --expect-fail but passed]" : " [expected failure]");
    std::cout << std::endl;
  }
  return as_expected ? 0 : 1;
}

#include <gtest/gtest.h>

#include <random>

#include "bamrl/attack.hpp"
#include "gradcheck.hpp"

using namespace bamrl;
using bamrl::testing::random_tensor;

namespace {

PolicyNetwork<float> trained_like_net(bool bam, std::uint64_t seed) {
  PolicyNetwork<float> net(ArchitectureConfig::nature_lite(bam));
  net.initialize(seed);
  // A non-zero policy head so that the clean argmax is not a tie.
  std::mt19937_64 rng(seed + 1);
  auto& head = net.layer(net.num_layers()).weight;
  head = tensor_cast<float>(random_tensor(head.shape(), rng, -0.2, 0.2));
  return net;
}

Tensor<float> random_obs(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto t = tensor_cast<float>(random_tensor(Shape{n, 4, 32, 32}, rng, 0.0, 1.0));
  // Saturated pixels exercise the box projection.
  for (std::size_t i = 0; i < t.size(); i += 7) t[i] = (i / 7) % 2 ? 1.0f : 0.0f;
  return t;
}

ActionDistribution dist(std::vector<double> p) {
  ActionDistribution d;
  d.probs = p;
  for (double v : p) d.logits.push_back(std::log(v));
  return d;
}

}  // namespace

TEST(AttackConfig, DefaultsAndValidation) {
  const auto c = AttackConfig::standard(0.1);
  EXPECT_EQ(c.iterations, 10u);
  EXPECT_DOUBLE_EQ(c.step_size, 0.025);
  EXPECT_FALSE(c.random_start);
  EXPECT_THROW(AttackConfig::standard(-0.1).validate(), ConfigError);
  AttackConfig bad;
  bad.step_size = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad.iterations = 0;
  EXPECT_NO_THROW(bad.validate());
  EXPECT_EQ(kEpsilonGrid, (std::vector<double>{0.01, 0.05, 0.1, 0.5}));
}

TEST(Pgd, SumObjectiveSingleStep) {
  for (double eps : {0.01, 0.1, 0.3}) {
    Tensor<double> s(Shape{2, 3}, 0.5);
    AttackConfig cfg;
    cfg.epsilon = eps;
    cfg.step_size = eps;
    cfg.iterations = 1;
    std::mt19937_64 rng(0);
    const auto r = pgd_maximize<double>(s, cfg, [](Var<double> x) { return sum(x); }, rng);
    for (double v : r.observation.data()) EXPECT_DOUBLE_EQ(v, 0.5 + eps);
    EXPECT_EQ(r.iterations, 1u);
    EXPECT_EQ(r.loss_trace.size(), 1u);
  }
}

TEST(Pgd, SaturatedEntriesStayInBox) {
  Tensor<double> s(Shape{4}, {1.0, 0.98, 0.0, 0.5});
  AttackConfig cfg = AttackConfig::standard(0.1, 5);
  std::mt19937_64 rng(0);
  const auto up = pgd_maximize<double>(s, cfg, [](Var<double> x) { return sum(x); }, rng);
  EXPECT_EQ(up.observation[0], 1.0);
  EXPECT_EQ(up.observation[1], 1.0);
  EXPECT_NEAR(up.observation[3], 0.6, 1e-12);
  const auto down =
      pgd_maximize<double>(s, cfg, [](Var<double> x) { return scale(sum(x), -1.0); }, rng);
  EXPECT_EQ(down.observation[2], 0.0);
  EXPECT_NEAR(down.observation[0], 0.9, 1e-12);
}

TEST(Pgd, ZeroEpsilonIsIdentity) {
  const auto net = trained_like_net(true, 3);
  const auto s = random_obs(2, 4);
  std::mt19937_64 rng(0);
  for (bool rs : {false, true}) {
    auto cfg = AttackConfig::standard(0.0);
    cfg.random_start = rs;
    const auto r = pgd_attack(net, s, cfg, rng);
    EXPECT_EQ(r.observation, s);
    EXPECT_EQ(r.linf, 0.0);
  }
}

TEST(Pgd, FeasibilityOnPolicy) {
  const auto net = trained_like_net(true, 5);
  std::mt19937_64 rng(6);
  for (double eps : kEpsilonGrid) {
    for (bool rs : {false, true}) {
      auto cfg = AttackConfig::standard(eps);
      cfg.random_start = rs;
      const auto s = random_obs(3, 7);
      const auto r = pgd_attack(net, s, cfg, rng);
      ASSERT_EQ(r.observation.shape(), s.shape());
      EXPECT_LE(r.linf, eps + 1e-6);
      EXPECT_LE(linf_distance(r.observation, s), eps + 1e-6);
      for (float v : r.observation.data()) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
      }
    }
  }
}

TEST(Pgd, SingleObservationShapeIsKept) {
  const auto net = trained_like_net(false, 8);
  const auto batch = random_obs(1, 9);
  const auto single = batch.reshaped(Shape{4, 32, 32});
  std::mt19937_64 rng(0);
  const auto r = pgd_attack(net, single, AttackConfig::standard(0.05), rng);
  EXPECT_EQ(r.observation.shape(), single.shape());
}

TEST(Pgd, DeterministicWithoutRandomStart) {
  const auto net = trained_like_net(true, 10);
  const auto s = random_obs(2, 11);
  std::mt19937_64 a(1), b(2);
  const auto cfg = AttackConfig::standard(0.1);
  EXPECT_EQ(pgd_attack(net, s, cfg, a).observation, pgd_attack(net, s, cfg, b).observation);
}

TEST(Pgd, SeededRandomStartIsReproducible) {
  const auto net = trained_like_net(true, 12);
  const auto s = random_obs(1, 13);
  auto cfg = AttackConfig::standard(0.1);
  cfg.random_start = true;
  std::mt19937_64 a(5), b(5);
  EXPECT_EQ(pgd_attack(net, s, cfg, a).observation, pgd_attack(net, s, cfg, b).observation);
}

TEST(Pgd, SmallerBallIsFeasibleInLarger) {
  const auto net = trained_like_net(true, 14);
  const auto s = random_obs(2, 15);
  std::mt19937_64 rng(0);
  for (std::size_t i = 0; i + 1 < kEpsilonGrid.size(); ++i) {
    const auto small = pgd_attack(net, s, AttackConfig::standard(kEpsilonGrid[i]), rng);
    for (std::size_t j = i; j < kEpsilonGrid.size(); ++j) {
      EXPECT_LE(linf_distance(small.observation, s), kEpsilonGrid[j] + 1e-6);
    }
  }
}

TEST(Pgd, IncreasesAttackLoss) {
  const auto net = trained_like_net(false, 16);
  const auto s = random_obs(4, 17);
  std::mt19937_64 rng(0);
  const auto r = pgd_attack(net, s, AttackConfig::standard(0.1), rng);
  ASSERT_EQ(r.loss_trace.size(), 10u);
  EXPECT_GT(r.loss_trace.back(), r.loss_trace.front());
}

TEST(Pgd, NonFiniteGradientAborts) {
  Tensor<double> s(Shape{2}, 0.5);
  std::mt19937_64 rng(0);
  const AttackObjective<double> bad = [](Var<double> x) {
    auto& tape = x.tape();
    return tape.record("poison", Tensor<double>(Shape{1}, 1.0), {x},
                       [](Tape<double>& t, std::uint32_t, const std::vector<double>&) {
                         auto& g = t.grad_accumulator(0);
                         g[0] = std::numeric_limits<double>::quiet_NaN();
                       });
  };
  EXPECT_THROW(pgd_maximize(s, AttackConfig::standard(0.1), bad, rng), NumericError);
}

TEST(AttackSuccess, Examples) {
  const auto a = dist({0.5, 0.3, 0.2});
  EXPECT_FALSE(attack_success(a, a));
  EXPECT_TRUE(attack_success(dist({0.6, 0.3, 0.1}), dist({0.1, 0.3, 0.6})));
  EXPECT_FALSE(attack_success(dist({0.4, 0.4, 0.2}), dist({0.4, 0.4, 0.2})));
  EXPECT_THROW(attack_success(a, dist({0.5, 0.5})), DimensionError);
}

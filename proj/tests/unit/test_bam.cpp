#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "bamrl/bam.hpp"
#include "gradcheck.hpp"

using namespace bamrl;
using bamrl::testing::grad_check;
using bamrl::testing::project;
using bamrl::testing::random_tensor;

namespace {

template <typename T>
BamParams<T> random_params(std::size_t c, std::size_t r, std::size_t d, std::mt19937_64& rng,
                           double scale = 0.5) {
  auto p = BamParams<T>::zeros(c, r, d);
  for (auto& np : p.named_parameters("")) {
    auto t = random_tensor(np.tensor->shape(), rng, -scale, scale);
    *np.tensor = tensor_cast<T>(t);
  }
  return p;
}

std::size_t tally(BamParams<double>& p) {
  std::size_t n = 0;
  for (auto& np : p.named_parameters("")) n += np.tensor->size();
  return n;
}

}  // namespace

TEST(BamParams, ClosedFormMatchesTensorTally) {
  for (std::size_t c : {4u, 8u, 16u, 32u, 64u}) {
    for (std::size_t r : {1u, 2u, 4u}) {
      auto p = BamParams<double>::zeros(c, r, 2);
      EXPECT_EQ(bam_parameter_count(c, r), tally(p)) << c << "/" << r;
      EXPECT_EQ(p.parameter_count(), tally(p));
    }
  }
}

// 32-channel host at r=4: the reported difference between the two full-size
// networks.
TEST(BamParams, FullSizeDelta) { EXPECT_EQ(bam_parameter_count(32, 4), 1993u); }

TEST(BamParams, ReductionMustDivideChannels) {
  EXPECT_THROW(BamParams<float>::zeros(6, 4), ConfigError);
  EXPECT_THROW(bam_parameter_count(8, 0), ConfigError);
}

TEST(BamAttention, ZeroWeightsGiveOneHalf) {
  auto p = BamParams<float>::zeros(8);
  std::mt19937_64 rng(1);
  auto f = tensor_cast<float>(random_tensor(Shape{2, 8, 6, 6}, rng));
  const auto m = bam_attention(f, p);
  for (float v : m.values().data()) EXPECT_EQ(v, 0.5f);
  const auto out = bam_forward(f, p);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_FLOAT_EQ(out[i], 1.5f * f[i]);
}

TEST(BamAttention, ChannelLogitSaturates) {
  auto p = BamParams<double>::zeros(4);
  p.channel_fc2_bias[2] = 10.0;
  Tensor<double> f(Shape{1, 4, 3, 3}, 0.3);
  const auto m = bam_attention(f, p);
  EXPECT_NEAR(m.values().at(0, 2, 1, 1), 1.0 / (1.0 + std::exp(-10.0)), 1e-15);
  EXPECT_NEAR(m.values().at(0, 2, 1, 1), 0.99995, 1e-5);
  EXPECT_EQ(m.values().at(0, 0, 1, 1), 0.5);
}

TEST(BamAttention, RandomParamsStayInOpenInterval) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    auto p = random_params<float>(8, 4, 2, rng, 1.0);
    auto f = tensor_cast<float>(random_tensor(Shape{3, 8, 8, 8}, rng));
    const auto m = bam_attention(f, p);
    EXPECT_EQ(m.shape(), f.shape());
    for (float v : m.values().data()) {
      EXPECT_GT(v, 0.0f);
      EXPECT_LT(v, 1.0f);
    }
  }
}

TEST(BamAttention, RejectsOutOfRangeMap) {
  EXPECT_THROW(AttentionMap<float>(Tensor<float>(Shape{2}, 1.0f)), std::domain_error);
  EXPECT_THROW(AttentionMap<float>(Tensor<float>(Shape{2}, 0.0f)), std::domain_error);
}

TEST(BamAttention, ChannelMismatch) {
  auto p = BamParams<float>::zeros(8);
  Tensor<float> f(Shape{1, 4, 5, 5});
  EXPECT_THROW(bam_attention(f, p), DimensionError);
  Tensor<float> flat(Shape{8, 5});
  EXPECT_THROW(bam_forward(flat, p), DimensionError);
}

TEST(BamForward, ResidualIdentity) {
  std::mt19937_64 rng(3);
  auto p = random_params<double>(8, 4, 2, rng);
  auto f = random_tensor(Shape{2, 8, 7, 7}, rng);
  const auto m = bam_attention(f, p);
  const auto out = bam_forward(f, p);
  for (std::size_t i = 0; i < f.size(); ++i) {
    EXPECT_EQ(out[i], f[i] + f[i] * m.values()[i]);
  }
}

TEST(BamForward, ZeroInputIsAbsorbing) {
  std::mt19937_64 rng(4);
  auto p = random_params<float>(8, 4, 2, rng);
  Tensor<float> f(Shape{1, 8, 6, 6}, 0.0f);
  EXPECT_EQ(bam_forward(f, p), f);
}

TEST(BamForward, SaturatedAttentionDoubles) {
  auto p = BamParams<double>::zeros(4);
  p.spatial_out_bias[0] = 40.0;
  std::mt19937_64 rng(5);
  auto f = random_tensor(Shape{1, 4, 5, 5}, rng);
  const auto out = bam_forward(f, p);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(out[i], 2 * f[i], 1e-12);
}

// Equal up to rounding: the GEMM kernels may round edge columns differently.
TEST(BamAttention, BatchPermutationEquivariant) {
  std::mt19937_64 rng(6);
  auto p = random_params<float>(8, 4, 2, rng);
  auto f = tensor_cast<float>(random_tensor(Shape{3, 8, 6, 6}, rng));
  const std::size_t per = 8 * 36;
  const std::size_t perm[3] = {2, 0, 1};
  Tensor<float> g(f.shape());
  for (std::size_t n = 0; n < 3; ++n)
    std::copy_n(f.data().begin() + perm[n] * per, per, g.storage().begin() + n * per);
  const auto mf = bam_attention(f, p).values();
  const auto mg = bam_attention(g, p).values();
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < per; ++i) EXPECT_NEAR(mg[n * per + i], mf[perm[n] * per + i], 1e-6);
}

TEST(Polarization, Examples) {
  EXPECT_EQ(attention_polarization(AttentionMap<float>(Tensor<float>(Shape{4}, 0.5f))), 0.0);
  EXPECT_EQ(attention_polarization(
                AttentionMap<float>(Tensor<float>(Shape{4}, {0.01f, 0.99f, 0.01f, 0.99f}))),
            1.0);
  EXPECT_EQ(attention_polarization(
                AttentionMap<float>(Tensor<float>(Shape{4}, {0.05f, 0.5f, 0.95f, 0.5f}))),
            0.5);
  const AttentionMap<float> m(Tensor<float>(Shape{1}, 0.5f));
  EXPECT_THROW(attention_polarization(m, 0.9, 0.1), ConfigError);
  EXPECT_THROW(attention_polarization(m, 0.5, 0.5), ConfigError);
}

TEST(GradCheck, BamBranchesAndForward) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 3; ++trial) {
    auto p = random_params<double>(4, 2, 2, rng);
    auto f = random_tensor(Shape{2, 4, 6, 6}, rng);
    std::vector<Tensor<double>*> inputs{&f};
    for (auto& np : p.named_parameters("")) inputs.push_back(np.tensor);
    // The module reads its parameters directly, so perturbing the listed
    // tensors perturbs the module.
    for (int which = 0; which < 3; ++which) {
      const auto r = grad_check(
          [&](Tape<double>&, const auto& v) {
            switch (which) {
              case 0: return project(bam_channel_branch(v[0], p, true), 10);
              case 1: return project(bam_spatial_branch(v[0], p, true), 11);
              default: return project(bam_forward(v[0], p, true), 12);
            }
          },
          inputs);
      EXPECT_LE(r.max_rel_error, 1e-4) << "branch " << which;
    }
  }
}

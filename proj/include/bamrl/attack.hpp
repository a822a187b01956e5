#pragma once

#include <functional>
#include <random>
#include <vector>

#include "bamrl/autodiff.hpp"
#include "bamrl/policy.hpp"

namespace bamrl {

enum class AttackLoss {
  /// Untargeted: cross-entropy against the clean argmax action.
  ce_vs_clean_argmax,
};

/// L-infinity PGD parameters on the [0,1] pixel scale.
struct AttackConfig {
  double epsilon = 0.1;
  double step_size = 0.025;
  std::size_t iterations = 10;
  bool random_start = false;
  AttackLoss loss = AttackLoss::ce_vs_clean_argmax;

  /// T iterations with step 2.5 * eps / T, no random start.
  static AttackConfig standard(double epsilon, std::size_t iterations = 10);
  void validate() const;
};

/// Evaluation sweep radii.
inline const std::vector<double> kEpsilonGrid = {0.01, 0.05, 0.1, 0.5};

template <typename T>
struct AdversarialObservation {
  Tensor<T> observation;
  double linf = 0.0;
  std::size_t iterations = 0;
  std::vector<double> loss_trace;
};

/// Scalar objective to be maximised, built on the tape that owns `x`.
template <typename T>
using AttackObjective = std::function<Var<T>(Var<T> x)>;

/// Projected signed-gradient ascent of `objective` inside the intersection
/// of the eps-ball around `s` and the [0,1] box. `rng` is only drawn from
/// when cfg.random_start is set.
template <typename T>
AdversarialObservation<T> pgd_maximize(const Tensor<T>& s, const AttackConfig& cfg,
                                       const AttackObjective<T>& objective, std::mt19937_64& rng);

/// s_A for a single [k,H,W] observation or a batch [N,k,H,W]; batch rows are
/// attacked independently (the summed loss decouples across rows).
template <typename T>
AdversarialObservation<T> pgd_attack(const PolicyNetwork<T>& net, const Tensor<T>& s,
                                     const AttackConfig& cfg, std::mt19937_64& rng);

/// True iff the argmax action differs (lowest-index tie-break on both sides).
bool attack_success(const ActionDistribution& clean, const ActionDistribution& attacked);

/// max |a - b| over all entries.
template <typename T>
double linf_distance(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace bamrl

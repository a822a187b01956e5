#pragma once

#include <utility>

#include "bamrl/attack.hpp"
#include "bamrl/bam.hpp"
#include "bamrl/metrics.hpp"
#include "bamrl/policy.hpp"

namespace bamrl {

enum class Reentry {
  /// Resume at the layer after BAM; f_rec replaces the BAM output.
  after_bam,
  /// Resume at the BAM layer itself; f_rec is fed through BAM again.
  at_bam,
};

const char* to_string(Reentry reentry);
Reentry reentry_from_string(const std::string& name);

struct RecoveryConfig {
  Reentry reentry = Reentry::after_bam;
};

/// Activations captured at the BAM layer l during recovery.
template <typename T>
struct AttentionTap {
  Tensor<T> f_pre;         // output of layers 1..l-1
  AttentionMap<T> f_bam;   // attention map of layer l on f_pre
  Tensor<T> f_rec;         // f_pre * f_bam
};

template <typename T>
struct RecoveryResult {
  Tensor<T> logits;  // [N,A]
  AttentionTap<T> tap;

  ActionDistribution distribution(std::size_t row) const {
    return distribution_from_logits(logits, row);
  }
};

/// Masks the pre-BAM activation of `s_a` (single or batched) with the BAM
/// attention map and resumes the forward pass. ConfigError if `net` has no
/// BAM layer.
template <typename T>
RecoveryResult<T> recover(const PolicyNetwork<T>& net, const Tensor<T>& s_a,
                          const RecoveryConfig& cfg = {});

/// Single-observation form returning the recovered distribution and the tap.
template <typename T>
std::pair<ActionDistribution, AttentionTap<T>> recover_policy(const PolicyNetwork<T>& net,
                                                              const Tensor<T>& s_a,
                                                              const RecoveryConfig& cfg = {});

/// Clean, attacked and recovered distributions for one paired step.
template <typename T>
StepRecord recovery_effect(const PolicyNetwork<T>& net, const Tensor<T>& s,
                           const AdversarialObservation<T>& s_a, const RecoveryConfig& cfg = {});

namespace detail {
/// Recovery with an arbitrary mask in place of the attention map (mask
/// values need not lie in (0,1)). Returns logits and f_rec.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> recover_with_mask(const PolicyNetwork<T>& net,
                                                  const Tensor<T>& s_a, const RecoveryConfig& cfg,
                                                  const Tensor<T>& mask);
}  // namespace detail

}  // namespace bamrl

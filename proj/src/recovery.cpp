#include "bamrl/recovery.hpp"

#include <stdexcept>

namespace bamrl {

const char* to_string(Reentry reentry) {
  return reentry == Reentry::after_bam ? "after_bam" : "at_bam";
}

Reentry reentry_from_string(const std::string& name) {
  if (name == "after_bam") return Reentry::after_bam;
  if (name == "at_bam") return Reentry::at_bam;
  throw ConfigError("unknown recovery reentry '" + name + "' (expected after_bam or at_bam)");
}

namespace {

template <typename T>
std::size_t require_bam(const PolicyNetwork<T>& net) {
  if (!net.bam_index()) throw ConfigError("recovery requires a network with a BAM layer");
  return *net.bam_index();
}

template <typename T>
Tensor<T> hadamard_checked(const Tensor<T>& f_pre, const Tensor<T>& mask) {
  if (f_pre.shape() != mask.shape()) {
    throw DimensionError("recovery mask " + shape_str(mask.shape()) + " does not match activation " +
                         shape_str(f_pre.shape()));
  }
  Tape<T> tape;
  Tensor<T> f_rec = mul(tape.leaf(f_pre), tape.leaf(mask)).value();
  for (std::size_t i = 0; i < f_rec.size(); ++i) {
    if (f_rec[i] != f_pre[i] * mask[i]) {
      throw std::logic_error("recovery: f_rec differs from f_pre * mask at flat index " +
                             std::to_string(i));
    }
  }
  return f_rec;
}

template <typename T>
Tensor<T> resume(const PolicyNetwork<T>& net, const Tensor<T>& batch, std::size_t l,
                 const RecoveryConfig& cfg, const Tensor<T>& f_rec) {
  const std::size_t from = cfg.reentry == Reentry::after_bam ? l + 1 : l;
  return forward_prefix(net, batch, from, net.num_layers(), &f_rec);
}

}  // namespace

template <typename T>
RecoveryResult<T> recover(const PolicyNetwork<T>& net, const Tensor<T>& s_a,
                          const RecoveryConfig& cfg) {
  const std::size_t l = require_bam(net);
  const Tensor<T> batch = as_batch(s_a);
  Tensor<T> f_pre = forward_prefix(net, batch, 1, l - 1);
  Tape<T> tape;
  AttentionMap<T> f_bam(net.run_bam_attention(tape.leaf(f_pre)).value());
  Tensor<T> f_rec = hadamard_checked(f_pre, f_bam.values());
  Tensor<T> logits = resume(net, batch, l, cfg, f_rec);
  return RecoveryResult<T>{std::move(logits),
                           AttentionTap<T>{std::move(f_pre), std::move(f_bam), std::move(f_rec)}};
}

template <typename T>
std::pair<ActionDistribution, AttentionTap<T>> recover_policy(const PolicyNetwork<T>& net,
                                                              const Tensor<T>& s_a,
                                                              const RecoveryConfig& cfg) {
  auto result = recover(net, s_a, cfg);
  if (result.logits.dim(0) != 1) {
    throw DimensionError("recover_policy takes a single observation; use recover() for batches");
  }
  auto dist = result.distribution(0);
  return {std::move(dist), std::move(result.tap)};
}

template <typename T>
StepRecord recovery_effect(const PolicyNetwork<T>& net, const Tensor<T>& s,
                           const AdversarialObservation<T>& s_a, const RecoveryConfig& cfg) {
  const auto clean = forward(net, s);
  const auto attacked = forward(net, s_a.observation);
  const auto recovered = recover(net, s_a.observation, cfg);
  if (clean.batch() != 1) throw DimensionError("recovery_effect takes a single observation");
  return StepRecord::from_distributions(clean.distribution(0), attacked.distribution(0),
                                        recovered.distribution(0));
}

namespace detail {
template <typename T>
std::pair<Tensor<T>, Tensor<T>> recover_with_mask(const PolicyNetwork<T>& net,
                                                  const Tensor<T>& s_a, const RecoveryConfig& cfg,
                                                  const Tensor<T>& mask) {
  const std::size_t l = require_bam(net);
  const Tensor<T> batch = as_batch(s_a);
  const Tensor<T> f_pre = forward_prefix(net, batch, 1, l - 1);
  Tensor<T> f_rec = hadamard_checked(f_pre, mask);
  Tensor<T> logits = resume(net, batch, l, cfg, f_rec);
  return {std::move(logits), std::move(f_rec)};
}
}  // namespace detail

#define BAMRL_INSTANTIATE(T)                                                                     \
  template RecoveryResult<T> recover(const PolicyNetwork<T>&, const Tensor<T>&,                  \
                                     const RecoveryConfig&);                                     \
  template std::pair<ActionDistribution, AttentionTap<T>> recover_policy(                        \
      const PolicyNetwork<T>&, const Tensor<T>&, const RecoveryConfig&);                         \
  template StepRecord recovery_effect(const PolicyNetwork<T>&, const Tensor<T>&,                 \
                                      const AdversarialObservation<T>&, const RecoveryConfig&);  \
  template std::pair<Tensor<T>, Tensor<T>> detail::recover_with_mask(                            \
      const PolicyNetwork<T>&, const Tensor<T>&, const RecoveryConfig&, const Tensor<T>&);

BAMRL_INSTANTIATE(float)
BAMRL_INSTANTIATE(double)

#undef BAMRL_INSTANTIATE

}  // namespace bamrl

#include "bamrl/attack.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace bamrl {

AttackConfig AttackConfig::standard(double epsilon, std::size_t iterations) {
  AttackConfig c;
  c.epsilon = epsilon;
  c.iterations = iterations;
  c.step_size = iterations > 0 ? 2.5 * epsilon / static_cast<double>(iterations) : 0.0;
  c.random_start = false;
  return c;
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
    throw ConfigError("attack epsilon must be a finite value >= 0, got " + std::to_string(epsilon));
  }
  // A zero radius pins every iterate to s, so the step size is irrelevant there.
  if (iterations > 0 && epsilon > 0.0 && !(step_size > 0.0)) {
    throw ConfigError("attack step_size must be > 0 when iterations > 0");
  }
}

template <typename T>
double linf_distance(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("linf_distance: shapes differ");
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d = std::max(d, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return d;
}

template <typename T>
AdversarialObservation<T> pgd_maximize(const Tensor<T>& s, const AttackConfig& cfg,
                                       const AttackObjective<T>& objective, std::mt19937_64& rng) {
  cfg.validate();
  const T eps = static_cast<T>(cfg.epsilon);
  const T alpha = static_cast<T>(cfg.step_size);
  std::vector<T> lo(s.size());
  std::vector<T> hi(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    lo[i] = std::max(T(0), s[i] - eps);
    hi[i] = std::min(T(1), s[i] + eps);
  }

  AdversarialObservation<T> result;
  Tensor<T> x = s;
  if (cfg.random_start && cfg.epsilon > 0.0) {
    std::uniform_real_distribution<double> u(-cfg.epsilon, cfg.epsilon);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = std::clamp(static_cast<T>(s[i] + u(rng)), lo[i], hi[i]);
    }
  }
  if (cfg.epsilon > 0.0) {
    for (std::size_t t = 0; t < cfg.iterations; ++t) {
      x.requires_grad = true;
      x.zero_grad();
      Tape<T> tape;
      const Var<T> loss = objective(tape.leaf(x));
      tape.backward(loss);
      result.loss_trace.push_back(static_cast<double>(loss.value()[0]));
      const auto g = x.grad();
      for (T v : g) {
        if (!std::isfinite(v)) {
          throw NumericError("PGD: non-finite input gradient at iteration " + std::to_string(t));
        }
      }
      for (std::size_t i = 0; i < x.size(); ++i) {
        const T step = g[i] > T(0) ? alpha : (g[i] < T(0) ? -alpha : T(0));
        x[i] = std::min(std::max(x[i] + step, lo[i]), hi[i]);
      }
      ++result.iterations;
    }
  }
  x.requires_grad = false;
  x.zero_grad();
  result.linf = linf_distance(x, s);
  result.observation = std::move(x);
  return result;
}

template <typename T>
AdversarialObservation<T> pgd_attack(const PolicyNetwork<T>& net, const Tensor<T>& s,
                                     const AttackConfig& cfg, std::mt19937_64& rng) {
  const Tensor<T> batch = as_batch(s);
  const auto clean = forward(net, batch);
  std::vector<std::size_t> labels(clean.batch());
  for (std::size_t n = 0; n < labels.size(); ++n) labels[n] = clean.distribution(n).argmax();

  const AttackObjective<T> objective = [&net, &labels](Var<T> x) {
    const auto heads = net.run(x);
    return scale(sum(pick(log_softmax(heads.logits, 1), labels)), T(-1));
  };
  auto result = pgd_maximize(batch, cfg, objective, rng);
  result.observation = result.observation.reshaped(s.shape());
  return result;
}

bool attack_success(const ActionDistribution& clean, const ActionDistribution& attacked) {
  if (clean.size() != attacked.size()) throw DimensionError("attack_success: action counts differ");
  return clean.argmax() != attacked.argmax();
}

#define BAMRL_INSTANTIATE(T)                                                                  \
  template double linf_distance(const Tensor<T>&, const Tensor<T>&);                          \
  template AdversarialObservation<T> pgd_maximize(const Tensor<T>&, const AttackConfig&,      \
                                                  const AttackObjective<T>&, std::mt19937_64&); \
  template AdversarialObservation<T> pgd_attack(const PolicyNetwork<T>&, const Tensor<T>&,    \
                                                const AttackConfig&, std::mt19937_64&);

BAMRL_INSTANTIATE(float)
BAMRL_INSTANTIATE(double)

#undef BAMRL_INSTANTIATE

}  // namespace bamrl

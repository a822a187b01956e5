#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "bamrl/attack.hpp"
#include "bamrl/autodiff.hpp"
#include "bamrl/env.hpp"
#include "bamrl/policy.hpp"

namespace bamrl {

struct AdvTrainingConfig {
  AttackConfig attack = AttackConfig::standard(0.1);
  std::size_t every_k = 10;
};

struct TrainConfig {
  std::size_t total_steps = 200000;
  std::size_t n_envs = 8;
  /// Transitions per rollout, summed over all envs.
  std::size_t rollout_length = 1280;
  std::size_t minibatch_size = 64;
  std::size_t epochs = 4;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip_ratio = 0.2;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  double learning_rate = 1e-3;
  /// Decay the learning rate linearly to zero over the run.
  bool anneal_lr = true;
  double max_grad_norm = 0.5;
  double adam_epsilon = 1e-5;
  std::optional<AdvTrainingConfig> adv_training;
  std::uint64_t seed = 0;

  void validate() const;
};

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

/// delta_t = r_t + gamma V_{t+1} (1 - done_t) - V_t,
/// A_t = delta_t + gamma lambda (1 - done_t) A_{t+1}, right to left.
/// `values` carries one bootstrap entry past the end.
GaeResult gae(const std::vector<double>& rewards, const std::vector<double>& values,
              const std::vector<bool>& dones, double gamma, double lambda);

/// Transitions in time-major order: index t * n_envs + e.
struct RolloutBuffer {
  std::size_t n_envs = 0;
  Tensor<float> observations;  // [L,k,H,W]
  std::vector<std::size_t> actions;
  std::vector<double> log_probs;
  std::vector<double> rewards;
  std::vector<double> values;
  std::vector<bool> dones;
  std::vector<bool> attacked;
  std::vector<double> advantages;
  std::vector<double> returns;
  std::vector<double> finished_episode_rewards;

  std::size_t size() const { return actions.size(); }
  double attacked_fraction() const;
};

/// Parallel PixelCatch tasks with automatic reset.
class VecCatch {
 public:
  VecCatch(std::size_t n_envs, std::uint64_t seed, PixelCatchConfig env = {},
           ObservationConfig obs = {});

  std::size_t size() const { return tasks_.size(); }
  /// Current observations, [n_envs,k,H,W].
  const Tensor<float>& observations() const { return obs_; }
  /// Steps every env; finished episodes restart with a fresh seed.
  /// Returns rewards and done flags; episode returns land in `finished`.
  void step(const std::vector<std::size_t>& actions, std::vector<double>& rewards,
            std::vector<bool>& dones, std::vector<double>& finished);

 private:
  void write_obs(std::size_t e, const Tensor<float>& o);

  std::vector<CatchTask> tasks_;
  std::vector<double> returns_;
  std::mt19937_64 seeder_;
  Tensor<float> obs_;
};

/// Samples actions from pi and records the transitions. With adversarial
/// training, transitions whose buffer index is a multiple of every_k see a
/// PGD observation against the current parameters before acting; the
/// buffer stores what the policy saw. Advantages and returns are filled.
RolloutBuffer collect_rollout(const PolicyNetwork<float>& net, VecCatch& envs,
                              const TrainConfig& cfg, std::mt19937_64& rng);

template <typename T>
struct PpoLossTerms {
  Var<T> total;
  Var<T> policy;
  Var<T> value;
  Var<T> entropy;
  double clip_fraction = 0.0;
};

struct PpoCoefficients {
  double clip_ratio = 0.2;
  double value_coef = 0.5;
  double entropy_coef = 0.01;
};

/// -mean(min(rho A, clip(rho) A)) + c_v mean((V - R)^2) - c_e mean(H(pi)) on
/// logits [M,A] and values [M]. `advantages` are used as given.
template <typename T>
PpoLossTerms<T> ppo_objective(Var<T> logits, Var<T> values, const std::vector<std::size_t>& actions,
                              const std::vector<double>& old_log_probs,
                              const std::vector<double>& advantages,
                              const std::vector<double>& returns, const PpoCoefficients& coef);

/// Per-minibatch standardisation (mean 0, unbiased std 1, eps 1e-8); a
/// single sample passes through.
std::vector<double> normalize_advantages(std::vector<double> adv);

class Adam {
 public:
  Adam(double learning_rate, double epsilon = 1e-8, double beta1 = 0.9, double beta2 = 0.999);

  /// One update from the grads of `params` (missing grads count as zero).
  void step(const std::vector<NamedParam<float>>& params);
  std::size_t steps() const { return t_; }
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  double lr_, eps_, beta1_, beta2_;
  std::size_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

/// Scales all grads so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
double clip_grad_norm(const std::vector<NamedParam<float>>& params, double max_norm);

struct PpoStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
};

/// `epochs` passes of shuffled minibatches. NumericError on a non-finite loss.
PpoStats ppo_update(PolicyNetwork<float>& net, const RolloutBuffer& buffer, const TrainConfig& cfg,
                    Adam& optimizer, std::mt19937_64& rng);

/// Raised when training hits a non-finite value; the network holds the
/// parameters from the last completed update.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainLogRow {
  std::size_t update_index = 0;
  std::size_t env_steps = 0;
  std::optional<double> mean_episode_reward;
  PpoStats stats;
  double attacked_step_fraction = 0.0;
};

void write_train_log_header(std::ostream& out);
void write_train_log_row(std::ostream& out, const TrainLogRow& row);

struct TrainResult {
  std::size_t env_steps = 0;
  std::size_t updates = 0;
  std::vector<TrainLogRow> log;
};

/// Trains `net` in place on PixelCatch. Each row is passed to `on_update`
/// as soon as it is complete. Throws TrainingDiverged.
TrainResult train(PolicyNetwork<float>& net, const TrainConfig& cfg,
                  const PixelCatchConfig& env = {}, const ObservationConfig& obs = {},
                  const std::function<void(const TrainLogRow&)>& on_update = {});

}  // namespace bamrl

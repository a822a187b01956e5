#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "bamrl/attack.hpp"
#include "bamrl/env.hpp"
#include "bamrl/metrics.hpp"
#include "bamrl/policy.hpp"
#include "bamrl/recovery.hpp"

namespace bamrl {

struct EvalSetup {
  PixelCatchConfig env;
  ObservationConfig observation;
  std::size_t episodes = 10;
  std::uint64_t seed = 0;
  /// Index of the first episode; chunks of one evaluation share `seed`.
  std::size_t first_episode = 0;
};

/// Env seed of episode `index` under evaluation seed `seed`.
std::uint64_t episode_seed(std::uint64_t seed, std::size_t index);

/// Chooses an action from the current observation; the env is exposed for
/// scripted reference policies.
using ActionPolicy = std::function<std::size_t(const Tensor<float>& obs, const PixelCatchEnv& env)>;

/// Runs setup.episodes episodes one after another with `policy`.
RewardStats evaluate_policy(const EvalSetup& setup, const ActionPolicy& policy);

/// Greedy (argmax) episodes of `net` in the given regime. In the attacked
/// regimes every frame is replaced by its PGD observation; in the recovered
/// regime actions come from the recovered distribution. Episodes run in
/// lockstep so attacks are batched. When `records` is given, every attacked
/// step appends its clean/attacked/recovered record (recovered = attacked
/// for networks without BAM).
RewardStats evaluate_reward(const PolicyNetwork<float>& net, const EvalSetup& setup, Regime regime,
                            const AttackConfig& attack, const RecoveryConfig& recovery = {},
                            std::vector<StepRecord>* records = nullptr);

}  // namespace bamrl

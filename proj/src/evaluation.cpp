#include "bamrl/evaluation.hpp"

#include <random>

namespace bamrl {

std::uint64_t episode_seed(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{seed, static_cast<std::uint64_t>(index), std::uint64_t{0x6576616c}};
  std::mt19937_64 rng(seq);
  return rng();
}

RewardStats evaluate_policy(const EvalSetup& setup, const ActionPolicy& policy) {
  if (setup.episodes == 0) throw ConfigError("evaluation needs at least one episode");
  std::vector<double> rewards;
  CatchTask task(setup.env, setup.observation);
  for (std::size_t i = 0; i < setup.episodes; ++i) {
    Tensor<float> obs = task.reset(episode_seed(setup.seed, setup.first_episode + i));
    double total = 0.0;
    bool done = false;
    while (!done) {
      auto s = task.step(policy(obs, task.env()));
      total += s.reward;
      done = s.done;
      obs = std::move(s.observation);
    }
    rewards.push_back(total);
  }
  return summarize_rewards(std::move(rewards));
}

RewardStats evaluate_reward(const PolicyNetwork<float>& net, const EvalSetup& setup, Regime regime,
                            const AttackConfig& attack, const RecoveryConfig& recovery,
                            std::vector<StepRecord>* records) {
  if (setup.episodes == 0) throw ConfigError("evaluation needs at least one episode");
  attack.validate();
  if (regime == Regime::recovered && !net.bam_index()) {
    throw ConfigError("the recovered regime requires a network with a BAM layer");
  }
  const std::size_t n = setup.episodes;
  const auto& oc = setup.observation;
  const std::size_t obs_size = oc.stack * oc.height * oc.width;

  std::vector<CatchTask> tasks(n, CatchTask(setup.env, oc));
  std::vector<double> totals(n, 0.0);
  std::vector<bool> done(n, false);
  Tensor<float> batch(Shape{n, oc.stack, oc.height, oc.width});
  const auto put = [&](std::size_t row, const Tensor<float>& o) {
    std::copy(o.data().begin(), o.data().end(),
              batch.storage().begin() + static_cast<std::ptrdiff_t>(row * obs_size));
  };
  for (std::size_t i = 0; i < n; ++i) put(i, tasks[i].reset(episode_seed(setup.seed, setup.first_episode + i)));

  std::seed_seq attack_seq{setup.seed, static_cast<std::uint64_t>(setup.first_episode),
                          std::uint64_t{0x61747461636b}};
  std::mt19937_64 rng(attack_seq);
  std::vector<std::size_t> active;
  for (;;) {
    active.clear();
    for (std::size_t i = 0; i < n; ++i) {
      if (!done[i]) active.push_back(i);
    }
    if (active.empty()) break;
    Tensor<float> clean(Shape{active.size(), oc.stack, oc.height, oc.width});
    for (std::size_t k = 0; k < active.size(); ++k) {
      std::copy_n(batch.data().begin() + static_cast<std::ptrdiff_t>(active[k] * obs_size),
                  obs_size, clean.storage().begin() + static_cast<std::ptrdiff_t>(k * obs_size));
    }

    std::vector<std::size_t> actions(active.size());
    if (regime == Regime::clean) {
      const auto out = forward(net, clean);
      for (std::size_t k = 0; k < active.size(); ++k) actions[k] = out.distribution(k).argmax();
    } else {
      const auto adv = pgd_attack(net, clean, attack, rng);
      const auto attacked = forward(net, adv.observation);
      std::optional<RecoveryResult<float>> rec;
      if (net.bam_index() && (regime == Regime::recovered || records)) {
        rec = recover(net, adv.observation, recovery);
      }
      std::optional<PolicyOutput<float>> ref;
      if (records) ref = forward(net, clean);
      for (std::size_t k = 0; k < active.size(); ++k) {
        const auto q = attacked.distribution(k);
        const auto r = rec ? rec->distribution(k) : q;
        actions[k] = regime == Regime::recovered ? r.argmax() : q.argmax();
        if (records) records->push_back(StepRecord::from_distributions(ref->distribution(k), q, r));
      }
    }

    for (std::size_t k = 0; k < active.size(); ++k) {
      const std::size_t i = active[k];
      auto s = tasks[i].step(actions[k]);
      totals[i] += s.reward;
      done[i] = s.done;
      put(i, s.observation);
    }
  }
  return summarize_rewards(std::move(totals));
}

}  // namespace bamrl

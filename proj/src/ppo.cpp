#include "bamrl/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <ostream>

namespace bamrl {

void TrainConfig::validate() const {
  if (n_envs == 0) throw ConfigError("n_envs must be at least 1");
  if (rollout_length == 0 || rollout_length % n_envs != 0) {
    throw ConfigError("rollout_length must be a positive multiple of n_envs");
  }
  if (minibatch_size == 0 || rollout_length % minibatch_size != 0) {
    throw ConfigError("rollout_length must be divisible by minibatch_size");
  }
  if (epochs == 0) throw ConfigError("epochs must be at least 1");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0,1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw ConfigError("gae_lambda must lie in [0,1]");
  if (!(clip_ratio > 0.0)) throw ConfigError("clip_ratio must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(max_grad_norm > 0.0)) throw ConfigError("max_grad_norm must be positive");
  if (!(entropy_coef >= 0.0) || !(value_coef >= 0.0)) {
    throw ConfigError("loss coefficients must be non-negative");
  }
  if (adv_training) {
    if (adv_training->every_k == 0) throw ConfigError("adversarial every_k must be at least 1");
    adv_training->attack.validate();
  }
}

GaeResult gae(const std::vector<double>& rewards, const std::vector<double>& values,
              const std::vector<bool>& dones, double gamma, double lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n + 1 || dones.size() != n) {
    throw DimensionError("gae: need |values| = |rewards| + 1 = |dones| + 1, got " +
                         std::to_string(rewards.size()) + ", " + std::to_string(values.size()) +
                         ", " + std::to_string(dones.size()));
  }
  GaeResult out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  double next = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double live = dones[i] ? 0.0 : 1.0;
    const double delta = rewards[i] + gamma * values[i + 1] * live - values[i];
    next = delta + gamma * lambda * live * next;
    out.advantages[i] = next;
    out.returns[i] = next + values[i];
  }
  return out;
}

double RolloutBuffer::attacked_fraction() const {
  if (attacked.empty()) return 0.0;
  const auto hits = std::count(attacked.begin(), attacked.end(), true);
  return static_cast<double>(hits) / static_cast<double>(attacked.size());
}

// ---------------------------------------------------------------------------

VecCatch::VecCatch(std::size_t n_envs, std::uint64_t seed, PixelCatchConfig env,
                   ObservationConfig obs)
    : returns_(n_envs, 0.0), seeder_(seed) {
  if (n_envs == 0) throw ConfigError("VecCatch needs at least one env");
  tasks_.reserve(n_envs);
  for (std::size_t e = 0; e < n_envs; ++e) tasks_.emplace_back(env, obs);
  obs_ = Tensor<float>(Shape{n_envs, obs.stack, obs.height, obs.width});
  for (std::size_t e = 0; e < n_envs; ++e) write_obs(e, tasks_[e].reset(seeder_()));
}

void VecCatch::write_obs(std::size_t e, const Tensor<float>& o) {
  std::copy(o.data().begin(), o.data().end(),
            obs_.storage().begin() + static_cast<std::ptrdiff_t>(e * o.size()));
}

void VecCatch::step(const std::vector<std::size_t>& actions, std::vector<double>& rewards,
                    std::vector<bool>& dones, std::vector<double>& finished) {
  if (actions.size() != tasks_.size()) throw DimensionError("VecCatch: one action per env");
  rewards.assign(tasks_.size(), 0.0);
  dones.assign(tasks_.size(), false);
  for (std::size_t e = 0; e < tasks_.size(); ++e) {
    auto s = tasks_[e].step(actions[e]);
    rewards[e] = s.reward;
    dones[e] = s.done;
    returns_[e] += s.reward;
    if (s.done) {
      finished.push_back(returns_[e]);
      returns_[e] = 0.0;
      write_obs(e, tasks_[e].reset(seeder_()));
    } else {
      write_obs(e, s.observation);
    }
  }
}

namespace {

Tensor<float> gather_rows(const Tensor<float>& batch, const std::vector<std::size_t>& rows) {
  Shape shape = batch.shape();
  const std::size_t stride = batch.size() / shape[0];
  shape[0] = rows.size();
  Tensor<float> out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = batch.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * stride);
    std::copy(src, src + static_cast<std::ptrdiff_t>(stride),
              out.storage().begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  return out;
}

std::size_t sample_categorical(const Tensor<float>& probs, std::size_t row, std::mt19937_64& rng) {
  const std::size_t a = probs.dim(1);
  const double u = std::generate_canonical<double, 64>(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < a; ++i) {
    acc += static_cast<double>(probs[row * a + i]);
    if (u < acc) return i;
  }
  return a - 1;
}

}  // namespace

RolloutBuffer collect_rollout(const PolicyNetwork<float>& net, VecCatch& envs,
                              const TrainConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t n = envs.size();
  if (n != cfg.n_envs) throw ConfigError("collect_rollout: env count differs from n_envs");
  const std::size_t steps = cfg.rollout_length / n;
  const Shape& os = envs.observations().shape();
  const std::size_t obs_size = envs.observations().size() / n;

  RolloutBuffer buf;
  buf.n_envs = n;
  buf.observations = Tensor<float>(Shape{cfg.rollout_length, os[1], os[2], os[3]});
  buf.actions.reserve(cfg.rollout_length);
  buf.log_probs.reserve(cfg.rollout_length);
  buf.rewards.assign(cfg.rollout_length, 0.0);
  buf.values.reserve(cfg.rollout_length);
  buf.dones.assign(cfg.rollout_length, false);
  buf.attacked.assign(cfg.rollout_length, false);

  std::vector<double> rewards;
  std::vector<bool> dones;
  std::vector<std::size_t> actions(n);
  for (std::size_t t = 0; t < steps; ++t) {
    Tensor<float> batch = envs.observations();
    if (cfg.adv_training) {
      std::vector<std::size_t> rows;
      for (std::size_t e = 0; e < n; ++e) {
        if ((t * n + e) % cfg.adv_training->every_k == 0) rows.push_back(e);
      }
      if (!rows.empty()) {
        const auto adv = pgd_attack(net, gather_rows(batch, rows), cfg.adv_training->attack, rng);
        for (std::size_t i = 0; i < rows.size(); ++i) {
          std::copy(adv.observation.data().begin() + static_cast<std::ptrdiff_t>(i * obs_size),
                    adv.observation.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * obs_size),
                    batch.storage().begin() + static_cast<std::ptrdiff_t>(rows[i] * obs_size));
          buf.attacked[t * n + rows[i]] = true;
        }
      }
    }
    const auto out = forward(net, batch);
    Tape<float> tape;
    const auto logp = log_softmax(tape.leaf(out.logits), 1).value();
    const std::size_t a = out.logits.dim(1);
    for (std::size_t e = 0; e < n; ++e) {
      actions[e] = sample_categorical(out.probs, e, rng);
      buf.actions.push_back(actions[e]);
      buf.log_probs.push_back(static_cast<double>(logp[e * a + actions[e]]));
      buf.values.push_back(static_cast<double>(out.values[e]));
    }
    std::copy(batch.data().begin(), batch.data().end(),
              buf.observations.storage().begin() + static_cast<std::ptrdiff_t>(t * n * obs_size));
    envs.step(actions, rewards, dones, buf.finished_episode_rewards);
    for (std::size_t e = 0; e < n; ++e) {
      buf.rewards[t * n + e] = rewards[e];
      buf.dones[t * n + e] = dones[e];
    }
  }

  const auto last = forward(net, envs.observations());
  buf.advantages.assign(cfg.rollout_length, 0.0);
  buf.returns.assign(cfg.rollout_length, 0.0);
  std::vector<double> r(steps), v(steps + 1);
  std::vector<bool> d(steps);
  for (std::size_t e = 0; e < n; ++e) {
    for (std::size_t t = 0; t < steps; ++t) {
      r[t] = buf.rewards[t * n + e];
      v[t] = buf.values[t * n + e];
      d[t] = buf.dones[t * n + e];
    }
    v[steps] = static_cast<double>(last.values[e]);
    const auto g = gae(r, v, d, cfg.gamma, cfg.gae_lambda);
    for (std::size_t t = 0; t < steps; ++t) {
      buf.advantages[t * n + e] = g.advantages[t];
      buf.returns[t * n + e] = g.returns[t];
    }
  }
  return buf;
}

// ---------------------------------------------------------------------------

template <typename T>
PpoLossTerms<T> ppo_objective(Var<T> logits, Var<T> values, const std::vector<std::size_t>& actions,
                              const std::vector<double>& old_log_probs,
                              const std::vector<double>& advantages,
                              const std::vector<double>& returns, const PpoCoefficients& coef) {
  const std::size_t m = actions.size();
  if (logits.value().rank() != 2 || logits.value().dim(0) != m || values.value().size() != m ||
      old_log_probs.size() != m || advantages.size() != m || returns.size() != m) {
    throw DimensionError("ppo_objective: batch sizes disagree");
  }
  auto& tape = logits.tape();
  const auto to_tensor = [m](const std::vector<double>& v) {
    Tensor<T> t(Shape{m});
    for (std::size_t i = 0; i < m; ++i) t[i] = static_cast<T>(v[i]);
    return t;
  };
  const T c = static_cast<T>(coef.clip_ratio);
  const auto logp_all = log_softmax(logits, 1);
  const auto ratio = exp(pick(logp_all, actions) - tape.constant(to_tensor(old_log_probs)));
  const auto adv = tape.constant(to_tensor(advantages));
  const auto surrogate = minimum(ratio * adv, clamp(ratio, T(1) - c, T(1) + c) * adv);

  PpoLossTerms<T> terms;
  terms.policy = scale(mean(surrogate), T(-1));
  const auto diff = reshape(values, Shape{m}) - tape.constant(to_tensor(returns));
  terms.value = mean(diff * diff);
  terms.entropy = scale(mean(sum(softmax(logits, 1) * logp_all, 1)), T(-1));
  terms.total = terms.policy + scale(terms.value, static_cast<T>(coef.value_coef)) +
                scale(terms.entropy, static_cast<T>(-coef.entropy_coef));

  std::size_t clipped = 0;
  for (T r : ratio.value().data()) {
    if (std::abs(r - T(1)) > c) ++clipped;
  }
  terms.clip_fraction = static_cast<double>(clipped) / static_cast<double>(m);
  return terms;
}

std::vector<double> normalize_advantages(std::vector<double> adv) {
  if (adv.size() < 2) return adv;
  const double n = static_cast<double>(adv.size());
  const double mu = std::accumulate(adv.begin(), adv.end(), 0.0) / n;
  double var = 0.0;
  for (double a : adv) var += (a - mu) * (a - mu);
  const double sd = std::sqrt(var / (n - 1.0));
  for (double& a : adv) a = (a - mu) / (sd + 1e-8);
  return adv;
}

Adam::Adam(double learning_rate, double epsilon, double beta1, double beta2)
    : lr_(learning_rate), eps_(epsilon), beta1_(beta1), beta2_(beta2) {}

void Adam::step(const std::vector<NamedParam<float>>& params) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.tensor->size(), 0.0f);
      v_.emplace_back(p.tensor->size(), 0.0f);
    }
  }
  if (m_.size() != params.size()) throw DimensionError("Adam: parameter list changed");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& w = *params[k].tensor;
    if (!w.has_grad()) continue;
    const auto g = w.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      m[i] = static_cast<float>(beta1_ * m[i] + (1.0 - beta1_) * gi);
      v[i] = static_cast<float>(beta2_ * v[i] + (1.0 - beta2_) * gi * gi);
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      w[i] = static_cast<float>(w[i] - lr_ * mh / (std::sqrt(vh) + eps_));
    }
  }
}

double clip_grad_norm(const std::vector<NamedParam<float>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor->has_grad()) continue;
    for (float g : p.tensor->grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const float s = static_cast<float>(max_norm / (norm + 1e-6));
    for (const auto& p : params) {
      if (!p.tensor->has_grad()) continue;
      for (float& g : p.tensor->grad_buffer()) g *= s;
    }
  }
  return norm;
}

PpoStats ppo_update(PolicyNetwork<float>& net, const RolloutBuffer& buffer, const TrainConfig& cfg,
                    Adam& optimizer, std::mt19937_64& rng) {
  const std::size_t len = buffer.size();
  if (len == 0 || buffer.advantages.size() != len || buffer.returns.size() != len) {
    throw UsageError("ppo_update: buffer is incomplete");
  }
  const std::size_t mb = std::min(cfg.minibatch_size, len);
  const PpoCoefficients coef{cfg.clip_ratio, cfg.value_coef, cfg.entropy_coef};
  auto params = net.named_parameters();
  for (const auto& p : params) p.tensor->requires_grad = true;

  std::vector<std::size_t> order(len);
  std::iota(order.begin(), order.end(), 0);
  PpoStats stats;
  std::size_t batches = 0;
  std::vector<std::size_t> idx, actions;
  std::vector<double> old_lp, adv, ret;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start + mb <= len; start += mb) {
      idx.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                 order.begin() + static_cast<std::ptrdiff_t>(start + mb));
      actions.clear();
      old_lp.clear();
      adv.clear();
      ret.clear();
      for (std::size_t i : idx) {
        actions.push_back(buffer.actions[i]);
        old_lp.push_back(buffer.log_probs[i]);
        adv.push_back(buffer.advantages[i]);
        ret.push_back(buffer.returns[i]);
      }
      const Tensor<float> obs = gather_rows(buffer.observations, idx);
      for (const auto& p : params) p.tensor->zero_grad();
      Tape<float> tape;
      const auto heads = net.run(tape.leaf(obs), true);
      const auto terms = ppo_objective(heads.logits, heads.values, actions, old_lp,
                                       normalize_advantages(adv), ret, coef);
      tape.backward(terms.total);
      const double norm = clip_grad_norm(params, cfg.max_grad_norm);
      if (!std::isfinite(norm)) throw NumericError("ppo_update: non-finite gradient norm");
      optimizer.step(params);
      stats.policy_loss += terms.policy.value()[0];
      stats.value_loss += terms.value.value()[0];
      stats.entropy += terms.entropy.value()[0];
      stats.clip_fraction += terms.clip_fraction;
      ++batches;
    }
  }
  for (const auto& p : params) {
    p.tensor->zero_grad();
    p.tensor->requires_grad = false;
  }
  const double nb = static_cast<double>(batches);
  stats.policy_loss /= nb;
  stats.value_loss /= nb;
  stats.entropy /= nb;
  stats.clip_fraction /= nb;
  return stats;
}

// ---------------------------------------------------------------------------

void write_train_log_header(std::ostream& out) {
  out << "update_index,env_steps,mean_episode_reward,policy_loss,value_loss,entropy,clip_fraction,"
         "attacked_step_fraction\n";
}

void write_train_log_row(std::ostream& out, const TrainLogRow& row) {
  const auto old = out.precision(10);
  out << row.update_index << ',' << row.env_steps << ',';
  if (row.mean_episode_reward) out << *row.mean_episode_reward;
  out << ',' << row.stats.policy_loss << ',' << row.stats.value_loss << ',' << row.stats.entropy
      << ',' << row.stats.clip_fraction << ',' << row.attacked_step_fraction << '\n';
  out.precision(old);
}

namespace {

std::vector<Tensor<float>> snapshot(const PolicyNetwork<float>& net) {
  std::vector<Tensor<float>> out;
  for (const auto& p : net.named_parameters()) out.push_back(*p.tensor);
  return out;
}

void restore(PolicyNetwork<float>& net, const std::vector<Tensor<float>>& saved) {
  auto params = net.named_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    *params[i].tensor = saved[i];
    params[i].tensor->requires_grad = false;
  }
}

}  // namespace

TrainResult train(PolicyNetwork<float>& net, const TrainConfig& cfg, const PixelCatchConfig& env,
                  const ObservationConfig& obs,
                  const std::function<void(const TrainLogRow&)>& on_update) {
  cfg.validate();
  const auto& arch = net.config();
  if (arch.stack != obs.stack || arch.height != obs.height || arch.width != obs.width) {
    throw ConfigError("network input [" + std::to_string(arch.stack) + "," +
                      std::to_string(arch.height) + "," + std::to_string(arch.width) +
                      "] does not match the observation pipeline");
  }
  if (arch.actions != kCatchActions) {
    throw ConfigError("PixelCatch has 3 actions, network has " + std::to_string(arch.actions));
  }

  std::seed_seq env_seq{cfg.seed, std::uint64_t{0x656e76}};
  std::mt19937_64 env_seed_rng(env_seq);
  std::seed_seq act_seq{cfg.seed, std::uint64_t{0x616374}};
  std::mt19937_64 rng(act_seq);
  VecCatch envs(cfg.n_envs, env_seed_rng(), env, obs);
  Adam optimizer(cfg.learning_rate, cfg.adam_epsilon);

  TrainResult result;
  std::deque<double> recent;
  const std::size_t updates = cfg.total_steps / cfg.rollout_length;
  for (std::size_t u = 0; u < updates; ++u) {
    const auto saved = snapshot(net);
    if (cfg.anneal_lr) {
      optimizer.set_learning_rate(cfg.learning_rate * (1.0 - static_cast<double>(u) /
                                                                 static_cast<double>(updates)));
    }
    try {
      const auto buffer = collect_rollout(net, envs, cfg, rng);
      const auto stats = ppo_update(net, buffer, cfg, optimizer, rng);
      for (double r : buffer.finished_episode_rewards) {
        recent.push_back(r);
        if (recent.size() > 32) recent.pop_front();
      }
      result.env_steps += buffer.size();
      ++result.updates;
      TrainLogRow row;
      row.update_index = u;
      row.env_steps = result.env_steps;
      if (!recent.empty()) {
        row.mean_episode_reward =
            std::accumulate(recent.begin(), recent.end(), 0.0) / static_cast<double>(recent.size());
      }
      row.stats = stats;
      row.attacked_step_fraction = buffer.attacked_fraction();
      result.log.push_back(row);
      if (on_update) on_update(row);
    } catch (const NumericError& e) {
      restore(net, saved);
      throw TrainingDiverged(std::string("training diverged at update ") + std::to_string(u) +
                             ": " + e.what());
    }
  }
  return result;
}

template PpoLossTerms<float> ppo_objective(Var<float>, Var<float>, const std::vector<std::size_t>&,
                                           const std::vector<double>&, const std::vector<double>&,
                                           const std::vector<double>&, const PpoCoefficients&);
template PpoLossTerms<double> ppo_objective(Var<double>, Var<double>,
                                            const std::vector<std::size_t>&,
                                            const std::vector<double>&, const std::vector<double>&,
                                            const std::vector<double>&, const PpoCoefficients&);

}  // namespace bamrl

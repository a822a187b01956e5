#include "bamrl/run_config.hpp"

#include <fstream>
#include <sstream>

#include "bamrl/config_json.hpp"

namespace bamrl {

using nlohmann::json;
using nlohmann::ordered_json;
using json_detail::reject_unknown_keys;

AttackConfig AttackSpec::resolve(double eps) const {
  AttackConfig c = AttackConfig::standard(eps, iterations);
  if (step_size) c.step_size = *step_size;
  c.random_start = random_start;
  c.validate();
  return c;
}

TrainConfig TrainingSpec::resolve(std::uint64_t seed) const {
  TrainConfig c = train;
  c.seed = seed;
  c.adv_training.reset();
  if (adv) c.adv_training = AdvTrainingConfig{adv->attack.resolve(), adv->every_k};
  return c;
}

ArchitectureConfig architecture_preset(const std::string& name) {
  if (name == "baseline") return ArchitectureConfig::nature_lite(false);
  if (name == "bam") return ArchitectureConfig::nature_lite(true);
  if (name == "nature_cnn") return ArchitectureConfig::nature_cnn(false);
  if (name == "nature_cnn_bam") return ArchitectureConfig::nature_cnn(true);
  throw ConfigError("unknown architecture preset '" + name +
                    "' (expected baseline, bam, nature_cnn or nature_cnn_bam)");
}

void RunConfig::validate() const {
  if (workers == 0) throw ConfigError("workers must be at least 1");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  architecture.validate_runnable();
  env.validate();
  observation.validate();
  if (architecture.stack != observation.stack || architecture.height != observation.height ||
      architecture.width != observation.width) {
    throw ConfigError("architecture input does not match the observation pipeline");
  }
  if (architecture.actions != kCatchActions) {
    throw ConfigError("PixelCatch has 3 actions, architecture declares " +
                      std::to_string(architecture.actions));
  }
  training.resolve(seed).validate();
  attack.resolve();
  if (evaluation.episodes == 0) throw ConfigError("evaluation.episodes must be at least 1");
  if (evaluation.epsilons.empty()) throw ConfigError("evaluation.epsilons must not be empty");
  for (double e : evaluation.epsilons) attack.resolve(e);
  if (evaluation.regimes.empty()) throw ConfigError("evaluation.regimes must not be empty");
  attack.resolve(dump.epsilon);
  if (dump.source != "env" && dump.source != "zeros") {
    throw ConfigError("dump.source must be env or zeros");
  }
}

namespace {

ordered_json attack_json(const AttackSpec& a) {
  return {{"epsilon", a.epsilon},
          {"iterations", a.iterations},
          {"step_size", a.step_size ? json(*a.step_size) : json(nullptr)},
          {"random_start", a.random_start},
          {"loss", "ce_vs_clean_argmax"}};
}

AttackSpec attack_from(const json& j, AttackSpec a, const char* where) {
  reject_unknown_keys(j, {"epsilon", "iterations", "step_size", "random_start", "loss"}, where);
  a.epsilon = j.value("epsilon", a.epsilon);
  a.iterations = j.value("iterations", a.iterations);
  if (j.contains("step_size")) {
    a.step_size = j.at("step_size").is_null() ? std::nullopt
                                              : std::optional<double>(j.at("step_size").get<double>());
  }
  a.random_start = j.value("random_start", a.random_start);
  if (j.contains("loss") && j.at("loss").get<std::string>() != "ce_vs_clean_argmax") {
    throw ConfigError(std::string(where) + ".loss must be ce_vs_clean_argmax");
  }
  return a;
}

template <typename T>
void take(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

}  // namespace

ordered_json to_json(const RunConfig& c) {
  ordered_json j;
  j["schema_version"] = kRunConfigSchemaVersion;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["workers"] = c.workers;
  j["architecture"] = json(c.architecture);
  j["env"] = {{"size", c.env.size},
              {"paddle_width", c.env.paddle_width},
              {"drops_per_episode", c.env.drops_per_episode},
              {"paddle_speed", c.env.paddle_speed}};
  j["observation"] = {{"height", c.observation.height},
                      {"width", c.observation.width},
                      {"stack", c.observation.stack},
                      {"frame_skip", c.observation.frame_skip}};
  const auto& t = c.training.train;
  ordered_json tr = {{"total_steps", t.total_steps},
                     {"n_envs", t.n_envs},
                     {"rollout_length", t.rollout_length},
                     {"minibatch_size", t.minibatch_size},
                     {"epochs", t.epochs},
                     {"gamma", t.gamma},
                     {"gae_lambda", t.gae_lambda},
                     {"clip_ratio", t.clip_ratio},
                     {"entropy_coef", t.entropy_coef},
                     {"value_coef", t.value_coef},
                     {"learning_rate", t.learning_rate},
                     {"anneal_lr", t.anneal_lr},
                     {"max_grad_norm", t.max_grad_norm},
                     {"adam_epsilon", t.adam_epsilon}};
  if (c.training.adv) {
    tr["adv_training"] = {{"every_k", c.training.adv->every_k},
                          {"attack", attack_json(c.training.adv->attack)}};
  } else {
    tr["adv_training"] = nullptr;
  }
  j["training"] = tr;
  j["attack"] = attack_json(c.attack);
  j["recovery"] = {{"reentry", to_string(c.recovery.reentry)}};
  std::vector<std::string> regimes;
  for (Regime r : c.evaluation.regimes) regimes.emplace_back(to_string(r));
  j["evaluation"] = {{"episodes", c.evaluation.episodes},
                     {"epsilons", c.evaluation.epsilons},
                     {"regimes", regimes}};
  j["dump"] = {{"states", c.dump.states}, {"epsilon", c.dump.epsilon}, {"source", c.dump.source}};
  return j;
}

RunConfig run_config_from_json(const json& j, RunConfig c) {
  try {
    reject_unknown_keys(j,
                        {"schema_version", "seed", "output_dir", "workers", "architecture", "env",
                         "observation", "training", "attack", "recovery", "evaluation", "dump"},
                        "run config");
    if (j.contains("schema_version") && j.at("schema_version").get<int>() != kRunConfigSchemaVersion) {
      throw ConfigError("unsupported run config schema_version " + j.at("schema_version").dump());
    }
    take(j, "seed", c.seed);
    take(j, "output_dir", c.output_dir);
    take(j, "workers", c.workers);
    if (j.contains("architecture")) {
      const auto& a = j.at("architecture");
      if (a.is_string()) {
        c.architecture = architecture_preset(a.get<std::string>());
      } else {
        from_json(a, c.architecture);
      }
    }
    if (j.contains("env")) {
      const auto& e = j.at("env");
      reject_unknown_keys(e, {"size", "paddle_width", "drops_per_episode", "paddle_speed"}, "env");
      take(e, "size", c.env.size);
      take(e, "paddle_width", c.env.paddle_width);
      take(e, "drops_per_episode", c.env.drops_per_episode);
      take(e, "paddle_speed", c.env.paddle_speed);
    }
    if (j.contains("observation")) {
      const auto& o = j.at("observation");
      reject_unknown_keys(o, {"height", "width", "stack", "frame_skip"}, "observation");
      take(o, "height", c.observation.height);
      take(o, "width", c.observation.width);
      take(o, "stack", c.observation.stack);
      take(o, "frame_skip", c.observation.frame_skip);
    }
    if (j.contains("training")) {
      const auto& t = j.at("training");
      reject_unknown_keys(t,
                          {"total_steps", "n_envs", "rollout_length", "minibatch_size", "epochs",
                           "gamma", "gae_lambda", "clip_ratio", "entropy_coef", "value_coef",
                           "learning_rate", "anneal_lr", "max_grad_norm", "adam_epsilon", "adv_training"},
                          "training");
      auto& tc = c.training.train;
      take(t, "total_steps", tc.total_steps);
      take(t, "n_envs", tc.n_envs);
      take(t, "rollout_length", tc.rollout_length);
      take(t, "minibatch_size", tc.minibatch_size);
      take(t, "epochs", tc.epochs);
      take(t, "gamma", tc.gamma);
      take(t, "gae_lambda", tc.gae_lambda);
      take(t, "clip_ratio", tc.clip_ratio);
      take(t, "entropy_coef", tc.entropy_coef);
      take(t, "value_coef", tc.value_coef);
      take(t, "learning_rate", tc.learning_rate);
      take(t, "anneal_lr", tc.anneal_lr);
      take(t, "max_grad_norm", tc.max_grad_norm);
      take(t, "adam_epsilon", tc.adam_epsilon);
      if (t.contains("adv_training")) {
        const auto& a = t.at("adv_training");
        if (a.is_null()) {
          c.training.adv.reset();
        } else {
          reject_unknown_keys(a, {"every_k", "attack"}, "training.adv_training");
          AdvTrainingSpec spec = c.training.adv.value_or(AdvTrainingSpec{});
          take(a, "every_k", spec.every_k);
          if (a.contains("attack")) {
            spec.attack = attack_from(a.at("attack"), spec.attack, "training.adv_training.attack");
          }
          c.training.adv = spec;
        }
      }
    }
    if (j.contains("attack")) c.attack = attack_from(j.at("attack"), c.attack, "attack");
    if (j.contains("recovery")) {
      const auto& r = j.at("recovery");
      reject_unknown_keys(r, {"reentry"}, "recovery");
      if (r.contains("reentry")) c.recovery.reentry = reentry_from_string(r.at("reentry").get<std::string>());
    }
    if (j.contains("evaluation")) {
      const auto& e = j.at("evaluation");
      reject_unknown_keys(e, {"episodes", "epsilons", "regimes"}, "evaluation");
      take(e, "episodes", c.evaluation.episodes);
      take(e, "epsilons", c.evaluation.epsilons);
      if (e.contains("regimes")) {
        c.evaluation.regimes.clear();
        for (const auto& r : e.at("regimes")) c.evaluation.regimes.push_back(regime_from_string(r.get<std::string>()));
      }
    }
    if (j.contains("dump")) {
      const auto& d = j.at("dump");
      reject_unknown_keys(d, {"states", "epsilon", "source"}, "dump");
      take(d, "states", c.dump.states);
      take(d, "epsilon", c.dump.epsilon);
      take(d, "source", c.dump.source);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j, std::move(base));
}

void save_run_config(const RunConfig& c, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json(c).dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

AdvTrainingSpec parse_adv_tokens(const std::vector<std::string>& tokens, AdvTrainingSpec spec) {
  for (const auto& tok : tokens) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw ConfigError("--adv expects key=value, got '" + tok + "'");
    const std::string key = tok.substr(0, eq);
    const std::string value = tok.substr(eq + 1);
    std::istringstream in(value);
    bool ok = false;
    if (key == "every_k") {
      long long k = 0;
      ok = static_cast<bool>(in >> k) && k > 0;
      spec.every_k = static_cast<std::size_t>(k);
    } else if (key == "eps") {
      ok = static_cast<bool>(in >> spec.attack.epsilon);
    } else if (key == "iters") {
      long long t = 0;
      ok = static_cast<bool>(in >> t) && t >= 0;
      spec.attack.iterations = static_cast<std::size_t>(t);
    } else {
      throw ConfigError("unknown --adv key '" + key + "' (expected every_k, eps or iters)");
    }
    if (!ok || !in.eof()) throw ConfigError("bad value for --adv " + key + ": '" + value + "'");
  }
  return spec;
}

}  // namespace bamrl

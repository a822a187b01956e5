#include "cli_app.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <thread>

#include <CLI11.hpp>

#include "bamrl/checkpoint.hpp"
#include "bamrl/evaluation.hpp"
#include "bamrl/run_config.hpp"

namespace bamrl {

namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config;
  std::string arch;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> workers;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON run config; flags override its fields");
  cmd->add_option("--arch", f.arch, "Architecture preset: baseline, bam, nature_cnn, nature_cnn_bam");
  cmd->add_option("--seed", f.seed, "Seed for initialisation, environments and attacks");
  cmd->add_option("--out", f.out, "Output directory");
  cmd->add_option("--workers", f.workers, "Evaluation worker threads (1 = reproducible mode)");
}

RunConfig base_config(const CommonFlags& f, bool* arch_given = nullptr) {
  RunConfig c;
  bool arch = false;
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw ConfigError("cannot read config file " + f.config);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file " + f.config + " is not valid JSON: " + e.what());
    }
    arch = j.is_object() && j.contains("architecture");
    c = run_config_from_json(j, c);
  }
  if (!f.arch.empty()) {
    c.architecture = architecture_preset(f.arch);
    arch = true;
  }
  if (f.seed) c.seed = *f.seed;
  if (!f.out.empty()) c.output_dir = f.out;
  if (f.workers) c.workers = *f.workers;
  if (arch_given) *arch_given = arch;
  return c;
}

fs::path prepare_output(const RunConfig& c) {
  const fs::path dir(c.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
  save_run_config(c, dir / "run_config.json");
  return dir;
}

PolicyNetwork<float> load_for(const std::string& checkpoint, RunConfig& c, bool arch_given) {
  if (checkpoint.empty()) throw ConfigError("--checkpoint is required");
  auto net = arch_given ? load_checkpoint<float>(checkpoint, c.architecture)
                        : load_checkpoint<float>(checkpoint);
  c.architecture = net.config();
  return net;
}

// ---------------------------------------------------------------------------

int cmd_train(const CommonFlags& common, const std::vector<std::string>& adv_tokens, bool adv_flag,
              std::optional<std::size_t> steps) {
  RunConfig c = base_config(common);
  if (adv_flag) {
    // A bare --adv arrives as a single empty token.
    std::vector<std::string> tokens;
    std::copy_if(adv_tokens.begin(), adv_tokens.end(), std::back_inserter(tokens),
                 [](const std::string& t) { return !t.empty(); });
    c.training.adv = parse_adv_tokens(tokens, c.training.adv.value_or(AdvTrainingSpec{}));
  }
  if (steps) c.training.train.total_steps = *steps;
  c.validate();
  const fs::path dir = prepare_output(c);

  PolicyNetwork<float> net(c.architecture);
  net.initialize(c.seed);
  std::ofstream log(dir / "train_log.csv", std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + (dir / "train_log.csv").string());
  write_train_log_header(log);
  const auto on_update = [&](const TrainLogRow& row) {
    write_train_log_row(log, row);
    log.flush();
    std::cerr << "update " << row.update_index << " steps " << row.env_steps << " reward "
              << (row.mean_episode_reward ? std::to_string(*row.mean_episode_reward) : "-") << '\n';
  };
  try {
    train(net, c.training.resolve(c.seed), c.env, c.observation, on_update);
  } catch (const TrainingDiverged& e) {
    save_checkpoint(net, dir / "checkpoint.bin");
    std::cerr << "error: " << e.what() << "; last good parameters kept in "
              << (dir / "checkpoint.bin").string() << '\n';
    return kExitRuntime;
  }
  save_checkpoint(net, dir / "checkpoint.bin");
  std::cout << (dir / "checkpoint.bin").string() << '\n';
  return kExitOk;
}

// Splits the episodes over `workers` threads and merges in episode order.
RewardStats run_regime(const PolicyNetwork<float>& net, const RunConfig& c, Regime regime,
                       const AttackConfig& attack, std::vector<StepRecord>* records) {
  const std::size_t total = c.evaluation.episodes;
  const std::size_t workers = std::min(c.workers, total);
  std::vector<RewardStats> parts(workers);
  std::vector<std::vector<StepRecord>> part_records(workers);
  std::vector<std::exception_ptr> errors(workers);
  const auto job = [&](std::size_t w) {
    try {
      EvalSetup setup{c.env, c.observation, 0, c.seed, 0};
      setup.first_episode = total * w / workers;
      setup.episodes = total * (w + 1) / workers - setup.first_episode;
      parts[w] = evaluate_reward(net, setup, regime, attack, c.recovery,
                                 records ? &part_records[w] : nullptr);
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (workers == 1) {
    job(0);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(job, w);
    for (auto& t : threads) t.join();
  }
  std::vector<double> episodes;
  for (std::size_t w = 0; w < workers; ++w) {
    if (errors[w]) std::rethrow_exception(errors[w]);
    episodes.insert(episodes.end(), parts[w].episodes.begin(), parts[w].episodes.end());
    if (records) records->insert(records->end(), part_records[w].begin(), part_records[w].end());
  }
  return summarize_rewards(std::move(episodes));
}

int cmd_eval(CommonFlags common, const std::string& checkpoint, std::optional<std::string> eps,
             std::optional<std::string> regimes, std::optional<std::size_t> episodes,
             std::string reentry) {
  bool arch_given = false;
  RunConfig c = base_config(common, &arch_given);
  if (eps) {
    c.evaluation.epsilons.clear();
    std::stringstream in(*eps);
    std::string tok;
    while (std::getline(in, tok, ',')) {
      if (tok.empty()) continue;
      try {
        std::size_t used = 0;
        c.evaluation.epsilons.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ConfigError("--eps: cannot parse '" + tok + "'");
      }
    }
  }
  if (regimes) {
    c.evaluation.regimes.clear();
    std::stringstream in(*regimes);
    std::string tok;
    while (std::getline(in, tok, ',')) {
      if (!tok.empty()) c.evaluation.regimes.push_back(regime_from_string(tok));
    }
  }
  if (episodes) c.evaluation.episodes = *episodes;
  if (!reentry.empty()) c.recovery.reentry = reentry_from_string(reentry);
  const PolicyNetwork<float> net = load_for(checkpoint, c, arch_given);
  c.validate();
  const auto& rg = c.evaluation.regimes;
  const auto wants = [&](Regime r) { return std::find(rg.begin(), rg.end(), r) != rg.end(); };
  if (wants(Regime::recovered) && !net.bam_index()) {
    throw ConfigError("the recovered regime requires a checkpoint with a BAM layer");
  }
  const fs::path dir = prepare_output(c);

  std::optional<RewardStats> clean;
  if (wants(Regime::clean)) clean = run_regime(net, c, Regime::clean, c.attack.resolve(0.0), nullptr);
  std::vector<MetricsReport> reports;
  for (double e : c.evaluation.epsilons) {
    const AttackConfig attack = c.attack.resolve(e);
    std::vector<StepRecord> records;
    std::optional<RewardStats> attacked;
    std::optional<RewardStats> recovered;
    // Attack metrics come from the defended rollout when it is evaluated.
    const bool record_recovered = wants(Regime::recovered);
    if (wants(Regime::attacked)) {
      attacked = run_regime(net, c, Regime::attacked, attack, record_recovered ? nullptr : &records);
    }
    if (record_recovered) recovered = run_regime(net, c, Regime::recovered, attack, &records);
    MetricsReport m;
    if (!records.empty()) m = compute_metrics(records);
    m.epsilon = e;
    m.environment = "pixelcatch";
    m.reward_clean = clean;
    m.reward_attacked = attacked;
    m.reward_recovered = recovered;
    reports.push_back(std::move(m));
    std::cerr << "eps " << e << " done\n";
  }
  {
    std::ofstream out(dir / "metrics.json", std::ios::trunc);
    out << reports_to_json(reports);
    if (!out) throw std::runtime_error("failed writing " + (dir / "metrics.json").string());
  }
  {
    std::ofstream out(dir / "metrics.csv", std::ios::trunc);
    write_reports_csv(out, reports);
    if (!out) throw std::runtime_error("failed writing " + (dir / "metrics.csv").string());
  }
  std::cout << (dir / "metrics.json").string() << '\n';
  return kExitOk;
}

// Channel mean of sample 0 of an [N,C,H,W] tensor, min-max scaled to [0,1];
// constant images map to 0.
Tensor<float> channel_mean_normalized(const Tensor<float>& t) {
  const std::size_t c = t.dim(1);
  const std::size_t hw = t.dim(2) * t.dim(3);
  Tensor<float> img(Shape{1, t.dim(2), t.dim(3)});
  for (std::size_t i = 0; i < hw; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += t[k * hw + i];
    img[i] = static_cast<float>(s / static_cast<double>(c));
  }
  const auto [lo, hi] = std::minmax_element(img.data().begin(), img.data().end());
  const float a = *lo;
  const float range = *hi - *lo;
  for (float& v : img.storage()) v = range > 0.0f ? (v - a) / range : 0.0f;
  return img;
}

int cmd_dump_maps(CommonFlags common, const std::string& checkpoint, std::optional<std::size_t> states,
                  std::optional<double> eps, std::string source) {
  bool arch_given = false;
  RunConfig c = base_config(common, &arch_given);
  if (states) c.dump.states = *states;
  if (eps) c.dump.epsilon = *eps;
  if (!source.empty()) c.dump.source = source;
  const PolicyNetwork<float> net = load_for(checkpoint, c, arch_given);
  c.validate();
  if (!net.bam_index()) throw ConfigError("dump-maps requires a checkpoint with a BAM layer");
  const fs::path dir = prepare_output(c);

  const auto& oc = c.observation;
  std::vector<Tensor<float>> observations;
  if (c.dump.source == "zeros") {
    observations.assign(c.dump.states, Tensor<float>(Shape{oc.stack, oc.height, oc.width}));
  } else {
    // States spaced along greedy clean play, skipping the zero-padded start.
    CatchTask task(c.env, oc);
    std::size_t episode = 0;
    Tensor<float> obs = task.reset(episode_seed(c.seed, episode));
    for (std::size_t t = 1; observations.size() < c.dump.states; ++t) {
      const auto step = task.step(forward(net, obs).distribution(0).argmax());
      obs = step.observation;
      if (t % 7 == 0) observations.push_back(obs);
      if (step.done) obs = task.reset(episode_seed(c.seed, ++episode));
    }
  }
  std::mt19937_64 rng(c.seed);
  const AttackConfig attack = c.attack.resolve(c.dump.epsilon);
  const std::size_t l = *net.bam_index();
  const std::size_t plane = oc.height * oc.width;
  for (std::size_t i = 0; i < observations.size(); ++i) {
    const auto& s = observations[i];
    const auto adv = pgd_attack(net, s, attack, rng);
    const auto clean_act = forward_prefix(net, s, 1, l - 1);
    const auto rec = recover(net, adv.observation, c.recovery);
    Tensor<float> last(Shape{1, oc.height, oc.width});
    std::copy_n(s.data().begin() + static_cast<std::ptrdiff_t>((oc.stack - 1) * plane), plane,
                last.storage().begin());
    const std::string stem = "state" + std::to_string(i) + "_";
    write_pgm(dir / (stem + "observation.pgm"), last);
    write_pgm(dir / (stem + "activation.pgm"), channel_mean_normalized(clean_act));
    write_pgm(dir / (stem + "attacked_activation.pgm"), channel_mean_normalized(rec.tap.f_pre));
    write_pgm(dir / (stem + "attention.pgm"), channel_mean_normalized(rec.tap.f_bam.values()));
    write_pgm(dir / (stem + "cleaned.pgm"), channel_mean_normalized(rec.tap.f_rec));
  }
  std::cout << observations.size() * 5 << " images in " << dir.string() << '\n';
  return kExitOk;
}

int cmd_count_params(const CommonFlags& common) {
  const RunConfig c = base_config(common);
  std::cout << count_parameters(c.architecture) << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"BAM attention policies: training, PGD attacks and attack recovery on PixelCatch"};
  app.require_subcommand(1);

  CommonFlags train_f;
  std::vector<std::string> adv_tokens;
  std::optional<std::size_t> steps;
  auto* train_cmd = app.add_subcommand("train", "Train a policy with PPO");
  add_common(train_cmd, train_f);
  auto* adv_opt = train_cmd->add_option("--adv", adv_tokens,
                                        "Adversarial training, optional every_k=K eps=E iters=T")
                      ->expected(0, 3);
  train_cmd->add_option("--steps", steps, "Total environment steps");

  CommonFlags eval_f;
  std::string eval_ckpt;
  std::optional<std::string> eval_eps;
  std::optional<std::string> eval_regimes;
  std::optional<std::size_t> eval_episodes;
  std::string eval_reentry;
  auto* eval_cmd = app.add_subcommand("eval", "Attack sweep and recovery evaluation");
  add_common(eval_cmd, eval_f);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--eps", eval_eps, "Comma-separated epsilon grid");
  eval_cmd->add_option("--regimes", eval_regimes, "Comma-separated subset of clean,attacked,recovered");
  eval_cmd->add_option("--episodes", eval_episodes, "Episodes per regime");
  eval_cmd->add_option("--reentry", eval_reentry, "Recovery re-entry: after_bam or at_bam");

  CommonFlags dump_f;
  std::string dump_ckpt;
  std::optional<std::size_t> dump_states;
  std::optional<double> dump_eps;
  std::string dump_source;
  auto* dump_cmd = app.add_subcommand("dump-maps", "Write activation and attention images (PGM)");
  add_common(dump_cmd, dump_f);
  dump_cmd->add_option("--checkpoint", dump_ckpt, "Checkpoint file")->required();
  dump_cmd->add_option("--states", dump_states, "Number of sampled states");
  dump_cmd->add_option("--eps", dump_eps, "Attack radius");
  dump_cmd->add_option("--source", dump_source, "Observation source: env or zeros");

  CommonFlags count_f;
  auto* count_cmd = app.add_subcommand("count-params", "Print the trainable parameter count");
  count_cmd->add_option("--config", count_f.config, "JSON run config");
  count_cmd->add_option("--arch", count_f.arch, "Architecture preset");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(train_f, adv_tokens, adv_opt->count() > 0 || !adv_tokens.empty(), steps);
    if (*eval_cmd) return cmd_eval(eval_f, eval_ckpt, eval_eps, eval_regimes, eval_episodes, eval_reentry);
    if (*dump_cmd) return cmd_dump_maps(dump_f, dump_ckpt, dump_states, dump_eps, dump_source);
    if (*count_cmd) return cmd_count_params(count_f);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace bamrl

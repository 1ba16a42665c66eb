// fedgrid: train, evaluate and simulate resilient microgrid controllers.

#include <CLI11.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "fedgrid/config.hpp"
#include "fedgrid/harness.hpp"

namespace {

fedgrid::ExperimentConfig load_or_default(const std::string& path) {
  if (path.empty()) {
    fedgrid::ExperimentConfig cfg;
    cfg.validate();
    return cfg;
  }
  return fedgrid::load_config(path);
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Large batch temporaries otherwise go through mmap/munmap on every update.
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
#endif
  CLI::App app{"Federated soft actor-critic for resilient networked microgrids"};
  app.require_subcommand(1);

  std::string config_path, output_dir;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "JSON experiment config (defaults when omitted)")
        ->check(CLI::ExistingFile);
    sub->add_option("-o,--output", output_dir, "output directory (overrides output.dir)");
  };

  auto* train = app.add_subcommand("train", "train one agent per microgrid and write rewards + checkpoint");
  add_common(train);
  std::string mode = "federated";
  std::optional<std::uint64_t> seed;
  bool all_seeds = false;
  train->add_option("--mode", mode, "federated or decentralized")
      ->check(CLI::IsMember({"federated", "decentralized"}));
  train->add_option("--seed", seed, "run seed (defaults to the first config seed)");
  train->add_flag("--all-seeds", all_seeds, "run every seed in the config's seed list");
  std::optional<int> episodes;
  train->add_option("--episodes", episodes, "override train.episodes");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on held-out attack scenarios");
  add_common(eval);
  std::string ckpt;
  std::optional<int> n_scenarios;
  eval->add_option("checkpoint", ckpt, "checkpoint file from `fedgrid train`")->required()->check(CLI::ExistingFile);
  eval->add_option("-n,--n-scenarios", n_scenarios, "number of test scenarios (default eval.n_test)");

  auto* sim = app.add_subcommand("simulate", "run one episode per scenario and write voltage traces");
  add_common(sim);
  std::string scenario_file, sim_ckpt;
  bool no_agent = false;
  sim->add_option("-s,--scenario", scenario_file, "scenario CSV (inverter_id,channel,magnitude,t_a,duration)")
      ->check(CLI::ExistingFile);
  sim->add_option("--checkpoint", sim_ckpt, "act with this checkpoint's deterministic policy")
      ->check(CLI::ExistingFile);
  sim->add_flag("--no-agent", no_agent, "zero actions even if --checkpoint is given");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of all hand-written gradients");
  fedgrid::GradcheckOptions gopt;
  grad->add_option("--trials", gopt.trials, "random networks per suite")->check(CLI::PositiveNumber);
  grad->add_option("--seed", gopt.seed, "sampling seed");
  grad->add_flag("--corrupt-backward", gopt.corrupt_backward, "")->group("");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*grad) return fedgrid::cmd_gradcheck(std::cout, gopt);

    fedgrid::ExperimentConfig cfg = load_or_default(config_path);
    if (!output_dir.empty()) cfg.output_dir = output_dir;

    if (*train) {
      if (episodes) cfg.train.episodes = *episodes;
      const auto m = fedgrid::parse_fed_mode(mode);
      std::vector<std::uint64_t> seeds;
      if (seed)
        seeds.push_back(*seed);
      else if (all_seeds)
        seeds = cfg.seeds;
      else
        seeds.push_back(cfg.seeds.front());
      for (auto s : seeds) {
        std::cout << "training " << fedgrid::to_string(m) << " seed " << s << '\n';
        const auto art = fedgrid::cmd_train(cfg, m, s, &std::cout);
        std::cout << "wrote " << art.rewards_csv.string() << "\nwrote " << art.checkpoint.string() << '\n';
      }
      return 0;
    }
    if (*eval) {
      const auto art = fedgrid::cmd_eval(cfg, ckpt, n_scenarios);
      const auto& p = art.result.policy_stats;
      const auto& z = art.result.zero_stats;
      std::cout << "scenarios           " << p.n << '\n'
                << "mean reward         " << fedgrid::fmt_num(p.mean) << "  (zero action " << fedgrid::fmt_num(z.mean)
                << ")\n"
                << "median reward       " << fedgrid::fmt_num(p.median) << "  (zero action "
                << fedgrid::fmt_num(z.median) << ")\n"
                << "recovered fraction  " << fedgrid::fmt_num(p.recovered_fraction) << "  (zero action "
                << fedgrid::fmt_num(z.recovered_fraction) << ")\n"
                << "wrote " << art.rewards_csv.string() << ", " << art.summary_csv.string() << ", "
                << art.traces_csv.string() << '\n';
      return 0;
    }
    if (*sim) {
      std::optional<std::string> sf, ck;
      if (!scenario_file.empty()) sf = scenario_file;
      if (!sim_ckpt.empty() && !no_agent) ck = sim_ckpt;
      const auto art = fedgrid::cmd_simulate(cfg, sf, ck);
      for (std::size_t i = 0; i < art.rollouts.size(); ++i)
        std::cout << "scenario " << i << ": reward " << fedgrid::fmt_num(art.rollouts[i].reward)
                  << (art.rollouts[i].recovered ? "  (in band at final step)" : "  (out of band at final step)")
                  << '\n';
      std::cout << "wrote " << art.trace_csv.string() << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "fedgrid: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

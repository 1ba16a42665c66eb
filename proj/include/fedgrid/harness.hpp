#pragma once

// Experiment driver behind the `fedgrid` CLI. Every artifact depends only
// on (config, seed); numbers are written with shortest round-trip
// formatting so repeated runs produce byte-identical files.
//
// Output files (in the configured output directory):
//   train:    rewards_<mode>_seed<k>.csv   episode,agent_id,reward,seed,mode
//             checkpoint_<mode>_seed<k>.fgck
//             rewards_<mode>_seed<k>.svg
//   eval:     eval_rewards.csv   scenario,inverter_id,channel,magnitude,t_a,reward,recovered,
//                                zero_action_reward,zero_action_recovered
//             eval_summary.csv   statistic,policy,zero_action
//             eval_traces.csv    scenario,t,bus,phase,V,V_ss
//             eval_histogram.svg
//   simulate: simulate_trace.csv scenario,t,bus,phase,V,V_ss
//
// Buses and agents are 1-based in files; phases are 1-based too.

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <system_error>
#include <thread>
#include <vector>

#include "fedgrid/checkpoint.hpp"
#include "fedgrid/config.hpp"
#include "fedgrid/errors.hpp"
#include "fedgrid/federation.hpp"
#include "fedgrid/gradcheck.hpp"
#include "fedgrid/resilient_env.hpp"
#include "fedgrid/sac.hpp"
#include "fedgrid/svg_plot.hpp"

namespace fedgrid {

// Shortest representation that round-trips.
inline std::string fmt_num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::filesystem::path ensure_dir(const std::string& dir) {
  std::filesystem::path p(dir);
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec) throw FormatError("cannot create output directory '" + dir + "': " + ec.message());
  return p;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write '" + p.string() + "'");
  return os;
}

inline std::string run_tag(FedMode mode, std::uint64_t seed) {
  return to_string(mode) + "_seed" + std::to_string(seed);
}

// ---------------------------------------------------------------- train

struct TrainArtifacts {
  std::filesystem::path rewards_csv;
  std::filesystem::path checkpoint;
  TrainResult result;
};

inline void write_reward_rows(std::ostream& os, const EpisodeLog& log, std::uint64_t seed, FedMode mode) {
  for (std::size_t a = 0; a < log.rewards.size(); ++a)
    os << log.episode << ',' << a + 1 << ',' << fmt_num(log.rewards[a]) << ',' << seed << ',' << to_string(mode)
       << '\n';
}

inline void plot_training(const std::filesystem::path& path, const TrainResult& r, FedMode mode) {
  if (r.episodes.empty()) return;
  const std::size_t n_agents = r.episodes.front().rewards.size();
  const std::size_t window = std::max<std::size_t>(1, r.episodes.size() / 50);
  std::vector<svg::Series> series(n_agents);
  for (std::size_t a = 0; a < n_agents; ++a) {
    series[a].label = "agent " + std::to_string(a + 1);
    double acc = 0;
    for (std::size_t e = 0; e < r.episodes.size(); ++e) {
      acc += r.episodes[e].rewards[a];
      if (e >= window) acc -= r.episodes[e - window].rewards[a];
      const double n = static_cast<double>(std::min(e + 1, window));
      series[a].x.push_back(static_cast<double>(e));
      series[a].y.push_back(acc / n);
    }
  }
  svg::write_lines(path.string(), "episodic reward (" + to_string(mode) + ", moving mean)", "episode", "reward",
                   series);
}

inline std::string checkpoint_echo(const ExperimentConfig& cfg, FedMode mode, std::uint64_t seed) {
  nlohmann::json j = config_to_json(cfg);
  j["run"] = {{"mode", to_string(mode)}, {"seed", seed}};
  return j.dump();
}

inline TrainArtifacts cmd_train(const ExperimentConfig& cfg_in, FedMode mode, std::uint64_t seed,
                                std::ostream* progress = nullptr) {
  ExperimentConfig cfg = cfg_in;
  cfg.train.schedule.mode = mode;
  cfg.validate();
  const auto dir = ensure_dir(cfg.output_dir);
  const std::string tag = run_tag(mode, seed);

  Environment env(cfg.network, cfg.env);
  env.set_scenario_pool(training_pool(cfg.network, cfg.env, cfg.train.n_train_scenarios, cfg.train.pool_seed,
                                         cfg.train.pool_design));
  auto agents = make_agents(env, cfg.train.sac, seed);

  TrainArtifacts art;
  art.rewards_csv = dir / ("rewards_" + tag + ".csv");
  art.checkpoint = dir / ("checkpoint_" + tag + ".fgck");
  std::ofstream csv = open_out(art.rewards_csv);
  csv << "episode,agent_id,reward,seed,mode\n";

  const int report_every = std::max(1, cfg.train.episodes / 20);
  TrainObserver obs;
  obs.on_episode = [&](const EpisodeLog& log) {
    write_reward_rows(csv, log, seed, mode);
    if (progress && (log.episode + 1) % report_every == 0) {
      *progress << "episode " << log.episode + 1 << "/" << cfg.train.episodes << "  reward";
      for (double r : log.rewards) *progress << ' ' << fmt_num(r);
      *progress << '\n' << std::flush;
    }
  };
  art.result = train(env, agents, cfg.train, seed, obs);
  csv.close();
  if (!csv) throw FormatError("write failed for '" + art.rewards_csv.string() + "'");

  Checkpoint ck;
  ck.global_step = static_cast<std::uint64_t>(art.result.env_steps);
  ck.config_echo = checkpoint_echo(cfg, mode, seed);
  ck.agents = std::move(agents);
  checkpoint_save(ck, art.checkpoint.string());
  plot_training(dir / ("rewards_" + tag + ".svg"), art.result, mode);
  return art;
}

// ---------------------------------------------------------------- rollouts

struct TracePoint {
  int t;
  int bus;
  int phase;
  double v;
  double v_ss;
};

struct Rollout {
  double reward = 0.0;  // summed over agents and steps
  bool recovered = false;
  std::vector<TracePoint> trace;
};

// One episode. Null agents means zero actions. Trace rows cover t = 1..T for
// the listed buses (all when empty).
inline Rollout rollout(Environment& env, const AttackScenario& scenario, const std::vector<sac::AgentBundle>* agents,
                       const std::vector<int>& trace_buses, bool keep_trace) {
  const auto& net = env.network();
  std::vector<int> buses = trace_buses;
  if (buses.empty())
    for (int b = 0; b < net.n_buses; ++b) buses.push_back(b);

  Rollout out;
  JointObservation obs = env.reset(scenario);
  bool done = false;
  while (!done) {
    JointAction action(static_cast<std::size_t>(env.n_agents()));
    for (int a = 0; a < env.n_agents(); ++a) {
      const auto i = static_cast<std::size_t>(a);
      action[i] = agents ? (*agents)[i].act_deterministic(obs[i]) : Eigen::VectorXd::Zero(env.act_dim(a));
    }
    StepResult sr = env.step(action);
    for (double r : sr.rewards) out.reward += r;
    if (keep_trace) {
      const int t = static_cast<int>(env.state().t);
      for (int b : buses)
        for (int ph = 0; ph < net.n_phases; ++ph)
          out.trace.push_back({t, b, ph, env.state().v(b, ph), env.steady_state()(b, ph)});
    }
    obs = std::move(sr.obs);
    done = sr.done.front();
  }
  out.recovered = env.in_band();
  return out;
}

inline void write_trace_header(std::ostream& os) { os << "scenario,t,bus,phase,V,V_ss\n"; }

inline void write_trace_rows(std::ostream& os, int scenario, const std::vector<TracePoint>& trace) {
  for (const auto& p : trace)
    os << scenario << ',' << p.t << ',' << p.bus + 1 << ',' << p.phase + 1 << ',' << fmt_num(p.v) << ','
       << fmt_num(p.v_ss) << '\n';
}

// ---------------------------------------------------------------- eval

struct RewardStats {
  std::size_t n = 0;
  double mean = 0, median = 0, min = 0, max = 0, recovered_fraction = 0;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw DomainError("median_of: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

inline RewardStats summarize(const std::vector<double>& rewards, const std::vector<bool>& recovered) {
  RewardStats s;
  s.n = rewards.size();
  if (s.n == 0) return s;
  double sum = 0;
  for (double r : rewards) sum += r;
  s.mean = sum / static_cast<double>(s.n);
  s.median = median_of(rewards);
  s.min = *std::min_element(rewards.begin(), rewards.end());
  s.max = *std::max_element(rewards.begin(), rewards.end());
  s.recovered_fraction =
      static_cast<double>(std::count(recovered.begin(), recovered.end(), true)) / static_cast<double>(s.n);
  return s;
}

struct EvalResult {
  std::vector<AttackScenario> scenarios;
  std::vector<Rollout> policy;
  std::vector<Rollout> zero_action;
  RewardStats policy_stats;
  RewardStats zero_stats;
};

// Worker count: FEDGRID_THREADS caps it; default is the hardware count.
inline int eval_threads() {
  int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* s = std::getenv("FEDGRID_THREADS")) {
    try {
      const int cap = std::stoi(s);
      if (cap >= 1) n = std::min(n, cap);
    } catch (const std::exception&) {
      throw FormatError(std::string("FEDGRID_THREADS: not an integer: '") + s + "'");
    }
  }
  return n;
}

inline void check_agents_match(const Environment& env, const std::vector<sac::AgentBundle>& agents) {
  if (static_cast<int>(agents.size()) != env.n_agents())
    throw FormatError("checkpoint has " + std::to_string(agents.size()) + " agents but the config defines " +
                      std::to_string(env.n_agents()) + " microgrids");
  for (int a = 0; a < env.n_agents(); ++a) {
    const auto& ag = agents[static_cast<std::size_t>(a)];
    if (ag.obs_dim != env.obs_dim(a) || ag.act_dim != env.act_dim(a))
      throw FormatError("checkpoint agent " + std::to_string(a + 1) + " has shape (obs " +
                        std::to_string(ag.obs_dim) + ", act " + std::to_string(ag.act_dim) +
                        ") but the config needs (obs " + std::to_string(env.obs_dim(a)) + ", act " +
                        std::to_string(env.act_dim(a)) + ")");
  }
}

// Rolls out the deterministic policy and the zero-action baseline on the
// held-out pool. Rollouts are independent and deterministic, so scenarios
// are split across workers and results are stored by index.
inline EvalResult evaluate(const ExperimentConfig& cfg, const std::vector<sac::AgentBundle>& agents, int n_scenarios,
                           int threads, bool keep_trace) {
  const Environment proto(cfg.network, cfg.env);
  check_agents_match(proto, agents);
  EvalResult r;
  const auto train = training_pool(cfg.network, cfg.env, cfg.train.n_train_scenarios, cfg.train.pool_seed,
                                         cfg.train.pool_design);
  r.scenarios = test_pool(cfg.network, cfg.env, n_scenarios, cfg.train.pool_seed, train);
  const std::size_t n = r.scenarios.size();
  r.policy.resize(n);
  r.zero_action.resize(n);

  auto work = [&](std::size_t begin, std::size_t stride) {
    Environment env = proto;
    for (std::size_t i = begin; i < n; i += stride) {
      r.policy[i] = rollout(env, r.scenarios[i], &agents, cfg.eval.trace_buses, keep_trace);
      r.zero_action[i] = rollout(env, r.scenarios[i], nullptr, cfg.eval.trace_buses, false);
    }
  };
  const auto workers = static_cast<std::size_t>(std::clamp<int>(threads, 1, static_cast<int>(std::max<std::size_t>(n, 1))));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          work(w, workers);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  std::vector<double> pr, zr;
  std::vector<bool> pk, zk;
  for (std::size_t i = 0; i < n; ++i) {
    pr.push_back(r.policy[i].reward);
    pk.push_back(r.policy[i].recovered);
    zr.push_back(r.zero_action[i].reward);
    zk.push_back(r.zero_action[i].recovered);
  }
  r.policy_stats = summarize(pr, pk);
  r.zero_stats = summarize(zr, zk);
  return r;
}

inline void plot_eval_histogram(const std::filesystem::path& path, const EvalResult& r) {
  double lo = 0, hi = 0;
  for (std::size_t i = 0; i < r.policy.size(); ++i) {
    lo = std::min({lo, r.policy[i].reward, r.zero_action[i].reward});
    hi = std::max({hi, r.policy[i].reward, r.zero_action[i].reward});
  }
  const int bins = 30;
  if (!(hi > lo)) hi = lo + 1;
  auto hist = [&](const std::vector<Rollout>& v, const std::string& label) {
    svg::Bars b{label, {}, std::vector<double>(bins, 0.0)};
    for (int k = 0; k <= bins; ++k) b.edges.push_back(lo + (hi - lo) * k / bins);
    for (const auto& ro : v) {
      const int k = std::min(bins - 1, static_cast<int>((ro.reward - lo) / (hi - lo) * bins));
      b.counts[static_cast<std::size_t>(k)] += 1;
    }
    return b;
  };
  svg::write_histogram(path.string(), "test rewards", "episodic reward (all agents)",
                       {hist(r.policy, "policy"), hist(r.zero_action, "zero action")});
}

struct EvalArtifacts {
  std::filesystem::path rewards_csv, summary_csv, traces_csv;
  EvalResult result;
};

inline EvalArtifacts cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                              std::optional<int> n_scenarios = std::nullopt, std::optional<int> threads = std::nullopt) {
  cfg.validate();
  const int n = n_scenarios.value_or(cfg.eval.n_test);
  if (n < 1) throw DomainError("eval: --n-scenarios must be >= 1");
  const Checkpoint ck = checkpoint_load(checkpoint_path);
  const auto dir = ensure_dir(cfg.output_dir);

  EvalArtifacts art;
  art.result = evaluate(cfg, ck.agents, n, threads.value_or(eval_threads()), true);
  const auto& r = art.result;

  art.rewards_csv = dir / "eval_rewards.csv";
  {
    std::ofstream os = open_out(art.rewards_csv);
    os << "scenario,inverter_id,channel,magnitude,t_a,reward,recovered,zero_action_reward,zero_action_recovered\n";
    for (std::size_t i = 0; i < r.scenarios.size(); ++i) {
      const auto& s = r.scenarios[i];
      os << i << ',' << s.inverter_id << ',' << to_string(s.channel) << ',' << fmt_num(s.magnitude) << ',' << s.t_a
         << ',' << fmt_num(r.policy[i].reward) << ',' << (r.policy[i].recovered ? 1 : 0) << ','
         << fmt_num(r.zero_action[i].reward) << ',' << (r.zero_action[i].recovered ? 1 : 0) << '\n';
    }
  }
  art.summary_csv = dir / "eval_summary.csv";
  {
    std::ofstream os = open_out(art.summary_csv);
    const auto& p = r.policy_stats;
    const auto& z = r.zero_stats;
    os << "statistic,policy,zero_action\n"
       << "n," << p.n << ',' << z.n << '\n'
       << "mean," << fmt_num(p.mean) << ',' << fmt_num(z.mean) << '\n'
       << "median," << fmt_num(p.median) << ',' << fmt_num(z.median) << '\n'
       << "min," << fmt_num(p.min) << ',' << fmt_num(z.min) << '\n'
       << "max," << fmt_num(p.max) << ',' << fmt_num(z.max) << '\n'
       << "recovered_fraction," << fmt_num(p.recovered_fraction) << ',' << fmt_num(z.recovered_fraction) << '\n';
  }
  art.traces_csv = dir / "eval_traces.csv";
  {
    std::ofstream os = open_out(art.traces_csv);
    write_trace_header(os);
    for (std::size_t i = 0; i < r.policy.size(); ++i) write_trace_rows(os, static_cast<int>(i), r.policy[i].trace);
  }
  plot_eval_histogram(dir / "eval_histogram.svg", r);
  return art;
}

// ---------------------------------------------------------------- simulate

struct SimulateArtifacts {
  std::filesystem::path trace_csv;
  std::vector<Rollout> rollouts;
};

// Without a scenario file the episode is attack-free. With a checkpoint the
// deterministic policy acts; otherwise actions are zero.
inline SimulateArtifacts cmd_simulate(const ExperimentConfig& cfg, const std::optional<std::string>& scenario_file,
                                      const std::optional<std::string>& checkpoint_path = std::nullopt) {
  cfg.validate();
  std::vector<AttackScenario> scenarios;
  if (scenario_file) {
    std::ifstream in(*scenario_file);
    if (!in) throw FormatError("cannot open scenario file '" + *scenario_file + "'");
    scenarios = read_scenarios(in);
    if (scenarios.empty()) throw FormatError("scenario file '" + *scenario_file + "' has no rows");
  } else {
    scenarios.push_back(AttackScenario::none(cfg.env.episode_len));
  }
  std::optional<Checkpoint> ck;
  Environment env(cfg.network, cfg.env);
  if (checkpoint_path) {
    ck = checkpoint_load(*checkpoint_path);
    check_agents_match(env, ck->agents);
  }
  const auto dir = ensure_dir(cfg.output_dir);
  SimulateArtifacts art;
  art.trace_csv = dir / "simulate_trace.csv";
  std::ofstream os = open_out(art.trace_csv);
  write_trace_header(os);
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    art.rollouts.push_back(rollout(env, scenarios[i], ck ? &ck->agents : nullptr, {}, true));
    write_trace_rows(os, static_cast<int>(i), art.rollouts.back().trace);
  }

  std::vector<svg::Series> series;
  for (int b = 0; b < cfg.network.n_buses; ++b) {
    svg::Series s{"bus " + std::to_string(b + 1), {}, {}};
    for (const auto& p : art.rollouts.front().trace)
      if (p.bus == b && p.phase == 0) {
        s.x.push_back(p.t);
        s.y.push_back(p.v / p.v_ss);
      }
    series.push_back(std::move(s));
  }
  svg::write_lines((dir / "simulate_trace.svg").string(), "phase-1 voltage / V_ss (scenario 0)", "step", "V / V_ss",
                   series);
  return art;
}

// ---------------------------------------------------------------- gradcheck

inline int cmd_gradcheck(std::ostream& os, const GradcheckOptions& opt = {}) {
  const GradcheckReport rep = run_gradcheck(opt);
  for (const auto& l : rep.lines) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-18s trials=%-3d entries=%-6zu max_rel_err=%.3e  %s", l.name.c_str(), l.trials,
                  l.entries, l.max_rel_error, l.pass ? "ok" : "FAIL");
    os << buf << '\n';
  }
  return rep.ok() ? 0 : 1;
}

}  // namespace fedgrid

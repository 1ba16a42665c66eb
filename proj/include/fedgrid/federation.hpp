#pragma once

// Vertical federated training loop. All microgrid agents act on one coupled
// environment; a coordinator periodically replaces every agent's critic and
// target-critic parameters by their uniform mean. Policies and replay data
// never leave an agent.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "fedgrid/errors.hpp"
#include "fedgrid/mlp.hpp"
#include "fedgrid/resilient_env.hpp"
#include "fedgrid/sac.hpp"

namespace fedgrid {

enum class FedMode { Federated, Decentralized };

inline std::string to_string(FedMode m) { return m == FedMode::Federated ? "federated" : "decentralized"; }

inline FedMode parse_fed_mode(const std::string& s) {
  if (s == "federated") return FedMode::Federated;
  if (s == "decentralized") return FedMode::Decentralized;
  throw FormatError("unknown mode '" + s + "' (expected federated or decentralized)");
}

struct FedSchedule {
  long start_step = 100;
  long interval = 10;
  FedMode mode = FedMode::Federated;

  void validate() const {
    if (start_step < 0) throw DomainError("schedule: start_step must be >= 0");
    if (interval < 1) throw DomainError("schedule: interval must be >= 1");
  }

  // `env_steps` counts completed environment steps.
  bool is_federation_step(long env_steps) const {
    return mode == FedMode::Federated && env_steps >= start_step &&
           (env_steps - start_step) % interval == 0;
  }
};

struct TrainConfig {
  int episodes = 750;  // n_f
  long warmup = 256;   // transitions per agent before gradient updates start
  double clip_switch_fraction = 0.5;
  int n_train_scenarios = 7;
  std::uint64_t pool_seed = 7;
  PoolDesign pool_design = PoolDesign::Uniform;
  int threads = 1;
  FedSchedule schedule;
  sac::SacHyper sac;

  long total_steps(const EnvConfig& env) const { return static_cast<long>(episodes) * env.episode_len; }

  void validate() const {
    if (episodes < 1) throw DomainError("train: episodes must be >= 1");
    if (warmup < 1) throw DomainError("train: warmup must be >= 1");
    if (!(clip_switch_fraction > 0.0 && clip_switch_fraction <= 1.0))
      throw DomainError("train: clip_switch_fraction must lie in (0, 1]");
    if (n_train_scenarios < 1) throw DomainError("train: n_train_scenarios must be >= 1");
    schedule.validate();
    sac.validate();
  }
};

// SplitMix64 finalizer over (base, stream, index).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index = 0) {
  std::uint64_t z = base;
  for (std::uint64_t v : {stream, index}) {
    z += 0x9E3779B97F4A7C15ULL + v * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    z ^= z >> 31;
  }
  return z;
}

// Seed streams.
inline constexpr std::uint64_t kStreamTrainPool = 1;
inline constexpr std::uint64_t kStreamTestPool = 2;
inline constexpr std::uint64_t kStreamAgent = 3;
inline constexpr std::uint64_t kStreamEnv = 4;
inline constexpr std::uint64_t kStreamEval = 5;

inline std::vector<AttackScenario> training_pool(const NetworkModel& net, const EnvConfig& env, int n,
                                                 std::uint64_t pool_seed,
                                                 PoolDesign design = PoolDesign::Uniform) {
  std::mt19937_64 rng(derive_seed(pool_seed, kStreamTrainPool));
  return build_scenario_pool(net, env, n, rng, {}, design);
}

inline std::vector<AttackScenario> test_pool(const NetworkModel& net, const EnvConfig& env, int n,
                                             std::uint64_t pool_seed, const std::vector<AttackScenario>& train) {
  std::mt19937_64 rng(derive_seed(pool_seed, kStreamTestPool));
  return build_scenario_pool(net, env, n, rng, train);
}

// Clipped double Q for the first fraction of the run, one pair afterwards.
inline sac::ClipMode clip_mode_for(long step, long total_steps, double switch_fraction) {
  if (step < 0 || step > total_steps) throw DomainError("clip_mode_for: step outside [0, total_steps]");
  if (static_cast<double>(step) < switch_fraction * static_cast<double>(total_steps))
    return sac::ClipMode::double_min();
  return sac::ClipMode::single_pair(1);
}

// Uniform elementwise mean of shape-identical parameter sets.
inline nn::LayerSet federated_average(const std::vector<const nn::LayerSet*>& snapshots) {
  if (snapshots.empty()) throw DomainError("federated_average: no snapshots");
  for (const auto* s : snapshots)
    if (!nn::Mlp::same_shape(*s, *snapshots.front()))
      throw DomainError("federated_average: snapshot shapes differ");
  // Mean taken as first + mean deviation, so identical snapshots come back
  // bit-exact.
  const auto& first = *snapshots.front();
  nn::LayerSet dev = nn::zeros_like(first);
  for (std::size_t i = 1; i < snapshots.size(); ++i)
    for (std::size_t k = 0; k < dev.size(); ++k) {
      dev[k].w += (*snapshots[i])[k].w - first[k].w;
      dev[k].b += (*snapshots[i])[k].b - first[k].b;
    }
  const double inv = 1.0 / static_cast<double>(snapshots.size());
  nn::LayerSet avg = first;
  for (std::size_t k = 0; k < avg.size(); ++k) {
    avg[k].w += inv * dev[k].w;
    avg[k].b += inv * dev[k].b;
  }
  return avg;
}

// Averaged critic and target parameters for each pair index (empty when the
// pair is not active).
struct FederatedParams {
  std::array<nn::LayerSet, 2> critic;
  std::array<nn::LayerSet, 2> target;
};

// Passive aggregation point. Agents submit critic snapshots only.
class Coordinator {
 public:
  FederatedParams aggregate(const std::vector<sac::AgentBundle>& agents, sac::ClipMode clip) const {
    FederatedParams out;
    for (std::size_t k = 0; k < 2; ++k) {
      if (!clip.uses(static_cast<int>(k) + 1)) continue;
      std::vector<const nn::LayerSet*> c, t;
      for (const auto& a : agents) {
        c.push_back(&a.critic[k].layers());
        t.push_back(&a.target[k].layers());
      }
      out.critic[k] = federated_average(c);
      out.target[k] = federated_average(t);
    }
    return out;
  }
};

inline void broadcast_assign(std::vector<sac::AgentBundle>& agents, const FederatedParams& fed) {
  for (auto& a : agents)
    for (std::size_t k = 0; k < 2; ++k) {
      if (!fed.critic[k].empty()) {
        if (!nn::Mlp::same_shape(a.critic[k].layers(), fed.critic[k]))
          throw DomainError("broadcast_assign: averaged critic shape mismatch");
        a.critic[k].mutable_layers() = fed.critic[k];
      }
      if (!fed.target[k].empty()) {
        if (!nn::Mlp::same_shape(a.target[k].layers(), fed.target[k]))
          throw DomainError("broadcast_assign: averaged target shape mismatch");
        a.target[k].mutable_layers() = fed.target[k];
      }
    }
}

inline void federate(std::vector<sac::AgentBundle>& agents, sac::ClipMode clip) {
  broadcast_assign(agents, Coordinator{}.aggregate(agents, clip));
}

struct EpisodeLog {
  int episode = 0;
  long end_step = 0;
  AttackScenario scenario;
  std::vector<double> rewards;  // per agent
};

struct TrainObserver {
  std::function<void(long env_steps, const std::vector<sac::AgentBundle>&, sac::ClipMode)> on_federation;
  std::function<void(const EpisodeLog&)> on_episode;
};

struct TrainResult {
  std::vector<EpisodeLog> episodes;
  long env_steps = 0;
  long federation_rounds = 0;
};

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::vector<sac::AgentBundle> make_agents(const Environment& env, const sac::SacHyper& hp,
                                                 std::uint64_t seed) {
  std::vector<sac::AgentBundle> agents;
  for (int a = 0; a < env.n_agents(); ++a)
    agents.push_back(sac::AgentBundle::create(a, env.obs_dim(a), env.act_dim(a), hp,
                                              derive_seed(seed, kStreamAgent, static_cast<std::uint64_t>(a))));
  return agents;
}

namespace detail {

template <class F>
void for_each_agent(std::vector<sac::AgentBundle>& agents, int threads, F&& fn) {
  if (threads <= 1 || agents.size() < 2) {
    for (auto& a : agents) fn(a);
    return;
  }
  std::vector<std::exception_ptr> errors(agents.size());
  std::vector<std::thread> pool;
  for (std::size_t i = 0; i < agents.size(); ++i)
    pool.emplace_back([&, i] {
      try {
        fn(agents[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

// Runs cfg.episodes episodes, sampling each from the training pool already
// installed on env (or the default pool when none is set).
inline TrainResult train(Environment& env, std::vector<sac::AgentBundle>& agents, const TrainConfig& cfg,
                         std::uint64_t seed, const TrainObserver& observer = {}) {
  cfg.validate();
  if (static_cast<int>(agents.size()) != env.n_agents())
    throw DomainError("train: need one agent per microgrid");
  for (int a = 0; a < env.n_agents(); ++a)
    if (agents[static_cast<std::size_t>(a)].obs_dim != env.obs_dim(a) ||
        agents[static_cast<std::size_t>(a)].act_dim != env.act_dim(a))
      throw DomainError("train: agent dimensions do not match the environment");
  if (env.scenario_pool().empty())
    env.set_scenario_pool(
        training_pool(env.network(), env.config(), cfg.n_train_scenarios, cfg.pool_seed, cfg.pool_design));

  std::mt19937_64 scenario_rng(derive_seed(seed, kStreamEnv));
  std::uniform_int_distribution<std::size_t> pick(0, env.scenario_pool().size() - 1);
  const long total = cfg.total_steps(env.config());
  const auto n_agents = agents.size();

  TrainResult result;
  long step = 0;
  for (int ep = 0; ep < cfg.episodes; ++ep) {
    try {
      const AttackScenario scenario = env.scenario_pool()[pick(scenario_rng)];
      JointObservation obs = env.reset(scenario);
      EpisodeLog log{ep, 0, scenario, std::vector<double>(n_agents, 0.0)};
      bool all_done = false;
      while (!all_done) {
        JointAction action(n_agents);
        for (std::size_t a = 0; a < n_agents; ++a) action[a] = agents[a].act(obs[a], false);
        StepResult sr = env.step(action);
        all_done = true;
        for (std::size_t a = 0; a < n_agents; ++a) {
          agents[a].buffer.push({obs[a], action[a], sr.rewards[a], sr.obs[a], sr.done[a] ? 1.0 : 0.0});
          log.rewards[a] += sr.rewards[a];
          all_done = all_done && sr.done[a];
        }
        obs = std::move(sr.obs);
        ++step;

        const sac::ClipMode clip = clip_mode_for(std::min(step, total), total, cfg.clip_switch_fraction);
        if (static_cast<long>(agents.front().buffer.size()) >= cfg.warmup)
          detail::for_each_agent(agents, cfg.threads, [&](sac::AgentBundle& ag) { sac::sac_update(ag, cfg.sac, clip); });
        if (cfg.schedule.is_federation_step(step)) {
          federate(agents, clip);
          ++result.federation_rounds;
          if (observer.on_federation) observer.on_federation(step, agents, clip);
        }
      }
      log.end_step = step;
      if (observer.on_episode) observer.on_episode(log);
      result.episodes.push_back(std::move(log));
    } catch (const std::exception& e) {
      throw TrainError("train: aborted at episode " + std::to_string(ep) + ", env step " +
                       std::to_string(step) + ": " + e.what());
    }
  }
  result.env_steps = step;
  return result;
}

}  // namespace fedgrid

#pragma once

// Episodic multi-agent environment over the coupled microgrid model. Each
// microgrid agent observes its own buses (normalized by the pre-attack steady
// state) and drives the voltage set-point residual of its own GFM inverters.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "fedgrid/errors.hpp"
#include "fedgrid/grid_sim.hpp"

namespace fedgrid {

enum class AttackChannel { Voltage, ActivePower };

inline std::string to_string(AttackChannel c) {
  return c == AttackChannel::Voltage ? "voltage" : "active_power";
}

inline AttackChannel parse_channel(const std::string& s) {
  if (s == "voltage") return AttackChannel::Voltage;
  if (s == "active_power") return AttackChannel::ActivePower;
  throw FormatError("unknown attack channel '" + s + "'");
}

struct AttackScenario {
  int inverter_id = 0;
  AttackChannel channel = AttackChannel::Voltage;
  double magnitude = 0.0;  // pu
  int t_a = 1;             // onset step
  int duration = 0;        // steps

  // Attack is active on steps t with t_a <= t < t_a + duration.
  bool active_at(long t) const { return duration > 0 && t >= t_a && t < t_a + duration; }
  bool is_attack() const { return duration > 0 && magnitude != 0.0; }

  static AttackScenario none(int episode_len) {
    return {0, AttackChannel::Voltage, 0.0, episode_len, 0};
  }

  friend bool operator==(const AttackScenario&, const AttackScenario&) = default;
};

struct EnvConfig {
  int episode_len = 40;
  double band_lo = 0.99;
  double band_hi = 1.01;
  std::vector<double> q_weights;  // per bus; empty means 1.0 everywhere
  double invalid_weight = 1.0;    // c
  double action_bound = 0.2;      // pu, scale of a unit agent action
  double act_threshold = 0.005;   // pu, u_ivld trigger
  double dt = 0.25;               // seconds
  double attack_mag_min = 0.03;
  double attack_mag_max = 0.15;
  int onset_min = 5;
  int onset_max = 15;
  std::uint64_t seed = 0;

  void validate(const NetworkModel& net) const {
    if (episode_len < 1) throw DomainError("env: episode_len must be >= 1");
    if (!(band_lo < 1.0 && 1.0 < band_hi)) throw DomainError("env: need band_lo < 1 < band_hi");
    if (!q_weights.empty() && static_cast<int>(q_weights.size()) != net.n_buses)
      throw DomainError("env: q_weights must have one entry per bus");
    if (!(action_bound > 0.0)) throw DomainError("env: action_bound must be positive");
    if (act_threshold < 0.0 || invalid_weight < 0.0)
      throw DomainError("env: act_threshold and invalid weight must be non-negative");
    if (!(dt > 0.0) || dt > net.tau) throw DomainError("env: need 0 < dt <= tau");
    if (!(0.0 < attack_mag_min && attack_mag_min <= attack_mag_max))
      throw DomainError("env: need 0 < attack_mag_min <= attack_mag_max");
    if (onset_min < 1 || onset_max < onset_min || onset_max >= episode_len)
      throw DomainError("env: onset range must satisfy 1 <= min <= max < episode_len");
  }

  double q_weight(int bus) const {
    return q_weights.empty() ? 1.0 : q_weights[static_cast<std::size_t>(bus)];
  }
};

// One vector per microgrid agent.
using JointObservation = std::vector<Eigen::VectorXd>;
using JointAction = std::vector<Eigen::VectorXd>;

struct StepResult {
  JointObservation obs;
  std::vector<double> rewards;
  std::vector<bool> done;
};

inline Eigen::VectorXd normalize_obs(const Eigen::VectorXd& v, const Eigen::VectorXd& v_ss) {
  if (v.size() != v_ss.size()) throw DomainError("normalize_obs: length mismatch");
  if ((v_ss.array() <= 0.0).any())
    throw DomainError("normalize_obs: steady-state entries must be positive");
  return v.cwiseQuotient(v_ss);
}

// Per-agent reward over that agent's own bus/phase entries.
//   t <= t_a            : -c * [ ||action||_inf > eps ]
//   t > t_a, any outside: -sum_i q_i |V_i - V_ss,i|
//   otherwise           : 0
// `action_pu` is the residual actually applied, in pu.
inline double reward(const Eigen::VectorXd& v, const Eigen::VectorXd& v_ss,
                     const Eigen::VectorXd& q_weights, long t, int t_a,
                     const Eigen::VectorXd& action_pu, const EnvConfig& cfg) {
  if (v.size() != v_ss.size() || v.size() != q_weights.size())
    throw DomainError("reward: voltage, steady-state and weight vectors must match");
  if (t <= t_a) {
    const double amax = action_pu.size() ? action_pu.cwiseAbs().maxCoeff() : 0.0;
    return amax > cfg.act_threshold ? -cfg.invalid_weight : 0.0;
  }
  bool outside = false;
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (v(i) < cfg.band_lo * v_ss(i) || v(i) > cfg.band_hi * v_ss(i)) outside = true;
  if (!outside) return 0.0;
  return -(q_weights.array() * (v - v_ss).array().abs()).sum();
}

// Uniform: GFM and sign drawn at random per scenario. Stratified: scenario i
// targets GFM i mod n_gfm with sign alternating by i, so small pools still
// cover every GFM and both signs. Magnitude and onset are random either way.
enum class PoolDesign { Uniform, Stratified };

// Samples n attack scenarios on the GFM inverters. Scenarios whose
// (inverter, magnitude, onset) triple appears in `exclude` are redrawn.
inline std::vector<AttackScenario> build_scenario_pool(const NetworkModel& net, const EnvConfig& cfg,
                                                       int n, std::mt19937_64& rng,
                                                       const std::vector<AttackScenario>& exclude = {},
                                                       PoolDesign design = PoolDesign::Uniform) {
  if (n < 1) throw DomainError("build_scenario_pool: n must be >= 1");
  const auto gfms = net.gfm_indices();
  if (gfms.empty()) throw DomainError("build_scenario_pool: network has no GFM inverter");
  std::set<std::tuple<int, double, int>> taken;
  for (const auto& s : exclude) taken.emplace(s.inverter_id, s.magnitude, s.t_a);

  std::uniform_int_distribution<std::size_t> pick(0, gfms.size() - 1);
  std::uniform_real_distribution<double> mag(cfg.attack_mag_min, cfg.attack_mag_max);
  std::bernoulli_distribution negative(0.5);
  std::uniform_int_distribution<int> onset(cfg.onset_min, cfg.onset_max);

  std::vector<AttackScenario> pool;
  pool.reserve(static_cast<std::size_t>(n));
  while (static_cast<int>(pool.size()) < n) {
    AttackScenario s;
    const std::size_t i = pool.size();
    const bool strat = design == PoolDesign::Stratified;
    s.inverter_id = net.inverters[static_cast<std::size_t>(gfms[strat ? i % gfms.size() : pick(rng)])].id;
    s.channel = AttackChannel::Voltage;
    const double m = mag(rng);
    s.magnitude = (strat ? i % 2 == 1 : negative(rng)) ? -m : m;
    s.t_a = onset(rng);
    s.duration = cfg.episode_len - s.t_a;
    if (!taken.emplace(s.inverter_id, s.magnitude, s.t_a).second) continue;
    pool.push_back(s);
  }
  return pool;
}

inline void write_scenarios(std::ostream& os, const std::vector<AttackScenario>& pool) {
  os << "inverter_id,channel,magnitude,t_a,duration\n";
  os << std::setprecision(17);
  for (const auto& s : pool)
    os << s.inverter_id << ',' << to_string(s.channel) << ',' << s.magnitude << ',' << s.t_a << ','
       << s.duration << '\n';
}

inline std::vector<AttackScenario> read_scenarios(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("inverter_id,channel,magnitude,t_a,duration", 0) != 0)
    throw FormatError("scenario file: missing header 'inverter_id,channel,magnitude,t_a,duration'");
  std::vector<AttackScenario> out;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[5];
    for (int k = 0; k < 5; ++k)
      if (!std::getline(ss, f[k], ','))
        throw FormatError("scenario file line " + std::to_string(lineno) + ": expected 5 fields");
    try {
      AttackScenario s;
      s.inverter_id = std::stoi(f[0]);
      s.channel = parse_channel(f[1]);
      s.magnitude = std::stod(f[2]);
      s.t_a = std::stoi(f[3]);
      s.duration = std::stoi(f[4]);
      out.push_back(s);
    } catch (const FormatError& e) {
      throw FormatError("scenario file line " + std::to_string(lineno) + ": " + e.what());
    } catch (const std::exception&) {
      throw FormatError("scenario file line " + std::to_string(lineno) + ": bad number");
    }
  }
  return out;
}

class Environment {
 public:
  // Computes and caches the steady state and the per-agent index maps.
  Environment(NetworkModel net, EnvConfig cfg)
      : net_(std::move(net)), cfg_(std::move(cfg)), rng_(cfg_.seed) {
    net_.validate();
    cfg_.validate(net_);
    nominal_ = nominal_setpoints(net_);
    ss_state_ = steady_state_from(net_, nominal_, initial_state(net_)).state;
    v_ss_ = ss_state_.v;
    const int n_mg = net_.n_microgrids();
    for (int mg = 0; mg < n_mg; ++mg) {
      std::vector<int> idx;
      std::vector<double> w;
      for (int b : net_.buses_of_mg(mg))
        for (int ph = 0; ph < net_.n_phases; ++ph) {
          idx.push_back(b * net_.n_phases + ph);
          w.push_back(cfg_.q_weight(b));
        }
      obs_index_.push_back(idx);
      q_weights_.push_back(Eigen::Map<Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size())));
      act_index_.push_back(net_.gfm_indices_of_mg(mg));
    }
    flat_v_ss_ = flatten_voltages(v_ss_);
    scenario_ = AttackScenario::none(cfg_.episode_len);
    state_ = ss_state_;
  }

  int n_agents() const { return static_cast<int>(obs_index_.size()); }
  int obs_dim(int agent) const { return static_cast<int>(obs_index_[static_cast<std::size_t>(agent)].size()); }
  int act_dim(int agent) const { return static_cast<int>(act_index_[static_cast<std::size_t>(agent)].size()); }
  int total_obs_dim() const { return net_.n_buses * net_.n_phases; }
  const std::vector<int>& obs_index(int agent) const { return obs_index_[static_cast<std::size_t>(agent)]; }
  const std::vector<int>& act_index(int agent) const { return act_index_[static_cast<std::size_t>(agent)]; }

  const NetworkModel& network() const { return net_; }
  const EnvConfig& config() const { return cfg_; }
  const Eigen::MatrixXd& steady_state() const { return v_ss_; }
  const GridState& state() const { return state_; }
  const AttackScenario& scenario() const { return scenario_; }
  bool done() const { return done_; }

  void set_scenario_pool(std::vector<AttackScenario> pool) { pool_ = std::move(pool); }
  const std::vector<AttackScenario>& scenario_pool() const { return pool_; }

  // Sampled reset: uniform draw from the pool, or a fresh scenario if none.
  JointObservation reset() {
    if (pool_.empty()) return reset(build_scenario_pool(net_, cfg_, 1, rng_).front());
    std::uniform_int_distribution<std::size_t> pick(0, pool_.size() - 1);
    return reset(pool_[pick(rng_)]);
  }

  JointObservation reset(const AttackScenario& s) {
    if (s.is_attack()) {
      const int idx = net_.inverter_index(s.inverter_id);
      if (idx < 0 || net_.inverters[static_cast<std::size_t>(idx)].kind != InverterKind::GFM)
        throw DomainError("reset: scenario targets inverter " + std::to_string(s.inverter_id) +
                          ", which is not a GFM");
      if (s.t_a < 1 || s.t_a + s.duration > cfg_.episode_len)
        throw DomainError("reset: need t_a >= 1 and t_a + duration <= episode_len");
    }
    scenario_ = s;
    state_ = ss_state_;
    state_.t = 0;
    done_ = false;
    return observe();
  }

  // Builds the full residual vector from per-agent unit actions in [-1, 1].
  SetpointVector residuals(const JointAction& action) const {
    if (static_cast<int>(action.size()) != n_agents())
      throw DomainError("step: expected one action vector per agent");
    SetpointVector res = SetpointVector::zeros(net_.n_inverters());
    for (int a = 0; a < n_agents(); ++a) {
      const auto& u = action[static_cast<std::size_t>(a)];
      if (u.size() != act_dim(a))
        throw DomainError("step: action of agent " + std::to_string(a) + " has wrong dimension");
      if (!u.allFinite()) throw DomainError("step: non-finite action");
      for (int k = 0; k < act_dim(a); ++k)
        res.v(act_index(a)[static_cast<std::size_t>(k)]) = cfg_.action_bound * std::clamp(u(k), -1.0, 1.0);
    }
    return res;
  }

  SetpointVector attack_vector(long t) const {
    SetpointVector att = SetpointVector::zeros(net_.n_inverters());
    if (scenario_.active_at(t)) {
      const int idx = net_.inverter_index(scenario_.inverter_id);
      if (scenario_.channel == AttackChannel::Voltage)
        att.v(idx) = scenario_.magnitude;
      else
        att.p(idx) = scenario_.magnitude;
    }
    return att;
  }

  StepResult step(const JointAction& action) {
    if (done_) throw ProtocolError("step: episode is done; call reset first");
    const SetpointVector res = residuals(action);
    const SetpointVector att = attack_vector(state_.t);
    const SetpointVector sp = compose_setpoints(nominal_, res, att, net_.limits);
    state_ = step_dynamics(state_, sp, net_, cfg_.dt);

    StepResult out;
    out.obs = observe();
    const Eigen::VectorXd flat_v = flatten_voltages(state_.v);
    for (int a = 0; a < n_agents(); ++a) {
      Eigen::VectorXd act_pu(act_dim(a));
      for (int k = 0; k < act_dim(a); ++k) act_pu(k) = res.v(act_index(a)[static_cast<std::size_t>(k)]);
      out.rewards.push_back(reward(gather(flat_v, a), gather(flat_v_ss_, a),
                                   q_weights_[static_cast<std::size_t>(a)], state_.t, scenario_.t_a,
                                   act_pu, cfg_));
    }
    done_ = state_.t >= cfg_.episode_len;
    out.done.assign(static_cast<std::size_t>(n_agents()), done_);
    return out;
  }

  JointObservation observe() const {
    const Eigen::VectorXd norm = normalize_obs(flatten_voltages(state_.v), flat_v_ss_);
    JointObservation obs;
    for (int a = 0; a < n_agents(); ++a) obs.push_back(gather(norm, a));
    return obs;
  }

  // Row-major (bus, phase) flattening; entry b * n_phases + ph.
  Eigen::VectorXd flatten_voltages(const Eigen::MatrixXd& v) const {
    Eigen::VectorXd out(v.size());
    for (Eigen::Index b = 0; b < v.rows(); ++b)
      for (Eigen::Index ph = 0; ph < v.cols(); ++ph) out(b * v.cols() + ph) = v(b, ph);
    return out;
  }

  // True when every bus/phase voltage is inside the recovery band.
  bool in_band() const {
    for (Eigen::Index b = 0; b < state_.v.rows(); ++b)
      for (Eigen::Index ph = 0; ph < state_.v.cols(); ++ph) {
        const double v = state_.v(b, ph), ss = v_ss_(b, ph);
        if (v < cfg_.band_lo * ss || v > cfg_.band_hi * ss) return false;
      }
    return true;
  }

 private:
  Eigen::VectorXd gather(const Eigen::VectorXd& flat, int agent) const {
    const auto& idx = obs_index_[static_cast<std::size_t>(agent)];
    Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) out(static_cast<Eigen::Index>(k)) = flat(idx[k]);
    return out;
  }

  NetworkModel net_;
  EnvConfig cfg_;
  std::mt19937_64 rng_;
  SetpointVector nominal_;
  GridState ss_state_;
  Eigen::MatrixXd v_ss_;
  Eigen::VectorXd flat_v_ss_;
  std::vector<std::vector<int>> obs_index_;
  std::vector<std::vector<int>> act_index_;
  std::vector<Eigen::VectorXd> q_weights_;
  std::vector<AttackScenario> pool_;
  AttackScenario scenario_;
  GridState state_;
  bool done_ = true;
};

}  // namespace fedgrid

#pragma once

// Quasi-static model of coupled microgrids with droop-controlled inverters.
//
// Bus voltages follow a first-order lag toward targets obtained from a
// convex-combination sensitivity map of the inverters' effective voltage
// references. The voltage droop uses reactive powers computed from the
// previous step's voltages, so every step is explicit.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <set>
#include <string>
#include <vector>

#include "fedgrid/errors.hpp"

namespace fedgrid {

enum class InverterKind { GFM, GFL };

struct InverterSpec {
  int id = 0;       // label used by scenarios and files
  int mg_id = 0;    // owning microgrid, 0-based
  int bus = 0;      // 0-based bus index
  InverterKind kind = InverterKind::GFL;
  double rating_kw = 1.0;
  double m_p = 0.01;  // pu frequency per pu active power
  double m_q = 0.05;  // pu voltage per pu reactive power
  double omega_nom = 1.0;
  double p_set_nom = 0.0;
  double v_set_nom = 1.0;
  double q_nom = 0.0;
};

struct SetpointLimits {
  double p_min = 0.0;
  double p_max = 1.2;
  double v_min = 0.8;
  double v_max = 1.2;
};

struct NetworkModel {
  int n_buses = 0;
  int n_phases = 3;
  std::vector<InverterSpec> inverters;
  Eigen::MatrixXd sensitivity;   // M x N, rows are convex weights
  Eigen::MatrixXd coupling;      // M x M, symmetric reactive-flow coupling
  Eigen::VectorXd load_offset;   // M, pu voltage depression
  std::vector<double> phase_load_scale;  // per phase multiplier of load_offset
  std::vector<int> mg_of_bus;    // M, 0-based microgrid of each bus
  double tau = 1.0;              // seconds
  SetpointLimits limits;

  int n_inverters() const { return static_cast<int>(inverters.size()); }

  int n_microgrids() const {
    int n = 0;
    for (int mg : mg_of_bus) n = std::max(n, mg + 1);
    return n;
  }

  std::vector<int> buses_of_mg(int mg) const {
    std::vector<int> out;
    for (int b = 0; b < n_buses; ++b)
      if (mg_of_bus[static_cast<std::size_t>(b)] == mg) out.push_back(b);
    return out;
  }

  std::vector<int> gfm_indices() const {
    std::vector<int> out;
    for (int i = 0; i < n_inverters(); ++i)
      if (inverters[static_cast<std::size_t>(i)].kind == InverterKind::GFM) out.push_back(i);
    return out;
  }

  // GFM inverter indices owned by one microgrid, in inverter order.
  std::vector<int> gfm_indices_of_mg(int mg) const {
    std::vector<int> out;
    for (int i : gfm_indices())
      if (inverters[static_cast<std::size_t>(i)].mg_id == mg) out.push_back(i);
    return out;
  }

  int inverter_index(int id) const {
    for (int i = 0; i < n_inverters(); ++i)
      if (inverters[static_cast<std::size_t>(i)].id == id) return i;
    return -1;
  }

  void validate() const;
};

struct GridState {
  Eigen::MatrixXd v;  // M x n_phases bus voltage magnitudes, pu
  Eigen::VectorXd q;  // N inverter reactive powers, pu
  Eigen::VectorXd p;  // N inverter active powers, pu
  double omega = 1.0;
  long t = 0;
};

struct SetpointVector {
  Eigen::VectorXd p;
  Eigen::VectorXd v;

  static SetpointVector zeros(int n) {
    return {Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n)};
  }
  int size() const { return static_cast<int>(v.size()); }
};

inline double droop_frequency_ref(const InverterSpec& spec, double p, double p_set_eff) {
  return spec.omega_nom - spec.m_p * (p - p_set_eff);
}

inline double droop_voltage_ref(const InverterSpec& spec, double q, double v_set_eff) {
  return v_set_eff - spec.m_q * (q - spec.q_nom);
}

inline SetpointVector nominal_setpoints(const NetworkModel& net) {
  const int n = net.n_inverters();
  SetpointVector s{Eigen::VectorXd(n), Eigen::VectorXd(n)};
  for (int i = 0; i < n; ++i) {
    s.p(i) = net.inverters[static_cast<std::size_t>(i)].p_set_nom;
    s.v(i) = net.inverters[static_cast<std::size_t>(i)].v_set_nom;
  }
  return s;
}

inline SetpointVector clamp_setpoints(SetpointVector s, const SetpointLimits& lim) {
  s.p = s.p.cwiseMax(lim.p_min).cwiseMin(lim.p_max);
  s.v = s.v.cwiseMax(lim.v_min).cwiseMin(lim.v_max);
  return s;
}

// Effective set-points: nominal + resilient residual + attack, then limited.
inline SetpointVector compose_setpoints(const SetpointVector& nominal, const SetpointVector& res,
                                        const SetpointVector& attack,
                                        const SetpointLimits& lim = {}) {
  const auto n = nominal.v.size();
  if (nominal.p.size() != n || res.p.size() != n || res.v.size() != n || attack.p.size() != n ||
      attack.v.size() != n)
    throw DomainError("compose_setpoints: set-point vectors must all have length " +
                      std::to_string(n));
  SetpointVector out{nominal.p + res.p + attack.p, nominal.v + res.v + attack.v};
  if (!out.p.allFinite() || !out.v.allFinite())
    throw DomainError("compose_setpoints: non-finite set-point");
  return clamp_setpoints(std::move(out), lim);
}

inline Eigen::VectorXd solve_targets(const NetworkModel& net, const Eigen::VectorXd& v_eff,
                                     double load_scale) {
  if (net.sensitivity.cols() != v_eff.size() || net.sensitivity.rows() != net.load_offset.size())
    throw DomainError("solve_targets: dimension mismatch (G is " +
                      std::to_string(net.sensitivity.rows()) + "x" +
                      std::to_string(net.sensitivity.cols()) + ", v_eff has " +
                      std::to_string(v_eff.size()) + ")");
  if (!v_eff.allFinite()) throw DomainError("solve_targets: non-finite reference");
  return net.sensitivity * v_eff - load_scale * net.load_offset;
}

// Reactive injections from bus-mean voltages: Q_i = sum_j B(bus_i, j) (V_bus_i - V_j).
inline Eigen::VectorXd reactive_powers(const NetworkModel& net, const Eigen::MatrixXd& v) {
  const Eigen::VectorXd bus_v = v.rowwise().mean();
  Eigen::VectorXd q(net.n_inverters());
  for (int i = 0; i < net.n_inverters(); ++i) {
    const int bi = net.inverters[static_cast<std::size_t>(i)].bus;
    double acc = 0.0;
    for (int j = 0; j < net.n_buses; ++j) acc += net.coupling(bi, j) * (bus_v(bi) - bus_v(j));
    q(i) = acc;
  }
  return q;
}

namespace detail {

// Droop power sharing: GFLs hold their set-points, GFMs pick up the mismatch
// against the nominal load at a common frequency deviation.
inline Eigen::VectorXd share_active_power(const NetworkModel& net, const Eigen::VectorXd& p_set) {
  double load_kw = 0.0, supply_kw = 0.0;
  for (int i = 0; i < net.n_inverters(); ++i) {
    const auto& inv = net.inverters[static_cast<std::size_t>(i)];
    load_kw += inv.rating_kw * inv.p_set_nom;
    supply_kw += inv.rating_kw * p_set(i);
  }
  const double mismatch_kw = load_kw - supply_kw;
  Eigen::VectorXd p = p_set;

  double stiff = 0.0;     // sum rating / m_p over droop GFMs
  double iso_kw = 0.0;    // rating of isochronous GFMs
  for (const auto& inv : net.inverters) {
    if (inv.kind != InverterKind::GFM) continue;
    if (inv.m_p > 0.0)
      stiff += inv.rating_kw / inv.m_p;
    else
      iso_kw += inv.rating_kw;
  }
  for (int i = 0; i < net.n_inverters(); ++i) {
    const auto& inv = net.inverters[static_cast<std::size_t>(i)];
    if (inv.kind != InverterKind::GFM) continue;
    if (iso_kw > 0.0) {
      if (inv.m_p == 0.0) p(i) += mismatch_kw / iso_kw;
    } else if (stiff > 0.0) {
      p(i) += mismatch_kw / stiff / inv.m_p;
    }
  }
  return p;
}

}  // namespace detail

inline GridState initial_state(const NetworkModel& net, double v0 = 1.0) {
  GridState s;
  s.v = Eigen::MatrixXd::Constant(net.n_buses, net.n_phases, v0);
  s.q = Eigen::VectorXd::Zero(net.n_inverters());
  for (int i = 0; i < net.n_inverters(); ++i) s.q(i) = net.inverters[static_cast<std::size_t>(i)].q_nom;
  s.p = nominal_setpoints(net).p;
  s.omega = 1.0;
  s.t = 0;
  return s;
}

inline GridState step_dynamics(const GridState& state, const SetpointVector& setpoints,
                               const NetworkModel& net, double dt) {
  if (!(dt > 0.0) || dt / net.tau > 1.0)
    throw DomainError("step_dynamics: need 0 < dt <= tau");
  if (setpoints.size() != net.n_inverters() || setpoints.p.size() != net.n_inverters())
    throw DomainError("step_dynamics: set-point length does not match inverter count");
  if (state.v.rows() != net.n_buses || state.v.cols() != net.n_phases)
    throw DomainError("step_dynamics: state voltage shape does not match network");
  const SetpointVector sp = clamp_setpoints(setpoints, net.limits);

  GridState next;
  next.q = reactive_powers(net, state.v);
  Eigen::VectorXd v_eff(net.n_inverters());
  for (int i = 0; i < net.n_inverters(); ++i)
    v_eff(i) = droop_voltage_ref(net.inverters[static_cast<std::size_t>(i)], next.q(i), sp.v(i));

  const double alpha = dt / net.tau;
  next.v = state.v;
  for (int ph = 0; ph < net.n_phases; ++ph) {
    const Eigen::VectorXd target =
        solve_targets(net, v_eff, net.phase_load_scale[static_cast<std::size_t>(ph)]);
    next.v.col(ph) += alpha * (target - state.v.col(ph));
  }

  next.p = detail::share_active_power(net, sp.p);
  double w_sum = 0.0, omega_acc = 0.0;
  for (int i = 0; i < net.n_inverters(); ++i) {
    const auto& inv = net.inverters[static_cast<std::size_t>(i)];
    if (inv.kind != InverterKind::GFM) continue;
    omega_acc += inv.rating_kw * droop_frequency_ref(inv, next.p(i), sp.p(i));
    w_sum += inv.rating_kw;
  }
  next.omega = w_sum > 0.0 ? omega_acc / w_sum : state.omega;
  next.t = state.t + 1;
  return next;
}

inline constexpr double kSteadyStateTol = 1e-8;
inline constexpr int kSteadyStateMaxIter = 10000;

struct SteadyStateResult {
  GridState state;
  int iterations = 0;
};

// Iterates the dynamics at dt = tau with nominal set-points until the largest
// voltage change drops below tol.
inline SteadyStateResult steady_state_from(const NetworkModel& net, const SetpointVector& nominal,
                                           GridState start, double tol = kSteadyStateTol,
                                           int max_iter = kSteadyStateMaxIter) {
  GridState s = std::move(start);
  for (int it = 1; it <= max_iter; ++it) {
    GridState n = step_dynamics(s, nominal, net, net.tau);
    const double dv = (n.v - s.v).cwiseAbs().maxCoeff();
    if (!std::isfinite(dv)) break;
    s = std::move(n);
    if (dv < tol) {
      s.t = 0;
      return {std::move(s), it};
    }
  }
  throw ConvergenceError("compute_steady_state: no convergence within " +
                         std::to_string(max_iter) + " iterations");
}

inline Eigen::MatrixXd compute_steady_state(const NetworkModel& net, const SetpointVector& nominal) {
  return steady_state_from(net, nominal, initial_state(net)).state.v;
}

inline void NetworkModel::validate() const {
  const int n = n_inverters();
  if (n_buses <= 0 || n <= 0) throw DomainError("network: need at least one bus and one inverter");
  if (n_phases <= 0) throw DomainError("network: n_phases must be positive");
  if (sensitivity.rows() != n_buses || sensitivity.cols() != n)
    throw DomainError("network: sensitivity must be n_buses x n_inverters");
  if (coupling.rows() != n_buses || coupling.cols() != n_buses)
    throw DomainError("network: coupling must be n_buses x n_buses");
  if (load_offset.size() != n_buses) throw DomainError("network: load_offset must have n_buses entries");
  if (static_cast<int>(mg_of_bus.size()) != n_buses)
    throw DomainError("network: mg_of_bus must have n_buses entries");
  if (static_cast<int>(phase_load_scale.size()) != n_phases)
    throw DomainError("network: phase_load_scale must have n_phases entries");
  if (!(tau > 0.0)) throw DomainError("network: tau must be positive");
  for (int b = 0; b < n_buses; ++b) {
    if ((sensitivity.row(b).array() < 0.0).any())
      throw DomainError("network: sensitivity entries must be non-negative");
    if (std::abs(sensitivity.row(b).sum() - 1.0) > 1e-12)
      throw DomainError("network: sensitivity row " + std::to_string(b) + " does not sum to 1");
  }
  if ((coupling - coupling.transpose()).cwiseAbs().maxCoeff() > 0.0)
    throw DomainError("network: coupling must be symmetric");
  for (int i = 0; i < n_buses; ++i)
    for (int j = 0; j < n_buses; ++j)
      if (i != j && coupling(i, j) < 0.0)
        throw DomainError("network: off-diagonal coupling must be non-negative");
  std::set<int> ids;
  for (const auto& inv : inverters) {
    if (!(inv.rating_kw > 0.0) || inv.m_p < 0.0 || inv.m_q < 0.0)
      throw DomainError("network: inverter " + std::to_string(inv.id) +
                        " needs rating > 0 and non-negative droop gains");
    if (inv.bus < 0 || inv.bus >= n_buses)
      throw DomainError("network: inverter " + std::to_string(inv.id) + " bus out of range");
    if (!ids.insert(inv.id).second)
      throw DomainError("network: duplicate inverter id " + std::to_string(inv.id));
  }
  // every pair of microgrids must be electrically coupled through G
  const int n_mg = n_microgrids();
  for (int a = 0; a < n_mg; ++a) {
    for (int b = 0; b < n_mg; ++b) {
      if (a == b) continue;
      bool coupled = false;
      for (int bus : buses_of_mg(a))
        for (int i = 0; i < n; ++i)
          if (inverters[static_cast<std::size_t>(i)].mg_id == b && sensitivity(bus, i) > 0.0)
            coupled = true;
      if (!coupled)
        throw DomainError("network: microgrid " + std::to_string(a) +
                          " has no sensitivity to inverters of microgrid " + std::to_string(b));
    }
  }
}

// Nine buses, three microgrids of three buses. GFMs at buses 1, 4, 7 and
// GFLs at the remaining buses (1-based labels).
inline NetworkModel default_network() {
  NetworkModel net;
  net.n_buses = 9;
  net.n_phases = 3;
  net.tau = 1.0;
  net.mg_of_bus = {0, 0, 0, 1, 1, 1, 2, 2, 2};
  net.phase_load_scale = {0.998, 1.0, 1.002};
  net.load_offset.resize(9);
  net.load_offset << 0.010, 0.020, 0.025, 0.012, 0.022, 0.028, 0.011, 0.018, 0.024;

  for (int b = 0; b < 9; ++b) {
    InverterSpec inv;
    inv.id = b + 1;
    inv.bus = b;
    inv.mg_id = b / 3;
    inv.kind = (b % 3 == 0) ? InverterKind::GFM : InverterKind::GFL;
    inv.rating_kw = inv.kind == InverterKind::GFM ? 600.0 : 350.0;
    inv.m_p = 0.01;
    inv.m_q = 0.05;
    inv.p_set_nom = 0.85;
    inv.v_set_nom = 1.0;
    inv.q_nom = 0.0;
    net.inverters.push_back(inv);
  }

  net.sensitivity = Eigen::MatrixXd::Zero(9, 9);
  for (int b = 0; b < 9; ++b) {
    const int mg = b / 3;
    for (const auto& inv : net.inverters) {
      double w = 0.0;
      if (inv.mg_id == mg)
        w = inv.kind == InverterKind::GFM ? 0.6 : 0.15;
      else if (inv.kind == InverterKind::GFM)
        w = 0.05;
      net.sensitivity(b, inv.bus) = w;
    }
    net.sensitivity.row(b) /= net.sensitivity.row(b).sum();
  }

  net.coupling = Eigen::MatrixXd::Zero(9, 9);
  auto link = [&](int a, int b, double w) {
    net.coupling(a, b) = w;
    net.coupling(b, a) = w;
  };
  for (int mg = 0; mg < 3; ++mg) {
    link(3 * mg, 3 * mg + 1, 1.0);
    link(3 * mg + 1, 3 * mg + 2, 1.0);
  }
  // tie lines
  link(2, 3, 0.5);
  link(5, 6, 0.5);
  link(8, 0, 0.5);
  return net;
}

}  // namespace fedgrid

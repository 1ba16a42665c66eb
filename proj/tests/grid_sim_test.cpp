#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fedgrid/errors.hpp"
#include "fedgrid/grid_sim.hpp"
#include "test_networks.hpp"

using namespace fedgrid;

namespace {

InverterSpec spec_with(double m_p, double m_q) {
  InverterSpec s;
  s.m_p = m_p;
  s.m_q = m_q;
  s.omega_nom = 1.0;
  s.q_nom = 0.1;
  return s;
}

// Plain loops, no Eigen products.
Eigen::VectorXd dense_matvec_oracle(const NetworkModel& net, const Eigen::VectorXd& v, double load) {
  Eigen::VectorXd out(net.n_buses);
  for (int r = 0; r < net.n_buses; ++r) {
    double acc = 0.0;
    for (int c = 0; c < net.n_inverters(); ++c) acc += net.sensitivity(r, c) * v(c);
    out(r) = acc - load * net.load_offset(r);
  }
  return out;
}

}  // namespace

TEST(Droop, FrequencyZeroDeviation) {
  EXPECT_DOUBLE_EQ(droop_frequency_ref(spec_with(0.01, 0.05), 0.7, 0.7), 1.0);
}

TEST(Droop, FrequencyZeroGain) {
  EXPECT_DOUBLE_EQ(droop_frequency_ref(spec_with(0.0, 0.05), 1.2, 0.5), 1.0);
}

TEST(Droop, FrequencyHandValue) {
  EXPECT_NEAR(droop_frequency_ref(spec_with(0.01, 0.05), 0.9, 0.4), 0.995, 1e-15);
}

TEST(Droop, VoltageZeroDeviation) {
  EXPECT_DOUBLE_EQ(droop_voltage_ref(spec_with(0.01, 0.05), 0.1, 1.0), 1.0);
}

TEST(Droop, VoltageZeroGain) {
  EXPECT_DOUBLE_EQ(droop_voltage_ref(spec_with(0.01, 0.0), 0.5, 1.0), 1.0);
}

TEST(Droop, VoltageHandValue) {
  EXPECT_NEAR(droop_voltage_ref(spec_with(0.01, 0.05), 0.3, 1.0), 0.99, 1e-15);
}

TEST(Droop, StrictlyMonotoneInDeviation) {
  const auto s = spec_with(0.01, 0.05);
  for (double x = -0.5; x < 0.5; x += 0.05) {
    EXPECT_LT(droop_frequency_ref(s, x + 0.01, 0.0), droop_frequency_ref(s, x, 0.0));
    EXPECT_LT(droop_voltage_ref(s, x + 0.01, 1.0), droop_voltage_ref(s, x, 1.0));
  }
}

TEST(ComposeSetpoints, ZeroResidualAndAttackIsIdentity) {
  const auto net = default_network();
  const auto nom = nominal_setpoints(net);
  const auto z = SetpointVector::zeros(net.n_inverters());
  const auto out = compose_setpoints(nom, z, z, net.limits);
  EXPECT_EQ(out.v, nom.v);
  EXPECT_EQ(out.p, nom.p);
}

TEST(ComposeSetpoints, ElementwiseSum) {
  SetpointVector nom{Eigen::VectorXd::Constant(1, 0.5), Eigen::VectorXd::Constant(1, 1.00)};
  SetpointVector res{Eigen::VectorXd::Zero(1), Eigen::VectorXd::Constant(1, 0.02)};
  SetpointVector att{Eigen::VectorXd::Zero(1), Eigen::VectorXd::Constant(1, -0.05)};
  EXPECT_NEAR(compose_setpoints(nom, res, att).v(0), 0.97, 1e-15);
}

TEST(ComposeSetpoints, Commutative) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  const auto net = default_network();
  const auto nom = nominal_setpoints(net);
  auto r = SetpointVector::zeros(net.n_inverters()), a = r;
  for (int i = 0; i < net.n_inverters(); ++i) {
    r.v(i) = u(rng);
    a.v(i) = u(rng);
    r.p(i) = u(rng);
    a.p(i) = u(rng);
  }
  const auto x = compose_setpoints(nom, r, a, net.limits), y = compose_setpoints(nom, a, r, net.limits);
  EXPECT_TRUE(x.v.isApprox(y.v, 1e-15));
  EXPECT_TRUE(x.p.isApprox(y.p, 1e-15));
}

TEST(ComposeSetpoints, LimiterClamps) {
  SetpointVector nom{Eigen::VectorXd::Constant(1, 1.1), Eigen::VectorXd::Constant(1, 1.15)};
  SetpointVector res{Eigen::VectorXd::Constant(1, 0.5), Eigen::VectorXd::Constant(1, 0.2)};
  const auto z = SetpointVector::zeros(1);
  const auto out = compose_setpoints(nom, res, z);
  EXPECT_DOUBLE_EQ(out.v(0), 1.2);
  EXPECT_DOUBLE_EQ(out.p(0), 1.2);
}

TEST(ComposeSetpoints, RejectsNonFinite) {
  SetpointVector nom{Eigen::VectorXd::Constant(1, 0.5), Eigen::VectorXd::Constant(1, 1.0)};
  auto bad = SetpointVector::zeros(1);
  bad.v(0) = std::nan("");
  EXPECT_THROW(compose_setpoints(nom, bad, SetpointVector::zeros(1)), DomainError);
  bad.v(0) = 0.0;
  bad.p(0) = INFINITY;
  EXPECT_THROW(compose_setpoints(nom, SetpointVector::zeros(1), bad), DomainError);
}

TEST(SolveTargets, UniformReferencesNoLoad) {
  const auto net = default_network();
  const auto t = solve_targets(net, Eigen::VectorXd::Ones(net.n_inverters()), 0.0);
  for (Eigen::Index i = 0; i < t.size(); ++i) EXPECT_NEAR(t(i), 1.0, 1e-15);
}

TEST(SolveTargets, SingleBusIdentity) {
  const auto net = testnets::single_bus_net();
  EXPECT_DOUBLE_EQ(solve_targets(net, Eigen::VectorXd::Constant(1, 0.97), 0.0)(0), 0.97);
}

TEST(SolveTargets, MatchesDenseOracle) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.8, 1.2), l(0.0, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    const auto net = testnets::random_sensitivity_net(rng);
    Eigen::VectorXd v(net.n_inverters());
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = u(rng);
    const double load = l(rng);
    const Eigen::VectorXd got = solve_targets(net, v, load);
    const Eigen::VectorXd want = dense_matvec_oracle(net, v, load);
    EXPECT_LE((got - want).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(SolveTargets, BoundedByConvexHull) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.8, 1.2);
  const auto net = testnets::random_sensitivity_net(rng);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::VectorXd v(net.n_inverters());
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = u(rng);
    const Eigen::VectorXd t = solve_targets(net, v, 1.0);
    for (Eigen::Index b = 0; b < t.size(); ++b) {
      EXPECT_GE(t(b), v.minCoeff() - net.load_offset(b) - 1e-12);
      EXPECT_LE(t(b), v.maxCoeff() + 1e-12);
    }
  }
}

TEST(SolveTargets, DimensionMismatch) {
  const auto net = default_network();
  EXPECT_THROW(solve_targets(net, Eigen::VectorXd::Ones(3), 0.0), DomainError);
}

TEST(StepDynamics, LagArithmetic) {
  // V = 1.0, target 0.9, dt/tau = 0.5 -> 0.95.
  auto net = testnets::single_bus_net();
  GridState s = initial_state(net, 1.0);
  SetpointVector sp = nominal_setpoints(net);
  sp.v(0) = 0.9;
  const GridState n = step_dynamics(s, sp, net, 0.5);
  EXPECT_NEAR(n.v(0, 0), 0.95, 1e-15);
  EXPECT_EQ(n.t, 1);
}

TEST(StepDynamics, FixedPointOnlyAdvancesTime) {
  const auto net = default_network();
  const auto nom = nominal_setpoints(net);
  GridState s = steady_state_from(net, nom, initial_state(net), 1e-15, 100000).state;
  s.q = reactive_powers(net, s.v);
  const GridState n = step_dynamics(s, nom, net, 0.25);
  EXPECT_LE((n.v - s.v).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_EQ(n.t, s.t + 1);
}

TEST(StepDynamics, ContractionToTarget) {
  auto net = testnets::single_bus_net();
  GridState s = initial_state(net, 1.0);
  SetpointVector sp = nominal_setpoints(net);
  sp.v(0) = 0.93;
  double prev = std::abs(s.v(0, 0) - 0.93);
  for (int k = 0; k < 200 && prev >= 1e-8; ++k) {
    s = step_dynamics(s, sp, net, 0.25);
    const double err = std::abs(s.v(0, 0) - 0.93);
    EXPECT_LT(err, prev);
    prev = err;
  }
  EXPECT_LT(prev, 1e-8);
}

TEST(StepDynamics, Deterministic) {
  const auto net = default_network();
  auto sp = nominal_setpoints(net);
  sp.v(0) += 0.07;
  const GridState s = initial_state(net, 0.98);
  const GridState a = step_dynamics(s, sp, net, 0.25), b = step_dynamics(s, sp, net, 0.25);
  EXPECT_EQ(a.v, b.v);
  EXPECT_EQ(a.q, b.q);
  EXPECT_EQ(a.p, b.p);
  EXPECT_EQ(a.omega, b.omega);
}

TEST(StepDynamics, ReactivePowerUsesPreviousVoltages) {
  const auto net = default_network();
  GridState s = initial_state(net, 1.0);
  s.v(2, 0) = 0.9;
  const GridState n = step_dynamics(s, nominal_setpoints(net), net, 0.25);
  EXPECT_TRUE(n.q.isApprox(reactive_powers(net, s.v)));
}

TEST(StepDynamics, FrequencyDropsWhenSupplyFallsShort) {
  const auto net = default_network();
  auto sp = nominal_setpoints(net);
  const GridState s = initial_state(net);
  EXPECT_NEAR(step_dynamics(s, sp, net, 0.25).omega, 1.0, 1e-12);
  sp.p(net.inverter_index(2)) -= 0.2;  // a GFL curtails output
  EXPECT_LT(step_dynamics(s, sp, net, 0.25).omega, 1.0);
}

TEST(StepDynamics, RejectsBadTimestep) {
  const auto net = default_network();
  const auto s = initial_state(net);
  EXPECT_THROW(step_dynamics(s, nominal_setpoints(net), net, 0.0), DomainError);
  EXPECT_THROW(step_dynamics(s, nominal_setpoints(net), net, 1.5), DomainError);
}

TEST(SteadyState, UniformNoLoad) {
  auto net = testnets::single_bus_net();
  const auto v = compute_steady_state(net, nominal_setpoints(net));
  EXPECT_NEAR(v(0, 0), 1.0, 1e-12);
}

TEST(SteadyState, IsVerifiedFixedPoint) {
  const auto net = default_network();
  const auto nom = nominal_setpoints(net);
  const auto r = steady_state_from(net, nom, initial_state(net));
  EXPECT_LT(r.iterations, kSteadyStateMaxIter);
  const GridState again = step_dynamics(r.state, nom, net, net.tau);
  EXPECT_LE((again.v - r.state.v).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(SteadyState, IndependentOfStartingState) {
  const auto net = default_network();
  const auto nom = nominal_setpoints(net);
  const auto a = steady_state_from(net, nom, initial_state(net, 1.0)).state.v;
  const auto b = steady_state_from(net, nom, initial_state(net, 0.9)).state.v;
  const auto c = steady_state_from(net, nom, initial_state(net, 1.1)).state.v;
  EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LE((a - c).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(SteadyState, ConvergenceFailureIsReported) {
  const auto net = default_network();
  EXPECT_THROW(steady_state_from(net, nominal_setpoints(net), initial_state(net, 0.5), 1e-8, 2),
               ConvergenceError);
}

TEST(DefaultNetwork, Shape) {
  const auto net = default_network();
  EXPECT_NO_THROW(net.validate());
  EXPECT_EQ(net.n_buses, 9);
  EXPECT_EQ(net.n_phases, 3);
  EXPECT_EQ(net.n_microgrids(), 3);
  for (int mg = 0; mg < 3; ++mg) {
    EXPECT_EQ(net.gfm_indices_of_mg(mg).size(), 1u);
    int gfl = 0;
    for (const auto& inv : net.inverters) gfl += inv.mg_id == mg && inv.kind == InverterKind::GFL;
    EXPECT_EQ(gfl, 2);
  }
  // GFMs at buses 1, 4, 7 (1-based).
  std::vector<int> gfm_buses;
  for (int i : net.gfm_indices()) gfm_buses.push_back(net.inverters[static_cast<std::size_t>(i)].bus);
  EXPECT_EQ(gfm_buses, (std::vector<int>{0, 3, 6}));
  for (const auto& inv : net.inverters) {
    EXPECT_DOUBLE_EQ(inv.m_p, 0.01);
    EXPECT_DOUBLE_EQ(inv.m_q, 0.05);
  }
}

TEST(DefaultNetwork, CrossMicrogridCouplingExists) {
  const auto net = default_network();
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) {
      if (a == b) continue;
      bool coupled = false;
      for (int bus : net.buses_of_mg(a))
        for (int i = 0; i < net.n_inverters(); ++i)
          coupled |= net.inverters[static_cast<std::size_t>(i)].mg_id == b && net.sensitivity(bus, i) > 0.0;
      EXPECT_TRUE(coupled) << "mg " << a << " <- mg " << b;
    }
}

TEST(NetworkValidate, RejectsNonConvexRows) {
  auto net = default_network();
  net.sensitivity(0, 0) += 0.1;
  EXPECT_THROW(net.validate(), DomainError);
  net = default_network();
  // Row still sums to 1, but one weight is negative.
  net.sensitivity(0, 1) += net.sensitivity(0, 0) + 0.1;
  net.sensitivity(0, 0) = -0.1;
  EXPECT_THROW(net.validate(), DomainError);
}

TEST(NetworkValidate, RejectsAsymmetricCoupling) {
  auto net = default_network();
  net.coupling(0, 1) += 0.3;
  EXPECT_THROW(net.validate(), DomainError);
}

TEST(NetworkValidate, RejectsNonPositiveRating) {
  auto net = default_network();
  net.inverters[0].rating_kw = 0.0;
  EXPECT_THROW(net.validate(), DomainError);
}

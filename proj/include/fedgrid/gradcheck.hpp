#pragma once

// Central finite-difference checks of the hand-written gradients: MLP
// backward, critic regression loss and the fixed-noise policy objective.
// Each suite draws random networks; trials whose inputs land within a small
// margin of a ReLU kink (or a critic tie) are redrawn, since finite
// differences are not a valid oracle there.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "fedgrid/mlp.hpp"
#include "fedgrid/sac.hpp"

namespace fedgrid {

struct GradcheckOptions {
  int trials = 20;
  double step = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 20240611;
  bool corrupt_backward = false;  // test hook: perturbs one analytic entry
};

struct GradcheckLine {
  std::string name;
  int trials = 0;
  std::size_t entries = 0;
  double max_rel_error = 0.0;
  bool pass = false;
};

struct GradcheckReport {
  std::vector<GradcheckLine> lines;
  bool ok() const {
    return std::all_of(lines.begin(), lines.end(), [](const GradcheckLine& l) { return l.pass; });
  }
};

namespace gc_detail {

inline constexpr double kKinkMargin = 1e-3;

inline double rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

inline Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n01;
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * n01(rng);
  return m;
}

inline bool near_kink(const nn::Mlp& net, const Eigen::MatrixXd& x) {
  nn::MlpCache cache;
  nn::mlp_forward(net, x, &cache);
  for (std::size_t k = 0; k + 1 < cache.pre.size(); ++k)
    if ((cache.pre[k].array().abs() < kKinkMargin).any()) return true;
  return false;
}

inline nn::Mlp random_net(int in, int out, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> width(3, 12);
  return nn::Mlp({in, width(rng), width(rng), out}, rng);
}

// Compares `analytic` against central differences of `loss` over every
// entry of `params` (perturbed in place and restored).
inline double compare(nn::Mlp& net, const nn::LayerSet& analytic, const std::function<double()>& loss,
                      double h, std::size_t& entries) {
  double worst = 0.0;
  auto& layers = net.mutable_layers();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    auto probe = [&](double* p, double g) {
      const double keep = *p;
      *p = keep + h;
      const double up = loss();
      *p = keep - h;
      const double down = loss();
      *p = keep;
      worst = std::max(worst, rel_error(g, (up - down) / (2.0 * h)));
      ++entries;
    };
    for (Eigen::Index i = 0; i < layers[k].w.size(); ++i) probe(layers[k].w.data() + i, analytic[k].w.data()[i]);
    for (Eigen::Index i = 0; i < layers[k].b.size(); ++i) probe(layers[k].b.data() + i, analytic[k].b.data()[i]);
  }
  return worst;
}

inline void corrupt(nn::LayerSet& g) { g.front().w(0, 0) += 1e-2 * (1.0 + std::abs(g.front().w(0, 0))); }

}  // namespace gc_detail

// Backward of a random MLP under the scalar loss sum(upstream .* output);
// also checks the input gradient.
inline GradcheckLine gradcheck_mlp(const GradcheckOptions& opt) {
  using namespace gc_detail;
  std::mt19937_64 rng(opt.seed);
  GradcheckLine line{"mlp_backward", 0, 0, 0.0, false};
  std::uniform_int_distribution<int> dim(1, 6);
  while (line.trials < opt.trials) {
    const int in = dim(rng), out = dim(rng), batch = dim(rng);
    nn::Mlp net = random_net(in, out, rng);
    Eigen::MatrixXd x = random_matrix(in, batch, rng);
    if (near_kink(net, x)) continue;
    const Eigen::MatrixXd up = random_matrix(out, batch, rng);
    nn::MlpCache cache;
    nn::mlp_forward(net, x, &cache);
    nn::Gradients g = nn::mlp_backward(net, cache, up);
    if (opt.corrupt_backward) corrupt(g.params);
    auto loss = [&] { return (nn::mlp_forward(net, x).array() * up.array()).sum(); };
    line.max_rel_error = std::max(line.max_rel_error, compare(net, g.params, loss, opt.step, line.entries));
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double keep = x.data()[i];
      x.data()[i] = keep + opt.step;
      const double lu = loss();
      x.data()[i] = keep - opt.step;
      const double ld = loss();
      x.data()[i] = keep;
      line.max_rel_error = std::max(line.max_rel_error, rel_error(g.input.data()[i], (lu - ld) / (2.0 * opt.step)));
      ++line.entries;
    }
    ++line.trials;
  }
  line.pass = line.max_rel_error < opt.tolerance;
  return line;
}

inline GradcheckLine gradcheck_critic_loss(const GradcheckOptions& opt) {
  using namespace gc_detail;
  std::mt19937_64 rng(opt.seed + 1);
  GradcheckLine line{"critic_loss", 0, 0, 0.0, false};
  std::uniform_int_distribution<int> dim(1, 6);
  while (line.trials < opt.trials) {
    const int in = dim(rng) + 1, batch = dim(rng) + 1;
    nn::Mlp critic = random_net(in, 1, rng);
    const Eigen::MatrixXd x = random_matrix(in, batch, rng);
    if (near_kink(critic, x)) continue;
    const Eigen::RowVectorXd y = random_matrix(1, batch, rng).row(0);
    sac::LossGrad lg = sac::critic_loss_and_grad(critic, x, y);
    if (opt.corrupt_backward) corrupt(lg.grads);
    auto loss = [&] { return sac::critic_loss_and_grad(critic, x, y).loss; };
    line.max_rel_error = std::max(line.max_rel_error, compare(critic, lg.grads, loss, opt.step, line.entries));
    ++line.trials;
  }
  line.pass = line.max_rel_error < opt.tolerance;
  return line;
}

// Reparameterized policy loss with both critics (clipped double Q) and with
// a single critic, noise held fixed.
inline GradcheckLine gradcheck_policy_objective(const GradcheckOptions& opt) {
  using namespace gc_detail;
  std::mt19937_64 rng(opt.seed + 2);
  GradcheckLine line{"policy_objective", 0, 0, 0.0, false};
  std::uniform_int_distribution<int> dim(1, 4);
  std::uniform_real_distribution<double> zeta_dist(0.0, 0.5);
  while (line.trials < opt.trials) {
    const int obs = dim(rng) + 1, act = dim(rng), batch = dim(rng) + 1;
    nn::Mlp policy = random_net(obs, 2 * act, rng);
    nn::Mlp q1 = random_net(obs + act, 1, rng);
    nn::Mlp q2 = random_net(obs + act, 1, rng);
    const Eigen::MatrixXd feat = random_matrix(obs, batch, rng);
    const Eigen::MatrixXd noise = random_matrix(act, batch, rng);
    const double zeta = zeta_dist(rng);
    std::vector<const nn::Mlp*> critics{&q1, &q2};
    if (line.trials % 2 == 1) critics.pop_back();

    if (near_kink(policy, feat)) continue;
    const Eigen::MatrixXd head = nn::mlp_forward(policy, feat);
    const Eigen::MatrixXd raw_ls = head.bottomRows(act);
    if ((raw_ls.array() < nn::kLogStdMin + kKinkMargin).any() || (raw_ls.array() > nn::kLogStdMax - kKinkMargin).any())
      continue;
    const nn::SquashedBatch s = nn::sample_squashed(head, noise);
    Eigen::MatrixXd x(obs + act, batch);
    x << feat, s.action;
    if (near_kink(q1, x) || near_kink(q2, x)) continue;
    if (critics.size() == 2 &&
        ((nn::mlp_forward(q1, x) - nn::mlp_forward(q2, x)).array().abs() < kKinkMargin).any())
      continue;

    sac::PolicyLossGrad lg = sac::policy_loss_and_grad(policy, critics, feat, noise, zeta);
    if (opt.corrupt_backward) corrupt(lg.grads);
    auto loss = [&] { return sac::policy_loss_and_grad(policy, critics, feat, noise, zeta).loss; };
    line.max_rel_error = std::max(line.max_rel_error, compare(policy, lg.grads, loss, opt.step, line.entries));
    ++line.trials;
  }
  line.pass = line.max_rel_error < opt.tolerance;
  return line;
}

inline GradcheckReport run_gradcheck(const GradcheckOptions& opt = {}) {
  GradcheckReport r;
  r.lines.push_back(gradcheck_mlp(opt));
  r.lines.push_back(gradcheck_critic_loss(opt));
  r.lines.push_back(gradcheck_policy_objective(opt));
  return r;
}

}  // namespace fedgrid

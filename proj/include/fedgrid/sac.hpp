#pragma once

// Per-agent soft actor-critic: replay buffer, entropy-regularized bootstrap
// targets, twin-critic regression, reparameterized policy step and Polyak
// target tracking.

#include <Eigen/Dense>

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "fedgrid/errors.hpp"
#include "fedgrid/mlp.hpp"

namespace fedgrid::sac {

struct Transition {
  Eigen::VectorXd o;
  Eigen::VectorXd u;
  double r = 0.0;
  Eigen::VectorXd o_next;
  double d = 0.0;
};

// Columns of each matrix are transitions.
struct Batch {
  Eigen::MatrixXd o;
  Eigen::MatrixXd u;
  Eigen::RowVectorXd r;
  Eigen::MatrixXd o_next;
  Eigen::RowVectorXd d;
  std::vector<std::size_t> indices;
  std::uint64_t serial = 0;

  Eigen::Index size() const { return r.size(); }
};

inline std::uint64_t next_batch_serial() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 1'000'000) : capacity_(capacity) {
    if (capacity == 0) throw DomainError("ReplayBuffer: capacity must be positive");
  }

  void push(Transition tr) {
    if (tr.d != 0.0 && tr.d != 1.0) throw DomainError("ReplayBuffer: done flag must be 0 or 1");
    if (!data_.empty()) {
      const auto& ref = data_.front();
      if (tr.o.size() != ref.o.size() || tr.u.size() != ref.u.size() || tr.o_next.size() != ref.o_next.size())
        throw DomainError("ReplayBuffer: transition dimensions do not match stored data");
    } else if (tr.o.size() != tr.o_next.size()) {
      throw DomainError("ReplayBuffer: o and o_next dimensions differ");
    }
    if (data_.size() < capacity_) {
      data_.push_back(std::move(tr));
    } else {
      data_[head_] = std::move(tr);
      head_ = (head_ + 1) % capacity_;
    }
    ++inserted_;
  }

  // Uniform with replacement.
  Batch sample(std::size_t n, std::mt19937_64& rng) const {
    if (data_.empty()) throw ProtocolError("ReplayBuffer: cannot sample from an empty buffer");
    std::uniform_int_distribution<std::size_t> pick(0, data_.size() - 1);
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = pick(rng);
    return gather(idx);
  }

  Batch gather(const std::vector<std::size_t>& idx) const {
    const auto& ref = data_.front();
    const auto n = static_cast<Eigen::Index>(idx.size());
    Batch b;
    b.o.resize(ref.o.size(), n);
    b.u.resize(ref.u.size(), n);
    b.o_next.resize(ref.o_next.size(), n);
    b.r.resize(n);
    b.d.resize(n);
    for (Eigen::Index c = 0; c < n; ++c) {
      const auto& t = data_.at(idx[static_cast<std::size_t>(c)]);
      b.o.col(c) = t.o;
      b.u.col(c) = t.u;
      b.o_next.col(c) = t.o_next;
      b.r(c) = t.r;
      b.d(c) = t.d;
    }
    b.indices = idx;
    b.serial = next_batch_serial();
    return b;
  }

  // Stored transitions, oldest first.
  std::vector<Transition> contents() const {
    std::vector<Transition> out;
    for (std::size_t k = 0; k < data_.size(); ++k) out.push_back(data_[(head_ + k) % data_.size()]);
    return out;
  }

  const Transition& at(std::size_t slot) const { return data_.at(slot); }
  std::size_t size() const { return data_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::uint64_t inserted() const { return inserted_; }

 private:
  std::size_t capacity_;
  std::vector<Transition> data_;
  std::size_t head_ = 0;
  std::uint64_t inserted_ = 0;
};

struct SacHyper {
  double gamma = 0.99;
  double rho = 0.995;   // target retention: tar <- rho * tar + (1 - rho) * critic
  double zeta = 0.003;  // entropy coefficient
  int batch_size = 256;
  double lr = 3e-4;
  double grad_clip = 10.0;
  int hidden = 64;
  int n_hidden = 2;
  std::size_t buffer_capacity = 1'000'000;
  // Network inputs are (obs - obs_shift) * obs_gain.
  // V/V_ss sits near 1 and the band is 1% wide.
  double obs_shift = 1.0;
  double obs_gain = 100.0;

  void validate() const {
    if (!(gamma > 0.0 && gamma < 1.0)) throw DomainError("sac: gamma must lie in (0, 1)");
    if (!(rho >= 0.0 && rho <= 1.0)) throw DomainError("sac: rho must lie in [0, 1]");
    if (zeta < 0.0) throw DomainError("sac: zeta must be non-negative");
    if (batch_size < 1 || hidden < 1 || n_hidden < 0) throw DomainError("sac: bad network/batch sizes");
    if (!(lr > 0.0) || !(grad_clip > 0.0)) throw DomainError("sac: lr and grad_clip must be positive");
  }
};

// Which critic/target pairs are in use. Pair indices are 1-based.
struct ClipMode {
  enum class Kind { DoubleMin, SinglePair };
  Kind kind = Kind::DoubleMin;
  int pair = 1;

  static ClipMode double_min() { return {Kind::DoubleMin, 1}; }
  static ClipMode single_pair(int k) {
    if (k != 1 && k != 2) throw DomainError("ClipMode: pair index must be 1 or 2");
    return {Kind::SinglePair, k};
  }
  bool uses(int pair_index) const { return kind == Kind::DoubleMin || pair_index == pair; }
  std::string name() const {
    return kind == Kind::DoubleMin ? "double_min" : "single_pair_" + std::to_string(pair);
  }
  friend bool operator==(const ClipMode&, const ClipMode&) = default;
};

enum class UpdateStage { Idle, TargetsComputed, CriticsUpdated, PolicyUpdated };

struct AgentBundle {
  int id = 0;
  int obs_dim = 0;
  int act_dim = 0;
  // V/V_ss sits near 1 and the band is 1% wide.
  double obs_shift = 1.0;
  double obs_gain = 100.0;
  nn::Mlp policy;                 // obs -> (mean, raw log-std)
  std::array<nn::Mlp, 2> critic;  // (obs, action) -> Q
  std::array<nn::Mlp, 2> target;
  nn::OptState policy_opt;
  std::array<nn::OptState, 2> critic_opt;
  ReplayBuffer buffer;
  std::mt19937_64 rng;
  UpdateStage stage = UpdateStage::Idle;

  static AgentBundle create(int id, int obs_dim, int act_dim, const SacHyper& hp, std::uint64_t seed) {
    hp.validate();
    AgentBundle a;
    a.id = id;
    a.obs_dim = obs_dim;
    a.act_dim = act_dim;
    a.obs_shift = hp.obs_shift;
    a.obs_gain = hp.obs_gain;
    a.rng.seed(seed);
    std::vector<int> pol{obs_dim}, crit{obs_dim + act_dim};
    for (int k = 0; k < hp.n_hidden; ++k) {
      pol.push_back(hp.hidden);
      crit.push_back(hp.hidden);
    }
    pol.push_back(2 * act_dim);
    crit.push_back(1);
    a.policy = nn::Mlp(pol, a.rng);
    a.critic[0] = nn::Mlp(crit, a.rng);
    a.critic[1] = nn::Mlp(crit, a.rng);
    a.target[0] = a.critic[0];
    a.target[1] = a.critic[1];
    const nn::AdamConfig adam{hp.lr};
    a.policy_opt = nn::OptState::for_net(a.policy, adam);
    a.critic_opt[0] = nn::OptState::for_net(a.critic[0], adam);
    a.critic_opt[1] = nn::OptState::for_net(a.critic[1], adam);
    a.buffer = ReplayBuffer(hp.buffer_capacity);
    return a;
  }

  Eigen::MatrixXd features(const Eigen::MatrixXd& obs) const {
    return ((obs.array() - obs_shift) * obs_gain).matrix();
  }

  Eigen::MatrixXd critic_input(const Eigen::MatrixXd& obs, const Eigen::MatrixXd& act) const {
    Eigen::MatrixXd x(obs_dim + act_dim, obs.cols());
    x.topRows(obs_dim) = features(obs);
    x.bottomRows(act_dim) = act;
    return x;
  }

  // Unit action in (-1, 1). Deterministic mode returns tanh(mean).
  Eigen::VectorXd act(const Eigen::VectorXd& obs, bool deterministic) {
    const Eigen::MatrixXd head = nn::mlp_forward(policy, features(obs));
    Eigen::MatrixXd noise = Eigen::MatrixXd::Zero(act_dim, 1);
    if (!deterministic) {
      std::normal_distribution<double> n01;
      for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = n01(rng);
    }
    return nn::sample_squashed(head, noise).action.col(0);
  }

  Eigen::VectorXd act_deterministic(const Eigen::VectorXd& obs) const {
    const Eigen::MatrixXd head = nn::mlp_forward(policy, features(obs));
    return head.topRows(act_dim).col(0).array().tanh();
  }

  Eigen::MatrixXd draw_noise(Eigen::Index cols) {
    std::normal_distribution<double> n01;
    Eigen::MatrixXd noise(act_dim, cols);
    for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = n01(rng);
    return noise;
  }
};

struct Targets {
  Eigen::RowVectorXd y;
  std::uint64_t batch_serial = 0;
};

// y = r + gamma (1 - d) (T - zeta log pi(u~|o')), u~ drawn fresh from the
// current policy. T is the min over both target critics, or the selected one.
inline Targets compute_targets(AgentBundle& ag, const Batch& batch, const SacHyper& hp, ClipMode clip,
                               const Eigen::MatrixXd* noise = nullptr) {
  if (batch.size() == 0) throw DomainError("compute_targets: empty batch");
  if (ag.stage != UpdateStage::Idle)
    throw ProtocolError("compute_targets: previous update sequence was not completed");
  const Eigen::MatrixXd head = nn::mlp_forward(ag.policy, ag.features(batch.o_next));
  const Eigen::MatrixXd eps = noise ? *noise : ag.draw_noise(batch.size());
  const nn::SquashedBatch s = nn::sample_squashed(head, eps);
  const Eigen::MatrixXd x = ag.critic_input(batch.o_next, s.action);

  Eigen::RowVectorXd t;
  if (clip.kind == ClipMode::Kind::DoubleMin) {
    const Eigen::MatrixXd t1 = nn::mlp_forward(ag.target[0], x);
    const Eigen::MatrixXd t2 = nn::mlp_forward(ag.target[1], x);
    t = t1.row(0).cwiseMin(t2.row(0));
  } else {
    t = nn::mlp_forward(ag.target[static_cast<std::size_t>(clip.pair - 1)], x).row(0);
  }
  Targets out;
  out.y = batch.r.array() + hp.gamma * (1.0 - batch.d.array()) * (t.array() - hp.zeta * s.log_prob.array());
  out.batch_serial = batch.serial;
  ag.stage = UpdateStage::TargetsComputed;
  return out;
}

struct LossGrad {
  double loss = 0.0;
  nn::LayerSet grads;
};

// Mean squared error of one critic against constant targets.
inline LossGrad critic_loss_and_grad(const nn::Mlp& critic, const Eigen::MatrixXd& input,
                                     const Eigen::RowVectorXd& y) {
  nn::MlpCache cache;
  const Eigen::MatrixXd q = nn::mlp_forward(critic, input, &cache);
  const Eigen::RowVectorXd diff = q.row(0) - y;
  const double n = static_cast<double>(y.size());
  LossGrad out;
  out.loss = diff.squaredNorm() / n;
  out.grads = nn::mlp_backward(critic, cache, (2.0 / n) * diff).params;
  return out;
}

inline std::array<double, 2> update_critics(AgentBundle& ag, const Batch& batch, const Targets& targets,
                                            const SacHyper& hp, ClipMode clip) {
  if (ag.stage != UpdateStage::TargetsComputed)
    throw ProtocolError("update_critics: targets must be computed first");
  if (targets.batch_serial != batch.serial || targets.y.size() != batch.size())
    throw ProtocolError("update_critics: targets were computed for a different batch");
  const Eigen::MatrixXd x = ag.critic_input(batch.o, batch.u);
  std::array<double, 2> losses{std::numeric_limits<double>::quiet_NaN(),
                               std::numeric_limits<double>::quiet_NaN()};
  std::array<LossGrad, 2> lg;
  for (int k = 0; k < 2; ++k) {
    if (!clip.uses(k + 1)) continue;
    lg[static_cast<std::size_t>(k)] = critic_loss_and_grad(ag.critic[static_cast<std::size_t>(k)], x, targets.y);
    if (!std::isfinite(lg[static_cast<std::size_t>(k)].loss)) {
      ag.stage = UpdateStage::Idle;
      throw NumericError("update_critics: non-finite critic loss, update skipped");
    }
  }
  for (int k = 0; k < 2; ++k) {
    if (!clip.uses(k + 1)) continue;
    auto& g = lg[static_cast<std::size_t>(k)];
    nn::clip_global_norm(g.grads, hp.grad_clip);
    nn::opt_step(ag.critic[static_cast<std::size_t>(k)], g.grads, ag.critic_opt[static_cast<std::size_t>(k)]);
    losses[static_cast<std::size_t>(k)] = g.loss;
  }
  ag.stage = UpdateStage::CriticsUpdated;
  return losses;
}

struct PolicyLossGrad {
  double loss = 0.0;
  nn::LayerSet grads;
  Eigen::MatrixXd action;
};

// Loss = mean(zeta * log pi(u~|o) - Q(o, u~)) with u~ = tanh(mean + std * noise),
// Q the min over the given critics. Critic parameters receive no gradient.
inline PolicyLossGrad policy_loss_and_grad(const nn::Mlp& policy, const std::vector<const nn::Mlp*>& critics,
                                           const Eigen::MatrixXd& features, const Eigen::MatrixXd& noise,
                                           double zeta) {
  if (critics.empty()) throw DomainError("policy_loss_and_grad: need at least one critic");
  const Eigen::Index n = features.cols();
  const Eigen::Index obs_rows = features.rows();
  nn::MlpCache pcache;
  const Eigen::MatrixXd head = nn::mlp_forward(policy, features, &pcache);
  const nn::SquashedBatch s = nn::sample_squashed(head, noise);
  const Eigen::Index a = s.action.rows();

  Eigen::MatrixXd x(obs_rows + a, n);
  x.topRows(obs_rows) = features;
  x.bottomRows(a) = s.action;

  std::vector<nn::MlpCache> caches(critics.size());
  std::vector<Eigen::RowVectorXd> qs;
  for (std::size_t k = 0; k < critics.size(); ++k) qs.push_back(nn::mlp_forward(*critics[k], x, &caches[k]).row(0));

  std::vector<int> argmin(static_cast<std::size_t>(n), 0);
  Eigen::RowVectorXd qmin = qs[0];
  for (std::size_t k = 1; k < critics.size(); ++k)
    for (Eigen::Index c = 0; c < n; ++c)
      if (qs[k](c) < qmin(c)) {
        qmin(c) = qs[k](c);
        argmin[static_cast<std::size_t>(c)] = static_cast<int>(k);
      }

  PolicyLossGrad out;
  out.loss = (zeta * s.log_prob - qmin).sum() / static_cast<double>(n);
  out.action = s.action;

  Eigen::MatrixXd d_action = Eigen::MatrixXd::Zero(a, n);
  for (std::size_t k = 0; k < critics.size(); ++k) {
    Eigen::MatrixXd up = Eigen::MatrixXd::Zero(1, n);
    bool any = false;
    for (Eigen::Index c = 0; c < n; ++c)
      if (argmin[static_cast<std::size_t>(c)] == static_cast<int>(k)) {
        up(0, c) = -1.0 / static_cast<double>(n);
        any = true;
      }
    if (!any) continue;
    d_action += nn::mlp_backward(*critics[k], caches[k], up).input.bottomRows(a);
  }
  const Eigen::RowVectorXd d_logp = Eigen::RowVectorXd::Constant(n, zeta / static_cast<double>(n));
  out.grads = nn::mlp_backward(policy, pcache, nn::squashed_head_grad(s, d_action, d_logp)).params;
  return out;
}

inline double update_policy(AgentBundle& ag, const Batch& batch, const SacHyper& hp, ClipMode clip,
                            const Eigen::MatrixXd* noise = nullptr) {
  if (ag.stage != UpdateStage::CriticsUpdated)
    throw ProtocolError("update_policy: critics must be updated first");
  std::vector<const nn::Mlp*> critics;
  for (int k = 0; k < 2; ++k)
    if (clip.uses(k + 1)) critics.push_back(&ag.critic[static_cast<std::size_t>(k)]);
  const Eigen::MatrixXd eps = noise ? *noise : ag.draw_noise(batch.size());
  PolicyLossGrad lg = policy_loss_and_grad(ag.policy, critics, ag.features(batch.o), eps, hp.zeta);
  if (!std::isfinite(lg.loss)) {
    ag.stage = UpdateStage::Idle;
    throw NumericError("update_policy: non-finite policy loss, update skipped");
  }
  nn::clip_global_norm(lg.grads, hp.grad_clip);
  nn::opt_step(ag.policy, lg.grads, ag.policy_opt);
  ag.stage = UpdateStage::PolicyUpdated;
  return lg.loss;
}

// target <- rho * target + (1 - rho) * source
inline void polyak_blend(nn::Mlp& target, const nn::Mlp& source, double rho) {
  if (!target.same_shape(source)) throw DomainError("polyak: target and critic shapes differ");
  auto& t = target.mutable_layers();
  const auto& s = source.layers();
  for (std::size_t k = 0; k < t.size(); ++k) {
    t[k].w = rho * t[k].w + (1.0 - rho) * s[k].w;
    t[k].b = rho * t[k].b + (1.0 - rho) * s[k].b;
  }
}

inline void polyak_update(AgentBundle& ag, double rho, ClipMode clip) {
  if (ag.stage != UpdateStage::PolicyUpdated)
    throw ProtocolError("polyak_update: policy must be updated first");
  for (int k = 0; k < 2; ++k)
    if (clip.uses(k + 1))
      polyak_blend(ag.target[static_cast<std::size_t>(k)], ag.critic[static_cast<std::size_t>(k)], rho);
  ag.stage = UpdateStage::Idle;
}

struct UpdateStats {
  std::array<double, 2> critic_loss{};
  double policy_loss = 0.0;
};

// One full gradient iteration: targets, critics, policy, Polyak.
inline UpdateStats sac_update(AgentBundle& ag, const SacHyper& hp, ClipMode clip) {
  const Batch batch = ag.buffer.sample(static_cast<std::size_t>(hp.batch_size), ag.rng);
  UpdateStats st;
  try {
    const Targets y = compute_targets(ag, batch, hp, clip);
    st.critic_loss = update_critics(ag, batch, y, hp, clip);
    st.policy_loss = update_policy(ag, batch, hp, clip);
    polyak_update(ag, hp.rho, clip);
  } catch (...) {
    ag.stage = UpdateStage::Idle;
    throw;
  }
  return st;
}

}  // namespace fedgrid::sac

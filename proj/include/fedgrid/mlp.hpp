#pragma once

// Multilayer perceptrons with hand-written reverse mode, Adam, and the
// tanh-squashed Gaussian policy head. Batches are stored column-wise: an
// input batch is an (in_dim x batch) matrix.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fedgrid/errors.hpp"

namespace fedgrid::nn {

struct Layer {
  Eigen::MatrixXd w;  // out x in
  Eigen::VectorXd b;  // out
};

using LayerSet = std::vector<Layer>;

namespace detail {
inline std::uint64_t next_stamp() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

// Hidden layers use ReLU, the output layer is linear. Every mutation (and
// every copy) receives a fresh stamp so caches from older parameters are
// detected in backward.
class Mlp {
 public:
  Mlp() = default;

  // Uniform init in +-1/sqrt(fan_in) for weights and biases.
  Mlp(const std::vector<int>& sizes, std::mt19937_64& rng) {
    if (sizes.size() < 2) throw DomainError("Mlp: need at least input and output sizes");
    for (std::size_t k = 0; k + 1 < sizes.size(); ++k) {
      const int in = sizes[k], out = sizes[k + 1];
      if (in <= 0 || out <= 0) throw DomainError("Mlp: layer sizes must be positive");
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      std::uniform_real_distribution<double> u(-bound, bound);
      Layer l{Eigen::MatrixXd(out, in), Eigen::VectorXd(out)};
      for (Eigen::Index i = 0; i < l.w.size(); ++i) l.w.data()[i] = u(rng);
      for (Eigen::Index i = 0; i < l.b.size(); ++i) l.b(i) = u(rng);
      layers_.push_back(std::move(l));
    }
  }

  explicit Mlp(LayerSet layers) : layers_(std::move(layers)) { check_chain(); }

  Mlp(const Mlp& o) : layers_(o.layers_), stamp_(detail::next_stamp()) {}
  Mlp& operator=(const Mlp& o) {
    layers_ = o.layers_;
    stamp_ = detail::next_stamp();
    return *this;
  }
  Mlp(Mlp&&) noexcept = default;
  Mlp& operator=(Mlp&& o) noexcept {
    layers_ = std::move(o.layers_);
    stamp_ = detail::next_stamp();
    return *this;
  }

  const LayerSet& layers() const { return layers_; }
  LayerSet& mutable_layers() {
    stamp_ = detail::next_stamp();
    return layers_;
  }
  std::uint64_t stamp() const { return stamp_; }

  int in_dim() const { return layers_.empty() ? 0 : static_cast<int>(layers_.front().w.cols()); }
  int out_dim() const { return layers_.empty() ? 0 : static_cast<int>(layers_.back().w.rows()); }

  std::size_t n_params() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.w.size() + l.b.size());
    return n;
  }

  bool same_shape(const Mlp& o) const { return same_shape(layers_, o.layers_); }

  static bool same_shape(const LayerSet& a, const LayerSet& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t k = 0; k < a.size(); ++k)
      if (a[k].w.rows() != b[k].w.rows() || a[k].w.cols() != b[k].w.cols() ||
          a[k].b.size() != b[k].b.size())
        return false;
    return true;
  }

 private:
  void check_chain() const {
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      if (layers_[k].b.size() != layers_[k].w.rows())
        throw DomainError("Mlp: bias length does not match weight rows");
      if (k > 0 && layers_[k].w.cols() != layers_[k - 1].w.rows())
        throw DomainError("Mlp: consecutive layer dimensions are incompatible");
    }
  }

  LayerSet layers_;
  std::uint64_t stamp_ = detail::next_stamp();
};

inline LayerSet zeros_like(const LayerSet& ls) {
  LayerSet out;
  out.reserve(ls.size());
  for (const auto& l : ls)
    out.push_back({Eigen::MatrixXd::Zero(l.w.rows(), l.w.cols()), Eigen::VectorXd::Zero(l.b.size())});
  return out;
}

struct MlpCache {
  std::uint64_t stamp = 0;
  std::vector<Eigen::MatrixXd> inputs;  // input to each layer
  std::vector<Eigen::MatrixXd> pre;     // pre-activation of each layer
};

inline Eigen::MatrixXd mlp_forward(const Mlp& net, const Eigen::MatrixXd& x, MlpCache* cache = nullptr) {
  if (net.layers().empty()) throw DomainError("mlp_forward: empty network");
  if (x.rows() != net.in_dim())
    throw DomainError("mlp_forward: input has " + std::to_string(x.rows()) + " rows, network expects " +
                      std::to_string(net.in_dim()));
  const auto& layers = net.layers();
  if (cache) {
    cache->stamp = net.stamp();
    cache->inputs.resize(layers.size());
    cache->pre.resize(layers.size());
  }
  Eigen::MatrixXd h = x;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    Eigen::MatrixXd z = layers[k].w * h;
    z.colwise() += layers[k].b;
    if (cache) {
      cache->inputs[k] = std::move(h);
      cache->pre[k] = z;
    }
    if (k + 1 < layers.size())
      h = z.cwiseMax(0.0);
    else
      h = std::move(z);
  }
  return h;
}

inline Eigen::VectorXd mlp_forward(const Mlp& net, const Eigen::VectorXd& x) {
  return mlp_forward(net, Eigen::MatrixXd(x)).col(0);
}

struct Gradients {
  LayerSet params;
  Eigen::MatrixXd input;
};

// Reverse pass for a cached forward. `upstream` is dLoss/dOutput with the
// same shape as the forward output.
inline Gradients mlp_backward(const Mlp& net, const MlpCache& cache, const Eigen::MatrixXd& upstream) {
  const auto& layers = net.layers();
  if (cache.stamp != net.stamp() || cache.inputs.size() != layers.size())
    throw ProtocolError("mlp_backward: cache does not come from a forward pass of these parameters");
  const Eigen::Index batch = cache.inputs.front().cols();
  if (upstream.rows() != net.out_dim() || upstream.cols() != batch)
    throw DomainError("mlp_backward: upstream gradient shape mismatch");

  Gradients g;
  g.params.resize(layers.size());
  Eigen::MatrixXd delta = upstream;
  for (std::size_t k = layers.size(); k-- > 0;) {
    if (k + 1 < layers.size()) delta.array() *= (cache.pre[k].array() > 0.0).cast<double>();
    g.params[k].w.noalias() = delta * cache.inputs[k].transpose();
    g.params[k].b = delta.rowwise().sum();
    delta = layers[k].w.transpose() * delta;
  }
  g.input = std::move(delta);
  return g;
}

inline double global_norm(const LayerSet& g) {
  double s = 0.0;
  for (const auto& l : g) s += l.w.squaredNorm() + l.b.squaredNorm();
  return std::sqrt(s);
}

inline bool all_finite(const LayerSet& g) {
  for (const auto& l : g)
    if (!l.w.allFinite() || !l.b.allFinite()) return false;
  return true;
}

// Rescales g in place so its global norm is at most max_norm. Returns the
// norm before clipping.
inline double clip_global_norm(LayerSet& g, double max_norm) {
  const double n = global_norm(g);
  if (n > max_norm && n > 0.0) {
    const double s = max_norm / n;
    for (auto& l : g) {
      l.w *= s;
      l.b *= s;
    }
  }
  return n;
}

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptState {
  LayerSet m;
  LayerSet v;
  long step = 0;
  AdamConfig hp;

  static OptState for_net(const Mlp& net, AdamConfig hp = {}) {
    return {zeros_like(net.layers()), zeros_like(net.layers()), 0, hp};
  }
};

// One bias-corrected Adam step. Non-finite gradients leave params and state
// untouched and raise NumericError.
inline void opt_step(Mlp& net, const LayerSet& grads, OptState& opt) {
  if (!Mlp::same_shape(net.layers(), grads) || !Mlp::same_shape(net.layers(), opt.m))
    throw DomainError("opt_step: gradient/state shapes do not match parameters");
  if (!all_finite(grads)) throw NumericError("opt_step: non-finite gradient, update skipped");
  ++opt.step;
  const auto& hp = opt.hp;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(opt.step));
  auto& layers = net.mutable_layers();
  auto update = [&](auto& p, const auto& g, auto& m, auto& v) {
    m = hp.beta1 * m + (1.0 - hp.beta1) * g;
    v = hp.beta2 * v + (1.0 - hp.beta2) * g.cwiseProduct(g);
    p.array() -= hp.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + hp.eps);
  };
  for (std::size_t k = 0; k < layers.size(); ++k) {
    update(layers[k].w, grads[k].w, opt.m[k].w, opt.v[k].w);
    update(layers[k].b, grads[k].b, opt.m[k].b, opt.v[k].b);
  }
}

inline std::vector<double> flatten(const LayerSet& ls) {
  std::vector<double> out;
  for (const auto& l : ls) {
    out.insert(out.end(), l.w.data(), l.w.data() + l.w.size());
    out.insert(out.end(), l.b.data(), l.b.data() + l.b.size());
  }
  return out;
}

inline std::vector<double> flatten(const Mlp& net) { return flatten(net.layers()); }

inline void unflatten(LayerSet& ls, std::span<const double> flat) {
  std::size_t need = 0;
  for (const auto& l : ls) need += static_cast<std::size_t>(l.w.size() + l.b.size());
  if (flat.size() != need)
    throw DomainError("unflatten: expected " + std::to_string(need) + " values, got " +
                      std::to_string(flat.size()));
  std::size_t pos = 0;
  for (auto& l : ls) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), l.w.size(), l.w.data());
    pos += static_cast<std::size_t>(l.w.size());
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), l.b.size(), l.b.data());
    pos += static_cast<std::size_t>(l.b.size());
  }
}

inline void unflatten(Mlp& net, std::span<const double> flat) { unflatten(net.mutable_layers(), flat); }

// ---------------------------------------------------------------------------
// Squashed Gaussian policy head

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;

inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

// log(1 - tanh(x)^2), stable for large |x|.
inline double log1m_tanh_sq(double x) {
  return 2.0 * (std::numbers::ln2 - x - softplus(-2.0 * x));
}

// All quantities are (act_dim x batch) except log_prob (one per column).
struct SquashedBatch {
  Eigen::MatrixXd mean;
  Eigen::MatrixXd log_std;   // after clamping
  Eigen::MatrixXd in_range;  // 1 where the raw log-std was inside the clamp
  Eigen::MatrixXd noise;
  Eigen::MatrixXd pre;       // mean + std * noise
  Eigen::MatrixXd action;    // tanh(pre)
  Eigen::RowVectorXd log_prob;
};

// `head` stacks the mean rows on top of the raw log-std rows.
inline SquashedBatch sample_squashed(const Eigen::MatrixXd& head, const Eigen::MatrixXd& noise) {
  const Eigen::Index a = head.rows() / 2;
  if (head.rows() != 2 * a || noise.rows() != a || noise.cols() != head.cols())
    throw DomainError("sample_squashed: head must be (2*act_dim x batch) and noise (act_dim x batch)");
  constexpr double half_log_2pi = 0.91893853320467274178;
  SquashedBatch s;
  s.mean = head.topRows(a);
  const Eigen::MatrixXd raw = head.bottomRows(a);
  s.log_std = raw.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  s.in_range = ((raw.array() >= kLogStdMin) && (raw.array() <= kLogStdMax)).cast<double>();
  s.noise = noise;
  s.pre = s.mean.array() + s.log_std.array().exp() * noise.array();
  // tanh rounds to +-1 for |pre| > ~19; keep the action strictly inside.
  const double edge = std::nextafter(1.0, 0.0);
  s.action = s.pre.array().tanh().cwiseMax(-edge).cwiseMin(edge);
  s.log_prob.resize(head.cols());
  for (Eigen::Index c = 0; c < head.cols(); ++c) {
    double lp = 0.0;
    for (Eigen::Index d = 0; d < a; ++d)
      lp += -0.5 * noise(d, c) * noise(d, c) - s.log_std(d, c) - half_log_2pi -
            log1m_tanh_sq(s.pre(d, c));
    s.log_prob(c) = lp;
  }
  return s;
}

struct SquashedSample {
  Eigen::VectorXd action;
  double log_prob = 0.0;
};

inline SquashedSample sample_squashed(const Eigen::VectorXd& mean, const Eigen::VectorXd& log_std,
                                      const Eigen::VectorXd& noise) {
  Eigen::MatrixXd head(2 * mean.size(), 1);
  head << mean, log_std;
  const auto s = sample_squashed(head, Eigen::MatrixXd(noise));
  return {s.action.col(0), s.log_prob(0)};
}

// Pulls dLoss/d(action) and dLoss/d(log_prob) back to the raw head output,
// holding the noise fixed (reparameterization).
inline Eigen::MatrixXd squashed_head_grad(const SquashedBatch& s, const Eigen::MatrixXd& d_action,
                                          const Eigen::RowVectorXd& d_log_prob) {
  const Eigen::Index a = s.mean.rows();
  const Eigen::ArrayXXd sigma = s.log_std.array().exp();
  const Eigen::ArrayXXd act = s.action.array();
  // d pre: from the action through tanh, and from log_prob (d logp / d pre = 2 tanh(pre))
  const Eigen::ArrayXXd d_pre =
      d_action.array() * (1.0 - act.square()) + (2.0 * act).rowwise() * d_log_prob.array();
  Eigen::MatrixXd g(2 * a, s.mean.cols());
  g.topRows(a) = d_pre.matrix();
  // d log_std: pre depends on sigma * noise, log_prob has an explicit -log_std
  const Eigen::ArrayXXd d_ls =
      d_pre * sigma * s.noise.array() - Eigen::ArrayXXd::Ones(a, s.mean.cols()).rowwise() * d_log_prob.array();
  g.bottomRows(a) = (d_ls * s.in_range.array()).matrix();
  return g;
}

}  // namespace fedgrid::nn

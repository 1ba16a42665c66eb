#pragma once

// Binary checkpoint of a set of agents.
//
//   "FGCK"                magic
//   u32                   format version
//   u64                   global env step
//   u32 + bytes           config echo (JSON text)
//   u32                   tensor count
//   per tensor: u32 name length, name bytes, u32 rows, u32 cols
//   payload: every tensor's entries, column-major, little-endian IEEE-754 f64
//
// All integers are little-endian. Replay buffers are not stored.

#include <Eigen/Dense>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fedgrid/errors.hpp"
#include "fedgrid/mlp.hpp"
#include "fedgrid/sac.hpp"

namespace fedgrid {

inline constexpr char kCheckpointMagic[4] = {'F', 'G', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint64_t global_step = 0;
  std::string config_echo;
  std::vector<sac::AgentBundle> agents;
};

namespace ckpt_detail {

struct Tensor {
  std::string name;
  Eigen::MatrixXd data;
};

class Writer {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.append(s);
  }
  void raw(const char* p, std::size_t n) { out_.append(p, n); }
  const std::string& data() const { return out_; }

 private:
  // Little-endian regardless of host order.
  void put(std::uint64_t v, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& data) : d_(data) {}

  std::uint64_t uint(std::size_t n) {
    need(n);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(d_[pos_ + i])) << (8 * i);
    pos_ += n;
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = d_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = d_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == d_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > d_.size()) throw FormatError("checkpoint: truncated file");
  }
  const std::string& d_;
  std::size_t pos_ = 0;
};

inline void add_layers(std::vector<Tensor>& out, const std::string& prefix, const nn::LayerSet& ls) {
  for (std::size_t k = 0; k < ls.size(); ++k) {
    out.push_back({prefix + "/l" + std::to_string(k) + "/w", ls[k].w});
    out.push_back({prefix + "/l" + std::to_string(k) + "/b", ls[k].b});
  }
}

inline void add_opt(std::vector<Tensor>& out, const std::string& prefix, const nn::OptState& opt) {
  add_layers(out, prefix + "/m", opt.m);
  add_layers(out, prefix + "/v", opt.v);
  Eigen::MatrixXd scalars(1, 5);
  scalars << static_cast<double>(opt.step), opt.hp.lr, opt.hp.beta1, opt.hp.beta2, opt.hp.eps;
  out.push_back({prefix + "/scalars", scalars});
}

inline std::vector<Tensor> to_tensors(const std::vector<sac::AgentBundle>& agents) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < agents.size(); ++i) {
    const auto& a = agents[i];
    const std::string p = "agent" + std::to_string(i);
    Eigen::MatrixXd meta(1, 5);
    meta << a.id, a.obs_dim, a.act_dim, a.obs_shift, a.obs_gain;
    out.push_back({p + "/meta", meta});
    add_layers(out, p + "/policy", a.policy.layers());
    for (int k = 0; k < 2; ++k) {
      add_layers(out, p + "/critic" + std::to_string(k + 1), a.critic[static_cast<std::size_t>(k)].layers());
      add_layers(out, p + "/target" + std::to_string(k + 1), a.target[static_cast<std::size_t>(k)].layers());
    }
    add_opt(out, p + "/policy_opt", a.policy_opt);
    for (int k = 0; k < 2; ++k)
      add_opt(out, p + "/critic_opt" + std::to_string(k + 1), a.critic_opt[static_cast<std::size_t>(k)]);
  }
  return out;
}

class TensorTable {
 public:
  explicit TensorTable(std::vector<Tensor> ts) {
    for (auto& t : ts) {
      const std::string name = t.name;
      if (!map_.emplace(name, std::move(t.data)).second)
        throw FormatError("checkpoint: duplicate tensor '" + name + "'");
    }
  }
  bool has(const std::string& name) const { return map_.count(name) != 0; }
  const Eigen::MatrixXd& get(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw FormatError("checkpoint: missing tensor '" + name + "'");
    return it->second;
  }

  nn::LayerSet layers(const std::string& prefix) const {
    nn::LayerSet ls;
    for (std::size_t k = 0;; ++k) {
      const std::string base = prefix + "/l" + std::to_string(k);
      if (!has(base + "/w")) break;
      const auto& w = get(base + "/w");
      const auto& b = get(base + "/b");
      if (b.cols() != 1 || b.rows() != w.rows())
        throw FormatError("checkpoint: bias shape mismatch in '" + base + "'");
      ls.push_back({w, b.col(0)});
    }
    if (ls.empty()) throw FormatError("checkpoint: no layers under '" + prefix + "'");
    return ls;
  }

  nn::OptState opt(const std::string& prefix, const nn::LayerSet& params) const {
    nn::OptState o;
    o.m = layers(prefix + "/m");
    o.v = layers(prefix + "/v");
    if (!nn::Mlp::same_shape(o.m, params) || !nn::Mlp::same_shape(o.v, params))
      throw FormatError("checkpoint: optimizer state shape mismatch in '" + prefix + "'");
    const auto& s = get(prefix + "/scalars");
    if (s.rows() != 1 || s.cols() != 5) throw FormatError("checkpoint: bad optimizer scalars in '" + prefix + "'");
    o.step = static_cast<long>(s(0, 0));
    o.hp = {s(0, 1), s(0, 2), s(0, 3), s(0, 4)};
    return o;
  }

 private:
  std::map<std::string, Eigen::MatrixXd> map_;
};

inline nn::Mlp make_net(const nn::LayerSet& ls, const std::string& what) {
  try {
    return nn::Mlp(ls);
  } catch (const DomainError& e) {
    throw FormatError("checkpoint: " + what + ": " + e.what());
  }
}

}  // namespace ckpt_detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  using namespace ckpt_detail;
  const std::vector<Tensor> tensors = to_tensors(ck.agents);
  Writer w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u64(ck.global_step);
  w.str(ck.config_echo);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.data.rows()));
    w.u32(static_cast<std::uint32_t>(t.data.cols()));
  }
  for (const auto& t : tensors)
    for (Eigen::Index i = 0; i < t.data.size(); ++i) w.f64(t.data.data()[i]);
  return w.data();
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  using namespace ckpt_detail;
  ckpt_detail::Reader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic header (expected FGCK)");
  r.raw(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  Checkpoint ck;
  ck.global_step = r.u64();
  ck.config_echo = r.str();
  const std::uint32_t n = r.u32();
  std::vector<Tensor> tensors(n);
  for (auto& t : tensors) {
    t.name = r.str();
    const std::uint32_t rows = r.u32(), cols = r.u32();
    if (static_cast<std::uint64_t>(rows) * cols > bytes.size())
      throw FormatError("checkpoint: tensor '" + t.name + "' larger than file");
    t.data.resize(rows, cols);
  }
  for (auto& t : tensors)
    for (Eigen::Index i = 0; i < t.data.size(); ++i) t.data.data()[i] = r.f64();
  if (!r.at_end()) throw FormatError("checkpoint: trailing bytes after payload");

  const TensorTable table(std::move(tensors));
  for (std::size_t i = 0;; ++i) {
    const std::string p = "agent" + std::to_string(i);
    if (!table.has(p + "/meta")) break;
    const auto& meta = table.get(p + "/meta");
    if (meta.rows() != 1 || meta.cols() != 5) throw FormatError("checkpoint: bad meta for " + p);
    sac::AgentBundle a;
    a.id = static_cast<int>(meta(0, 0));
    a.obs_dim = static_cast<int>(meta(0, 1));
    a.act_dim = static_cast<int>(meta(0, 2));
    a.obs_shift = meta(0, 3);
    a.obs_gain = meta(0, 4);
    a.policy = make_net(table.layers(p + "/policy"), p + " policy");
    for (std::size_t k = 0; k < 2; ++k) {
      const std::string idx = std::to_string(k + 1);
      a.critic[k] = make_net(table.layers(p + "/critic" + idx), p + " critic" + idx);
      a.target[k] = make_net(table.layers(p + "/target" + idx), p + " target" + idx);
      if (!a.critic[k].same_shape(a.target[k]))
        throw FormatError("checkpoint: " + p + " critic and target shapes differ");
      a.critic_opt[k] = table.opt(p + "/critic_opt" + idx, a.critic[k].layers());
    }
    a.policy_opt = table.opt(p + "/policy_opt", a.policy.layers());
    if (a.policy.in_dim() != a.obs_dim || a.policy.out_dim() != 2 * a.act_dim ||
        a.critic[0].in_dim() != a.obs_dim + a.act_dim || a.critic[0].out_dim() != 1)
      throw FormatError("checkpoint: " + p + " network shapes disagree with its dimensions");
    ck.agents.push_back(std::move(a));
  }
  if (ck.agents.empty()) throw FormatError("checkpoint: no agents");
  return ck;
}

inline void checkpoint_save(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("checkpoint: cannot write '" + path + "'");
  const std::string bytes = serialize_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("checkpoint: write failed for '" + path + "'");
}

inline Checkpoint checkpoint_load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace fedgrid

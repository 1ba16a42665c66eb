#pragma once

// JSON experiment configuration. Sections: network, env, train, eval,
// output, seeds. Every section and field is optional; unknown keys are
// rejected so typos surface as errors. Buses and microgrids are 1-based in
// the file and 0-based in memory.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fedgrid/errors.hpp"
#include "fedgrid/federation.hpp"
#include "fedgrid/grid_sim.hpp"
#include "fedgrid/resilient_env.hpp"

namespace fedgrid {

struct EvalConfig {
  int n_test = 200;
  std::vector<int> trace_buses;  // 0-based; empty means every bus
};

struct ExperimentConfig {
  NetworkModel network = default_network();
  EnvConfig env;
  TrainConfig train;
  EvalConfig eval;
  std::string output_dir = "fedgrid_out";
  std::vector<std::uint64_t> seeds{1, 2, 3};

  void validate() const {
    network.validate();
    env.validate(network);
    train.validate();
    if (seeds.empty()) throw DomainError("config: seed list must not be empty");
    if (eval.n_test < 1) throw DomainError("config: eval.n_test must be >= 1");
    for (int b : eval.trace_buses)
      if (b < 0 || b >= network.n_buses) throw DomainError("config: eval.trace_buses entry out of range");
  }
};

namespace config_detail {

using nlohmann::json;

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_, "expected an object");
  }

  ~Reader() = default;

  // Throws on keys that were never queried.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) fail(join(it.key()), "unknown field");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const json& at(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <class T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    out = convert<T>(j_.at(key), join(key));
  }

  template <class T>
  static T convert(const json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) fail(where, "expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) fail(where, "expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned()) return static_cast<T>(v.get<std::uint64_t>());
        if (v.get<std::int64_t>() < 0) fail(where, "expected a non-negative integer");
      }
      return static_cast<T>(v.get<std::int64_t>());
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) fail(where, "expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) fail(where, "expected a string");
      return v.get<std::string>();
    } else {
      if (!v.is_array()) fail(where, "expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i)
        out.push_back(convert<typename T::value_type>(v[i], where + "[" + std::to_string(i) + "]"));
      return out;
    }
  }

  [[noreturn]] static void fail(const std::string& where, const std::string& what) {
    throw FormatError("config: field '" + (where.empty() ? std::string("<root>") : where) + "': " + what);
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline Eigen::MatrixXd to_matrix(const std::vector<std::vector<double>>& rows, const std::string& where) {
  if (rows.empty()) return {};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != rows.front().size()) Reader::fail(where, "rows have different lengths");
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  }
  return m;
}

inline json from_matrix(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

inline NetworkModel read_network(Reader& r) {
  std::string preset;
  r.get("preset", preset);
  NetworkModel net;
  if (preset == "default" || preset.empty()) {
    net = default_network();
  } else {
    Reader::fail(r.join("preset"), "unknown preset '" + preset + "'");
  }
  // Explicit fields override the preset.
  r.get("n_buses", net.n_buses);
  r.get("n_phases", net.n_phases);
  r.get("tau", net.tau);
  r.get("phase_load_scale", net.phase_load_scale);
  if (r.has("mg_of_bus")) {
    auto v = Reader::convert<std::vector<int>>(r.at("mg_of_bus"), r.join("mg_of_bus"));
    for (auto& x : v) {
      if (x < 1) Reader::fail(r.join("mg_of_bus"), "microgrid labels are 1-based");
      --x;
    }
    net.mg_of_bus = v;
  }
  if (r.has("load_offset")) {
    auto v = Reader::convert<std::vector<double>>(r.at("load_offset"), r.join("load_offset"));
    net.load_offset = Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  if (r.has("sensitivity"))
    net.sensitivity = to_matrix(Reader::convert<std::vector<std::vector<double>>>(r.at("sensitivity"), r.join("sensitivity")),
                                r.join("sensitivity"));
  if (r.has("coupling"))
    net.coupling = to_matrix(Reader::convert<std::vector<std::vector<double>>>(r.at("coupling"), r.join("coupling")),
                             r.join("coupling"));
  if (r.has("limits")) {
    Reader lr(r.at("limits"), r.join("limits"));
    lr.get("p_min", net.limits.p_min);
    lr.get("p_max", net.limits.p_max);
    lr.get("v_min", net.limits.v_min);
    lr.get("v_max", net.limits.v_max);
    lr.finish();
  }
  if (r.has("inverters")) {
    const auto& arr = r.at("inverters");
    if (!arr.is_array()) Reader::fail(r.join("inverters"), "expected an array");
    net.inverters.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      Reader ir(arr[i], r.join("inverters") + "[" + std::to_string(i) + "]");
      InverterSpec inv;
      ir.get("id", inv.id);
      int mg = 1, bus = 1;
      ir.get("mg", mg);
      ir.get("bus", bus);
      if (mg < 1 || bus < 1) Reader::fail(ir.join("bus"), "bus and mg labels are 1-based");
      inv.mg_id = mg - 1;
      inv.bus = bus - 1;
      std::string kind = "GFL";
      ir.get("kind", kind);
      if (kind == "GFM")
        inv.kind = InverterKind::GFM;
      else if (kind == "GFL")
        inv.kind = InverterKind::GFL;
      else
        Reader::fail(ir.join("kind"), "expected GFM or GFL");
      ir.get("rating_kw", inv.rating_kw);
      ir.get("m_p", inv.m_p);
      ir.get("m_q", inv.m_q);
      ir.get("omega_nom", inv.omega_nom);
      ir.get("p_set_nom", inv.p_set_nom);
      ir.get("v_set_nom", inv.v_set_nom);
      ir.get("q_nom", inv.q_nom);
      ir.finish();
      net.inverters.push_back(inv);
    }
  }
  r.finish();
  return net;
}

inline json network_to_json(const NetworkModel& net) {
  json j;
  j["n_buses"] = net.n_buses;
  j["n_phases"] = net.n_phases;
  j["tau"] = net.tau;
  j["phase_load_scale"] = net.phase_load_scale;
  json mg = json::array();
  for (int m : net.mg_of_bus) mg.push_back(m + 1);
  j["mg_of_bus"] = mg;
  j["load_offset"] = std::vector<double>(net.load_offset.data(), net.load_offset.data() + net.load_offset.size());
  j["sensitivity"] = from_matrix(net.sensitivity);
  j["coupling"] = from_matrix(net.coupling);
  j["limits"] = {{"p_min", net.limits.p_min},
                 {"p_max", net.limits.p_max},
                 {"v_min", net.limits.v_min},
                 {"v_max", net.limits.v_max}};
  json invs = json::array();
  for (const auto& inv : net.inverters)
    invs.push_back({{"id", inv.id},
                    {"mg", inv.mg_id + 1},
                    {"bus", inv.bus + 1},
                    {"kind", inv.kind == InverterKind::GFM ? "GFM" : "GFL"},
                    {"rating_kw", inv.rating_kw},
                    {"m_p", inv.m_p},
                    {"m_q", inv.m_q},
                    {"omega_nom", inv.omega_nom},
                    {"p_set_nom", inv.p_set_nom},
                    {"v_set_nom", inv.v_set_nom},
                    {"q_nom", inv.q_nom}});
  j["inverters"] = invs;
  return j;
}

inline void read_env(Reader& r, EnvConfig& e) {
  r.get("episode_len", e.episode_len);
  r.get("band_lo", e.band_lo);
  r.get("band_hi", e.band_hi);
  r.get("q_weights", e.q_weights);
  r.get("invalid_weight", e.invalid_weight);
  r.get("action_bound", e.action_bound);
  r.get("act_threshold", e.act_threshold);
  r.get("dt", e.dt);
  r.get("attack_mag_min", e.attack_mag_min);
  r.get("attack_mag_max", e.attack_mag_max);
  r.get("onset_min", e.onset_min);
  r.get("onset_max", e.onset_max);
  r.get("seed", e.seed);
  r.finish();
}

inline json env_to_json(const EnvConfig& e) {
  return {{"episode_len", e.episode_len},   {"band_lo", e.band_lo},
          {"band_hi", e.band_hi},           {"q_weights", e.q_weights},
          {"invalid_weight", e.invalid_weight}, {"action_bound", e.action_bound},
          {"act_threshold", e.act_threshold}, {"dt", e.dt},
          {"attack_mag_min", e.attack_mag_min}, {"attack_mag_max", e.attack_mag_max},
          {"onset_min", e.onset_min},       {"onset_max", e.onset_max},
          {"seed", e.seed}};
}

inline void read_train(Reader& r, TrainConfig& t) {
  r.get("episodes", t.episodes);
  r.get("warmup", t.warmup);
  r.get("clip_switch_fraction", t.clip_switch_fraction);
  r.get("n_train_scenarios", t.n_train_scenarios);
  r.get("pool_seed", t.pool_seed);
  std::string design = t.pool_design == PoolDesign::Stratified ? "stratified" : "uniform";
  r.get("pool_design", design);
  if (design == "stratified")
    t.pool_design = PoolDesign::Stratified;
  else if (design == "uniform")
    t.pool_design = PoolDesign::Uniform;
  else
    Reader::fail(r.join("pool_design"), "expected \"stratified\" or \"uniform\"");
  r.get("threads", t.threads);
  if (r.has("federation")) {
    Reader fr(r.at("federation"), r.join("federation"));
    fr.get("start_step", t.schedule.start_step);
    fr.get("interval", t.schedule.interval);
    std::string mode = to_string(t.schedule.mode);
    fr.get("mode", mode);
    try {
      t.schedule.mode = parse_fed_mode(mode);
    } catch (const FormatError& e) {
      Reader::fail(fr.join("mode"), e.what());
    }
    fr.finish();
  }
  if (r.has("sac")) {
    Reader sr(r.at("sac"), r.join("sac"));
    auto& s = t.sac;
    sr.get("gamma", s.gamma);
    sr.get("rho", s.rho);
    sr.get("zeta", s.zeta);
    sr.get("batch_size", s.batch_size);
    sr.get("lr", s.lr);
    sr.get("grad_clip", s.grad_clip);
    sr.get("hidden", s.hidden);
    sr.get("n_hidden", s.n_hidden);
    sr.get("buffer_capacity", s.buffer_capacity);
    sr.get("obs_shift", s.obs_shift);
    sr.get("obs_gain", s.obs_gain);
    sr.finish();
  }
  r.finish();
}

inline json train_to_json(const TrainConfig& t) {
  const auto& s = t.sac;
  return {{"episodes", t.episodes},
          {"warmup", t.warmup},
          {"clip_switch_fraction", t.clip_switch_fraction},
          {"n_train_scenarios", t.n_train_scenarios},
          {"pool_seed", t.pool_seed},
          {"pool_design", t.pool_design == PoolDesign::Stratified ? "stratified" : "uniform"},
          {"threads", t.threads},
          {"federation",
           {{"start_step", t.schedule.start_step},
            {"interval", t.schedule.interval},
            {"mode", to_string(t.schedule.mode)}}},
          {"sac",
           {{"gamma", s.gamma},
            {"rho", s.rho},
            {"zeta", s.zeta},
            {"batch_size", s.batch_size},
            {"lr", s.lr},
            {"grad_clip", s.grad_clip},
            {"hidden", s.hidden},
            {"n_hidden", s.n_hidden},
            {"buffer_capacity", s.buffer_capacity},
            {"obs_shift", s.obs_shift},
            {"obs_gain", s.obs_gain}}}};
}

}  // namespace config_detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using config_detail::Reader;
  ExperimentConfig cfg;
  Reader root(j, "");
  if (root.has("network")) {
    Reader nr(root.at("network"), "network");
    cfg.network = config_detail::read_network(nr);
  }
  if (root.has("env")) {
    Reader er(root.at("env"), "env");
    config_detail::read_env(er, cfg.env);
  }
  if (root.has("train")) {
    Reader tr(root.at("train"), "train");
    config_detail::read_train(tr, cfg.train);
  }
  if (root.has("eval")) {
    Reader vr(root.at("eval"), "eval");
    vr.get("n_test", cfg.eval.n_test);
    if (vr.has("trace_buses")) {
      auto buses = Reader::convert<std::vector<int>>(vr.at("trace_buses"), "eval.trace_buses");
      for (auto& b : buses) --b;
      cfg.eval.trace_buses = buses;
    }
    vr.finish();
  }
  if (root.has("output")) {
    Reader orr(root.at("output"), "output");
    orr.get("dir", cfg.output_dir);
    orr.finish();
  }
  root.get("seeds", cfg.seeds);
  root.finish();
  try {
    cfg.validate();
  } catch (const DomainError& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  return cfg;
}

inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["network"] = config_detail::network_to_json(cfg.network);
  j["env"] = config_detail::env_to_json(cfg.env);
  j["train"] = config_detail::train_to_json(cfg.train);
  nlohmann::json buses = nlohmann::json::array();
  for (int b : cfg.eval.trace_buses) buses.push_back(b + 1);
  j["eval"] = {{"n_test", cfg.eval.n_test}, {"trace_buses", buses}};
  j["output"] = {{"dir", cfg.output_dir}};
  j["seeds"] = cfg.seeds;
  return j;
}

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    // nlohmann reports a byte offset; translate it to line/column.
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw FormatError("config: parse error at line " + std::to_string(line) + ", column " +
                      std::to_string(col) + ": " + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace fedgrid

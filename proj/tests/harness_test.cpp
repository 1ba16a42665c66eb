#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fedgrid/checkpoint.hpp"
#include "fedgrid/config.hpp"
#include "fedgrid/errors.hpp"
#include "fedgrid/harness.hpp"

using namespace fedgrid;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fedgrid_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

ExperimentConfig tiny_config(const fs::path& out) {
  ExperimentConfig cfg;
  cfg.train.episodes = 4;
  cfg.train.warmup = 32;
  cfg.train.sac.hidden = 8;
  cfg.train.sac.batch_size = 16;
  cfg.train.sac.buffer_capacity = 2000;
  cfg.eval.n_test = 6;
  cfg.output_dir = out.string();
  return cfg;
}

const char* kTinyJson = R"({
  "train": {"episodes": 3, "warmup": 32, "sac": {"hidden": 8, "batch_size": 16}},
  "eval": {"n_test": 4},
  "seeds": [5]
})";

int run_cli(const std::string& args, std::string* out = nullptr) {
  const std::string log = (fs::temp_directory_path() / "fedgrid_cli_out.txt").string();
  const std::string cmd = std::string(FEDGRID_CLI_PATH) + " " + args + " > " + log + " 2>&1";
  const int rc = std::system(cmd.c_str());
  if (out) *out = slurp(log);
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

// ------------------------------------------------------------------ config

TEST(Config, DefaultsValidate) { EXPECT_NO_THROW(parse_config("{}")); }

TEST(Config, SyntaxErrorReportsLine) {
  try {
    parse_config("{\n  \"train\": {\n    \"episodes\": 3,,\n  }\n}");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(Config, UnknownFieldIsNamed) {
  try {
    parse_config(R"({"train": {"sac": {"rhoo": 0.5}}})");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("train.sac.rhoo"), std::string::npos) << e.what();
  }
}

TEST(Config, WrongTypeIsNamed) {
  try {
    parse_config(R"({"env": {"episode_len": "forty"}})");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("env.episode_len"), std::string::npos) << e.what();
  }
}

TEST(Config, OutOfRangeValueIsFormatError) {
  EXPECT_THROW(parse_config(R"({"train": {"sac": {"gamma": 1.5}}})"), FormatError);
  EXPECT_THROW(parse_config(R"({"train": {"federation": {"mode": "central"}}})"), FormatError);
  EXPECT_THROW(parse_config(R"({"seeds": []})"), FormatError);
}

TEST(Config, JsonRoundTrip) {
  auto cfg = parse_config(kTinyJson);
  EXPECT_EQ(cfg.train.episodes, 3);
  EXPECT_EQ(cfg.seeds, std::vector<std::uint64_t>{5});
  const auto j1 = config_to_json(cfg);
  const auto j2 = config_to_json(config_from_json(j1));
  EXPECT_EQ(j1.dump(), j2.dump());
}

TEST(Config, TraceBusesAreOneBasedInFiles) {
  const auto cfg = parse_config(R"({"eval": {"trace_buses": [1, 9]}})");
  EXPECT_EQ(cfg.eval.trace_buses, (std::vector<int>{0, 8}));
  EXPECT_THROW(parse_config(R"({"eval": {"trace_buses": [10]}})"), FormatError);
}

// -------------------------------------------------------------- checkpoint

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    Environment env(default_network(), EnvConfig{});
    sac::SacHyper hp;
    hp.hidden = 8;
    ck.global_step = 1234;
    ck.config_echo = R"({"hello":"world"})";
    ck.agents = make_agents(env, hp, 9);
    // Give the optimizer state non-trivial content.
    for (auto& a : ck.agents) {
      a.policy_opt.step = 7;
      for (auto& l : a.policy_opt.m) l.w.setConstant(0.5);
    }
  }
  Checkpoint ck;
};

TEST_F(CheckpointTest, SaveLoadSaveIsByteIdentical) {
  const std::string a = serialize_checkpoint(ck);
  const Checkpoint back = deserialize_checkpoint(a);
  EXPECT_EQ(serialize_checkpoint(back), a);
  EXPECT_EQ(back.global_step, 1234u);
  EXPECT_EQ(back.config_echo, ck.config_echo);
  ASSERT_EQ(back.agents.size(), 3u);
}

TEST_F(CheckpointTest, LoadedPolicyActsIdentically) {
  const Checkpoint back = deserialize_checkpoint(serialize_checkpoint(ck));
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01;
  for (std::size_t k = 0; k < ck.agents.size(); ++k)
    for (int trial = 0; trial < 5; ++trial) {
      Eigen::VectorXd o = Eigen::VectorXd::NullaryExpr(ck.agents[k].obs_dim, [&] { return 1.0 + 0.01 * n01(rng); });
      EXPECT_EQ(ck.agents[k].act_deterministic(o), back.agents[k].act_deterministic(o));
    }
}

TEST_F(CheckpointTest, FileRoundTrip) {
  const auto dir = scratch_dir("ckpt");
  checkpoint_save(ck, (dir / "a.fgck").string());
  checkpoint_save(checkpoint_load((dir / "a.fgck").string()), (dir / "b.fgck").string());
  EXPECT_EQ(slurp(dir / "a.fgck"), slurp(dir / "b.fgck"));
  EXPECT_THROW(checkpoint_load((dir / "missing.fgck").string()), FormatError);
}

TEST_F(CheckpointTest, CorruptionIsFormatError) {
  const std::string good = serialize_checkpoint(ck);
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), FormatError);

  std::string bad_version = good;
  bad_version[4] = 9;
  EXPECT_THROW(deserialize_checkpoint(bad_version), FormatError);

  EXPECT_THROW(deserialize_checkpoint(good.substr(0, good.size() - 1)), FormatError);
  EXPECT_THROW(deserialize_checkpoint(good.substr(0, 10)), FormatError);
  EXPECT_THROW(deserialize_checkpoint(good + "z"), FormatError);
  EXPECT_THROW(deserialize_checkpoint(""), FormatError);
}

// ------------------------------------------------------------------- train

TEST(TrainCommand, RewardCsvShapeAndDeterminism) {
  const auto d1 = scratch_dir("train1"), d2 = scratch_dir("train2");
  const auto a1 = cmd_train(tiny_config(d1), FedMode::Federated, 4);
  const auto a2 = cmd_train(tiny_config(d2), FedMode::Federated, 4);
  EXPECT_EQ(a1.rewards_csv.filename(), "rewards_federated_seed4.csv");
  const auto rows = read_csv(a1.rewards_csv);
  ASSERT_EQ(rows.size(), 1u + 4u * 3u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"episode", "agent_id", "reward", "seed", "mode"}));
  for (std::size_t i = 1; i < rows.size(); ++i) {
    ASSERT_EQ(rows[i].size(), 5u);
    EXPECT_EQ(rows[i][0], std::to_string((i - 1) / 3));
    EXPECT_EQ(rows[i][1], std::to_string((i - 1) % 3 + 1));
    EXPECT_LE(std::stod(rows[i][2]), 0.0);
    EXPECT_EQ(rows[i][3], "4");
    EXPECT_EQ(rows[i][4], "federated");
  }
  EXPECT_TRUE(slurp(a1.rewards_csv) == slurp(a2.rewards_csv));
  // Same weights; the config echo differs only in the output directory.
  auto c1 = checkpoint_load(a1.checkpoint.string()), c2 = checkpoint_load(a2.checkpoint.string());
  c1.config_echo = c2.config_echo = "";
  EXPECT_TRUE(serialize_checkpoint(c1) == serialize_checkpoint(c2));
  EXPECT_TRUE(fs::exists(d1 / "rewards_federated_seed4.svg"));
}

TEST(TrainCommand, CheckpointEchoesConfigAndRun) {
  const auto d = scratch_dir("train_echo");
  const auto art = cmd_train(tiny_config(d), FedMode::Decentralized, 2);
  const auto ck = checkpoint_load(art.checkpoint.string());
  EXPECT_EQ(ck.global_step, 4u * 40u);
  const auto j = nlohmann::json::parse(ck.config_echo);
  EXPECT_EQ(j["run"]["mode"], "decentralized");
  EXPECT_EQ(j["run"]["seed"], 2);
  EXPECT_EQ(j["train"]["episodes"], 4);
  EXPECT_EQ(read_csv(art.rewards_csv)[1][4], "decentralized");
}

// -------------------------------------------------------------------- eval

TEST(EvalCommand, RecoveredFlagMatchesTraceRescan) {
  const auto d = scratch_dir("eval");
  auto cfg = tiny_config(d);
  const auto tr = cmd_train(cfg, FedMode::Federated, 1);
  const auto art = cmd_eval(cfg, tr.checkpoint.string(), std::nullopt, 2);

  const auto rows = read_csv(art.rewards_csv);
  ASSERT_EQ(rows.size(), 1u + 6u);
  EXPECT_EQ(rows[0].size(), 9u);

  // Brute-force re-check: recovered iff every (bus, phase) at t = T lies in band.
  std::map<int, bool> in_band;
  const auto trace = read_csv(art.traces_csv);
  EXPECT_EQ(trace[0], (std::vector<std::string>{"scenario", "t", "bus", "phase", "V", "V_ss"}));
  std::size_t final_rows = 0;
  for (std::size_t i = 1; i < trace.size(); ++i) {
    const int s = std::stoi(trace[i][0]);
    if (!in_band.count(s)) in_band[s] = true;
    if (std::stoi(trace[i][1]) != cfg.env.episode_len) continue;
    ++final_rows;
    const double v = std::stod(trace[i][4]), ss = std::stod(trace[i][5]);
    if (v < cfg.env.band_lo * ss || v > cfg.env.band_hi * ss) in_band[s] = false;
  }
  EXPECT_EQ(final_rows, 6u * 27u);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(rows[i][6] == "1", in_band[std::stoi(rows[i][0])]);

  const auto summary = read_csv(art.summary_csv);
  ASSERT_EQ(summary.size(), 7u);
  EXPECT_EQ(summary[1], (std::vector<std::string>{"n", "6", "6"}));
  EXPECT_TRUE(fs::exists(d / "eval_histogram.svg"));
}

TEST(EvalCommand, ThreadCountDoesNotChangeResults) {
  const auto d = scratch_dir("eval_threads");
  auto cfg = tiny_config(d);
  const auto tr = cmd_train(cfg, FedMode::Federated, 1);
  const auto a = cmd_eval(cfg, tr.checkpoint.string(), 5, 1);
  const std::string one = slurp(a.rewards_csv);
  cmd_eval(cfg, tr.checkpoint.string(), 5, 3);
  EXPECT_TRUE(slurp(a.rewards_csv) == one);
}

TEST(EvalCommand, TestScenariosAvoidTrainingPool) {
  const auto cfg = tiny_config(scratch_dir("eval_pool"));
  Environment env(cfg.network, cfg.env);
  const auto agents = make_agents(env, cfg.train.sac, 1);
  const auto r = evaluate(cfg, agents, 50, 1, false);
  const auto train = training_pool(cfg.network, cfg.env, cfg.train.n_train_scenarios, cfg.train.pool_seed, cfg.train.pool_design);
  for (const auto& s : r.scenarios)
    for (const auto& t : train)
      EXPECT_FALSE(s.inverter_id == t.inverter_id && s.magnitude == t.magnitude && s.t_a == t.t_a);
}

TEST(EvalCommand, MismatchedCheckpointIsFormatError) {
  const auto d = scratch_dir("eval_bad");
  Checkpoint ck;
  Environment env(default_network(), EnvConfig{});
  ck.agents = make_agents(env, sac::SacHyper{}, 1);
  ck.agents.pop_back();
  checkpoint_save(ck, (d / "two.fgck").string());
  EXPECT_THROW(cmd_eval(tiny_config(d), (d / "two.fgck").string()), FormatError);
}

TEST(Summary, MedianAndFraction) {
  EXPECT_EQ(median_of({3, 1, 2}), 2.0);
  EXPECT_EQ(median_of({4, 1, 3, 2}), 2.5);
  const auto s = summarize({-1, -3, -2, 0}, {true, false, false, true});
  EXPECT_EQ(s.n, 4);
  EXPECT_EQ(s.mean, -1.5);
  EXPECT_EQ(s.min, -3.0);
  EXPECT_EQ(s.max, 0.0);
  EXPECT_EQ(s.recovered_fraction, 0.5);
}

// ---------------------------------------------------------------- simulate

TEST(SimulateCommand, QuietEpisodeStaysAtSteadyState) {
  const auto d = scratch_dir("sim");
  const auto art = cmd_simulate(tiny_config(d), std::nullopt);
  const auto rows = read_csv(art.trace_csv);
  ASSERT_EQ(rows.size(), 1u + 40u * 9u * 3u);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_NEAR(std::stod(rows[i][4]), std::stod(rows[i][5]), 1e-9);
  EXPECT_TRUE(art.rollouts.front().recovered);
  EXPECT_NEAR(art.rollouts.front().reward, 0.0, 1e-6);
  EXPECT_TRUE(fs::exists(d / "simulate_trace.svg"));
}

TEST(SimulateCommand, ScenarioFileDrivesAttack) {
  const auto d = scratch_dir("sim_attack");
  {
    std::ofstream f(d / "s.csv");
    write_scenarios(f, {AttackScenario{1, AttackChannel::Voltage, -0.1, 5, 35}});
  }
  const auto art = cmd_simulate(tiny_config(d), (d / "s.csv").string());
  EXPECT_FALSE(art.rollouts.front().recovered);
  EXPECT_LT(art.rollouts.front().reward, -1.0);

  std::ofstream(d / "empty.csv") << "inverter_id,channel,magnitude,t_a,duration\n";
  EXPECT_THROW(cmd_simulate(tiny_config(d), (d / "empty.csv").string()), FormatError);
}

// --------------------------------------------------------------------- CLI

TEST(Cli, HelpListsSubcommands) {
  std::string out;
  EXPECT_EQ(run_cli("--help", &out), 0);
  for (const char* s : {"train", "eval", "simulate", "gradcheck"}) EXPECT_NE(out.find(s), std::string::npos) << s;
}

TEST(Cli, GradcheckPassesAndCatchesCorruption) {
  std::string out;
  EXPECT_EQ(run_cli("gradcheck --trials 4", &out), 0) << out;
  EXPECT_EQ(run_cli("gradcheck --trials 4 --corrupt-backward", &out), 1) << out;
  EXPECT_NE(out.find("FAIL"), std::string::npos);
}

TEST(Cli, BadConfigExitsNonZeroWithMessage) {
  const auto d = scratch_dir("cli_bad");
  std::ofstream(d / "bad.json") << R"({"train": {"episodez": 3}})";
  std::string out;
  EXPECT_EQ(run_cli("train -c " + (d / "bad.json").string() + " -o " + d.string(), &out), 2);
  EXPECT_NE(out.find("train.episodez"), std::string::npos) << out;
}

TEST(Cli, TrainEvalSimulateEndToEnd) {
  const auto d = scratch_dir("cli_e2e");
  std::ofstream(d / "cfg.json") << kTinyJson;
  const std::string common = " -c " + (d / "cfg.json").string() + " -o " + d.string();
  std::string out;
  ASSERT_EQ(run_cli("train --mode decentralized" + common, &out), 0) << out;
  ASSERT_TRUE(fs::exists(d / "rewards_decentralized_seed5.csv"));
  ASSERT_EQ(read_csv(d / "rewards_decentralized_seed5.csv").size(), 1u + 3u * 3u);
  ASSERT_EQ(run_cli("eval " + (d / "checkpoint_decentralized_seed5.fgck").string() + common, &out), 0) << out;
  EXPECT_EQ(read_csv(d / "eval_rewards.csv").size(), 1u + 4u);
  ASSERT_EQ(run_cli("simulate" + common, &out), 0) << out;
  EXPECT_TRUE(fs::exists(d / "simulate_trace.csv"));
  EXPECT_NE(run_cli("train --mode central" + common, &out), 0);
}

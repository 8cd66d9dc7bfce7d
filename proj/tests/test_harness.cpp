#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "pebble/harness/training.hpp"

using namespace pebble;
using namespace pebble::harness;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny(Method m = Method::pbl) {
  ExperimentConfig c;
  c.method = m;
  c.total_frames = 60;
  c.log_every_frames = 12;
  c.grid = 4;
  c.episode_limit = 12;
  c.view_layers = {8};
  c.lstm_layers = {6};
  c.head_hidden = 8;
  c.unroll = 6;
  c.batch = 2;
  c.horizon = 3;
  c.time_samples = 2;
  c.future_samples = 2;
  c.g_layers = {8};
  c.g_rev_layers = {8};
  c.d_layers = {8};
  c.cpc_negatives = 3;
  c.pc_n_step = 3;
  c.pc_hidden = 8;
  c.probe_hidden = {8};
  c.diag_batch = 8;
  return c;
}

std::string scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pebble_harness_test_" + name);
  fs::remove_all(p);
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string error_of(const std::string& text) {
  try {
    parse_config_text(text, "test.cfg");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

double abs_grad_sum(const nn::ParamList& ps) {
  double s = 0.0;
  for (const auto* p : ps)
    for (double g : p->grad.data()) s += std::abs(g);
  return s;
}

}  // namespace

// ---------------------------------------------------------------- config

TEST(Config, EmptyTextGivesDefaults) {
  const ExperimentConfig c = parse_config_text("");
  EXPECT_EQ(c, ExperimentConfig{});
  EXPECT_EQ(c.method, Method::pbl);
  EXPECT_EQ(c.horizon, 20u);
}

TEST(Config, DefaultsMatchPublishedHyperparameters) {
  const ExperimentConfig c;
  EXPECT_EQ(c.horizon, 20u);
  EXPECT_DOUBLE_EQ(c.regularizer, 0.02);
  EXPECT_DOUBLE_EQ(c.forward_weight, 1.0);
  EXPECT_DOUBLE_EQ(c.reverse_weight, 1.0);
  EXPECT_DOUBLE_EQ(c.cpc_weight, 0.1);
  EXPECT_DOUBLE_EQ(c.pc_weight, 0.1);
  EXPECT_DOUBLE_EQ(c.popart_step, 3e-4);
  EXPECT_DOUBLE_EQ(c.lambda, 0.99);
  EXPECT_DOUBLE_EQ(c.value_weight, 0.4);
  EXPECT_DOUBLE_EQ(c.entropy_cost, 5e-3);
  EXPECT_DOUBLE_EQ(c.learning_rate, 1e-4);
  EXPECT_DOUBLE_EQ(c.beta1, 0.0);
  EXPECT_DOUBLE_EQ(c.beta2, 0.999);
  EXPECT_DOUBLE_EQ(c.epsilon, 1e-6);
  EXPECT_EQ(c.unroll, 20u);
}

TEST(Config, ValuesCommentsAndWhitespace) {
  const ExperimentConfig c = parse_config_text(
      "# a run\n"
      "experiment.method = cpc   # trailing\n"
      "\n"
      "  pbl.horizon=5\n"
      "net.lstm_layers = 16, 8\n"
      "env.name = key_door\n"
      "env.grid = 5\n"
      "optimizer.learning_rate = 1e-3\n");
  EXPECT_EQ(c.method, Method::cpc);
  EXPECT_EQ(c.horizon, 5u);
  EXPECT_EQ(c.lstm_layers, (std::vector<std::size_t>{16, 8}));
  EXPECT_EQ(c.env, "key_door");
  EXPECT_DOUBLE_EQ(c.learning_rate, 1e-3);
}

TEST(Config, HorizonZeroNamesTheKey) {
  const std::string e = error_of("pbl.horizon = 0\n");
  EXPECT_NE(e.find("pbl.horizon"), std::string::npos) << e;
}

TEST(Config, UnknownKeyNamesKeyAndLine) {
  const std::string e = error_of("pbl.horizon = 4\npbl.horizn = 3\n");
  EXPECT_NE(e.find("pbl.horizn"), std::string::npos) << e;
  EXPECT_NE(e.find("test.cfg:2"), std::string::npos) << e;
}

TEST(Config, MalformedLinesAreErrors) {
  EXPECT_NE(error_of("rl.batch = eight\n").find("rl.batch"), std::string::npos);
  EXPECT_NE(error_of("rl.batch = -1\n").find("rl.batch"), std::string::npos);
  EXPECT_NE(error_of("rl.gamma = 0.9x\n").find("rl.gamma"), std::string::npos);
  EXPECT_NE(error_of("probe.enabled = maybe\n").find("probe.enabled"), std::string::npos);
  EXPECT_NE(error_of("experiment.method = dreamer\n").find("dreamer"), std::string::npos);
  EXPECT_NE(error_of("just words\n").find("test.cfg:1"), std::string::npos);
  EXPECT_NE(error_of("rl.batch = 4\nrl.batch = 4\n").find("duplicate"), std::string::npos);
}

TEST(Config, CrossFieldConstraints) {
  EXPECT_NE(error_of("pbl.future_samples = 21\n").find("pbl.future_samples"), std::string::npos);
  EXPECT_NE(error_of("rl.unroll = 4\n").find("pbl.time_samples"), std::string::npos);
  EXPECT_NE(error_of("env.behaviour = uniform_random\n").find("rl.enabled"), std::string::npos);
  EXPECT_NE(error_of("experiment.method = rl_only\nrl.enabled = false\n").find("rl.enabled"), std::string::npos);
  EXPECT_NE(error_of("env.instructed = true\n").find("env.instructed"), std::string::npos);
  EXPECT_NE(error_of("pixel_control.cell_cols = 4\n").find("pixel_control.cell_cols"), std::string::npos);
  EXPECT_EQ(error_of("env.behaviour = uniform_random\nrl.enabled = false\n"), "");
}

TEST(Config, SerializeRoundTrip) {
  EXPECT_EQ(parse_config_text(serialize_config(ExperimentConfig{})), ExperimentConfig{});
  ExperimentConfig c = tiny(Method::pixel_control);
  c.learning_rate = 0.1 + 0.2;  // not exactly representable in few digits
  c.gamma = 1.0 / 3.0;
  c.skip_mode = "none";
  c.env = "key_door";
  c.grid = 5;
  c.pc_cell_rows = 3;
  c.instructed = true;
  c.probe_enabled = false;
  EXPECT_EQ(parse_config_text(serialize_config(c)), c);
}

TEST(Config, ParseFile) {
  const std::string dir = scratch("config");
  fs::create_directories(dir);
  std::ofstream(dir + "/a.cfg") << "rl.batch = 3\n";
  EXPECT_EQ(parse_config(dir + "/a.cfg").batch, 3u);
  EXPECT_THROW(parse_config(dir + "/missing.cfg"), ConfigError);
}

#ifdef PEBBLE_CONFIG_DIR
TEST(Config, ShippedConfigsParse) {
  std::size_t n = 0;
  for (const auto& entry : fs::directory_iterator(PEBBLE_CONFIG_DIR)) {
    if (entry.path().extension() != ".cfg") continue;
    EXPECT_NO_THROW(parse_config(entry.path().string())) << entry.path();
    ++n;
  }
  EXPECT_GT(n, 0u);
}
#endif

// ------------------------------------------------------------------- csv

TEST(Csv, RoundTripWithMissingValues) {
  CsvTable t;
  t.columns = {"a", "b", "c"};
  t.rows.push_back({1.0, std::nullopt, -2.5e-7});
  t.rows.push_back({std::nullopt, 123456789.0, 0.0});
  const CsvTable back = parse_csv(to_csv(t));
  EXPECT_EQ(back.columns, t.columns);
  EXPECT_EQ(back.rows, t.rows);
  EXPECT_EQ(back.column("c"), 2u);
  EXPECT_THROW(back.column("d"), std::out_of_range);
}

TEST(Csv, NineSignificantDigits) {
  EXPECT_EQ(format_real(1.0 / 3.0), "0.333333333");
  EXPECT_EQ(format_real(2.0 / 3.0 * 1e6), "666666.667");
  EXPECT_EQ(format_real(1.0), "1");
  EXPECT_EQ(format_real(-1.5e-12), "-1.5e-12");
}

TEST(Csv, HeaderOnlyAndErrors) {
  const CsvTable t = parse_csv("x,y\n");
  EXPECT_EQ(t.columns, (std::vector<std::string>{"x", "y"}));
  EXPECT_TRUE(t.rows.empty());
  EXPECT_THROW(parse_csv(""), std::runtime_error);
  EXPECT_THROW(parse_csv("x,y\n1\n"), std::runtime_error);
  CsvTable bad;
  bad.columns = {"x"};
  bad.rows.push_back({1.0, 2.0});
  EXPECT_THROW(to_csv(bad), std::invalid_argument);
}

TEST(Csv, FileRoundTrip) {
  const std::string dir = scratch("csv");
  fs::create_directories(dir);
  CsvTable t;
  t.columns = {"frames", "loss"};
  t.rows.push_back({120.0, 0.125});
  write_csv(t, dir + "/t.csv");
  EXPECT_EQ(slurp(dir + "/t.csv"), "frames,loss\n120,0.125\n");
  EXPECT_EQ(read_csv(dir + "/t.csv").rows, t.rows);
  EXPECT_THROW(read_csv(dir + "/nope.csv"), std::runtime_error);
  EXPECT_THROW(write_csv(t, dir + "/no/such/dir/t.csv"), std::runtime_error);
}

// ------------------------------------------------------------ checkpoint

TEST(Checkpoint, RoundTripRestoresEverything) {
  const ExperimentConfig cfg = tiny();
  Agent trained(cfg, 1);
  run_training(trained, 1);
  const std::string dir = scratch("ckpt");
  fs::create_directories(dir);
  save_checkpoint(trained, dir + "/c.txt", 60, 5);

  const CheckpointInfo info = read_checkpoint_info(dir + "/c.txt");
  EXPECT_EQ(info.frames, 60);
  EXPECT_EQ(info.updates, 5);
  EXPECT_EQ(info.config, cfg);

  Agent fresh(cfg, 99);
  load_checkpoint(fresh, dir + "/c.txt");
  const auto a = trained.all_parameters(), b = fresh.all_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i]->name, b[i]->name);
    EXPECT_EQ(a[i]->value, b[i]->value) << a[i]->name;
  }
  EXPECT_EQ(trained.popart().mean(0), fresh.popart().mean(0));
  EXPECT_EQ(trained.popart().scale(0), fresh.popart().scale(0));
  EXPECT_EQ(trained.probe().input_statistics(), fresh.probe().input_statistics());

  // Same behaviour afterwards.
  std::vector<Observation> obs{make_env(cfg, 5)->reset()};
  AgentState s1 = trained.initial_state(1), s2 = fresh.initial_state(1);
  EXPECT_EQ(trained.act(obs, s1, {0.0}), fresh.act(obs, s2, {0.0}));
}

TEST(Checkpoint, MismatchesAreErrors) {
  const ExperimentConfig cfg = tiny();
  Agent agent(cfg, 2);
  const std::string dir = scratch("ckpt_bad");
  fs::create_directories(dir);
  save_checkpoint(agent, dir + "/c.txt", 0, 0);

  ExperimentConfig wider = cfg;
  wider.lstm_layers = {7};
  Agent other(wider, 2);
  try {
    load_checkpoint(other, dir + "/c.txt");
    FAIL() << "width mismatch accepted";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("width mismatch"), std::string::npos) << e.what();
  }

  Agent rl_only(tiny(Method::rl_only), 2);  // lacks the auxiliary networks
  EXPECT_THROW(load_checkpoint(rl_only, dir + "/c.txt"), CheckpointError);
  Agent more(tiny(Method::pbl_grounded), 2);  // needs networks the file lacks
  EXPECT_THROW(load_checkpoint(more, dir + "/c.txt"), CheckpointError);

  std::ofstream(dir + "/junk.txt") << "not-a-checkpoint 1\n";
  EXPECT_THROW(read_checkpoint_info(dir + "/junk.txt"), CheckpointError);
  std::ofstream(dir + "/future.txt") << kCheckpointMagic << " 99\n";
  EXPECT_THROW(read_checkpoint_info(dir + "/future.txt"), CheckpointError);
  EXPECT_THROW(load_checkpoint(agent, dir + "/missing.txt"), CheckpointError);

  const std::string text = slurp(dir + "/c.txt");
  std::ofstream(dir + "/cut.txt") << text.substr(0, text.size() / 2);
  EXPECT_THROW(load_checkpoint(agent, dir + "/cut.txt"), CheckpointError);
}

// -------------------------------------------------------------- training

TEST(Training, LogAndCheckpointAreByteIdenticalAcrossRuns) {
  const ExperimentConfig cfg = tiny();
  const std::string a = scratch("det_a"), b = scratch("det_b"), c = scratch("det_c");
  run_training(cfg, 11, {a});
  run_training(cfg, 11, {b});
  run_training(cfg, 12, {c});
  EXPECT_EQ(slurp(a + "/log.csv"), slurp(b + "/log.csv"));
  EXPECT_EQ(slurp(a + "/checkpoint.txt"), slurp(b + "/checkpoint.txt"));
  EXPECT_NE(slurp(a + "/log.csv"), slurp(c + "/log.csv"));
  EXPECT_TRUE(fs::exists(a + "/timing.csv"));
}

TEST(Training, FramesAdvanceByUnrollTimesBatch) {
  ExperimentConfig cfg = tiny(Method::rl_only);
  cfg.total_frames = 50;  // not a multiple of 12
  const TrainingResult r = run_training(cfg, 3);
  EXPECT_EQ(r.updates, 5);
  EXPECT_EQ(r.frames, r.updates * cfg.frames_per_update());
  const std::size_t col = r.log.column("frames");
  double prev = 0.0;
  for (const auto& row : r.log.rows) {
    EXPECT_GT(*row[col], prev);
    EXPECT_EQ(std::fmod(*row[col], 12.0), 0.0);
    prev = *row[col];
  }
  EXPECT_EQ(prev, 60.0);
  EXPECT_EQ(r.log.columns, log_columns(cfg));
}

TEST(Training, ReportHoldsOnlyTheMethodsLosses) {
  const std::map<Method, std::set<std::string>> expected{
      {Method::rl_only, {}},
      {Method::pbl, {"pbl_forward", "forward_regularizer", "pbl_reverse", "reverse_regularizer"}},
      {Method::pbl_random_projection, {"pbl_forward", "forward_regularizer"}},
      {Method::pbl_grounded, {"pbl_forward", "forward_regularizer", "pbl_reverse", "reverse_regularizer"}},
      {Method::cpc, {"cpc"}},
      {Method::pixel_control, {"pixel_control"}},
  };
  for (const auto& [m, aux] : expected) {
    const ExperimentConfig cfg = tiny(m);
    Agent agent(cfg, 4);
    Collector col(cfg, 4, agent);
    Rng rng(4);
    const StepOutcome so = learner_step(agent, col.collect(agent), rng);
    std::set<std::string> keys;
    for (const auto& [k, _] : so.report.entries) keys.insert(k);
    std::set<std::string> want = aux;
    want.insert({"rl_policy", "rl_value", "rl_entropy"});
    EXPECT_EQ(keys, want) << method_name(m);
    EXPECT_TRUE(std::isfinite(so.report.total()));
  }
}

TEST(Training, RlOnlyLogLeavesAuxiliaryColumnsEmpty) {
  const TrainingResult r = run_training(tiny(Method::rl_only), 5);
  for (const char* n : {"pbl_forward", "pbl_reverse", "cpc", "pixel_control"})
    for (const auto& row : r.log.rows) EXPECT_FALSE(row[r.log.column(n)].has_value()) << n;
  for (const auto& row : r.log.rows) EXPECT_TRUE(row[r.log.column("rl_policy")].has_value());
}

TEST(Training, GradientFlowFollowsTheLossTerms) {
  // Auxiliary weights at zero: nothing reaches f, g or g_rev.
  ExperimentConfig cfg = tiny();
  cfg.forward_weight = 0.0;
  cfg.reverse_weight = 0.0;
  {
    Agent agent(cfg, 6);
    Collector col(cfg, 6, agent);
    Rng rng(6);
    learner_step(agent, col.collect(agent), rng);
    for (const char* g : {"f", "g", "g_rev", "h_p"}) {
      ASSERT_FALSE(agent.params_of(g).empty()) << g;
      EXPECT_EQ(abs_grad_sum(agent.params_of(g)), 0.0) << g;
    }
    EXPECT_GT(abs_grad_sum(agent.params_of("e")), 0.0);
    EXPECT_GT(abs_grad_sum(agent.params_of("pi")), 0.0);
  }
  // RL off: the heads see nothing, the representation still learns.
  cfg = tiny();
  cfg.rl_enabled = false;
  cfg.behaviour = "uniform_random";
  {
    Agent agent(cfg, 7);
    Collector col(cfg, 7, agent);
    Rng rng(7);
    const StepOutcome so = learner_step(agent, col.collect(agent), rng);
    EXPECT_FALSE(so.report.has("rl_policy"));
    EXPECT_EQ(abs_grad_sum(agent.params_of("pi")), 0.0);
    EXPECT_EQ(abs_grad_sum(agent.params_of("v")), 0.0);
    for (const char* g : {"e", "h_f", "h_p", "f", "g", "g_rev"}) EXPECT_GT(abs_grad_sum(agent.params_of(g)), 0.0) << g;
  }
  // rl_only builds no auxiliary networks at all.
  Agent rl(tiny(Method::rl_only), 8);
  for (const char* g : {"h_p", "f", "f_rp", "g", "g2", "g_rev", "d", "q_pc"}) EXPECT_TRUE(rl.params_of(g).empty()) << g;
}

TEST(Training, RandomProjectionEncoderNeverChanges) {
  const ExperimentConfig cfg = tiny(Method::pbl_random_projection);
  Agent agent(cfg, 9);
  std::vector<Tensor> before;
  for (auto* p : agent.params_of("f_rp")) before.push_back(p->value);
  run_training(agent, 9);
  const auto after = agent.params_of("f_rp");
  for (std::size_t i = 0; i < after.size(); ++i) EXPECT_EQ(after[i]->value, before[i]);
}

TEST(Training, UnrollStartIsThreadedFromPreviousUnroll) {
  const ExperimentConfig cfg = tiny();
  Agent agent(cfg, 10);
  Collector col(cfg, 10, agent);
  const Unroll u1 = col.collect(agent);
  EXPECT_EQ(u1.start, agent.initial_state(cfg.batch));
  Rng rng(10);
  const StepOutcome so = learner_step(agent, u1, rng, false);
  const Unroll u2 = col.collect(agent);
  ASSERT_EQ(u2.start.output.shape(), so.last_state.output.shape());
  for (std::size_t i = 0; i < so.last_state.output.size(); ++i)
    EXPECT_NEAR(u2.start.output.data()[i], so.last_state.output.data()[i], 1e-12);
  // The last observation of one unroll opens the next.
  for (std::size_t b = 0; b < cfg.batch; ++b) {
    EXPECT_EQ(u2.obs[0][b].view, u1.obs[cfg.unroll][b].view);
    EXPECT_EQ(u2.carry[0][b], u1.carry[cfg.unroll][b]);
  }
}

TEST(Training, UniformBehaviourThreadsLearnerState) {
  ExperimentConfig cfg = tiny();
  cfg.rl_enabled = false;
  cfg.behaviour = "uniform_random";
  Agent agent(cfg, 13);
  Collector col(cfg, 13, agent);
  const Unroll u1 = col.collect(agent);
  Rng rng(13);
  const StepOutcome so = learner_step(agent, u1, rng, false);
  col.thread_state(so.last_state);
  EXPECT_EQ(col.collect(agent).start, so.last_state);
  const TrainingResult r = run_training(cfg, 13);
  EXPECT_EQ(r.frames, 60);
}

TEST(Training, NonFiniteLossAborts) {
  const ExperimentConfig cfg = tiny();
  Agent agent(cfg, 14);
  Collector col(cfg, 14, agent);
  const Unroll u = col.collect(agent);
  agent.params_of("v").front()->value.data()[0] = std::nan("");
  Rng rng(14);
  EXPECT_THROW(learner_step(agent, u, rng), NumericError);
}

TEST(Training, ProbeLossesRecordedPerUpdate) {
  const TrainingResult r = run_training(tiny(), 15);
  EXPECT_EQ(r.probe_losses.size(), static_cast<std::size_t>(r.updates));
  for (double l : r.probe_losses) {
    EXPECT_TRUE(std::isfinite(l));
    EXPECT_GT(l, 0.0);
  }
  ExperimentConfig kd = tiny(Method::rl_only);
  kd.env = "key_door";
  kd.grid = 5;
  EXPECT_TRUE(run_training(kd, 15).probe_losses.empty());
}

// ------------------------------------------------------------ evaluation

TEST(Eval, EpisodeCountAndPolicyErrors) {
  const ExperimentConfig cfg = tiny();
  Agent agent(cfg, 16);
  EXPECT_THROW(evaluate(agent, cfg, 0, 1), std::invalid_argument);
  EXPECT_THROW(evaluate_policy(nullptr, cfg, EvalPolicy::scripted, 1, 1), std::invalid_argument);
}

TEST(Eval, DeterministicInSeed) {
  ExperimentConfig cfg = tiny(Method::rl_only);
  cfg.env = "key_door";
  cfg.grid = 5;
  Agent agent(cfg, 17);
  const EvalResult a = evaluate(agent, cfg, 20, 3), b = evaluate(agent, cfg, 20, 3);
  EXPECT_EQ(a.mean_return, b.mean_return);
  EXPECT_EQ(a.episodes, b.episodes);
  EXPECT_EQ(a.episodes[0] + a.episodes[1], 20u);
}

TEST(Eval, ScriptedPolicyIsReference) {
  ExperimentConfig cfg = tiny(Method::rl_only);
  cfg.env = "key_door";
  cfg.grid = 5;
  cfg.episode_limit = 50;
  const EvalResult r = evaluate_policy(nullptr, cfg, EvalPolicy::scripted, 40, 2);
  EXPECT_DOUBLE_EQ(r.mean_return[0], 1.5);
  EXPECT_DOUBLE_EQ(r.mean_return[1], 0.5);
}

TEST(Eval, ZeroPolicyHeadMatchesUniformRandom) {
  ExperimentConfig cfg = tiny(Method::rl_only);
  cfg.env = "key_door";
  cfg.grid = 5;
  cfg.episode_limit = 40;
  Agent agent(cfg, 18);
  for (auto* p : agent.params_of("pi")) p->value.fill(0.0);
  const std::size_t n = 2000;
  auto overall = [](const EvalResult& r) {
    double s = 0.0;
    std::size_t c = 0;
    for (std::size_t k = 0; k < r.episodes.size(); ++k)
      if (r.episodes[k]) {
        s += r.mean_return[k] * r.episodes[k];
        c += r.episodes[k];
      }
    return s / c;
  };
  const double a = overall(evaluate(agent, cfg, n, 4));
  const double u = overall(evaluate_policy(nullptr, cfg, EvalPolicy::uniform_random, n, 5));
  // Returns lie in [0, 1.5], so each mean has standard error below 0.017.
  EXPECT_NEAR(a, u, 0.08);
}

TEST(NormalizedScore, Examples) {
  const auto t = aggregate_normalized_score({0.0, 1.0, 2.0}, {10.0, 3.0, 4.0}, {0.0, 3.0, 8.0});
  EXPECT_DOUBLE_EQ(t.rows[0].normalized, 0.0);
  EXPECT_DOUBLE_EQ(t.rows[1].normalized, 100.0);
  EXPECT_DOUBLE_EQ(t.rows[2].normalized, 300.0);
  EXPECT_DOUBLE_EQ(t.rows[2].capped, 100.0);
  EXPECT_DOUBLE_EQ(t.mean_normalized, 400.0 / 3.0);
  EXPECT_DOUBLE_EQ(t.mean_capped, 200.0 / 3.0);
  const auto half = aggregate_normalized_score({1.0}, {3.0}, {2.0});
  EXPECT_DOUBLE_EQ(half.mean_normalized, 50.0);
  const auto below = aggregate_normalized_score({1.0}, {3.0}, {0.0});
  EXPECT_DOUBLE_EQ(below.rows[0].capped, -50.0);
}

TEST(NormalizedScore, Errors) {
  EXPECT_THROW(aggregate_normalized_score({1.0}, {1.0}, {2.0}), std::invalid_argument);
  EXPECT_THROW(aggregate_normalized_score({1.0, 2.0}, {3.0}, {2.0}), std::invalid_argument);
  EXPECT_THROW(aggregate_normalized_score({}, {}, {}), std::invalid_argument);
}

// --------------------------------------------------------------- logging

TEST(Logging, LevelFromEnvironment) {
  unsetenv("PEBBLE_LOG_LEVEL");
  EXPECT_EQ(log_level_from_env(), spdlog::level::info);
  setenv("PEBBLE_LOG_LEVEL", "debug", 1);
  EXPECT_EQ(log_level_from_env(), spdlog::level::debug);
  setenv("PEBBLE_LOG_LEVEL", "error", 1);
  EXPECT_EQ(log_level_from_env(), spdlog::level::err);
  setenv("PEBBLE_LOG_LEVEL", "verbose", 1);
  EXPECT_THROW(log_level_from_env(), std::invalid_argument);
  setenv("PEBBLE_LOG_LEVEL", "error", 1);
  configure_logging();
  EXPECT_EQ(logger()->level(), spdlog::level::err);
  unsetenv("PEBBLE_LOG_LEVEL");
}

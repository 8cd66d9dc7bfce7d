#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pebble/harness/agent.hpp"
#include "pebble/harness/checkpoint.hpp"
#include "pebble/harness/csv.hpp"
#include "pebble/harness/logging.hpp"

namespace pebble::harness {

/// One T x B block of experience. Observation t of slot b is obs[t][b];
/// actions, rewards, continues and behaviour log-probs follow it. The last
/// observation row only bootstraps and opens the next unroll.
struct Unroll {
  std::size_t T = 0;
  std::size_t B = 0;
  AgentState start;                                // state before obs[0]
  std::vector<std::vector<Observation>> obs;       // [T+1][B]
  std::vector<std::vector<std::size_t>> actions;   // [T][B]
  std::vector<std::vector<double>> rewards;        // [T][B]
  std::vector<std::vector<double>> conts;          // [T][B]; 0 when the episode ended with the step
  std::vector<std::vector<double>> behaviour_logp; // [T][B]
  std::vector<std::vector<double>> carry;          // [T+1][B]; 0 when obs[t] opens an episode
  std::vector<std::vector<std::size_t>> tasks;     // [T+1][B]
  std::vector<std::vector<int>> object_cell;       // [T+1][B]; -1 without an object
  std::vector<std::vector<int>> since_visible;     // [T+1][B]; -1 if not yet seen this episode
};

struct EpisodeResult {
  std::size_t task = 0;
  double ret = 0.0;
};

/// B environments stepped in lockstep with either the agent's policy or
/// the uniform random policy.
class Collector {
 public:
  Collector(const ExperimentConfig& cfg, std::uint64_t seed, const Agent& agent)
      : cfg_(cfg), behaviour_rng_(Rng(seed).split("behaviour")) {
    const Rng env_root = Rng(seed).split("envs");
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      envs_.push_back(make_env(cfg, env_root.split(std::uint64_t{b}).seed()));
      current_.push_back(envs_.back()->reset());
      carry_.push_back(0.0);
      returns_.push_back(0.0);
      since_.push_back(-1);
      note_visibility(b);
    }
    start_ = agent.initial_state(cfg.batch);
    acting_ = start_;
  }

  const AgentState& start() const { return start_; }

  /// Overrides the state stored with the next unroll (used when the
  /// behaviour policy does not run the network).
  void thread_state(AgentState s) { start_ = std::move(s); }

  Unroll collect(Agent& agent) {
    const std::size_t T = cfg_.unroll, B = cfg_.batch;
    const bool use_agent = cfg_.behaviour == "agent";
    Unroll u;
    u.T = T;
    u.B = B;
    u.start = start_;
    u.obs.assign(T + 1, {});
    u.actions.assign(T, std::vector<std::size_t>(B));
    u.rewards.assign(T, std::vector<double>(B));
    u.conts.assign(T, std::vector<double>(B));
    u.behaviour_logp.assign(T, std::vector<double>(B));
    u.carry.assign(T + 1, std::vector<double>(B));
    u.tasks.assign(T + 1, std::vector<std::size_t>(B));
    u.object_cell.assign(T + 1, std::vector<int>(B));
    u.since_visible.assign(T + 1, std::vector<int>(B));
    AgentState state = start_;
    for (std::size_t t = 0; t <= T; ++t) {
      u.obs[t] = current_;
      u.carry[t] = carry_;
      for (std::size_t b = 0; b < B; ++b) {
        const env::GroundTruth g = envs_[b]->ground_truth();
        u.tasks[t][b] = g.task;
        u.object_cell[t][b] = g.object ? g.cell_index(*g.object) : -1;
        u.since_visible[t][b] = since_[b];
      }
      if (t == T) break;
      Tensor logits;
      if (use_agent) {
        logits = agent.act(current_, state, carry_);
        if (t + 1 == T) acting_ = state;
      }
      for (std::size_t b = 0; b < B; ++b) {
        std::size_t a;
        double logp;
        if (use_agent) {
          std::vector<double> p = softmax_row(logits.row(b));
          a = behaviour_rng_.categorical(p);
          logp = std::log(p[a]);
        } else {
          a = env::uniform_random_policy(behaviour_rng_);
          logp = -std::log(static_cast<double>(env::kActions));
        }
        const env::StepResult r = envs_[b]->step(a);
        u.actions[t][b] = a;
        u.rewards[t][b] = r.reward;
        u.conts[t][b] = r.cont ? 1.0 : 0.0;
        u.behaviour_logp[t][b] = logp;
        returns_[b] += r.reward;
        if (r.cont) {
          current_[b] = r.obs;
          carry_[b] = 1.0;
          if (since_[b] >= 0) ++since_[b];
        } else {
          finished_.push_back({envs_[b]->ground_truth().task, returns_[b]});
          returns_[b] = 0.0;
          current_[b] = envs_[b]->reset();
          carry_[b] = 0.0;
          since_[b] = -1;
        }
        note_visibility(b);
      }
    }
    if (use_agent) start_ = acting_;
    return u;
  }

  std::vector<EpisodeResult> drain_episodes() { return std::exchange(finished_, {}); }

  static std::vector<double> softmax_row(std::span<const double> logits) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : logits) m = std::max(m, x);
    std::vector<double> p;
    double z = 0.0;
    for (double x : logits) {
      p.push_back(std::exp(x - m));
      z += p.back();
    }
    for (auto& x : p) x /= z;
    return p;
  }

 private:
  void note_visibility(std::size_t b) {
    if (envs_[b]->ground_truth().object_visible) since_[b] = 0;
  }

  ExperimentConfig cfg_;
  Rng behaviour_rng_;
  std::vector<std::unique_ptr<env::Environment>> envs_;
  std::vector<Observation> current_;
  std::vector<double> carry_;
  std::vector<double> returns_;
  std::vector<int> since_;
  std::vector<EpisodeResult> finished_;
  AgentState start_, acting_;
};

/// What one learner step produced besides the parameter update.
struct StepOutcome {
  LossReport report;
  AgentState last_state;     // state after obs[T-1], for threading
  Tensor state_outputs;      // B_t rows for obs 0..T-1, time-major
  Tensor latents;            // Z rows for obs 0..T-1 (the prediction targets, or e(O) without them)
  std::optional<double> cpc_accuracy;
  std::size_t forward_pairs = 0;
};

namespace detail {
inline std::vector<Observation> flatten(const Unroll& u, std::size_t steps) {
  std::vector<Observation> out;
  out.reserve(steps * u.B);
  for (std::size_t t = 0; t < steps; ++t)
    for (const auto& o : u.obs[t]) out.push_back(o);
  return out;
}
}  // namespace detail

/// Builds the total loss for one unroll, applies one Adam step and then
/// the PopArt statistics update with output preservation.
inline StepOutcome learner_step(Agent& agent, const Unroll& u, Rng& rng, bool apply_update = true) {
  const ExperimentConfig& cfg = agent.config();
  const std::size_t T = u.T, B = u.B;
  Tape tape;
  const std::vector<Observation> all_obs = detail::flatten(u, T + 1);
  const Var e_all = agent.encoder()(tape, all_obs);
  std::vector<Var> per_step;
  for (std::size_t t = 0; t <= T; ++t) per_step.push_back(rows_range(e_all, t * B, (t + 1) * B));
  const StateVars start = bind_state(tape, u.start);
  const std::vector<StateVars> states = unroll_full(tape, agent.h_f(), start, per_step, u.carry);
  std::vector<Var> outputs;
  for (const auto& s : states) outputs.push_back(s.output);
  const Var b_seq = vstack(std::vector<Var>(outputs.begin(), outputs.begin() + static_cast<long>(T)));

  StepOutcome out;
  LossReport& rep = out.report;
  std::vector<Var> terms;
  auto add_term = [&](const std::string& name, const Var& v, double w) {
    rep.set(name, v.value().item(), w);
    if (w != 0.0) terms.push_back(scale(v, w));
  };

  std::vector<double> popart_targets;
  std::vector<std::size_t> popart_tasks;
  if (cfg.rl_enabled) {
    const Var logits = agent.policy()(tape, b_seq);
    const Var v_all = agent.value()(tape, vstack(outputs));
    std::vector<std::size_t> task_col;
    for (std::size_t t = 0; t <= T; ++t)
      for (std::size_t b = 0; b < B; ++b) task_col.push_back(u.tasks[t][b]);
    const Var v_norm = pick(v_all, task_col);
    const Tensor& vn = v_norm.value();
    auto& pa = agent.popart();
    auto unnorm = [&](std::size_t t, std::size_t b) {
      const std::size_t k = u.tasks[t][b];
      return pa.scale(k) * vn[t * B + b] + pa.mean(k);
    };
    const Tensor logp = log_softmax(tape.constant(logits.value())).value();
    std::vector<std::size_t> actions;
    std::vector<double> adv(T * B), ntarget(T * B);
    rl::VTraceConfig vc{cfg.gamma, cfg.lambda, cfg.rho_bar, cfg.c_bar};
    for (std::size_t b = 0; b < B; ++b) {
      std::vector<double> values(T + 1), rewards(T), mu(T), pi(T), conts(T);
      for (std::size_t t = 0; t <= T; ++t) values[t] = unnorm(t, b);
      for (std::size_t t = 0; t < T; ++t) {
        rewards[t] = u.rewards[t][b];
        mu[t] = u.behaviour_logp[t][b];
        pi[t] = logp(t * B + b, u.actions[t][b]);
        conts[t] = u.conts[t][b];
      }
      const rl::VTraceResult vt = rl::vtrace_targets(vc, values, rewards, mu, pi, conts);
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t k = u.tasks[t][b];
        const double sigma = pa.scale(k);
        adv[t * B + b] = vt.advantages[t] / sigma;
        ntarget[t * B + b] = (vt.targets[t] - pa.mean(k)) / sigma;
        popart_targets.push_back(vt.targets[t]);
        popart_tasks.push_back(k);
      }
    }
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t b = 0; b < B; ++b) actions.push_back(u.actions[t][b]);
    const rl::ActorCriticTerms ac =
        rl::actor_critic_loss(logits, rows_range(v_norm, 0, T * B), actions, adv, ntarget);
    add_term("rl_policy", ac.policy, 1.0);
    add_term("rl_value", ac.value, cfg.value_weight);
    add_term("rl_entropy", ac.entropy, -cfg.entropy_cost);
  }

  const std::vector<Observation> seq_obs = detail::flatten(u, T);
  std::vector<std::vector<std::size_t>> actions(u.actions.begin(), u.actions.end());
  std::vector<std::vector<double>> carry(u.carry.begin(), u.carry.begin() + static_cast<long>(T));
  const UnrollView view{T, B, Agent::kActions, &states, &actions, &carry};
  std::optional<Var> z_learned, z_frozen;
  if (cfg.uses_latent_encoder()) z_learned = agent.f()(tape, seq_obs);
  if (cfg.uses_random_projection()) z_frozen = agent.f_rp()(tape, seq_obs);

  if (cfg.uses_latent_encoder() || cfg.uses_random_projection()) {
    Rng idx_rng = rng.split("subsample");
    const SubsampleIndices idx =
        sample_subsample_indices(idx_rng, T, cfg.horizon, cfg.time_samples, cfg.future_samples);
    std::vector<ForwardTarget> targets;
    if (z_learned) targets.push_back({&agent.g(), *z_learned});
    if (z_frozen) targets.push_back({z_learned ? &agent.g2() : &agent.g(), *z_frozen});
    const ForwardLoss fwd = pbl_forward_loss(tape, agent.h_p(), view, idx, targets, cfg.regularizer);
    out.forward_pairs = fwd.selected_pairs;
    Var lf = fwd.loss[0], rf = fwd.regularizer[0];
    for (std::size_t i = 1; i < fwd.loss.size(); ++i) {
      lf = add(lf, fwd.loss[i]);
      rf = add(rf, fwd.regularizer[i]);
    }
    add_term("pbl_forward", lf, cfg.forward_weight);
    add_term("forward_regularizer", rf, cfg.forward_weight);
    if (z_learned) {
      const ReverseLoss rev = pbl_reverse_loss(agent.g_rev(), *z_learned, {b_seq}, cfg.regularizer);
      add_term("pbl_reverse", rev.loss, cfg.reverse_weight);
      add_term("reverse_regularizer", rev.regularizer, cfg.reverse_weight);
    }
  }

  if (cfg.method == Method::cpc) {
    Rng idx_rng = rng.split("subsample");
    Rng neg_rng = rng.split("negatives");
    const SubsampleIndices idx =
        sample_subsample_indices(idx_rng, T, cfg.horizon, cfg.time_samples, cfg.future_samples);
    const auto res = cpc_loss(tape, agent.h_p(), agent.d(), view, idx, rows_range(e_all, 0, T * B),
                              cfg.cpc_negatives, neg_rng);
    if (res) {
      add_term("cpc", res->loss, cfg.cpc_weight);
      out.cpc_accuracy = cpc_accuracy(res->pos_logits.value(), res->neg_logits.value());
    } else {
      rep.set("cpc", 0.0, cfg.cpc_weight);
    }
  }

  if (cfg.method == Method::pixel_control) {
    std::vector<Tensor> pc_rewards;
    const CellGrid& grid = agent.cell_grid();
    for (std::size_t t = 0; t < T; ++t) {
      Tensor r(Shape{B, grid.cells()});
      for (std::size_t b = 0; b < B; ++b) {
        const auto cells = pixel_control_rewards(grid, u.obs[t][b].view, u.obs[t + 1][b].view);
        std::copy(cells.begin(), cells.end(), r.row(b).begin());
      }
      pc_rewards.push_back(std::move(r));
    }
    const Var pc = pixel_control_loss(tape, agent.q_pc(), outputs, pc_rewards, u.actions, u.carry, Agent::kActions,
                                      PixelControlConfig{cfg.pc_n_step, cfg.pc_gamma});
    add_term("pixel_control", pc, cfg.pc_weight);
  }

  if (!rep.all_finite()) throw NumericError("non-finite loss: " + rep.dump());

  out.last_state = states[T - 1].read();
  out.state_outputs = b_seq.value();
  out.latents = z_learned ? z_learned->value() : z_frozen ? z_frozen->value() : rows_range(e_all, 0, T * B).value();

  if (apply_update && !terms.empty()) {
    Var total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
    if (!std::isfinite(total.value().item())) throw NumericError("non-finite total loss: " + rep.dump());
    agent.optimizer().zero_grad();
    tape.backward(total);
    agent.optimizer().step();
    if (cfg.rl_enabled) {
      auto& last = agent.value().layers().back();
      rl::popart_update_and_preserve(agent.popart(), last.weight(), last.bias(), popart_targets, popart_tasks);
    }
  }
  return out;
}

// ------------------------------------------------------------- training

struct TrainingResult {
  CsvTable log;
  long long frames = 0;
  long long updates = 0;
  std::vector<double> probe_losses;          // per update
  std::vector<double> memory_loss_sum;       // per update, summed over qualifying rows
  std::vector<std::size_t> memory_rows;      // per update
  std::optional<probe::CollapseMetrics> final_metrics;
  std::size_t degenerate_events = 0;
  std::vector<double> cpc_accuracy;          // per update, cpc only

  /// Mean over the last `fraction` of updates.
  double final_probe_loss(double fraction = 0.1) const {
    const std::size_t n = probe_losses.size();
    const std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(n * fraction));
    double s = 0.0;
    for (std::size_t i = n - k; i < n; ++i) s += probe_losses[i];
    return s / static_cast<double>(k);
  }
  /// Row-weighted memory-protocol loss over the last `fraction` of updates.
  std::optional<double> final_memory_loss(double fraction = 0.1) const {
    const std::size_t n = memory_rows.size();
    const std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(n * fraction));
    double s = 0.0;
    std::size_t c = 0;
    for (std::size_t i = n - k; i < n; ++i) {
      s += memory_loss_sum[i];
      c += memory_rows[i];
    }
    if (c == 0) return std::nullopt;
    return s / static_cast<double>(c);
  }
};

inline std::vector<std::string> log_columns(const ExperimentConfig& cfg) {
  std::vector<std::string> cols{"frames", "updates", "episodes"};
  for (std::size_t k = 0; k < tasks_for(cfg); ++k) cols.push_back("return_task" + std::to_string(k));
  for (const char* n : {"rl_policy", "rl_value", "rl_entropy", "pbl_forward", "forward_regularizer", "pbl_reverse",
                        "reverse_regularizer", "cpc", "pixel_control", "total_loss", "probe_loss",
                        "probe_memory_loss", "z_variance", "z_effective_rank", "z_cosine", "b_variance",
                        "b_effective_rank", "b_cosine", "degenerate"})
    cols.push_back(n);
  return cols;
}

struct TrainingOptions {
  std::string out_dir;      // empty: no files
  bool write_checkpoints = true;
};

/// Synchronous loop: collect, learn, probe, log. Deterministic in
/// (cfg, seed); wall-clock time goes to a separate file.
inline TrainingResult run_training(Agent& agent, std::uint64_t seed, const TrainingOptions& opt = {}) {
  const ExperimentConfig& cfg = agent.config();
  auto log = logger();
  Collector collector(cfg, seed, agent);
  Rng learn_rng = Rng(seed).split("learner");
  const bool probing = cfg.probe_enabled && cfg.env == "cube_room";

  TrainingResult res;
  res.log.columns = log_columns(cfg);
  CsvTable timing;
  timing.columns = {"frames", "seconds"};
  const auto t0 = std::chrono::steady_clock::now();
  if (!opt.out_dir.empty()) std::filesystem::create_directories(opt.out_dir);

  const long long per_update = cfg.frames_per_update();
  const long long every = cfg.log_every();
  const long long ckpt_every =
      std::max(per_update, static_cast<long long>(static_cast<double>(cfg.total_frames) * cfg.checkpoint_fraction));
  long long next_log = every, next_ckpt = ckpt_every;

  // window accumulators
  std::map<std::string, std::pair<double, std::size_t>> loss_acc;
  std::vector<double> ret_sum(tasks_for(cfg), 0.0);
  std::vector<std::size_t> ret_n(tasks_for(cfg), 0);
  double probe_sum = 0.0, mem_sum = 0.0;
  std::size_t probe_n = 0, mem_n = 0, episodes = 0;

  while (res.frames < cfg.total_frames) {
    const Unroll u = collector.collect(agent);
    Rng step_rng = learn_rng.split(static_cast<std::uint64_t>(res.updates));
    StepOutcome so = learner_step(agent, u, step_rng);
    if (cfg.behaviour != "agent") collector.thread_state(so.last_state);
    res.frames += per_update;
    ++res.updates;

    for (const auto& [name, e] : so.report.entries) {
      auto& a = loss_acc[name];
      a.first += e.value;
      ++a.second;
    }
    auto& tot = loss_acc["total_loss"];
    tot.first += so.report.total();
    ++tot.second;
    for (const auto& ep : collector.drain_episodes()) {
      ret_sum[ep.task] += ep.ret;
      ++ret_n[ep.task];
      ++episodes;
    }
    if (so.cpc_accuracy) res.cpc_accuracy.push_back(*so.cpc_accuracy);

    if (probing) {
      std::vector<std::size_t> cells;
      for (std::size_t t = 0; t < u.T; ++t)
        for (std::size_t b = 0; b < u.B; ++b) cells.push_back(static_cast<std::size_t>(u.object_cell[t][b]));
      const probe::ProbeStep ps = probe::train_probe_step(agent.probe(), so.state_outputs, cells);
      double ms = 0.0;
      std::size_t mr = 0;
      for (std::size_t t = 0; t < u.T; ++t)
        for (std::size_t b = 0; b < u.B; ++b)
          if (u.since_visible[t][b] >= static_cast<int>(cfg.memory_gap)) {
            ms += ps.per_row[t * u.B + b];
            ++mr;
          }
      res.probe_losses.push_back(ps.loss);
      res.memory_loss_sum.push_back(ms);
      res.memory_rows.push_back(mr);
      probe_sum += ps.loss;
      ++probe_n;
      mem_sum += ms;
      mem_n += mr;
    }

    const bool last = res.frames >= cfg.total_frames;
    if (res.frames >= next_log || last) {
      next_log += every;
      const std::size_t rows = std::min(cfg.diag_batch, so.latents.rows());
      std::vector<std::size_t> pick_rows(rows);
      for (std::size_t i = 0; i < rows; ++i) pick_rows[i] = i;
      auto head = [&](const Tensor& x) {
        Tensor h(Shape{rows, x.cols()});
        std::copy_n(x.data().begin(), rows * x.cols(), h.data().begin());
        return h;
      };
      const probe::CollapseMetrics cm = probe::collapse_metrics(head(so.latents), head(so.state_outputs));
      if (cm.latents.degenerate || cm.states.degenerate) ++res.degenerate_events;
      res.final_metrics = cm;

      std::vector<std::optional<double>> row;
      row.push_back(static_cast<double>(res.frames));
      row.push_back(static_cast<double>(res.updates));
      row.push_back(static_cast<double>(episodes));
      for (std::size_t k = 0; k < ret_sum.size(); ++k)
        row.push_back(ret_n[k] ? std::optional<double>(ret_sum[k] / ret_n[k]) : std::nullopt);
      for (const char* n : {"rl_policy", "rl_value", "rl_entropy", "pbl_forward", "forward_regularizer",
                            "pbl_reverse", "reverse_regularizer", "cpc", "pixel_control", "total_loss"}) {
        auto it = loss_acc.find(n);
        row.push_back(it != loss_acc.end() && it->second.second
                          ? std::optional<double>(it->second.first / it->second.second)
                          : std::nullopt);
      }
      row.push_back(probe_n ? std::optional<double>(probe_sum / probe_n) : std::nullopt);
      row.push_back(mem_n ? std::optional<double>(mem_sum / mem_n) : std::nullopt);
      row.push_back(cm.latents.mean_variance);
      row.push_back(cm.latents.effective_rank);
      row.push_back(cm.latents.mean_cosine);
      row.push_back(cm.states.mean_variance);
      row.push_back(cm.states.effective_rank);
      row.push_back(cm.states.mean_cosine);
      row.push_back(cm.latents.degenerate || cm.states.degenerate ? 1.0 : 0.0);
      res.log.rows.push_back(std::move(row));

      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      timing.rows.push_back({static_cast<double>(res.frames), secs});
      log->info("frames {} updates {} loss {:.5g} probe {:.4g} ({:.1f}s)", res.frames, res.updates,
                so.report.total(), probe_n ? probe_sum / probe_n : 0.0, secs);
      log->debug("losses: {}", so.report.dump());

      loss_acc.clear();
      std::fill(ret_sum.begin(), ret_sum.end(), 0.0);
      std::fill(ret_n.begin(), ret_n.end(), 0);
      probe_sum = mem_sum = 0.0;
      probe_n = mem_n = 0;
      episodes = 0;
      if (!opt.out_dir.empty()) {
        write_csv(res.log, opt.out_dir + "/log.csv");
        write_csv(timing, opt.out_dir + "/timing.csv");
      }
    }
    if (!opt.out_dir.empty() && opt.write_checkpoints && (res.frames >= next_ckpt || last)) {
      next_ckpt += ckpt_every;
      save_checkpoint(agent, opt.out_dir + "/checkpoint.txt", res.frames, res.updates);
    }
  }
  return res;
}

inline TrainingResult run_training(const ExperimentConfig& cfg, std::uint64_t seed, const TrainingOptions& opt = {}) {
  Agent agent(cfg, seed);
  return run_training(agent, seed, opt);
}

/// Discriminator accuracy of a trained cpc agent on fresh unrolls that
/// were never used for an update.
inline double heldout_cpc_accuracy(Agent& agent, std::uint64_t seed, std::size_t unrolls) {
  if (agent.config().method != Method::cpc) throw std::invalid_argument("heldout_cpc_accuracy: method is not cpc");
  Collector c(agent.config(), Rng(seed).split("heldout").seed(), agent);
  Rng rng = Rng(seed).split("heldout-learner");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < unrolls; ++i) {
    const Unroll u = c.collect(agent);
    Rng step = rng.split(std::uint64_t{i});
    const StepOutcome so = learner_step(agent, u, step, false);
    if (agent.config().behaviour != "agent") c.thread_state(so.last_state);
    if (so.cpc_accuracy) {
      s += *so.cpc_accuracy;
      ++n;
    }
  }
  if (n == 0) throw std::runtime_error("heldout_cpc_accuracy: no valid pairs");
  return s / static_cast<double>(n);
}

/// Probe maps and losses along one cube-room episode driven by the run's
/// behaviour policy.
struct ProbeTrace {
  std::vector<std::vector<double>> maps;  // G x G row-major per step
  std::vector<std::size_t> object_cell;
  std::vector<int> since_visible;
  std::vector<double> loss;
};

inline ProbeTrace probe_rollout(Agent& agent, std::size_t steps, std::uint64_t seed) {
  const ExperimentConfig& cfg = agent.config();
  if (cfg.env != "cube_room") throw std::invalid_argument("probe report: the probe target exists only for cube_room");
  if (!cfg.probe_enabled) throw std::invalid_argument("probe report: probe.enabled is false in this checkpoint");
  auto e = make_env(cfg, Rng(seed).split("probe-env").seed());
  Rng act_rng = Rng(seed).split("probe-policy");
  Observation obs = e->reset();
  AgentState state = agent.initial_state(1);
  double carry = 0.0;
  int since = -1;
  ProbeTrace tr;
  for (std::size_t i = 0; i < steps; ++i) {
    const env::GroundTruth g = e->ground_truth();
    if (g.object_visible) since = 0;
    const Tensor logits = agent.act({obs}, state, {carry});
    const auto cell = static_cast<std::size_t>(g.cell_index(*g.object));
    tr.maps.push_back(probe::probe_predict_grid(agent.probe(), state.output.row(0)));
    tr.loss.push_back(probe::probe_loss(agent.probe(), state.output, {cell}).loss);
    tr.object_cell.push_back(cell);
    tr.since_visible.push_back(since);
    const std::size_t a = cfg.behaviour == "agent" ? act_rng.categorical(Collector::softmax_row(logits.row(0)))
                                                   : env::uniform_random_policy(act_rng);
    const env::StepResult s = e->step(a);
    if (!s.cont) break;
    obs = s.obs;
    carry = 1.0;
    if (since >= 0) ++since;
  }
  return tr;
}

// ----------------------------------------------------------- evaluation

struct EvalResult {
  std::vector<double> mean_return;   // per task; NaN if the task never came up
  std::vector<std::size_t> episodes; // per task
};

enum class EvalPolicy { agent, uniform_random, scripted };

/// Rolls out `episodes` full episodes in one environment and averages the
/// raw return per (hidden) task.
inline EvalResult evaluate_policy(Agent* agent, const ExperimentConfig& cfg, EvalPolicy policy, std::size_t episodes,
                                  std::uint64_t seed) {
  if (episodes == 0) throw std::invalid_argument("evaluate: episodes must be positive");
  auto e = make_env(cfg, Rng(seed).split("eval-env").seed());
  Rng act_rng = Rng(seed).split("eval-policy");
  const std::size_t tasks = tasks_for(cfg);
  std::vector<double> sum(tasks, 0.0);
  EvalResult r;
  r.episodes.assign(tasks, 0);
  for (std::size_t ep = 0; ep < episodes; ++ep) {
    Observation obs = e->reset();
    AgentState state = agent ? agent->initial_state(1) : AgentState{};
    double carry = 0.0, ret = 0.0;
    const std::size_t task = e->ground_truth().task;
    for (;;) {
      std::size_t a = 0;
      if (policy == EvalPolicy::agent) {
        const Tensor logits = agent->act({obs}, state, {carry});
        a = act_rng.categorical(Collector::softmax_row(logits.row(0)));
      } else if (policy == EvalPolicy::uniform_random) {
        a = env::uniform_random_policy(act_rng);
      } else {
        auto* kd = dynamic_cast<env::KeyDoor*>(e.get());
        if (!kd) throw std::invalid_argument("evaluate: the scripted policy exists only for key_door");
        a = kd->optimal_action();
      }
      const env::StepResult s = e->step(a);
      ret += s.reward;
      carry = 1.0;
      obs = s.obs;
      if (!s.cont) break;
    }
    sum[task] += ret;
    ++r.episodes[task];
  }
  for (std::size_t k = 0; k < tasks; ++k)
    r.mean_return.push_back(r.episodes[k] ? sum[k] / r.episodes[k] : std::numeric_limits<double>::quiet_NaN());
  return r;
}

inline EvalResult evaluate(Agent& agent, const ExperimentConfig& cfg, std::size_t episodes, std::uint64_t seed) {
  return evaluate_policy(&agent, cfg, EvalPolicy::agent, episodes, seed);
}

struct ScoreRow {
  double random = 0.0;     // u_i
  double reference = 0.0;  // h_i
  double agent = 0.0;      // a_i
  double normalized = 0.0;
  double capped = 0.0;
};

struct NormalizedScoreTable {
  std::vector<ScoreRow> rows;
  double mean_normalized = 0.0;
  double mean_capped = 0.0;
};

/// 100 (a - u) / (h - u) per task, capped at 100, and the means.
inline NormalizedScoreTable aggregate_normalized_score(const std::vector<double>& random,
                                                       const std::vector<double>& reference,
                                                       const std::vector<double>& agent) {
  if (random.size() != reference.size() || random.size() != agent.size() || random.empty())
    throw std::invalid_argument("normalized score: per-task inputs differ in length");
  NormalizedScoreTable t;
  for (std::size_t i = 0; i < random.size(); ++i) {
    if (reference[i] == random[i])
      throw std::invalid_argument("normalized score: reference equals random score for task " + std::to_string(i));
    ScoreRow r{random[i], reference[i], agent[i], 0.0, 0.0};
    r.normalized = 100.0 * (agent[i] - random[i]) / (reference[i] - random[i]);
    r.capped = std::min(r.normalized, 100.0);
    t.mean_normalized += r.normalized / random.size();
    t.mean_capped += r.capped / random.size();
    t.rows.push_back(r);
  }
  return t;
}

}  // namespace pebble::harness

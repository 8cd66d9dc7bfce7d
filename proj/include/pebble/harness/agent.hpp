#pragma once

#include <memory>
#include <string>
#include <vector>

#include "pebble/envs.hpp"
#include "pebble/harness/config.hpp"
#include "pebble/history.hpp"
#include "pebble/losses.hpp"
#include "pebble/probes.hpp"
#include "pebble/rl.hpp"

namespace pebble::harness {

inline std::unique_ptr<env::Environment> make_env(const ExperimentConfig& c, std::uint64_t seed) {
  if (c.env == "cube_room") return std::make_unique<env::CubeRoom>(env::CubeRoomConfig{c.grid, c.episode_limit}, seed);
  env::KeyDoorConfig k;
  k.grid = c.grid;
  k.episode_limit = c.episode_limit;
  k.randomize_layout = c.randomize_layout;
  k.instructed = c.instructed;
  return std::make_unique<env::KeyDoor>(k, seed);
}

inline std::size_t view_width_for(const ExperimentConfig& c) {
  return static_cast<std::size_t>(2 * c.grid - 1) * env::kChannels;
}
inline std::size_t tasks_for(const ExperimentConfig& c) { return c.env == "cube_room" ? 1 : 2; }

/// All networks, optimizer state and normalization statistics of one run.
/// Holds raw parameter pointers, so it is neither copied nor moved.
class Agent {
 public:
  static constexpr std::size_t kActions = env::kActions;
  static constexpr std::size_t kActionSlots = env::kActions + 1;

  Agent(const ExperimentConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    validate(cfg_);
    Rng root = Rng(seed).split("agent");
    encoder_spec_.view_width = view_width_for(cfg_);
    encoder_spec_.view_layers = cfg_.view_layers;
    encoder_spec_.vocab = cfg_.vocab;
    encoder_spec_.word_embedding = cfg_.word_embedding;
    encoder_spec_.instruction_width = cfg_.instruction_width;
    encoder_spec_.max_instruction = cfg_.max_instruction;
    encoder_spec_.action_count = kActionSlots;
    const std::size_t dz = encoder_spec_.latent_width();

    lstm_spec_ = nn::LstmSpec{dz, cfg_.lstm_layers, cfg_.skip_mode == "concat" ? nn::SkipMode::concat : nn::SkipMode::none};
    const std::size_t db = lstm_spec_.output_width();

    auto rng = [&](const char* tag) { return root.split(tag); };
    Rng r;
    encoder_ = nn::Encoder("e", encoder_spec_, r = rng("e"));
    h_f_ = nn::Lstm("h_f", lstm_spec_, r = rng("h_f"));
    policy_ = nn::Mlp("pi", nn::MlpSpec{db, {cfg_.head_hidden, kActions}, false}, r = rng("pi"));
    value_ = nn::Mlp("v", nn::MlpSpec{db, {cfg_.head_hidden, tasks_for(cfg_)}, false}, r = rng("v"));
    if (cfg_.uses_partial()) {
      nn::LstmSpec hp = lstm_spec_;
      hp.input = kActions;
      h_p_ = nn::Lstm("h_p", hp, r = rng("h_p"));
    }
    auto with_output = [](std::vector<std::size_t> hidden, std::size_t out) {
      hidden.push_back(out);
      return hidden;
    };
    if (cfg_.uses_latent_encoder()) {
      f_ = nn::Encoder("f", encoder_spec_, r = rng("f"));
      g_rev_ = nn::Mlp("g_rev", nn::MlpSpec{dz, with_output(cfg_.g_rev_layers, db), false}, r = rng("g_rev"));
    }
    if (cfg_.uses_latent_encoder() || cfg_.uses_random_projection())
      g_ = nn::Mlp("g", nn::MlpSpec{db, with_output(cfg_.g_layers, dz), false}, r = rng("g"));
    if (cfg_.uses_random_projection()) {
      f_rp_ = nn::Encoder("f_rp", encoder_spec_, r = rng("f_rp"));
      nn::ParamList frozen;
      f_rp_.collect(frozen);
      for (auto* p : frozen) p->frozen = true;
    }
    if (cfg_.method == Method::pbl_grounded)
      g2_ = nn::Mlp("g2", nn::MlpSpec{db, with_output(cfg_.g_layers, dz), false}, r = rng("g2"));
    if (cfg_.method == Method::cpc)
      d_ = nn::Mlp("d", nn::MlpSpec{db + dz, with_output(cfg_.d_layers, 1), false}, r = rng("d"));
    if (cfg_.method == Method::pixel_control) {
      grid_ = CellGrid{static_cast<std::size_t>(2 * cfg_.grid - 1), env::kChannels,
                       cfg_.pc_cell_rows == 0 ? static_cast<std::size_t>(2 * cfg_.grid - 1) : cfg_.pc_cell_rows,
                       cfg_.pc_cell_cols};
      grid_.validate();
      q_pc_ = nn::Mlp("q_pc", nn::MlpSpec{db, {cfg_.pc_hidden, grid_.cells() * kActions}, false}, r = rng("q_pc"));
    }
    if (cfg_.probe_enabled) {
      Rng pr = rng("probe");
      probe_ = probe::Probe(probe::ProbeSpec{db, cfg_.probe_hidden, cfg_.grid}, pr,
                            rl::OptimizerConfig{cfg_.probe_learning_rate, 0.9, 0.999, 1e-8});
    }
    popart_ = rl::PopArtStats(tasks_for(cfg_), cfg_.popart_step);
    adam_ = rl::Adam(rl::OptimizerConfig{cfg_.learning_rate, cfg_.beta1, cfg_.beta2, cfg_.epsilon}, trainable());
  }

  Agent(const Agent&) = delete;
  Agent& operator=(const Agent&) = delete;

  const ExperimentConfig& config() const { return cfg_; }
  const nn::EncoderSpec& encoder_spec() const { return encoder_spec_; }
  const nn::LstmSpec& lstm_spec() const { return lstm_spec_; }
  std::size_t state_width() const { return lstm_spec_.output_width(); }
  std::size_t latent_width() const { return encoder_spec_.latent_width(); }

  nn::Encoder& encoder() { return encoder_; }
  nn::Lstm& h_f() { return h_f_; }
  nn::Lstm& h_p() { return h_p_; }
  nn::Mlp& policy() { return policy_; }
  nn::Mlp& value() { return value_; }
  nn::Encoder& f() { return f_; }
  nn::Encoder& f_rp() { return f_rp_; }
  nn::Mlp& g() { return g_; }
  nn::Mlp& g2() { return g2_; }
  nn::Mlp& g_rev() { return g_rev_; }
  nn::Mlp& d() { return d_; }
  nn::Mlp& q_pc() { return q_pc_; }
  const CellGrid& cell_grid() const { return grid_; }
  probe::Probe& probe() { return probe_; }
  rl::PopArtStats& popart() { return popart_; }
  rl::Adam& optimizer() { return adam_; }

  /// Every parameter the main optimizer updates.
  nn::ParamList trainable() {
    nn::ParamList all = representation_and_heads();
    nn::ParamList out;
    for (auto* p : all)
      if (!p->frozen) out.push_back(p);
    return out;
  }

  /// Every parameter, frozen and probe included, in checkpoint order.
  nn::ParamList all_parameters() {
    nn::ParamList all = representation_and_heads();
    if (cfg_.probe_enabled) probe_.net().collect(all);
    return all;
  }

  /// Groups for gradient-flow audits.
  nn::ParamList params_of(const std::string& group) {
    nn::ParamList out;
    if (group == "e") encoder_.collect(out);
    else if (group == "h_f") h_f_.collect(out);
    else if (group == "h_p" && cfg_.uses_partial()) h_p_.collect(out);
    else if (group == "f" && cfg_.uses_latent_encoder()) f_.collect(out);
    else if (group == "f_rp" && cfg_.uses_random_projection()) f_rp_.collect(out);
    else if (group == "g" && (cfg_.uses_latent_encoder() || cfg_.uses_random_projection())) g_.collect(out);
    else if (group == "g2" && cfg_.method == Method::pbl_grounded) g2_.collect(out);
    else if (group == "g_rev" && cfg_.uses_latent_encoder()) g_rev_.collect(out);
    else if (group == "d" && cfg_.method == Method::cpc) d_.collect(out);
    else if (group == "q_pc" && cfg_.method == Method::pixel_control) q_pc_.collect(out);
    else if (group == "pi") policy_.collect(out);
    else if (group == "v") value_.collect(out);
    return out;
  }

  AgentState initial_state(std::size_t rows) const { return pebble::initial_state(lstm_spec_, rows); }

  /// One acting step: resets rows with carry 0, consumes `obs`, returns the
  /// policy logits. `state` is advanced in place.
  Tensor act(const std::vector<Observation>& obs, AgentState& state, const std::vector<double>& carry) {
    Tape tape;
    StateVars s = bind_state(tape, state);
    Var z = encoder_(tape, obs);
    auto out = unroll_full(tape, h_f_, s, {z}, {carry});
    state = out.front().read();
    return policy_(tape, out.front().output).value();
  }

  /// Normalized value heads' output for one state batch.
  Tensor values(const Tensor& state_outputs) {
    Tape tape;
    return value_(tape, tape.constant(state_outputs)).value();
  }

 private:
  nn::ParamList representation_and_heads() {
    nn::ParamList all;
    encoder_.collect(all);
    h_f_.collect(all);
    policy_.collect(all);
    value_.collect(all);
    if (cfg_.uses_partial()) h_p_.collect(all);
    if (cfg_.uses_latent_encoder()) {
      f_.collect(all);
      g_rev_.collect(all);
    }
    if (cfg_.uses_latent_encoder() || cfg_.uses_random_projection()) g_.collect(all);
    if (cfg_.uses_random_projection()) f_rp_.collect(all);
    if (cfg_.method == Method::pbl_grounded) g2_.collect(all);
    if (cfg_.method == Method::cpc) d_.collect(all);
    if (cfg_.method == Method::pixel_control) q_pc_.collect(all);
    return all;
  }

  ExperimentConfig cfg_;
  nn::EncoderSpec encoder_spec_;
  nn::LstmSpec lstm_spec_;
  nn::Encoder encoder_;
  nn::Lstm h_f_;
  nn::Mlp policy_;
  nn::Mlp value_;
  nn::Lstm h_p_;
  nn::Encoder f_;
  nn::Encoder f_rp_;
  nn::Mlp g_;
  nn::Mlp g2_;
  nn::Mlp g_rev_;
  nn::Mlp d_;
  nn::Mlp q_pc_;
  CellGrid grid_;
  probe::Probe probe_;
  rl::PopArtStats popart_;
  rl::Adam adam_;
};

}  // namespace pebble::harness

#pragma once

#include <algorithm>
#include <variant>
#include <vector>

#include "pebble/nn.hpp"

namespace pebble {

/// B_t: recurrent state plus the flat output fed to MLPs. Batched over rows.
struct AgentState {
  nn::RecurrentState state;
  Tensor output;

  bool operator==(const AgentState&) const = default;
};

/// B_t on a tape.
struct StateVars {
  nn::LstmVars state;
  Var output;

  AgentState read() const { return AgentState{state.read(), output.value()}; }
};

/// B_{t,k} on a tape.
struct PartialVars {
  std::size_t t = 0;
  std::size_t k = 0;
  nn::LstmVars state;
  Var output;
};

/// B_0 = 0.
inline AgentState initial_state(const nn::LstmSpec& spec, std::size_t rows = 1) {
  return AgentState{nn::RecurrentState::zeros(spec, rows), Tensor(Shape{rows, spec.output_width()})};
}

inline StateVars bind_state(Tape& tape, const AgentState& s) {
  return StateVars{nn::LstmVars::bind(tape, s.state), tape.constant(s.output)};
}

/// B_{t+1} = h_f(B_t, O_{t+1}, A_t). `latents[t]` is f(O_t) (which already
/// carries the previous action); `carry[t][b] == 0` resets row b to B_0 before
/// it consumes observation t. Returns one state per latent.
inline std::vector<StateVars> unroll_full(Tape& tape, nn::Lstm& h_f, const StateVars& start,
                                          const std::vector<Var>& latents,
                                          const std::vector<std::vector<double>>& carry) {
  if (carry.size() != latents.size())
    throw ShapeError("unroll_full: " + std::to_string(latents.size()) + " latents but " +
                     std::to_string(carry.size()) + " continue flags");
  std::vector<StateVars> out;
  out.reserve(latents.size());
  nn::LstmVars state = start.state;
  const std::size_t rows = start.output.rows();
  for (std::size_t t = 0; t < latents.size(); ++t) {
    if (carry[t].size() != rows || latents[t].rows() != rows)
      throw ShapeError("unroll_full: batch mismatch at step " + std::to_string(t));
    const bool any_reset = std::any_of(carry[t].begin(), carry[t].end(), [](double c) { return c == 0.0; });
    if (any_reset) state = state.masked(carry[t]);
    auto [next, output] = h_f.step(tape, state, latents[t]);
    state = next;
    out.push_back(StateVars{std::move(next), output});
  }
  return out;
}

/// One-hot rows for a batch of actions.
inline Tensor one_hot(const std::vector<std::size_t>& actions, std::size_t width) {
  Tensor t(Shape{actions.size(), width});
  for (std::size_t i = 0; i < actions.size(); ++i) {
    if (actions[i] >= width) throw std::out_of_range("one_hot: action " + std::to_string(actions[i]));
    t(i, actions[i]) = 1.0;
  }
  return t;
}

/// B_{t,1..H}: h_p seeded from the LSTM state of B_t, fed only actions.
/// `actions[j]` holds the rows' action A_{t+j}, already one-hot.
inline std::vector<PartialVars> unroll_partial(Tape& tape, nn::Lstm& h_p, const nn::LstmVars& base,
                                               const std::vector<Tensor>& actions, std::size_t t = 0) {
  if (actions.empty()) throw std::invalid_argument("unroll_partial: horizon must be at least 1");
  std::vector<PartialVars> out;
  out.reserve(actions.size());
  nn::LstmVars state = base;
  for (std::size_t j = 0; j < actions.size(); ++j) {
    auto [next, output] = h_p.step(tape, state, tape.constant(actions[j]));
    state = next;
    out.push_back(PartialVars{t, j + 1, std::move(next), output});
  }
  return out;
}

enum class Consumer { mlp, rnn };

/// MLPs read the LSTM output; RNNs are seeded with the LSTM state.
inline std::variant<Tensor, nn::RecurrentState> state_or_output(const AgentState& b, Consumer consumer) {
  if (consumer == Consumer::mlp) return b.output;
  return b.state;
}

}  // namespace pebble

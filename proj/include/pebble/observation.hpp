#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

namespace pebble {

/// What the agent receives each step. Carries no ground-truth state.
struct Observation {
  std::vector<double> view;       // egocentric strip, position-major: view[pos * channels + channel]
  std::vector<int> instruction;   // token ids, possibly empty
  std::size_t prev_action = 0;    // action that produced this view (no-op slot at reset)
  double reward = 0.0;            // raw reward that came with this view

  bool operator==(const Observation&) const = default;
};

/// r -> 0.3 * tanh(r/5)_- + 1.5 * tanh(r/5)_+ ; monotone with range (-0.3, 1.5).
inline double transform_reward(double r) {
  const double t = std::tanh(r / 5.0);
  return t < 0 ? 0.3 * t : 1.5 * t;
}

}  // namespace pebble

#pragma once

#include <array>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pebble/observation.hpp"
#include "pebble/rng.hpp"

namespace pebble::env {

enum Action : std::size_t { forward = 0, turn_left = 1, turn_right = 2, interact = 3 };
inline constexpr std::size_t kActions = 4;
inline constexpr std::size_t kNoop = 4;  // previous-action slot at episode start

enum class Cell : std::uint8_t { empty = 0, wall, object, key, door, goal };
inline constexpr std::size_t kChannels = 6;

/// Instruction vocabulary shared by every environment.
namespace token {
inline constexpr int go = 1;
inline constexpr int key = 2;
inline constexpr int goal = 3;
inline constexpr int door = 4;
inline constexpr int object = 5;
}  // namespace token

// north, east, south, west; y grows downward
inline constexpr std::array<int, 4> kDx{0, 1, 0, -1};
inline constexpr std::array<int, 4> kDy{-1, 0, 1, 0};

struct Pos {
  int x = 0;
  int y = 0;
  bool operator==(const Pos&) const = default;
};

/// Read-only state for probes and tests; never part of an Observation.
struct GroundTruth {
  int grid = 0;
  Pos agent;
  int facing = 0;
  std::optional<Pos> object;
  std::optional<Pos> key, door, goal;
  bool has_key = false;
  std::size_t task = 0;
  bool object_visible = false;

  int cell_index(Pos p) const { return p.y * grid + p.x; }
};

struct StepResult {
  Observation obs;
  double reward = 0.0;
  bool cont = true;  // false: episode ended with this step
};

/// Egocentric strip: 2G-1 rays fanned over the forward half-plane, each
/// traversed cell by cell until it meets a non-empty cell or the outer wall.
/// Per ray the hit type's channel is 1 and channel 0 holds distance / max.
class RayCaster {
 public:
  explicit RayCaster(int grid) : grid_(grid), rays_(2 * grid - 1) {
    for (int d = 0; d < 4; ++d)
      for (int i = 0; i < rays_; ++i) {
        const double theta = (-90.0 + 180.0 * i / (rays_ - 1)) * 3.14159265358979323846 / 180.0;
        double vx = kDx[d] * std::cos(theta) - kDy[d] * std::sin(theta);
        double vy = kDx[d] * std::sin(theta) + kDy[d] * std::cos(theta);
        if (std::abs(vx) < 1e-12) vx = 0.0;
        if (std::abs(vy) < 1e-12) vy = 0.0;
        dirs_[d].push_back({vx, vy});
      }
    max_depth_ = std::sqrt(2.0) * (grid + 1);
  }

  int rays() const { return rays_; }

  /// Outer walls are told apart by side (north .8, east .6, south .4,
  /// west .2); interior walls read 1.
  double wall_tint(int x, int y) const {
    if (y < 0) return 0.8;
    if (x >= grid_) return 0.6;
    if (y >= grid_) return 0.4;
    if (x < 0) return 0.2;
    return 1.0;
  }

  std::size_t width() const { return static_cast<std::size_t>(rays_) * kChannels; }

  /// `at(x, y)` returns the cell type, or wall outside the grid.
  template <typename CellAt>
  std::vector<double> cast(Pos from, int facing, CellAt&& at, bool* saw_object = nullptr) const {
    std::vector<double> view(width(), 0.0);
    if (saw_object) *saw_object = false;
    for (int i = 0; i < rays_; ++i) {
      auto [vx, vy] = dirs_[facing][i];
      int cx = from.x, cy = from.y;
      const int sx = vx > 0 ? 1 : -1, sy = vy > 0 ? 1 : -1;
      const double inf = std::numeric_limits<double>::infinity();
      const double ddx = vx != 0.0 ? std::abs(1.0 / vx) : inf;
      const double ddy = vy != 0.0 ? std::abs(1.0 / vy) : inf;
      double tx = vx != 0.0 ? 0.5 * ddx : inf;
      double ty = vy != 0.0 ? 0.5 * ddy : inf;
      double depth = 0.0;
      Cell hit = Cell::wall;
      for (int guard = 0; guard < 4 * (grid_ + 2); ++guard) {
        if (tx < ty) {
          cx += sx;
          depth = tx;
          tx += ddx;
        } else {
          cy += sy;
          depth = ty;
          ty += ddy;
        }
        const Cell c = at(cx, cy);
        if (c != Cell::empty) {
          hit = c;
          break;
        }
      }
      const std::size_t base = static_cast<std::size_t>(i) * kChannels;
      view[base] = std::min(depth / max_depth_, 1.0);
      view[base + static_cast<std::size_t>(hit)] = hit == Cell::wall ? wall_tint(cx, cy) : 1.0;
      if (saw_object && hit == Cell::object) *saw_object = true;
    }
    return view;
  }

 private:
  int grid_;
  int rays_;
  double max_depth_ = 1.0;
  std::array<std::vector<std::pair<double, double>>, 4> dirs_;
};

class Environment {
 public:
  virtual ~Environment() = default;
  virtual std::string name() const = 0;
  virtual Observation reset() = 0;
  virtual StepResult step(std::size_t action) = 0;
  virtual GroundTruth ground_truth() const = 0;
  virtual std::size_t tasks() const = 0;
  virtual std::size_t view_width() const = 0;
  virtual int grid() const = 0;

  /// Reseeds the episode stream, then resets.
  Observation reset(std::uint64_t seed) {
    rng_ = Rng(seed);
    return reset();
  }

 protected:
  explicit Environment(std::uint64_t seed) : rng_(seed) {}
  static void check_action(std::size_t a) {
    if (a >= kActions) throw std::out_of_range("env: action " + std::to_string(a) + " not in [0, 4)");
  }
  Rng rng_;
};

// -------------------------------------------------------------- cube room

struct CubeRoomConfig {
  int grid = 7;
  int episode_limit = 60;
};

/// Empty G x G room with one cube at a uniformly random cell. The cube
/// blocks movement; there is no reward.
class CubeRoom final : public Environment {
 public:
  explicit CubeRoom(CubeRoomConfig cfg = {}, std::uint64_t seed = 0) : Environment(seed), cfg_(cfg), caster_(cfg.grid) {
    if (cfg.grid < 2) throw std::invalid_argument("cube room: grid must be at least 2");
    if (cfg.episode_limit < 1) throw std::invalid_argument("cube room: episode limit must be positive");
  }

  using Environment::reset;
  std::string name() const override { return "cube_room"; }
  std::size_t tasks() const override { return 1; }
  std::size_t view_width() const override { return caster_.width(); }
  int grid() const override { return cfg_.grid; }
  const CubeRoomConfig& config() const { return cfg_; }

  Observation reset() override {
    const int cells = cfg_.grid * cfg_.grid;
    const int a = static_cast<int>(rng_.below(cells));
    agent_ = {a % cfg_.grid, a / cfg_.grid};
    facing_ = static_cast<int>(rng_.below(4));
    int o = static_cast<int>(rng_.below(cells - 1));
    if (o >= a) ++o;
    object_ = {o % cfg_.grid, o / cfg_.grid};
    steps_ = 0;
    return observe(kNoop, 0.0);
  }

  /// Places agent and cube explicitly (tests, probes).
  Observation place(Pos agent, int facing, Pos object) {
    if (agent == object) throw std::invalid_argument("cube room: agent and object overlap");
    agent_ = agent;
    facing_ = facing;
    object_ = object;
    steps_ = 0;
    return observe(kNoop, 0.0);
  }

  StepResult step(std::size_t action) override {
    check_action(action);
    switch (action) {
      case forward: {
        const Pos n{agent_.x + kDx[facing_], agent_.y + kDy[facing_]};
        if (inside(n) && !(n == object_)) agent_ = n;
        break;
      }
      case turn_left: facing_ = (facing_ + 3) % 4; break;
      case turn_right: facing_ = (facing_ + 1) % 4; break;
      default: break;
    }
    ++steps_;
    StepResult r;
    r.obs = observe(action, 0.0);
    r.cont = steps_ < cfg_.episode_limit;
    return r;
  }

  GroundTruth ground_truth() const override {
    GroundTruth g;
    g.grid = cfg_.grid;
    g.agent = agent_;
    g.facing = facing_;
    g.object = object_;
    g.object_visible = visible_;
    return g;
  }

 private:
  bool inside(Pos p) const { return p.x >= 0 && p.y >= 0 && p.x < cfg_.grid && p.y < cfg_.grid; }

  Observation observe(std::size_t prev, double reward) {
    Observation o;
    o.view = caster_.cast(
        agent_, facing_,
        [&](int x, int y) {
          if (!inside({x, y})) return Cell::wall;
          return Pos{x, y} == object_ ? Cell::object : Cell::empty;
        },
        &visible_);
    o.prev_action = prev;
    o.reward = reward;
    return o;
  }

  CubeRoomConfig cfg_;
  RayCaster caster_;
  Pos agent_, object_;
  int facing_ = 0;
  int steps_ = 0;
  bool visible_ = false;
};

// --------------------------------------------------------------- key door

struct KeyDoorConfig {
  int grid = 5;
  int episode_limit = 50;
  bool randomize_layout = false;
  bool instructed = false;
  double key_reward = 0.5;
  double goal_reward = 1.0;
};

/// A wall column with one door splits the room; the goal sits behind it and
/// the key in front. Walking onto the key picks it up; the door only lets a
/// key holder through. Hidden task 0: key then goal (goal ends the episode).
/// Hidden task 1: the key pickup itself ends the episode.
class KeyDoor final : public Environment {
 public:
  explicit KeyDoor(KeyDoorConfig cfg = {}, std::uint64_t seed = 0) : Environment(seed), cfg_(cfg), caster_(cfg.grid) {
    if (cfg.grid < 4) throw std::invalid_argument("key door: grid must be at least 4");
    if (cfg.episode_limit < 1) throw std::invalid_argument("key door: episode limit must be positive");
  }

  using Environment::reset;
  std::string name() const override { return "key_door"; }
  std::size_t tasks() const override { return 2; }
  std::size_t view_width() const override { return caster_.width(); }
  int grid() const override { return cfg_.grid; }
  const KeyDoorConfig& config() const { return cfg_; }

  Observation reset() override {
    Rng layout(rng_.next_u64());
    // The task draw uses its own stream so both variants share everything else.
    Rng task_rng = layout.split("task");
    return reset_with(layout, task_rng.below(2));
  }

  /// Same episode draws as `reset`, with the hidden task forced.
  Observation reset_task(std::size_t task) {
    if (task >= 2) throw std::out_of_range("key door: task id " + std::to_string(task));
    Rng layout(rng_.next_u64());
    return reset_with(layout, task);
  }

  StepResult step(std::size_t action) override {
    check_action(action);
    double reward = 0.0;
    bool done = false;
    switch (action) {
      case forward: {
        const Pos n{agent_.x + kDx[facing_], agent_.y + kDy[facing_]};
        const Cell c = at(n.x, n.y);
        if (c == Cell::wall || (c == Cell::door && !has_key_)) break;
        agent_ = n;
        if (c == Cell::key) {
          has_key_ = true;
          reward += cfg_.key_reward;
          if (task_ == 1) done = true;
        } else if (c == Cell::goal && task_ == 0) {
          reward += cfg_.goal_reward;
          done = true;
        }
        break;
      }
      case turn_left: facing_ = (facing_ + 3) % 4; break;
      case turn_right: facing_ = (facing_ + 1) % 4; break;
      default: break;
    }
    ++steps_;
    StepResult r;
    r.reward = reward;
    r.obs = observe(action, reward);
    r.cont = !done && steps_ < cfg_.episode_limit;
    return r;
  }

  GroundTruth ground_truth() const override {
    GroundTruth g;
    g.grid = cfg_.grid;
    g.agent = agent_;
    g.facing = facing_;
    if (!has_key_) g.key = key_;
    g.door = door_;
    g.goal = goal_;
    g.has_key = has_key_;
    g.task = task_;
    return g;
  }

  /// Cell type at (x, y) in the current state; outside is wall.
  Cell at(int x, int y) const {
    const int G = cfg_.grid;
    if (x < 0 || y < 0 || x >= G || y >= G) return Cell::wall;
    const Pos p{x, y};
    if (!has_key_ && p == key_) return Cell::key;
    if (p == goal_) return Cell::goal;
    if (x == G - 2) return p == door_ ? Cell::door : Cell::wall;
    return Cell::empty;
  }

  /// Shortest action sequence to the reward-bearing cells of the current
  /// task (breadth-first over position and facing). Used as the reference
  /// policy for normalized scores.
  std::size_t optimal_action() const {
    const Pos target = !has_key_ ? key_ : goal_;
    const int G = cfg_.grid;
    auto id = [&](Pos p, int d) { return (p.y * G + p.x) * 4 + d; };
    std::vector<int> first(G * G * 4, -1);
    std::vector<bool> seen(G * G * 4, false);
    std::deque<std::pair<Pos, int>> q;
    seen[id(agent_, facing_)] = true;
    q.push_back({agent_, facing_});
    while (!q.empty()) {
      auto [p, d] = q.front();
      q.pop_front();
      if (p == target) return static_cast<std::size_t>(first[id(p, d)]);
      for (std::size_t a = 0; a < 3; ++a) {
        Pos np = p;
        int nd = d;
        if (a == forward) {
          const Pos n{p.x + kDx[d], p.y + kDy[d]};
          const Cell c = at(n.x, n.y);
          if (c == Cell::wall || (c == Cell::door && !has_key_)) continue;
          np = n;
        } else {
          nd = a == turn_left ? (d + 3) % 4 : (d + 1) % 4;
        }
        const int k = id(np, nd);
        if (seen[k]) continue;
        seen[k] = true;
        first[k] = first[id(p, d)] < 0 ? static_cast<int>(a) : first[id(p, d)];
        q.push_back({np, nd});
      }
    }
    return interact;
  }

 private:
  Observation reset_with(Rng& layout, std::size_t task) {
    const int G = cfg_.grid;
    task_ = task;
    has_key_ = false;
    steps_ = 0;
    if (cfg_.randomize_layout) {
      door_ = {G - 2, static_cast<int>(layout.below(G))};
      goal_ = {G - 1, static_cast<int>(layout.below(G))};
      const int k = static_cast<int>(layout.below((G - 2) * G));
      key_ = {k % (G - 2), k / (G - 2)};
    } else {
      door_ = {G - 2, G / 2};
      goal_ = {G - 1, G - 1};
      key_ = {0, 0};
    }
    // Agent anywhere in the front region except the key cell.
    const int front = (G - 2) * G;
    const int key_index = key_.y * (G - 2) + key_.x;
    int a = static_cast<int>(layout.below(front - 1));
    if (a >= key_index) ++a;
    agent_ = {a % (G - 2), a / (G - 2)};
    facing_ = static_cast<int>(layout.below(4));
    return observe(kNoop, 0.0);
  }

  Observation observe(std::size_t prev, double reward) const {
    Observation o;
    o.view = caster_.cast(agent_, facing_, [&](int x, int y) { return at(x, y); });
    if (cfg_.instructed) o.instruction = {token::go, task_ == 0 ? token::goal : token::key};
    o.prev_action = prev;
    o.reward = reward;
    return o;
  }

  KeyDoorConfig cfg_;
  RayCaster caster_;
  Pos agent_, key_, door_, goal_;
  int facing_ = 0;
  int steps_ = 0;
  bool has_key_ = false;
  std::size_t task_ = 0;
};

/// Uniform over the four actions; ignores observations entirely.
inline std::size_t uniform_random_policy(Rng& rng) { return rng.below(kActions); }

/// One line per step: t, action, reward, continue, then ground truth.
inline void write_trajectory_csv(const std::string& path, Environment& env, const std::vector<std::size_t>& actions) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write trajectory file " + path);
  out << "t,action,reward,continue,agent_x,agent_y,facing,object_x,object_y,has_key,task\n";
  for (std::size_t t = 0; t < actions.size(); ++t) {
    const StepResult r = env.step(actions[t]);
    const GroundTruth g = env.ground_truth();
    out << t << ',' << actions[t] << ',' << r.reward << ',' << (r.cont ? 1 : 0) << ',' << g.agent.x << ','
        << g.agent.y << ',' << g.facing << ',' << (g.object ? g.object->x : -1) << ','
        << (g.object ? g.object->y : -1) << ',' << (g.has_key ? 1 : 0) << ',' << g.task << '\n';
    if (!r.cont) env.reset();
  }
}

}  // namespace pebble::env

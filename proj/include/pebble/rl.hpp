#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pebble/autodiff.hpp"
#include "pebble/nn.hpp"

namespace pebble::rl {

struct VTraceConfig {
  double gamma = 0.99;
  double lambda = 0.99;
  double rho_bar = 1.0;
  double c_bar = 1.0;

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("vtrace: gamma must be in (0, 1]");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("vtrace: lambda must be in [0, 1]");
    if (!(rho_bar > 0.0 && c_bar > 0.0)) throw std::invalid_argument("vtrace: clip thresholds must be positive");
  }
};

struct VTraceResult {
  std::vector<double> targets;     // v_s
  std::vector<double> advantages;  // rho_s (r_s + gamma cont_s v_{s+1} - V_s)
};

/// One sequence. `values` has n+1 entries (the last bootstraps), the other
/// arrays n. `continues[s]` is 0 when the episode ends after step s.
inline VTraceResult vtrace_targets(const VTraceConfig& cfg, const std::vector<double>& values,
                                   const std::vector<double>& rewards, const std::vector<double>& behaviour_logp,
                                   const std::vector<double>& target_logp, const std::vector<double>& continues) {
  cfg.validate();
  const std::size_t n = rewards.size();
  if (values.size() != n + 1 || behaviour_logp.size() != n || target_logp.size() != n || continues.size() != n)
    throw std::invalid_argument("vtrace: sequence lengths do not align (values " + std::to_string(values.size()) +
                                ", rewards " + std::to_string(n) + ")");
  VTraceResult out;
  out.targets.assign(n, 0.0);
  out.advantages.assign(n, 0.0);
  std::vector<double> rho(n), c(n);
  for (std::size_t s = 0; s < n; ++s) {
    if (!std::isfinite(behaviour_logp[s]) || !std::isfinite(target_logp[s]))
      throw NumericError("vtrace: non-finite log-probability at step " + std::to_string(s));
    const double ratio = std::exp(target_logp[s] - behaviour_logp[s]);
    rho[s] = std::min(cfg.rho_bar, ratio);
    c[s] = cfg.lambda * std::min(cfg.c_bar, ratio);
  }
  double acc = 0.0;  // v_s - V(x_s)
  for (std::size_t s = n; s-- > 0;) {
    const double disc = cfg.gamma * continues[s];
    const double delta = rho[s] * (rewards[s] + disc * values[s + 1] - values[s]);
    acc = delta + disc * c[s] * acc;
    out.targets[s] = values[s] + acc;
  }
  for (std::size_t s = 0; s < n; ++s) {
    const double next = s + 1 < n ? out.targets[s + 1] : values[n];
    out.advantages[s] = rho[s] * (rewards[s] + cfg.gamma * continues[s] * next - values[s]);
  }
  return out;
}

// ---------------------------------------------------------------- PopArt

class PopArtStats {
 public:
  static constexpr double kMinScale = 1e-4;
  static constexpr double kMaxScale = 1e6;

  PopArtStats() = default;
  PopArtStats(std::size_t tasks, double step = 3e-4) : step_(step), mean_(tasks, 0.0), second_(tasks, 1.0) {}

  std::size_t tasks() const { return mean_.size(); }
  double step() const { return step_; }
  double mean(std::size_t i) const { return mean_.at(i); }
  double second_moment(std::size_t i) const { return second_.at(i); }
  double scale(std::size_t i) const {
    const double var = std::max(second_.at(i) - mean_.at(i) * mean_.at(i), 0.0);
    return std::clamp(std::sqrt(var), kMinScale, kMaxScale);
  }
  void set(std::size_t i, double mean, double second) {
    mean_.at(i) = mean;
    second_.at(i) = second;
  }

 private:
  double step_ = 3e-4;
  std::vector<double> mean_;
  std::vector<double> second_;
};

/// Moves the per-task moments toward the batch statistics of `targets` and
/// rescales the value layer (one output column per task) so unnormalized
/// predictions sigma*y + mu are unchanged.
inline void popart_update_and_preserve(PopArtStats& stats, Parameter& weight, Parameter& bias,
                                       const std::vector<double>& targets, const std::vector<std::size_t>& task_ids) {
  if (targets.size() != task_ids.size()) throw std::invalid_argument("popart: targets and task ids differ in length");
  if (weight.value.cols() != stats.tasks() || bias.value.size() != stats.tasks())
    throw ShapeError("popart: value layer has " + std::to_string(weight.value.cols()) + " outputs for " +
                     std::to_string(stats.tasks()) + " tasks");
  std::vector<double> sum(stats.tasks(), 0.0), sq(stats.tasks(), 0.0);
  std::vector<std::size_t> count(stats.tasks(), 0);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!std::isfinite(targets[i])) throw NumericError("popart: non-finite target at index " + std::to_string(i));
    const std::size_t k = task_ids[i];
    if (k >= stats.tasks()) throw std::out_of_range("popart: task id " + std::to_string(k));
    sum[k] += targets[i];
    sq[k] += targets[i] * targets[i];
    ++count[k];
  }
  const std::size_t in = weight.value.rows();
  for (std::size_t k = 0; k < stats.tasks(); ++k) {
    if (count[k] == 0) continue;
    const double mu = stats.mean(k), sigma = stats.scale(k);
    const double b = stats.step();
    const double mu_new = mu + b * (sum[k] / count[k] - mu);
    const double nu_new = stats.second_moment(k) + b * (sq[k] / count[k] - stats.second_moment(k));
    stats.set(k, mu_new, nu_new);
    const double sigma_new = stats.scale(k);
    for (std::size_t r = 0; r < in; ++r) weight.value(r, k) *= sigma / sigma_new;
    bias.value[k] = (sigma * bias.value[k] + mu - mu_new) / sigma_new;
  }
}

// ------------------------------------------------------------ actor-critic

struct ActorCriticTerms {
  Var policy;   // -mean(adv * log pi(a))
  Var value;    // mean squared error in normalized space
  Var entropy;  // mean per-step entropy
};

/// `logits` [N x A], `values` [N x 1] normalized predictions for each row's
/// task, `advantages` and `normalized_targets` per row (no gradient).
inline ActorCriticTerms actor_critic_loss(const Var& logits, const Var& values, const std::vector<std::size_t>& actions,
                                          const std::vector<double>& advantages,
                                          const std::vector<double>& normalized_targets) {
  const std::size_t N = logits.rows();
  if (actions.size() != N || advantages.size() != N || normalized_targets.size() != N || values.rows() != N)
    throw ShapeError("actor-critic: batch sizes differ");
  if (!logits.value().all_finite()) throw NumericError("actor-critic: non-finite logits");
  Tape& tape = logits.tape();
  const Var logp = log_softmax(logits);
  const Var adv = tape.constant(Tensor(Shape{N, 1}, advantages));
  const Var policy = scale(mean(mul(pick(logp, actions), adv)), -1.0);
  const Var value = mean(squared_difference(values, tape.constant(Tensor(Shape{N, 1}, normalized_targets))));
  const Var entropy = scale(mean(row_sum(mul(softmax(logits), logp))), -1.0);
  return {policy, value, entropy};
}

// ------------------------------------------------------------------- Adam

struct OptimizerConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.0;
  double beta2 = 0.999;
  double epsilon = 1e-6;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("adam: learning rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw std::invalid_argument("adam: beta1 must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("adam: beta2 must be in [0, 1)");
    if (!(epsilon > 0.0)) throw std::invalid_argument("adam: epsilon must be positive");
  }
};

/// Adam with bias correction over a fixed parameter list. Frozen
/// parameters are rejected.
class Adam {
 public:
  Adam() = default;
  Adam(OptimizerConfig cfg, std::vector<Parameter*> params) : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
    for (auto* p : params_) {
      if (p->frozen) throw std::invalid_argument("adam: parameter " + p->name + " is frozen and cannot be optimized");
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  const OptimizerConfig& config() const { return cfg_; }
  std::size_t steps() const { return t_; }
  const std::vector<Parameter*>& params() const { return params_; }
  const Tensor& first_moment(std::size_t i) const { return m_.at(i); }
  const Tensor& second_moment(std::size_t i) const { return v_.at(i); }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  /// Applies one update from the accumulated gradients.
  void step() {
    for (auto* p : params_) {
      if (p->frozen) throw std::logic_error("adam: parameter " + p->name + " became frozen");
      if (!p->grad.all_finite()) throw NumericError("adam: non-finite gradient for parameter " + p->name);
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto w = params_[i]->value.data();
      auto g = params_[i]->grad.data();
      auto m = m_[i].data();
      auto v = v_[i].data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        w[j] -= cfg_.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.epsilon);
      }
    }
  }

  /// Moment buffers and step count, for checkpointing.
  void restore(std::size_t steps, std::vector<Tensor> m, std::vector<Tensor> v) {
    if (m.size() != params_.size() || v.size() != params_.size()) throw ShapeError("adam: restore size mismatch");
    t_ = steps;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  OptimizerConfig cfg_;
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace pebble::rl

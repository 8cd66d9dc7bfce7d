#include <gtest/gtest.h>

#include <cmath>

#include "pebble/observation.hpp"
#include "pebble/rl.hpp"

using namespace pebble;
using namespace pebble::rl;

namespace {

std::vector<double> uniform_vec(Rng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Definition by explicit sums: v_s = V_s + sum_t (prod of discounts and
// traces from s to t) delta_t.
std::vector<double> vtrace_oracle(const VTraceConfig& cfg, const std::vector<double>& V, const std::vector<double>& r,
                                  const std::vector<double>& mu, const std::vector<double>& pi,
                                  const std::vector<double>& cont) {
  const std::size_t n = r.size();
  std::vector<double> out(n);
  for (std::size_t s = 0; s < n; ++s) {
    double total = V[s], coef = 1.0;
    for (std::size_t t = s; t < n; ++t) {
      const double ratio = std::exp(pi[t] - mu[t]);
      const double rho = std::min(cfg.rho_bar, ratio), c = cfg.lambda * std::min(cfg.c_bar, ratio);
      total += coef * rho * (r[t] + cfg.gamma * cont[t] * V[t + 1] - V[t]);
      coef *= cfg.gamma * cont[t] * c;
    }
    out[s] = total;
  }
  return out;
}

// Recursive lambda-return.
std::vector<double> lambda_returns(double gamma, double lambda, const std::vector<double>& V,
                                   const std::vector<double>& r) {
  const std::size_t n = r.size();
  std::vector<double> g(n + 1);
  g[n] = V[n];
  for (std::size_t s = n; s-- > 0;) g[s] = r[s] + gamma * ((1.0 - lambda) * V[s + 1] + lambda * g[s + 1]);
  g.pop_back();
  return g;
}

Parameter random_param(Rng& rng, const std::string& name, Shape shape) {
  Tensor t(shape);
  for (auto& x : t.data()) x = rng.uniform(-1.0, 1.0);
  return Parameter(name, t);
}

}  // namespace

// -------------------------------------------------------- reward transform

TEST(RewardTransform, Examples) {
  EXPECT_EQ(transform_reward(0.0), 0.0);
  EXPECT_NEAR(transform_reward(5.0), 1.14239, 1e-5);
  EXPECT_NEAR(transform_reward(-5.0), -0.22848, 1e-5);
  EXPECT_DOUBLE_EQ(transform_reward(5.0), 1.5 * std::tanh(1.0));
  EXPECT_DOUBLE_EQ(transform_reward(-5.0), 0.3 * std::tanh(-1.0));
  EXPECT_NEAR(transform_reward(50.0), 1.5 * std::tanh(10.0), 1e-15);
  EXPECT_NEAR(transform_reward(-50.0), 0.3 * std::tanh(-10.0), 1e-15);
}

TEST(RewardTransform, StrictlyIncreasingAndBounded) {
  double prev = transform_reward(-19.0);
  for (double r = -18.99; r <= 19.0; r += 0.01) {
    const double y = transform_reward(r);
    EXPECT_GT(y, prev) << r;
    EXPECT_GT(y, -0.3);
    EXPECT_LT(y, 1.5);
    prev = y;
  }
  EXPECT_GE(transform_reward(-1e6), -0.3);
  EXPECT_LE(transform_reward(1e6), 1.5);
}

// ------------------------------------------------------------------ V-trace

TEST(VTrace, ZeroRewardsZeroValues) {
  const auto out = vtrace_targets({}, std::vector<double>(6, 0.0), std::vector<double>(5, 0.0),
                                  std::vector<double>(5, -1.0), std::vector<double>(5, -2.0),
                                  std::vector<double>(5, 1.0));
  for (double v : out.targets) EXPECT_EQ(v, 0.0);
  for (double a : out.advantages) EXPECT_EQ(a, 0.0);
}

TEST(VTrace, SingleStepIsTdTarget) {
  const auto out = vtrace_targets({}, {0.3, 0.7}, {1.25}, {-1.0}, {-1.0}, {1.0});
  EXPECT_DOUBLE_EQ(out.targets[0], 1.25 + 0.99 * 0.7);
  EXPECT_DOUBLE_EQ(out.advantages[0], 1.25 + 0.99 * 0.7 - 0.3);
}

TEST(VTrace, OnPolicyLambdaOneIsNStepReturn) {
  Rng rng(1);
  VTraceConfig cfg;
  cfg.lambda = 1.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(10);
    const auto V = uniform_vec(rng, n + 1, -2, 2), r = uniform_vec(rng, n, -1, 1);
    const auto lp = uniform_vec(rng, n, -3, 0);
    const auto out = vtrace_targets(cfg, V, r, lp, lp, std::vector<double>(n, 1.0));
    for (std::size_t s = 0; s < n; ++s) {
      double ret = 0.0, disc = 1.0;
      for (std::size_t t = s; t < n; ++t) {
        ret += disc * r[t];
        disc *= cfg.gamma;
      }
      ret += disc * V[n];
      EXPECT_NEAR(out.targets[s], ret, 1e-12);
    }
  }
}

TEST(VTrace, OnPolicyEqualsLambdaReturn) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    VTraceConfig cfg;
    cfg.lambda = rng.uniform();
    cfg.gamma = rng.uniform(0.5, 1.0);
    const std::size_t n = 1 + rng.below(10);
    const auto V = uniform_vec(rng, n + 1, -2, 2), r = uniform_vec(rng, n, -1, 1);
    const auto lp = uniform_vec(rng, n, -3, 0);
    const auto out = vtrace_targets(cfg, V, r, lp, lp, std::vector<double>(n, 1.0));
    const auto oracle = lambda_returns(cfg.gamma, cfg.lambda, V, r);
    for (std::size_t s = 0; s < n; ++s) EXPECT_NEAR(out.targets[s], oracle[s], 1e-12);
  }
}

TEST(VTrace, OffPolicyMatchesExplicitSums) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    VTraceConfig cfg;
    cfg.rho_bar = rng.uniform(0.5, 2.0);
    cfg.c_bar = rng.uniform(0.5, 2.0);
    const std::size_t n = 1 + rng.below(10);
    const auto V = uniform_vec(rng, n + 1, -2, 2), r = uniform_vec(rng, n, -1, 1);
    const auto mu = uniform_vec(rng, n, -3, 0), pi = uniform_vec(rng, n, -3, 0);
    std::vector<double> cont(n, 1.0);
    for (auto& c : cont)
      if (rng.uniform() < 0.2) c = 0.0;
    const auto out = vtrace_targets(cfg, V, r, mu, pi, cont);
    const auto oracle = vtrace_oracle(cfg, V, r, mu, pi, cont);
    for (std::size_t s = 0; s < n; ++s) {
      EXPECT_NEAR(out.targets[s], oracle[s], 1e-12);
      const double next = s + 1 < n ? oracle[s + 1] : V[n];
      const double rho = std::min(cfg.rho_bar, std::exp(pi[s] - mu[s]));
      EXPECT_NEAR(out.advantages[s], rho * (r[s] + cfg.gamma * cont[s] * next - V[s]), 1e-12);
    }
  }
}

TEST(VTrace, EpisodeEndStopsBootstrapping) {
  const auto out = vtrace_targets({}, {0.0, 5.0, 7.0}, {1.0, 2.0}, {0.0, 0.0}, {0.0, 0.0}, {0.0, 1.0});
  EXPECT_DOUBLE_EQ(out.targets[0], 1.0);
}

TEST(VTrace, Errors) {
  EXPECT_THROW(vtrace_targets({}, {0.0, 0.0}, {1.0, 2.0}, {0.0, 0.0}, {0.0, 0.0}, {1.0, 1.0}), std::invalid_argument);
  EXPECT_THROW(vtrace_targets({}, {0.0, 0.0}, {1.0}, {-INFINITY}, {0.0}, {1.0}), NumericError);
  VTraceConfig bad;
  bad.lambda = 1.5;
  EXPECT_THROW(vtrace_targets(bad, {0.0, 0.0}, {1.0}, {0.0}, {0.0}, {1.0}), std::invalid_argument);
  bad = {};
  bad.gamma = 0.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

// ------------------------------------------------------------------ PopArt

TEST(PopArt, StatisticsStep) {
  Rng rng(4);
  PopArtStats stats(2);
  Parameter w = random_param(rng, "w", Shape{3, 2}), b = random_param(rng, "b", Shape{2});
  popart_update_and_preserve(stats, w, b, {2.0, 4.0, 10.0}, {0, 0, 1});
  EXPECT_DOUBLE_EQ(stats.mean(0), 3e-4 * 3.0);
  EXPECT_DOUBLE_EQ(stats.mean(1), 3e-4 * 10.0);
  EXPECT_DOUBLE_EQ(stats.second_moment(0), 1.0 + 3e-4 * (10.0 - 1.0));
  EXPECT_DOUBLE_EQ(stats.second_moment(1), 1.0 + 3e-4 * (100.0 - 1.0));
}

TEST(PopArt, UntouchedTaskIsUnchanged) {
  Rng rng(5);
  PopArtStats stats(3);
  Parameter w = random_param(rng, "w", Shape{4, 3}), b = random_param(rng, "b", Shape{3});
  const Tensor w0 = w.value, b0 = b.value;
  popart_update_and_preserve(stats, w, b, {1.0, 2.0}, {0, 0});
  EXPECT_EQ(stats.mean(2), 0.0);
  for (std::size_t r = 0; r < 4; ++r) EXPECT_EQ(w.value(r, 2), w0(r, 2));
  EXPECT_EQ(b.value[2], b0[2]);
}

TEST(PopArt, PreservesUnnormalizedPredictions) {
  Rng rng(6);
  const std::size_t in = 5, tasks = 2;
  PopArtStats stats(tasks);
  Parameter w = random_param(rng, "w", Shape{in, tasks}), b = random_param(rng, "b", Shape{tasks});
  std::vector<std::vector<double>> inputs;
  for (int i = 0; i < 10; ++i) inputs.push_back(uniform_vec(rng, in, -1, 1));
  auto predict = [&](const std::vector<double>& x, std::size_t k) {
    double y = b.value[k];
    for (std::size_t r = 0; r < in; ++r) y += x[r] * w.value(r, k);
    return stats.scale(k) * y + stats.mean(k);
  };
  for (int update = 0; update < 1000; ++update) {
    std::vector<std::vector<double>> before(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i)
      for (std::size_t k = 0; k < tasks; ++k) before[i].push_back(predict(inputs[i], k));
    std::vector<double> targets;
    std::vector<std::size_t> ids;
    for (int j = 0; j < 16; ++j) {
      const std::size_t k = rng.below(tasks);
      targets.push_back(k == 0 ? rng.uniform(-50, 50) : rng.uniform(900, 1100));
      ids.push_back(k);
    }
    popart_update_and_preserve(stats, w, b, targets, ids);
    for (std::size_t k = 0; k < tasks; ++k) {
      EXPECT_GE(stats.scale(k), PopArtStats::kMinScale);
      EXPECT_LE(stats.scale(k), PopArtStats::kMaxScale);
    }
    for (std::size_t i = 0; i < inputs.size(); ++i)
      for (std::size_t k = 0; k < tasks; ++k) {
        const double now = predict(inputs[i], k);
        ASSERT_LE(std::abs(now - before[i][k]), 1e-9 * std::max(1.0, std::abs(before[i][k])))
            << "update " << update << " task " << k;
      }
  }
}

TEST(PopArt, ConstantTargetsDriveScaleToTheLowerBound) {
  Rng rng(7);
  PopArtStats stats(1);
  Parameter w = random_param(rng, "w", Shape{2, 1}), b = random_param(rng, "b", Shape{1});
  for (int i = 0; i < 200000; ++i) popart_update_and_preserve(stats, w, b, {3.0}, {0});
  EXPECT_NEAR(stats.mean(0), 3.0, 1e-9);
  EXPECT_EQ(stats.scale(0), PopArtStats::kMinScale);
}

TEST(PopArt, Errors) {
  Rng rng(8);
  PopArtStats stats(2);
  Parameter w = random_param(rng, "w", Shape{2, 2}), b = random_param(rng, "b", Shape{2});
  EXPECT_THROW(popart_update_and_preserve(stats, w, b, {NAN}, {0}), NumericError);
  EXPECT_THROW(popart_update_and_preserve(stats, w, b, {1.0}, {0, 1}), std::invalid_argument);
  EXPECT_THROW(popart_update_and_preserve(stats, w, b, {1.0}, {2}), std::out_of_range);
  Parameter w3 = random_param(rng, "w", Shape{2, 3});
  EXPECT_THROW(popart_update_and_preserve(stats, w3, b, {1.0}, {0}), ShapeError);
}

// ------------------------------------------------------------ actor-critic

TEST(ActorCritic, UniformPolicyEntropyIsLnFour) {
  Tape t;
  const auto terms = actor_critic_loss(t.constant(Tensor(Shape{3, 4})), t.constant(Tensor(Shape{3, 1})), {0, 1, 2},
                                       {0.0, 0.0, 0.0}, {0.0, 0.0, 0.0});
  EXPECT_NEAR(terms.entropy.value().item(), std::log(4.0), 1e-15);
  EXPECT_EQ(terms.policy.value().item(), 0.0);
  EXPECT_EQ(terms.value.value().item(), 0.0);
}

TEST(ActorCritic, PerfectValuesAndPolicyGradient) {
  Rng rng(9);
  Tape t;
  Tensor logits(Shape{2, 4});
  for (auto& x : logits.data()) x = rng.uniform(-1, 1);
  Parameter lp("logits", logits);
  const Var l = t.parameter(lp);
  const auto terms = actor_critic_loss(l, t.constant(Tensor(Shape{2, 1}, {0.5, -0.25})), {1, 3}, {2.0, -1.0},
                                       {0.5, -0.25});
  EXPECT_EQ(terms.value.value().item(), 0.0);
  // -mean(adv * log pi(a)) by hand.
  double expect = 0.0;
  for (std::size_t r = 0; r < 2; ++r) {
    double z = 0.0;
    for (std::size_t a = 0; a < 4; ++a) z += std::exp(logits(r, a));
    const std::size_t act = r == 0 ? 1 : 3;
    expect += (r == 0 ? 2.0 : -1.0) * (logits(r, act) - std::log(z));
  }
  EXPECT_NEAR(terms.policy.value().item(), -expect / 2.0, 1e-14);
  // Gradient of the policy term: -adv (onehot - softmax) / N.
  t.backward(terms.policy);
  double z0 = 0.0;
  for (std::size_t a = 0; a < 4; ++a) z0 += std::exp(logits(0, a));
  EXPECT_NEAR(lp.grad(0, 1), -2.0 * (1.0 - std::exp(logits(0, 1)) / z0) / 2.0, 1e-14);
}

TEST(ActorCritic, Errors) {
  Tape t;
  EXPECT_THROW(actor_critic_loss(t.constant(Tensor(Shape{2, 4})), t.constant(Tensor(Shape{2, 1})), {0}, {0.0, 0.0},
                                 {0.0, 0.0}),
               ShapeError);
}

// -------------------------------------------------------------------- Adam

TEST(Adam, DefaultsMatchTheAgentSettings) {
  const OptimizerConfig c;
  EXPECT_EQ(c.learning_rate, 1e-4);
  EXPECT_EQ(c.beta1, 0.0);
  EXPECT_EQ(c.beta2, 0.999);
  EXPECT_EQ(c.epsilon, 1e-6);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Rng rng(10);
  Parameter p = random_param(rng, "p", Shape{3, 3});
  const Tensor before = p.value;
  Adam opt(OptimizerConfig{}, {&p});
  opt.zero_grad();
  for (int i = 0; i < 5; ++i) opt.step();
  EXPECT_EQ(p.value, before);
}

TEST(Adam, FirstMomentIsTheRawGradient) {
  Rng rng(11);
  Parameter p = random_param(rng, "p", Shape{2, 3});
  Adam opt(OptimizerConfig{}, {&p});
  for (int i = 0; i < 4; ++i) {
    for (auto& g : p.grad.data()) g = rng.uniform(-1, 1);
    opt.step();
    EXPECT_EQ(opt.first_moment(0), p.grad);
  }
}

TEST(Adam, ConstantGradientFixedPoint) {
  Parameter p("p", Tensor(Shape{1, 3}));
  Adam opt(OptimizerConfig{}, {&p});
  const std::vector<double> g{0.5, -2.0, 1e-3};
  for (int i = 0; i < 100; ++i) {
    const Tensor before = p.value;
    for (std::size_t j = 0; j < 3; ++j) p.grad[j] = g[j];
    opt.step();
    for (std::size_t j = 0; j < 3; ++j) {
      const double expected = -1e-4 * g[j] / (std::abs(g[j]) + 1e-6);
      EXPECT_NEAR(p.value[j] - before[j], expected, 1e-15);
    }
  }
}

TEST(Adam, Errors) {
  Parameter p("weights", Tensor(Shape{1, 2}));
  Adam opt(OptimizerConfig{}, {&p});
  p.grad[1] = NAN;
  try {
    opt.step();
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("weights"), std::string::npos);
  }
  OptimizerConfig bad;
  bad.learning_rate = 0.0;
  EXPECT_THROW(Adam(bad, {&p}), std::invalid_argument);
  bad = {};
  bad.beta2 = 1.0;
  EXPECT_THROW(Adam(bad, {&p}), std::invalid_argument);
  Parameter frozen("frozen", Tensor(Shape{1, 1}));
  frozen.frozen = true;
  EXPECT_THROW(Adam(OptimizerConfig{}, {&frozen}), std::invalid_argument);
}

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "pebble/history.hpp"
#include "pebble/probes.hpp"

using namespace pebble;
using namespace pebble::probe;

namespace {

Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c) {
  Tensor t(Shape{r, c});
  for (auto& x : t.data()) x = rng.uniform(-1.0, 1.0);
  return t;
}

// Last layer emits `bias` regardless of input.
void constant_logits(Probe& p, const std::vector<double>& bias) {
  nn::Linear& last = p.net().layers().back();
  last.weight().value.fill(0.0);
  for (std::size_t i = 0; i < bias.size(); ++i) last.bias().value[i] = bias[i];
}

Tensor orthonormal_rows(Rng& rng, std::size_t k, std::size_t d) {
  Tensor q(Shape{k, d});
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += v[c] * q(j, c);
      for (std::size_t c = 0; c < d; ++c) v[c] -= dot * q(j, c);
    }
    double n = 0.0;
    for (double x : v) n += x * x;
    for (std::size_t c = 0; c < d; ++c) q(i, c) = v[c] / std::sqrt(n);
  }
  return q;
}

}  // namespace

TEST(Probe, UniformLogitsGiveLnCellCount) {
  Rng rng(1);
  Probe p(ProbeSpec{6, {8}, 7}, rng);
  constant_logits(p, std::vector<double>(49, 0.0));
  const auto step = probe_loss(p, random_tensor(rng, 5, 6), {0, 7, 48, 20, 3});
  EXPECT_NEAR(step.loss, std::log(49.0), 1e-12);
  EXPECT_NEAR(std::log(49.0), 3.8918, 1e-4);
  for (double x : step.per_row) EXPECT_NEAR(x, std::log(49.0), 1e-12);
}

TEST(Probe, ConfidentCorrectLogitsGiveNearZeroLoss) {
  Rng rng(2);
  Probe p(ProbeSpec{4, {5}, 3}, rng);
  std::vector<double> bias(9, 0.0);
  bias[4] = 30.0;
  constant_logits(p, bias);
  EXPECT_LT(probe_loss(p, random_tensor(rng, 3, 4), {4, 4, 4}).loss, 1e-6);
}

TEST(Probe, TrainingReducesLossOnAFixedBatch) {
  Rng rng(3);
  Probe p(ProbeSpec{6, {16}, 3}, rng);
  const Tensor x = random_tensor(rng, 12, 6);
  std::vector<std::size_t> cells;
  for (std::size_t i = 0; i < 12; ++i) cells.push_back(i % 9);
  const double first = train_probe_step(p, x, cells).loss;
  double last = first;
  for (int i = 0; i < 300; ++i) last = train_probe_step(p, x, cells).loss;
  EXPECT_LT(last, 0.5 * first);
}

TEST(Probe, RepresentationParametersStayBitIdentical) {
  Rng rng(4);
  const nn::LstmSpec spec{5, {6, 4}, nn::SkipMode::concat};
  nn::Lstm h("h_f", spec, rng);
  nn::ParamList rep;
  h.collect(rep);
  for (auto* q : rep) q->zero_grad();
  std::vector<Tensor> before;
  for (auto* q : rep) before.push_back(q->value);

  Probe p(ProbeSpec{spec.output_width(), {8}, 4}, rng);
  for (int step = 0; step < 50; ++step) {
    Tape tape;
    std::vector<Var> xs;
    for (int t = 0; t < 3; ++t) xs.push_back(tape.constant(random_tensor(rng, 2, 5)));
    const auto states =
        unroll_full(tape, h, bind_state(tape, initial_state(spec, 2)), xs, std::vector<std::vector<double>>(3, {1, 1}));
    std::vector<std::size_t> cells{rng.below(16), rng.below(16)};
    train_probe_step(p, states.back().output.value(), cells);
  }
  for (std::size_t i = 0; i < rep.size(); ++i) {
    EXPECT_EQ(rep[i]->value, before[i]);
    for (double g : rep[i]->grad.data()) EXPECT_EQ(g, 0.0);
  }
}

TEST(Probe, LogitsAreDetachedFromTheirInputs) {
  Rng rng(5);
  Probe p(ProbeSpec{3, {4}, 2}, rng);
  Tape tape;
  const Var l = p.logits(tape, random_tensor(rng, 2, 3));
  EXPECT_EQ(l.cols(), 4u);
  // Only probe parameters can receive gradient.
  nn::ParamList ps;
  p.net().collect(ps);
  for (auto* q : ps) q->zero_grad();
  tape.backward(sum(l));
  double total = 0.0;
  for (auto* q : ps)
    for (double g : q->grad.data()) total += std::abs(g);
  EXPECT_GT(total, 0.0);
}

TEST(Probe, Errors) {
  Rng rng(6);
  Probe p(ProbeSpec{3, {4}, 2}, rng);
  EXPECT_THROW(train_probe_step(p, random_tensor(rng, 1, 3), {4}), std::out_of_range);
  EXPECT_THROW(train_probe_step(p, random_tensor(rng, 2, 3), {1}), ShapeError);
  EXPECT_THROW(train_probe_step(p, random_tensor(rng, 1, 5), {1}), ShapeError);
  EXPECT_THROW(Probe(ProbeSpec{3, {4}, 0}, rng), std::invalid_argument);
}

TEST(Probe, InputStandardizationUsesSeenRows) {
  Rng rng(7);
  Probe p(ProbeSpec{3, {4}, 2}, rng);
  Tensor x = random_tensor(rng, 50, 3);
  for (std::size_t i = 0; i < 50; ++i) x(i, 2) = 100.0 + 5.0 * x(i, 2);
  EXPECT_EQ(p.standardize(x), x);  // nothing seen yet
  p.observe(x);
  const Tensor z = p.standardize(x);
  for (std::size_t j = 0; j < 3; ++j) {
    double mu = 0.0, var = 0.0;
    for (std::size_t i = 0; i < 50; ++i) mu += z(i, j) / 50.0;
    for (std::size_t i = 0; i < 50; ++i) var += (z(i, j) - mu) * (z(i, j) - mu) / 50.0;
    EXPECT_NEAR(mu, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-12);
  }
  Probe q(ProbeSpec{3, {4}, 2}, rng);
  q.set_input_statistics(p.input_statistics());
  EXPECT_EQ(q.standardize(x), z);
  EXPECT_THROW(q.set_input_statistics({1.0, 2.0}), ShapeError);
}

TEST(Probe, SplitObservationMatchesOneBatch) {
  Rng rng(8);
  Probe a(ProbeSpec{4, {4}, 2}, rng), b(ProbeSpec{4, {4}, 2}, rng);
  const Tensor x = random_tensor(rng, 10, 4);
  a.observe(x);
  b.observe(Tensor(Shape{4, 4}, std::vector<double>(x.data().begin(), x.data().begin() + 16)));
  b.observe(Tensor(Shape{6, 4}, std::vector<double>(x.data().begin() + 16, x.data().end())));
  const auto sa = a.input_statistics(), sb = b.input_statistics();
  for (std::size_t i = 0; i < sa.size(); ++i) EXPECT_NEAR(sa[i], sb[i], 1e-12);
}

// ------------------------------------------------------------------- maps

TEST(ProbeMap, SumsToOneAndArgmaxMatchesLogits) {
  Rng rng(9);
  Probe p(ProbeSpec{5, {7}, 7}, rng);
  for (int i = 0; i < 20; ++i) {
    const Tensor x = random_tensor(rng, 1, 5);
    const auto map = probe_predict_grid(p, x.row(0));
    ASSERT_EQ(map.size(), 49u);
    double s = 0.0;
    for (double v : map) s += v;
    EXPECT_NEAR(s, 1.0, 1e-9);
    Tape tape;
    const Tensor l = p.logits(tape, x).value();
    const auto lm = std::max_element(l.data().begin(), l.data().end()) - l.data().begin();
    EXPECT_EQ(std::max_element(map.begin(), map.end()) - map.begin(), lm);
  }
}

TEST(ProbeMap, UniformLogitsGiveFlatMap) {
  Rng rng(10);
  Probe p(ProbeSpec{2, {3}, 4}, rng);
  constant_logits(p, std::vector<double>(16, 0.7));
  for (double v : probe_predict_grid(p, std::vector<double>{0.3, -0.2})) EXPECT_NEAR(v, 1.0 / 16.0, 1e-15);
}

TEST(ProbeMap, GraymapFormat) {
  const std::vector<double> probs{0.1, 0.2, 0.0, 0.4, 0.05, 0.05, 0.1, 0.1, 0.0};
  const std::string pgm = grid_to_pgm(probs, 3);
  EXPECT_EQ(pgm, "P2\n3 3\n255\n64 128 0\n255 32 32\n64 64 0\n");
  std::istringstream in(pgm);
  std::string magic;
  int w, h, maxval;
  in >> magic >> w >> h >> maxval;
  EXPECT_EQ(magic, "P2");
  EXPECT_EQ(w, 3);
  EXPECT_EQ(h, 3);
  EXPECT_EQ(maxval, 255);
  int v, hi = 0, n = 0;
  while (in >> v) {
    EXPECT_GE(v, 0);
    EXPECT_LE(v, 255);
    hi = std::max(hi, v);
    ++n;
  }
  EXPECT_EQ(n, 9);
  EXPECT_EQ(hi, 255);
  EXPECT_THROW(grid_to_pgm(probs, 4), ShapeError);
}

// ------------------------------------------------------------- collapse

TEST(Collapse, IdenticalBatchIsDegenerate) {
  Tensor x(Shape{6, 4});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 4; ++j) x(i, j) = 0.5 * j - 0.3;
  const auto m = batch_metrics(x);
  EXPECT_TRUE(m.degenerate);
  EXPECT_EQ(m.effective_rank, 1.0);
  EXPECT_EQ(m.mean_cosine, 1.0);
  for (double v : m.variance) EXPECT_EQ(v, 0.0);
}

TEST(Collapse, OrthonormalBatchHasFullRank) {
  Rng rng(11);
  for (std::size_t k = 2; k <= 6; ++k) {
    const Tensor q = orthonormal_rows(rng, k, 8);
    const auto m = batch_metrics(q);
    EXPECT_NEAR(m.effective_rank, static_cast<double>(k), 1e-6);
    EXPECT_NEAR(m.mean_cosine, 0.0, 1e-12);
    EXPECT_FALSE(m.degenerate);
  }
}

TEST(Collapse, TallBatchUsesTheColumnGram) {
  // More rows than columns: three orthonormal directions, each repeated.
  Rng rng(12);
  const Tensor q = orthonormal_rows(rng, 3, 3);
  Tensor x(Shape{9, 3});
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 3; ++j) x(i, j) = q(i % 3, j);
  EXPECT_NEAR(batch_metrics(x).effective_rank, 3.0, 1e-6);
}

TEST(Collapse, RankBoundsOnRandomBatches) {
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(12), d = 1 + rng.below(12);
    const Tensor x = random_tensor(rng, n, d);
    const auto m = batch_metrics(x);
    EXPECT_GE(m.effective_rank, 1.0);
    EXPECT_LE(m.effective_rank, static_cast<double>(std::min(n, d)) + 1e-12);
    EXPECT_GE(m.mean_cosine, -1.0);
    EXPECT_LE(m.mean_cosine, 1.0);
    for (double v : m.variance) EXPECT_GE(v, 0.0);
  }
}

TEST(Collapse, PermutationInvariant) {
  Rng rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 3 + rng.below(8), d = 2 + rng.below(8);
    const Tensor x = random_tensor(rng, n, d);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t i = n; i-- > 1;) std::swap(perm[i], perm[rng.below(i + 1)]);
    Tensor y(Shape{n, d});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) y(i, j) = x(perm[i], j);
    const auto a = batch_metrics(x), b = batch_metrics(y);
    EXPECT_NEAR(a.effective_rank, b.effective_rank, 1e-9);
    EXPECT_NEAR(a.mean_cosine, b.mean_cosine, 1e-12);
    for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(a.variance[j], b.variance[j], 1e-12);
  }
}

TEST(Collapse, JacobiMatchesKnownSpectrum) {
  // [[2, 1], [1, 2]] has eigenvalues 1 and 3.
  auto ev = jacobi_eigenvalues({2, 1, 1, 2}, 2);
  std::sort(ev.begin(), ev.end());
  EXPECT_NEAR(ev[0], 1.0, 1e-12);
  EXPECT_NEAR(ev[1], 3.0, 1e-12);
}

TEST(Collapse, ErrorsAndBothBlocks) {
  EXPECT_THROW(batch_metrics(Tensor(Shape{1, 3})), std::invalid_argument);
  Rng rng(15);
  const auto m = collapse_metrics(random_tensor(rng, 4, 3), Tensor(Shape{4, 5}));
  EXPECT_FALSE(m.latents.degenerate);
  EXPECT_TRUE(m.states.degenerate);
}

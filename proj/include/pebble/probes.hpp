#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "pebble/nn.hpp"
#include "pebble/rl.hpp"

namespace pebble::probe {

struct ProbeSpec {
  std::size_t input = 64;
  std::vector<std::size_t> hidden{64};
  int grid = 7;

  std::size_t cells() const { return static_cast<std::size_t>(grid) * static_cast<std::size_t>(grid); }
};

/// Grid-position predictor trained on detached representations with its
/// own optimizer.
class Probe {
 public:
  Probe() = default;
  Probe(ProbeSpec spec, Rng& rng, rl::OptimizerConfig opt = {1e-3, 0.9, 0.999, 1e-8}) : spec_(std::move(spec)) {
    if (spec_.grid < 1) throw std::invalid_argument("probe: grid must be positive");
    std::vector<std::size_t> widths = spec_.hidden;
    widths.push_back(spec_.cells());
    net_ = nn::Mlp("probe", nn::MlpSpec{spec_.input, widths, false}, rng);
    nn::ParamList params;
    net_.collect(params);
    adam_ = rl::Adam(opt, params);
  }

  const ProbeSpec& spec() const { return spec_; }
  nn::Mlp& net() { return net_; }
  rl::Adam& optimizer() { return adam_; }

  /// Inputs are standardized per coordinate with the statistics of every
  /// row seen in training so far, which keeps the probe insensitive to the
  /// scale of the representation.
  Var logits(Tape& tape, const Tensor& states) { return net_(tape, stop_gradient(tape.constant(standardize(states)))); }

  void observe(const Tensor& states) {
    if (states.cols() != spec_.input) throw ShapeError("probe: state width differs from the probe input");
    if (count_.empty()) {
      count_.assign(1, 0.0);
      mean_.assign(spec_.input, 0.0);
      m2_.assign(spec_.input, 0.0);
    }
    for (std::size_t i = 0; i < states.rows(); ++i) {
      count_[0] += 1.0;
      for (std::size_t j = 0; j < spec_.input; ++j) {
        const double d = states(i, j) - mean_[j];
        mean_[j] += d / count_[0];
        m2_[j] += d * (states(i, j) - mean_[j]);
      }
    }
  }

  Tensor standardize(const Tensor& states) const {
    if (states.cols() != spec_.input) throw ShapeError("probe: state width differs from the probe input");
    if (count_.empty() || count_[0] < 2.0) return states;
    Tensor out(states.shape());
    for (std::size_t j = 0; j < spec_.input; ++j) {
      const double sd = std::sqrt(std::max(m2_[j] / count_[0], 1e-12));
      for (std::size_t i = 0; i < states.rows(); ++i) out(i, j) = (states(i, j) - mean_[j]) / sd;
    }
    return out;
  }

  /// Running input statistics as {count, mean..., m2...} for checkpoints.
  std::vector<double> input_statistics() const {
    std::vector<double> s{count_.empty() ? 0.0 : count_[0]};
    for (std::size_t j = 0; j < spec_.input; ++j) s.push_back(count_.empty() ? 0.0 : mean_[j]);
    for (std::size_t j = 0; j < spec_.input; ++j) s.push_back(count_.empty() ? 0.0 : m2_[j]);
    return s;
  }
  void set_input_statistics(const std::vector<double>& s) {
    if (s.size() != 1 + 2 * spec_.input) throw ShapeError("probe: statistics length differs from the probe input");
    count_.assign(1, s[0]);
    mean_.assign(s.begin() + 1, s.begin() + 1 + static_cast<long>(spec_.input));
    m2_.assign(s.begin() + 1 + static_cast<long>(spec_.input), s.end());
  }

 private:
  std::vector<double> count_, mean_, m2_;
  ProbeSpec spec_;
  nn::Mlp net_;
  rl::Adam adam_;
};

struct ProbeStep {
  double loss = 0.0;                // mean cross-entropy
  std::vector<double> per_row;      // cross-entropy of each row
};

inline void check_cells(const Probe& p, const std::vector<std::size_t>& cells) {
  for (auto c : cells)
    if (c >= p.spec().cells())
      throw std::out_of_range("probe: cell index " + std::to_string(c) + " outside " + std::to_string(p.spec().cells()));
}

/// Cross-entropy of the probe on (states, cells) without updating.
inline ProbeStep probe_loss(Probe& p, const Tensor& states, const std::vector<std::size_t>& cells) {
  if (states.rows() != cells.size()) throw ShapeError("probe: state rows and cell labels differ");
  check_cells(p, cells);
  Tape tape;
  const Var nll = scale(pick(log_softmax(p.logits(tape, states)), cells), -1.0);
  ProbeStep out;
  out.per_row.assign(nll.value().data().begin(), nll.value().data().end());
  for (double x : out.per_row) out.loss += x;
  out.loss /= static_cast<double>(cells.size());
  return out;
}

/// One optimizer step on the softmax cross-entropy over grid cells. The
/// states enter as detached constants, so nothing upstream can change.
inline ProbeStep train_probe_step(Probe& p, const Tensor& states, const std::vector<std::size_t>& cells) {
  if (states.rows() != cells.size()) throw ShapeError("probe: state rows and cell labels differ");
  check_cells(p, cells);
  p.observe(states);
  Tape tape;
  const Var nll = scale(pick(log_softmax(p.logits(tape, states)), cells), -1.0);
  const Var loss = mean(nll);
  p.optimizer().zero_grad();
  tape.backward(loss);
  p.optimizer().step();
  ProbeStep out;
  out.loss = loss.value().item();
  out.per_row.assign(nll.value().data().begin(), nll.value().data().end());
  return out;
}

/// Softmax over cells for one state row, as a G x G row-major map.
inline std::vector<double> probe_predict_grid(Probe& p, std::span<const double> state) {
  Tape tape;
  const Var probs = softmax(p.logits(tape, Tensor(Shape{1, state.size()}, std::vector<double>(state.begin(), state.end()))));
  return {probs.value().data().begin(), probs.value().data().end()};
}

/// Plain (P2) graymap, max cell at 255.
inline std::string grid_to_pgm(const std::vector<double>& probs, int grid) {
  if (probs.size() != static_cast<std::size_t>(grid * grid)) throw ShapeError("pgm: map is not G x G");
  double hi = 0.0;
  for (double v : probs) hi = std::max(hi, v);
  std::string s = "P2\n" + std::to_string(grid) + " " + std::to_string(grid) + "\n255\n";
  for (int y = 0; y < grid; ++y) {
    for (int x = 0; x < grid; ++x) {
      const double v = probs[static_cast<std::size_t>(y * grid + x)];
      const int level = hi > 0.0 ? static_cast<int>(std::lround(255.0 * v / hi)) : 0;
      s += (x ? " " : "") + std::to_string(level);
    }
    s += "\n";
  }
  return s;
}

inline void write_pgm(const std::string& path, const std::vector<double>& probs, int grid) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << grid_to_pgm(probs, grid);
}

// ------------------------------------------------------------- collapse

/// Eigenvalues of a symmetric matrix (row-major n x n) by cyclic Jacobi.
inline std::vector<double> jacobi_eigenvalues(std::vector<double> a, std::size_t n, double tol = 1e-14,
                                              int max_sweeps = 100) {
  auto A = [&](std::size_t i, std::size_t j) -> double& { return a[i * n + j]; };
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0, total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        total += A(i, j) * A(i, j);
        if (i != j) off += A(i, j) * A(i, j);
      }
    if (off <= tol * tol * std::max(total, 1e-300)) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = A(p, q);
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (A(q, q) - A(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = A(k, p), akq = A(k, q);
          A(k, p) = c * akp - s * akq;
          A(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = A(p, k), aqk = A(q, k);
          A(p, k) = c * apk - s * aqk;
          A(q, k) = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = A(i, i);
  return ev;
}

struct BatchMetrics {
  std::vector<double> variance;  // per coordinate
  double mean_variance = 0.0;
  double effective_rank = 1.0;
  double mean_cosine = 1.0;
  bool degenerate = false;
};

struct CollapseMetrics {
  BatchMetrics latents;
  BatchMetrics states;
};

/// Variance per coordinate, exp(entropy) of the normalized singular values
/// of the (uncentered) batch matrix, and mean cosine over pairs of distinct
/// rows. A batch whose rows are all identical is flagged degenerate.
inline BatchMetrics batch_metrics(const Tensor& x) {
  const std::size_t n = x.rows(), d = x.cols();
  if (n < 2) throw std::invalid_argument("collapse metrics: batch must have at least 2 rows");
  BatchMetrics m;
  m.variance.assign(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    // Shifted by the first row so a constant column gives exactly zero.
    double s = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = x(i, j) - x(0, j);
      s += v;
      sq += v * v;
    }
    m.variance[j] = std::max(sq / n - (s / n) * (s / n), 0.0);
    m.mean_variance += m.variance[j] / d;
  }

  double cos_sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = i + 1; k < n; ++k) {
      const auto a = x.row(i), b = x.row(k);
      if (std::equal(a.begin(), a.end(), b.begin())) continue;
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        dot += a[j] * b[j];
        na += a[j] * a[j];
        nb += b[j] * b[j];
      }
      const double den = std::sqrt(na) * std::sqrt(nb);
      cos_sum += den > 0.0 ? std::clamp(dot / den, -1.0, 1.0) : 0.0;
      ++pairs;
    }
  if (pairs == 0) {
    m.degenerate = true;
    m.mean_cosine = 1.0;
    m.effective_rank = 1.0;
    return m;
  }
  m.mean_cosine = cos_sum / static_cast<double>(pairs);

  // Singular values squared = eigenvalues of the smaller Gram matrix.
  const bool rows_gram = n <= d;
  const std::size_t k = rows_gram ? n : d;
  std::vector<double> gram(k * k, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i; j < k; ++j) {
      double s = 0.0;
      if (rows_gram)
        for (std::size_t c = 0; c < d; ++c) s += x(i, c) * x(j, c);
      else
        for (std::size_t r = 0; r < n; ++r) s += x(r, i) * x(r, j);
      gram[i * k + j] = gram[j * k + i] = s;
    }
  std::vector<double> sv;
  double total = 0.0;
  for (double e : jacobi_eigenvalues(std::move(gram), k)) {
    sv.push_back(std::sqrt(std::max(e, 0.0)));
    total += sv.back();
  }
  if (total <= 0.0) {
    m.effective_rank = 1.0;
    return m;
  }
  double entropy = 0.0;
  for (double s : sv)
    if (s > 0.0) {
      const double p = s / total;
      entropy -= p * std::log(p);
    }
  m.effective_rank = std::clamp(std::exp(entropy), 1.0, static_cast<double>(std::min(n, d)));
  return m;
}

inline CollapseMetrics collapse_metrics(const Tensor& latents, const Tensor& states) {
  return CollapseMetrics{batch_metrics(latents), batch_metrics(states)};
}

}  // namespace pebble::probe

#pragma once

#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pebble/history.hpp"

namespace pebble {

/// Time indices t (0-based, each admitting at least one future step inside
/// the unroll) and prediction offsets k in [1, H]. Shared across the batch.
struct SubsampleIndices {
  std::vector<std::size_t> times;
  std::vector<std::size_t> offsets;
  std::size_t unroll = 0;   // T
  std::size_t horizon = 0;  // H
};

inline SubsampleIndices sample_subsample_indices(Rng& rng, std::size_t T, std::size_t H, std::size_t n_time,
                                                  std::size_t n_future) {
  if (T < 2) throw std::invalid_argument("subsample: unroll length must be at least 2");
  if (H < 1) throw std::invalid_argument("subsample: horizon must be at least 1");
  if (n_time < 1 || n_time > T - 1)
    throw std::invalid_argument("subsample: time sample size " + std::to_string(n_time) + " not in [1, " +
                                std::to_string(T - 1) + "]");
  if (n_future < 1 || n_future > H)
    throw std::invalid_argument("subsample: future sample size " + std::to_string(n_future) + " not in [1, " +
                                std::to_string(H) + "]");
  SubsampleIndices idx;
  idx.unroll = T;
  idx.horizon = H;
  idx.times = rng.choose_distinct(T - 1, n_time);
  for (auto k : rng.choose_distinct(H, n_future)) idx.offsets.push_back(k + 1);
  return idx;
}

/// Everything the auxiliary losses need from one unroll. Latent-like
/// arrays are stacked time-major: row t*B + b.
struct UnrollView {
  std::size_t T = 0;
  std::size_t B = 0;
  std::size_t action_width = 0;
  const std::vector<StateVars>* states = nullptr;            // B_0..B_{T-1} (or more)
  const std::vector<std::vector<std::size_t>>* actions = nullptr;  // [T][B]
  const std::vector<std::vector<double>>* carry = nullptr;         // [T][B]; 0 = reset before obs t

  /// Pair (t, k, b) is usable when t+k stays inside the unroll and no reset
  /// happens in (t, t+k].
  bool valid(std::size_t t, std::size_t k, std::size_t b) const {
    if (t + k > T - 1) return false;
    for (std::size_t s = t + 1; s <= t + k; ++s)
      if ((*carry)[s][b] == 0.0) return false;
    return true;
  }

  std::size_t count_valid(std::size_t H) const {
    std::size_t n = 0;
    for (std::size_t t = 0; t + 1 < T; ++t)
      for (std::size_t k = 1; k <= H; ++k)
        for (std::size_t b = 0; b < B; ++b) n += valid(t, k, b);
    return n;
  }
};

/// Named scalars with weights. Absent entries are simply not present.
struct LossReport {
  struct Entry {
    double value = 0.0;
    double weight = 0.0;
  };
  std::map<std::string, Entry> entries;

  void set(const std::string& name, double value, double weight) { entries[name] = Entry{value, weight}; }
  bool has(const std::string& name) const { return entries.count(name) != 0; }
  double value(const std::string& name) const { return entries.at(name).value; }
  double total() const {
    double t = 0.0;
    for (const auto& [_, e] : entries) t += e.weight * e.value;
    return t;
  }
  bool all_finite() const {
    for (const auto& [_, e] : entries)
      if (!std::isfinite(e.value)) return false;
    return true;
  }
  std::string dump() const {
    std::string s;
    for (const auto& [n, e] : entries) s += n + "=" + std::to_string(e.value) + " (w " + std::to_string(e.weight) + ") ";
    return s;
  }
};

/// Partial states for the selected time indices, stacked as rows i*B + b.
struct PartialUnroll {
  std::vector<PartialVars> steps;  // offsets 1..max selected offset
  std::vector<std::size_t> times;
};

inline PartialUnroll unroll_selected(Tape& tape, nn::Lstm& h_p, const UnrollView& u, const SubsampleIndices& idx) {
  std::vector<nn::LstmVars> bases;
  for (auto t : idx.times) {
    if (t + 1 >= u.T) throw std::out_of_range("partial unroll: time index " + std::to_string(t) + " has no future");
    bases.push_back((*u.states)[t].state);
  }
  const nn::LstmVars base = bases.size() == 1 ? bases.front() : nn::LstmVars::stack(bases);
  const std::size_t kmax = *std::max_element(idx.offsets.begin(), idx.offsets.end());
  std::vector<Tensor> acts;
  for (std::size_t j = 0; j < kmax; ++j) {
    std::vector<std::size_t> a;
    for (auto t : idx.times)
      for (std::size_t b = 0; b < u.B; ++b) a.push_back(t + j < u.T ? (*u.actions)[t + j][b] : 0);
    acts.push_back(one_hot(a, u.action_width));
  }
  return PartialUnroll{unroll_partial(tape, h_p, base, acts), idx.times};
}

/// Row indices into a time-major stack for targets at t+k, with per-row
/// validity weights.
inline std::pair<std::vector<std::size_t>, std::vector<double>> target_rows(const UnrollView& u,
                                                                            const std::vector<std::size_t>& times,
                                                                            std::size_t k) {
  std::vector<std::size_t> rows;
  std::vector<double> keep;
  for (auto t : times)
    for (std::size_t b = 0; b < u.B; ++b) {
      const bool ok = u.valid(t, k, b);
      rows.push_back(ok ? (t + k) * u.B + b : b);
      keep.push_back(ok ? 1.0 : 0.0);
    }
  return {rows, keep};
}

struct ForwardTarget {
  nn::Mlp* g = nullptr;
  Var latents;  // f(O_t) stacked time-major; only rows < T*B are used
};

struct ForwardLoss {
  std::vector<Var> loss;         // one per target
  std::vector<Var> regularizer;  // one per target
  std::size_t selected_pairs = 0;
  std::size_t full_pairs = 0;
};

/// Forward prediction ||n(g(B_{t,k})) - sg(n(Z_{t+k}))||^2 with the unit-norm
/// regularizer on g's raw output. Each selected pair is weighted by the
/// inverse of its selection probability and the sum divided by the number of
/// usable (t, k, b) in the whole unroll, so the estimate is unbiased for the
/// full mean.
inline ForwardLoss pbl_forward_loss(Tape& tape, nn::Lstm& h_p, const UnrollView& u, const SubsampleIndices& idx,
                                    const std::vector<ForwardTarget>& targets, double reg_coeff = 0.02) {
  if (targets.empty()) throw std::invalid_argument("forward loss: no targets");
  if (idx.unroll != u.T) throw ShapeError("forward loss: indices drawn for a different unroll length");
  ForwardLoss out;
  out.full_pairs = u.count_valid(idx.horizon);
  if (out.full_pairs == 0) throw std::invalid_argument("forward loss: no valid (t, k) pair in this unroll");
  const double w = (static_cast<double>(u.T - 1) / idx.times.size()) *
                   (static_cast<double>(idx.horizon) / idx.offsets.size()) / out.full_pairs;

  PartialUnroll pu = unroll_selected(tape, h_p, u, idx);
  std::vector<std::vector<Var>> loss_terms(targets.size()), reg_terms(targets.size());
  for (auto k : idx.offsets) {
    auto [rows, keep] = target_rows(u, idx.times, k);
    out.selected_pairs += static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 1.0));
    const Var weight = tape.constant(Tensor(Shape{keep.size(), 1}, keep));
    const Var b_tk = pu.steps[k - 1].output;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      Var pred = (*targets[i].g)(tape, b_tk);
      Var z = stop_gradient(nn::l2_normalize(gather_rows(targets[i].latents, rows)));
      Var err = row_sum(squared_difference(nn::l2_normalize(pred), z));
      loss_terms[i].push_back(sum(mul(err, weight)));
      reg_terms[i].push_back(sum(mul(nn::unit_norm_penalty(pred, reg_coeff), weight)));
    }
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    Var l = loss_terms[i][0], r = reg_terms[i][0];
    for (std::size_t j = 1; j < loss_terms[i].size(); ++j) {
      l = add(l, loss_terms[i][j]);
      r = add(r, reg_terms[i][j]);
    }
    out.loss.push_back(scale(l, w));
    out.regularizer.push_back(scale(r, w));
  }
  return out;
}

/// Plain mean of the forward loss over every usable (t, k, b); the
/// enumeration the subsampled estimate is unbiased for.
inline Var pbl_forward_loss_full(Tape& tape, nn::Lstm& h_p, const UnrollView& u, std::size_t H,
                                 const ForwardTarget& target) {
  SubsampleIndices all;
  all.unroll = u.T;
  all.horizon = H;
  for (std::size_t t = 0; t + 1 < u.T; ++t) all.times.push_back(t);
  for (std::size_t k = 1; k <= H; ++k) all.offsets.push_back(k);
  return pbl_forward_loss(tape, h_p, u, all, {target}).loss.front();
}

struct ReverseLoss {
  Var loss;
  Var regularizer;
};

/// Reverse prediction ||g'(n(f(O_t))) - sg(B_t)||^2 averaged over the whole
/// T x B block, plus the unit-norm regularizer on f's raw output.
inline ReverseLoss pbl_reverse_loss(nn::Mlp& g_rev, const Var& latents, const std::vector<Var>& state_outputs,
                                    double reg_coeff = 0.02) {
  if (state_outputs.empty()) throw ShapeError("reverse loss: no states");
  Tape& tape = latents.tape();
  const Var targets = stop_gradient(state_outputs.size() == 1 ? state_outputs.front() : vstack(state_outputs));
  const Var z = latents.rows() == targets.rows() ? latents : rows_range(latents, 0, targets.rows());
  const Var pred = g_rev(tape, nn::l2_normalize(z));
  return ReverseLoss{mean(row_sum(squared_difference(pred, targets))), mean(nn::unit_norm_penalty(z, reg_coeff))};
}

// ---------------------------------------------------------------- CPC

/// Balanced sigmoid cross-entropy: positives labelled 1, negatives 0, the
/// negative term averaged over its own count. pos holds R logits, neg R*n
/// (any layout).
inline Var cpc_objective(const Var& pos, const Var& neg) {
  const double R = static_cast<double>(pos.value().size());
  if (neg.value().size() % pos.value().size() != 0) throw ShapeError("cpc: negative count not a multiple of positives");
  const double n = static_cast<double>(neg.value().size()) / R;
  return add(scale(sum(softplus(scale(pos, -1.0))), 1.0 / R), scale(sum(softplus(neg)), 1.0 / (R * n)));
}

/// Index in [0, n) other than `excluded`, uniformly.
inline std::size_t sample_excluding(Rng& rng, std::size_t n, std::size_t excluded) {
  if (n < 2) throw std::invalid_argument("cpc: minibatch too small to exclude the positive example");
  const std::size_t u = rng.below(n - 1);
  return u >= excluded ? u + 1 : u;
}

struct CpcResult {
  Var loss;
  Var pos_logits;  // R x 1
  Var neg_logits;  // R*n_neg x 1, row r*n_neg + j
  std::size_t pairs = 0;
};

/// Contrastive loss over the selected (t, k) pairs. `encoded` is the agent's
/// shared encoder output for obs 0..T-1 stacked time-major.
inline std::optional<CpcResult> cpc_loss(Tape& tape, nn::Lstm& h_p, nn::Mlp& d, const UnrollView& u,
                                         const SubsampleIndices& idx, const Var& encoded, std::size_t n_neg,
                                         Rng& rng) {
  const std::size_t N = u.T * u.B;
  if (N < 2) throw std::invalid_argument("cpc: minibatch too small to exclude the positive example");
  if (n_neg < 1) throw std::invalid_argument("cpc: need at least one negative");
  PartialUnroll pu = unroll_selected(tape, h_p, u, idx);
  std::vector<Var> b_rows;
  std::vector<std::size_t> pos_rows, neg_rows;
  for (auto k : idx.offsets) {
    std::vector<std::size_t> sel;
    for (std::size_t i = 0; i < idx.times.size(); ++i)
      for (std::size_t b = 0; b < u.B; ++b)
        if (u.valid(idx.times[i], k, b)) {
          sel.push_back(i * u.B + b);
          pos_rows.push_back((idx.times[i] + k) * u.B + b);
        }
    if (!sel.empty()) b_rows.push_back(gather_rows(pu.steps[k - 1].output, sel));
  }
  if (pos_rows.empty()) return std::nullopt;
  const std::size_t R = pos_rows.size();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < n_neg; ++j) neg_rows.push_back(sample_excluding(rng, N, pos_rows[r]));

  const Var b_tk = b_rows.size() == 1 ? b_rows.front() : vstack(b_rows);
  const Var pos = d(tape, concat({b_tk, gather_rows(encoded, pos_rows)}));
  std::vector<std::size_t> rep;
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < n_neg; ++j) rep.push_back(r);
  const Var neg_flat = d(tape, concat({gather_rows(b_tk, rep), gather_rows(encoded, neg_rows)}));
  return CpcResult{cpc_objective(pos, neg_flat), pos, neg_flat, R};
}

/// Balanced accuracy of a discriminator: mean of the positive hit rate and
/// the negative rejection rate.
inline double cpc_accuracy(const Tensor& pos, const Tensor& neg) {
  double p = 0.0, n = 0.0;
  for (double x : pos.data()) p += x > 0.0;
  for (double x : neg.data()) n += x < 0.0;
  return 0.5 * (p / pos.size() + n / neg.size());
}

// -------------------------------------------------------- pixel control

struct CellGrid {
  std::size_t positions = 0;  // view length L
  std::size_t channels = 0;   // C
  std::size_t rows = 0;       // cells along positions
  std::size_t cols = 1;       // cells along channels

  std::size_t cells() const { return rows * cols; }
  void validate() const {
    if (rows == 0 || cols == 0) throw std::invalid_argument("pixel control: cell grid must be non-empty");
    if (positions % rows != 0 || channels % cols != 0)
      throw std::invalid_argument("pixel control: view " + std::to_string(positions) + "x" + std::to_string(channels) +
                                  " not divisible by cell grid " + std::to_string(rows) + "x" + std::to_string(cols));
  }
};

/// Mean absolute change per cell between two consecutive views.
inline std::vector<double> pixel_control_rewards(const CellGrid& grid, std::span<const double> before,
                                                 std::span<const double> after) {
  grid.validate();
  if (before.size() != grid.positions * grid.channels || after.size() != before.size())
    throw ShapeError("pixel control: view length mismatch");
  const std::size_t ph = grid.positions / grid.rows, cw = grid.channels / grid.cols;
  std::vector<double> r(grid.cells(), 0.0);
  for (std::size_t p = 0; p < grid.positions; ++p)
    for (std::size_t c = 0; c < grid.channels; ++c) {
      const std::size_t i = p * grid.channels + c;
      r[(p / ph) * grid.cols + c / cw] += std::abs(after[i] - before[i]);
    }
  for (auto& x : r) x /= static_cast<double>(ph * cw);
  return r;
}

struct PixelControlConfig {
  std::size_t n_step = 20;
  double gamma = 0.9;
};

/// n-step Q-learning on per-cell pseudo-rewards. `state_outputs` holds
/// B_0..B_T (the last one only bootstraps), `rewards[t]` the [B x cells]
/// pseudo-rewards of transition t -> t+1, `carry` flags for obs 0..T.
/// A transition into a reset is dropped and ends the n-step sum.
inline Var pixel_control_loss(Tape& tape, nn::Mlp& q_head, const std::vector<Var>& state_outputs,
                              const std::vector<Tensor>& rewards, const std::vector<std::vector<std::size_t>>& actions,
                              const std::vector<std::vector<double>>& carry, std::size_t n_actions,
                              const PixelControlConfig& cfg) {
  const std::size_t T = rewards.size();
  if (state_outputs.size() != T + 1 || carry.size() != T + 1 || actions.size() < T)
    throw ShapeError("pixel control: sequence lengths do not align");
  if (cfg.n_step < 1) throw std::invalid_argument("pixel control: n-step must be at least 1");
  const std::size_t B = state_outputs.front().rows();
  const std::size_t cells = rewards.front().cols();
  if (q_head.output_width() != cells * n_actions) throw ShapeError("pixel control: Q head width mismatch");

  const Var q = q_head(tape, vstack(state_outputs));  // rows t*B + b, cols cell*nA + a
  const Tensor& qv = q.value();
  auto qmax = [&](std::size_t t, std::size_t b, std::size_t c) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < n_actions; ++a) m = std::max(m, qv(t * B + b, c * n_actions + a));
    return m;
  };

  std::vector<std::size_t> rows;
  std::vector<double> target;
  Tensor pick_mask(Shape{T * B, cells * n_actions});
  std::size_t used = 0;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t b = 0; b < B; ++b) {
      if (carry[t + 1][b] == 0.0) continue;
      const std::size_t row = t * B + b;
      for (std::size_t c = 0; c < cells; ++c) {
        double g = 0.0, disc = 1.0;
        std::size_t s = t;
        bool terminal = false;
        for (; s < T && s < t + cfg.n_step; ++s) {
          if (carry[s + 1][b] == 0.0) {
            terminal = true;
            break;
          }
          g += disc * rewards[s](b, c);
          disc *= cfg.gamma;
        }
        if (!terminal) g += disc * qmax(s, b, c);
        target.push_back(g);
        pick_mask(row, c * n_actions + actions[t][b]) = 1.0;
      }
      ++used;
      rows.push_back(row);
    }
  if (used == 0) return tape.constant(Tensor::scalar(0.0));
  // Q(s, a) per cell: masked sum over the action axis.
  const Var q_t = rows_range(q, 0, T * B);
  const Var chosen = mul(q_t, tape.constant(pick_mask));
  std::vector<Var> per_cell;
  for (std::size_t c = 0; c < cells; ++c) per_cell.push_back(row_sum(slice(chosen, c * n_actions, (c + 1) * n_actions)));
  const Var qa = cells == 1 ? per_cell.front() : concat(per_cell);
  const Var err = squared_difference(gather_rows(qa, rows), tape.constant(Tensor(Shape{rows.size(), cells}, std::move(target))));
  return scale(sum(err), 1.0 / static_cast<double>(used * cells));
}

}  // namespace pebble

#pragma once

#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pebble/autodiff.hpp"
#include "pebble/observation.hpp"
#include "pebble/rng.hpp"

namespace pebble::nn {

using ParamList = std::vector<Parameter*>;

/// Glorot-uniform weights, zero bias.
inline Tensor glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor w(Shape{fan_in, fan_out});
  for (auto& x : w.data()) x = rng.uniform(-bound, bound);
  return w;
}

class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
      : weight_(name + ".w", glorot(in, out, rng)), bias_(name + ".b", Tensor(Shape{out})) {}

  Var operator()(Tape& tape, const Var& x) {
    if (x.cols() != in_width())
      throw ShapeError("linear " + weight_.name + ": input width " + std::to_string(x.cols()) + ", expected " +
                       std::to_string(in_width()));
    return add(matmul(x, tape.parameter(weight_)), tape.parameter(bias_));
  }

  std::size_t in_width() const { return weight_.value.rows(); }
  std::size_t out_width() const { return weight_.value.cols(); }

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  const Parameter& weight() const { return weight_; }
  const Parameter& bias() const { return bias_; }

  void collect(ParamList& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

 private:
  Parameter weight_;
  Parameter bias_;
};

struct MlpSpec {
  std::size_t input = 0;
  std::vector<std::size_t> widths;  // one entry per layer; last is the output width
  bool relu_output = false;

  void validate() const {
    if (input == 0) throw std::invalid_argument("MlpSpec: input width must be positive");
    if (widths.empty()) throw std::invalid_argument("MlpSpec: at least one layer required");
    for (auto w : widths)
      if (w == 0) throw std::invalid_argument("MlpSpec: layer widths must be positive");
  }
};

/// Rectifier between layers, linear (or rectified, if requested) output.
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::string& name, MlpSpec spec, Rng& rng) : spec_(std::move(spec)) {
    spec_.validate();
    std::size_t in = spec_.input;
    for (std::size_t i = 0; i < spec_.widths.size(); ++i) {
      layers_.emplace_back(name + ".l" + std::to_string(i), in, spec_.widths[i], rng);
      in = spec_.widths[i];
    }
  }

  Var operator()(Tape& tape, Var x) {
    if (x.cols() != spec_.input)
      throw ShapeError("mlp: input width " + std::to_string(x.cols()) + " does not match " +
                       std::to_string(spec_.input));
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      x = layers_[i](tape, x);
      if (i + 1 < layers_.size() || spec_.relu_output) x = relu(x);
    }
    return x;
  }

  const MlpSpec& spec() const { return spec_; }
  std::size_t output_width() const { return spec_.widths.back(); }
  std::vector<Linear>& layers() { return layers_; }

  void collect(ParamList& out) {
    for (auto& l : layers_) l.collect(out);
  }

 private:
  MlpSpec spec_;
  std::vector<Linear> layers_;
};

enum class SkipMode { none, concat };

struct LstmSpec {
  std::size_t input = 0;
  std::vector<std::size_t> layers;
  SkipMode skip = SkipMode::concat;

  /// With skip connections the output concatenates every layer's hidden vector.
  std::size_t output_width() const {
    if (skip == SkipMode::concat) return std::accumulate(layers.begin(), layers.end(), std::size_t{0});
    return layers.back();
  }
  std::size_t layer_input(std::size_t l) const {
    if (l == 0) return input;
    return skip == SkipMode::concat ? input + layers[l - 1] : layers[l - 1];
  }
  void validate() const {
    if (layers.empty()) throw std::invalid_argument("LstmSpec: at least one layer required");
    for (auto w : layers)
      if (w == 0) throw std::invalid_argument("LstmSpec: layer widths must be positive");
  }
};

/// Per-layer cell and hidden arrays, one row per batch entry.
struct RecurrentState {
  std::vector<Tensor> cell;
  std::vector<Tensor> hidden;

  static RecurrentState zeros(const LstmSpec& spec, std::size_t rows) {
    RecurrentState s;
    for (auto w : spec.layers) {
      s.cell.emplace_back(Shape{rows, w});
      s.hidden.emplace_back(Shape{rows, w});
    }
    return s;
  }
  std::size_t rows() const { return cell.empty() ? 0 : cell.front().rows(); }

  /// Rows `idx` of every array.
  RecurrentState select_rows(std::span<const std::size_t> idx) const {
    RecurrentState out;
    auto pick_rows = [&](const Tensor& t) {
      Tensor r(Shape{idx.size(), t.cols()});
      for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(t.row(idx[i]).begin(), t.cols(), r.row(i).begin());
      return r;
    };
    for (std::size_t l = 0; l < cell.size(); ++l) {
      out.cell.push_back(pick_rows(cell[l]));
      out.hidden.push_back(pick_rows(hidden[l]));
    }
    return out;
  }

  bool operator==(const RecurrentState&) const = default;
};

/// Recurrent state as recorded on a tape.
struct LstmVars {
  std::vector<Var> cell;
  std::vector<Var> hidden;

  static LstmVars bind(Tape& tape, const RecurrentState& s) {
    LstmVars v;
    for (std::size_t l = 0; l < s.cell.size(); ++l) {
      v.cell.push_back(tape.constant(s.cell[l]));
      v.hidden.push_back(tape.constant(s.hidden[l]));
    }
    return v;
  }
  RecurrentState read() const {
    RecurrentState s;
    for (std::size_t l = 0; l < cell.size(); ++l) {
      s.cell.push_back(cell[l].value());
      s.hidden.push_back(hidden[l].value());
    }
    return s;
  }
  /// Rows whose flag is zero are reset to the zero state.
  LstmVars masked(const std::vector<double>& keep) const {
    LstmVars v;
    for (std::size_t l = 0; l < cell.size(); ++l) {
      v.cell.push_back(mask_rows(cell[l], keep));
      v.hidden.push_back(mask_rows(hidden[l], keep));
    }
    return v;
  }
  /// Row-wise stack of several states (e.g. selected time steps).
  static LstmVars stack(const std::vector<LstmVars>& parts) {
    LstmVars v;
    const std::size_t layers = parts.front().cell.size();
    for (std::size_t l = 0; l < layers; ++l) {
      std::vector<Var> c, h;
      for (const auto& p : parts) {
        c.push_back(p.cell[l]);
        h.push_back(p.hidden[l]);
      }
      v.cell.push_back(vstack(c));
      v.hidden.push_back(vstack(h));
    }
    return v;
  }
};

/// Stacked LSTM. Gate order in the fused weights: input, forget, candidate,
/// output. The forget-gate bias starts at +1.
class Lstm {
 public:
  struct Layer {
    Parameter w;  // [in x 4h]
    Parameter u;  // [h x 4h]
    Parameter b;  // [4h]
  };

  Lstm() = default;
  Lstm(const std::string& name, LstmSpec spec, Rng& rng) : spec_(std::move(spec)) {
    spec_.validate();
    for (std::size_t l = 0; l < spec_.layers.size(); ++l) {
      const std::size_t h = spec_.layers[l];
      const std::size_t in = spec_.layer_input(l);
      const std::string p = name + ".l" + std::to_string(l);
      Tensor bias(Shape{4 * h});
      for (std::size_t j = h; j < 2 * h; ++j) bias[j] = 1.0;
      layers_.push_back(Layer{Parameter(p + ".w", glorot(in, 4 * h, rng)), Parameter(p + ".u", glorot(h, 4 * h, rng)),
                              Parameter(p + ".b", std::move(bias))});
    }
  }

  const LstmSpec& spec() const { return spec_; }
  std::vector<Layer>& layers() { return layers_; }

  /// One recurrence step. Returns the new state and the module output.
  std::pair<LstmVars, Var> step(Tape& tape, const LstmVars& state, const Var& x) {
    if (state.cell.size() != spec_.layers.size())
      throw ShapeError("lstm: state has " + std::to_string(state.cell.size()) + " layers, spec has " +
                       std::to_string(spec_.layers.size()));
    if (x.cols() != spec_.input)
      throw ShapeError("lstm: input width " + std::to_string(x.cols()) + ", expected " + std::to_string(spec_.input));
    LstmVars next;
    std::vector<Var> outs;
    Var below;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const std::size_t h = spec_.layers[l];
      if (state.cell[l].cols() != h || state.hidden[l].cols() != h || state.cell[l].rows() != x.rows())
        throw ShapeError("lstm: state layer " + std::to_string(l) + " shape " + state.cell[l].shape().str() +
                         " does not match width " + std::to_string(h));
      Var in = l == 0 ? x : (spec_.skip == SkipMode::concat ? concat({x, below}) : below);
      Layer& L = layers_[l];
      Var z = add(add(matmul(in, tape.parameter(L.w)), matmul(state.hidden[l], tape.parameter(L.u))),
                  tape.parameter(L.b));
      Var i = sigmoid(slice(z, 0, h));
      Var f = sigmoid(slice(z, h, 2 * h));
      Var g = pebble::tanh(slice(z, 2 * h, 3 * h));
      Var o = sigmoid(slice(z, 3 * h, 4 * h));
      Var c = add(mul(f, state.cell[l]), mul(i, g));
      Var hn = mul(o, pebble::tanh(c));
      next.cell.push_back(c);
      next.hidden.push_back(hn);
      outs.push_back(hn);
      below = hn;
    }
    Var out = spec_.skip == SkipMode::concat && outs.size() > 1 ? concat(outs) : outs.back();
    return {std::move(next), out};
  }

  void collect(ParamList& out) {
    for (auto& l : layers_) {
      out.push_back(&l.w);
      out.push_back(&l.u);
      out.push_back(&l.b);
    }
  }

 private:
  LstmSpec spec_;
  std::vector<Layer> layers_;
};

struct EncoderSpec {
  std::size_t view_width = 0;                 // flattened egocentric view length
  std::vector<std::size_t> view_layers{64, 32};
  std::size_t vocab = 16;
  std::size_t word_embedding = 4;
  std::size_t instruction_width = 8;
  std::size_t max_instruction = 4;
  std::size_t action_count = 5;  // one-hot slots, including the no-op used at reset

  std::size_t view_out() const { return view_layers.back(); }
  /// d_Z = view + instruction + action one-hot + reward slot.
  std::size_t latent_width() const { return view_out() + instruction_width + action_count + 1; }

  std::size_t view_begin() const { return 0; }
  std::size_t instruction_begin() const { return view_out(); }
  std::size_t action_begin() const { return instruction_begin() + instruction_width; }
  std::size_t reward_index() const { return action_begin() + action_count; }
};

/// Multimodal observation encoder: view MLP, summed instruction-LSTM
/// outputs, one-hot previous action and the transformed reward, concatenated.
class Encoder {
 public:
  Encoder() = default;
  Encoder(const std::string& name, EncoderSpec spec, Rng& rng)
      : spec_(std::move(spec)),
        view_(name + ".view", MlpSpec{spec_.view_width, spec_.view_layers, true}, rng),
        embedding_(name + ".embed", glorot(spec_.vocab, spec_.word_embedding, rng)),
        instruction_(name + ".instr", LstmSpec{spec_.word_embedding, {spec_.instruction_width}, SkipMode::none}, rng) {}

  const EncoderSpec& spec() const { return spec_; }
  std::size_t latent_width() const { return spec_.latent_width(); }

  /// Encodes a batch of observations into rows of width d_Z.
  Var operator()(Tape& tape, std::span<const Observation> obs) {
    const std::size_t n = obs.size();
    if (n == 0) throw ShapeError("encoder: empty observation batch");
    Tensor views(Shape{n, spec_.view_width});
    Tensor onehot(Shape{n, spec_.action_count});
    Tensor rewards(Shape{n, 1});
    std::size_t longest = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const Observation& o = obs[i];
      if (o.view.size() != spec_.view_width)
        throw ShapeError("encoder: view length " + std::to_string(o.view.size()) + ", expected " +
                         std::to_string(spec_.view_width));
      if (o.prev_action >= spec_.action_count)
        throw std::out_of_range("encoder: action index " + std::to_string(o.prev_action) + " out of " +
                                std::to_string(spec_.action_count));
      if (o.instruction.size() > spec_.max_instruction)
        throw std::out_of_range("encoder: instruction longer than " + std::to_string(spec_.max_instruction));
      for (int tok : o.instruction)
        if (tok < 0 || static_cast<std::size_t>(tok) >= spec_.vocab)
          throw std::out_of_range("encoder: unknown token id " + std::to_string(tok));
      std::copy(o.view.begin(), o.view.end(), views.row(i).begin());
      onehot(i, o.prev_action) = 1.0;
      rewards[i] = transform_reward(o.reward);
      longest = std::max(longest, o.instruction.size());
    }
    Var v = view_(tape, tape.constant(std::move(views)));
    Var instr = encode_instructions(tape, obs, longest);
    return concat({v, instr, tape.constant(std::move(onehot)), tape.constant(std::move(rewards))});
  }

  void collect(ParamList& out) {
    view_.collect(out);
    out.push_back(&embedding_);
    instruction_.collect(out);
  }

 private:
  // Masks padded positions, then sums the LSTM outputs over time.
  Var encode_instructions(Tape& tape, std::span<const Observation> obs, std::size_t longest) {
    const std::size_t n = obs.size();
    if (longest == 0) return tape.constant(Tensor(Shape{n, spec_.instruction_width}));
    Var emb = tape.parameter(embedding_);
    LstmVars state = LstmVars::bind(tape, RecurrentState::zeros(instruction_.spec(), n));
    Var total;
    for (std::size_t s = 0; s < longest; ++s) {
      std::vector<std::size_t> tokens(n, 0);
      std::vector<double> keep(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        if (s < obs[i].instruction.size()) {
          tokens[i] = static_cast<std::size_t>(obs[i].instruction[s]);
          keep[i] = 1.0;
        }
      auto [next, out] = instruction_.step(tape, state, gather_rows(emb, std::move(tokens)));
      state = std::move(next);
      Var masked = mask_rows(out, keep);
      total = s == 0 ? masked : add(total, masked);
    }
    return total;
  }

  EncoderSpec spec_;
  Mlp view_;
  Parameter embedding_;
  Lstm instruction_;
};

/// v / (||v||_2 + 1e-8), row-wise.
inline Var l2_normalize(const Var& v) { return div(v, add_scalar(row_norm(v), 1e-8)); }

/// coeff * (||v||_2^2 - 1)^2, row-wise; rows x 1.
inline Var unit_norm_penalty(const Var& v, double coeff = 0.02) {
  return scale(square(add_scalar(row_sum(square(v)), -1.0)), coeff);
}

/// Convenience wrapper: MLP on a single vector.
inline Tensor mlp_apply(Mlp& mlp, const Tensor& x) {
  Tape tape;
  return mlp(tape, tape.constant(x)).value();
}

}  // namespace pebble::nn

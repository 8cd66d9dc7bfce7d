#pragma once

#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <stdexcept>
#include <algorithm>
#include <sstream>
#include <string>
#include <vector>

namespace pebble::harness {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Method { rl_only, pbl, pbl_random_projection, pbl_grounded, cpc, pixel_control };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::rl_only: return "rl_only";
    case Method::pbl: return "pbl";
    case Method::pbl_random_projection: return "pbl_random_projection";
    case Method::pbl_grounded: return "pbl_grounded";
    case Method::cpc: return "cpc";
    case Method::pixel_control: return "pixel_control";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::rl_only, Method::pbl, Method::pbl_random_projection, Method::pbl_grounded, Method::cpc,
                   Method::pixel_control})
    if (method_name(m) == s) return m;
  throw ConfigError("unknown method '" + s + "'");
}

struct ExperimentConfig {
  // experiment
  Method method = Method::pbl;
  long long total_frames = 200000;
  long long log_every_frames = 0;  // 0: total_frames / 100
  double checkpoint_fraction = 0.1;

  // environment
  std::string env = "cube_room";
  int grid = 7;
  int episode_limit = 60;
  bool randomize_layout = false;
  bool instructed = false;
  std::string behaviour = "agent";  // agent | uniform_random

  // networks
  std::vector<std::size_t> view_layers{64, 32};
  std::vector<std::size_t> lstm_layers{32, 32};
  std::string skip_mode = "concat";
  std::size_t head_hidden = 64;
  std::size_t vocab = 16;
  std::size_t word_embedding = 4;
  std::size_t instruction_width = 8;
  std::size_t max_instruction = 4;

  // rl
  bool rl_enabled = true;
  std::size_t unroll = 20;
  std::size_t batch = 8;
  double gamma = 0.99;
  double lambda = 0.99;
  double rho_bar = 1.0;
  double c_bar = 1.0;
  double value_weight = 0.4;
  double entropy_cost = 5e-3;
  double popart_step = 3e-4;

  // optimizer
  double learning_rate = 1e-4;
  double beta1 = 0.0;
  double beta2 = 0.999;
  double epsilon = 1e-6;

  // pbl
  std::size_t horizon = 20;
  std::size_t time_samples = 6;
  std::size_t future_samples = 2;
  double forward_weight = 1.0;
  double reverse_weight = 1.0;
  double regularizer = 0.02;
  std::vector<std::size_t> g_layers{64, 64};
  std::vector<std::size_t> g_rev_layers{64, 64};

  // cpc
  double cpc_weight = 0.1;
  std::size_t cpc_negatives = 20;
  std::vector<std::size_t> d_layers{64, 64};

  // pixel control
  double pc_weight = 0.1;
  std::size_t pc_n_step = 20;
  double pc_gamma = 0.9;
  std::size_t pc_cell_rows = 0;  // 0: one cell per view position
  std::size_t pc_cell_cols = 1;
  std::size_t pc_hidden = 64;

  // probe and diagnostics
  bool probe_enabled = true;
  std::vector<std::size_t> probe_hidden{64};
  double probe_learning_rate = 1e-3;
  std::size_t memory_gap = 5;
  std::size_t diag_batch = 64;

  bool operator==(const ExperimentConfig&) const = default;

  bool uses_partial() const {
    return method == Method::pbl || method == Method::pbl_random_projection || method == Method::pbl_grounded ||
           method == Method::cpc;
  }
  bool uses_latent_encoder() const { return method == Method::pbl || method == Method::pbl_grounded; }
  bool uses_random_projection() const {
    return method == Method::pbl_random_projection || method == Method::pbl_grounded;
  }
  long long frames_per_update() const { return static_cast<long long>(unroll * batch); }
  long long log_every() const {
    const long long every = log_every_frames > 0 ? log_every_frames : total_frames / 100;
    return std::max(every, frames_per_update());
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Field {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

inline double to_double(const std::string& v) {
  std::size_t pos = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("expected a real number, got '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError("expected a real number, got '" + v + "'");
  return d;
}

inline long long to_int(const std::string& v) {
  std::size_t pos = 0;
  long long i = 0;
  try {
    i = std::stoll(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("expected an integer, got '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError("expected an integer, got '" + v + "'");
  return i;
}

inline int to_i32(const std::string& v) {
  const long long i = to_int(v);
  if (i < std::numeric_limits<int>::min() || i > std::numeric_limits<int>::max())
    throw ConfigError("integer out of range: '" + v + "'");
  return static_cast<int>(i);
}

inline std::size_t to_size(const std::string& v) {
  const long long i = to_int(v);
  if (i < 0) throw ConfigError("expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(i);
}

inline bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

inline std::vector<std::size_t> to_list(const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_size(trim(item)));
  if (out.empty()) throw ConfigError("expected a comma-separated list, got '" + v + "'");
  return out;
}

inline std::string from_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
  return s;
}

#define PEBBLE_FIELD(KEY, MEMBER, TO, FROM)                                                  \
  Field {                                                                                     \
    KEY, [](const ExperimentConfig& c) { return FROM(c.MEMBER); },                            \
        [](ExperimentConfig& c, const std::string& v) { c.MEMBER = TO(v); }                   \
  }
#define PEBBLE_REAL(KEY, MEMBER) PEBBLE_FIELD(KEY, MEMBER, to_double, fmt_double)
#define PEBBLE_SIZE(KEY, MEMBER) PEBBLE_FIELD(KEY, MEMBER, to_size, std::to_string)
#define PEBBLE_INT(KEY, MEMBER) PEBBLE_FIELD(KEY, MEMBER, to_i32, std::to_string)
#define PEBBLE_LONG(KEY, MEMBER) PEBBLE_FIELD(KEY, MEMBER, to_int, std::to_string)
#define PEBBLE_BOOL(KEY, MEMBER) PEBBLE_FIELD(KEY, MEMBER, to_bool, [](bool b) { return std::string(b ? "true" : "false"); })
#define PEBBLE_LIST(KEY, MEMBER) PEBBLE_FIELD(KEY, MEMBER, to_list, from_list)
#define PEBBLE_STR(KEY, MEMBER) PEBBLE_FIELD(KEY, MEMBER, std::string, std::string)

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"experiment.method", [](const ExperimentConfig& c) { return method_name(c.method); },
            [](ExperimentConfig& c, const std::string& v) { c.method = parse_method(v); }},
      PEBBLE_LONG("experiment.total_frames", total_frames),
      PEBBLE_LONG("experiment.log_every_frames", log_every_frames),
      PEBBLE_REAL("experiment.checkpoint_fraction", checkpoint_fraction),

      PEBBLE_STR("env.name", env),
      PEBBLE_INT("env.grid", grid),
      PEBBLE_INT("env.episode_limit", episode_limit),
      PEBBLE_BOOL("env.randomize_layout", randomize_layout),
      PEBBLE_BOOL("env.instructed", instructed),
      PEBBLE_STR("env.behaviour", behaviour),

      PEBBLE_LIST("net.view_layers", view_layers),
      PEBBLE_LIST("net.lstm_layers", lstm_layers),
      PEBBLE_STR("net.skip_mode", skip_mode),
      PEBBLE_SIZE("net.head_hidden", head_hidden),
      PEBBLE_SIZE("net.vocab", vocab),
      PEBBLE_SIZE("net.word_embedding", word_embedding),
      PEBBLE_SIZE("net.instruction_width", instruction_width),
      PEBBLE_SIZE("net.max_instruction", max_instruction),

      PEBBLE_BOOL("rl.enabled", rl_enabled),
      PEBBLE_SIZE("rl.unroll", unroll),
      PEBBLE_SIZE("rl.batch", batch),
      PEBBLE_REAL("rl.gamma", gamma),
      PEBBLE_REAL("rl.lambda", lambda),
      PEBBLE_REAL("rl.rho_bar", rho_bar),
      PEBBLE_REAL("rl.c_bar", c_bar),
      PEBBLE_REAL("rl.value_weight", value_weight),
      PEBBLE_REAL("rl.entropy_cost", entropy_cost),
      PEBBLE_REAL("rl.popart_step", popart_step),

      PEBBLE_REAL("optimizer.learning_rate", learning_rate),
      PEBBLE_REAL("optimizer.beta1", beta1),
      PEBBLE_REAL("optimizer.beta2", beta2),
      PEBBLE_REAL("optimizer.epsilon", epsilon),

      PEBBLE_SIZE("pbl.horizon", horizon),
      PEBBLE_SIZE("pbl.time_samples", time_samples),
      PEBBLE_SIZE("pbl.future_samples", future_samples),
      PEBBLE_REAL("pbl.forward_weight", forward_weight),
      PEBBLE_REAL("pbl.reverse_weight", reverse_weight),
      PEBBLE_REAL("pbl.regularizer", regularizer),
      PEBBLE_LIST("pbl.g_layers", g_layers),
      PEBBLE_LIST("pbl.g_rev_layers", g_rev_layers),

      PEBBLE_REAL("cpc.weight", cpc_weight),
      PEBBLE_SIZE("cpc.negatives", cpc_negatives),
      PEBBLE_LIST("cpc.d_layers", d_layers),

      PEBBLE_REAL("pixel_control.weight", pc_weight),
      PEBBLE_SIZE("pixel_control.n_step", pc_n_step),
      PEBBLE_REAL("pixel_control.gamma", pc_gamma),
      PEBBLE_SIZE("pixel_control.cell_rows", pc_cell_rows),
      PEBBLE_SIZE("pixel_control.cell_cols", pc_cell_cols),
      PEBBLE_SIZE("pixel_control.hidden", pc_hidden),

      PEBBLE_BOOL("probe.enabled", probe_enabled),
      PEBBLE_LIST("probe.hidden", probe_hidden),
      PEBBLE_REAL("probe.learning_rate", probe_learning_rate),
      PEBBLE_SIZE("probe.memory_gap", memory_gap),
      PEBBLE_SIZE("diagnostics.batch", diag_batch),
  };
  return table;
}

#undef PEBBLE_FIELD
#undef PEBBLE_REAL
#undef PEBBLE_SIZE
#undef PEBBLE_INT
#undef PEBBLE_LONG
#undef PEBBLE_BOOL
#undef PEBBLE_LIST
#undef PEBBLE_STR

}  // namespace detail

/// Checks every field against the preconditions of the modules it feeds.
inline void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& key, const std::string& why) { throw ConfigError(key + ": " + why); };
  if (c.total_frames <= 0) fail("experiment.total_frames", "must be positive");
  if (c.log_every_frames < 0) fail("experiment.log_every_frames", "must be non-negative");
  if (!(c.checkpoint_fraction > 0.0 && c.checkpoint_fraction <= 1.0))
    fail("experiment.checkpoint_fraction", "must be in (0, 1]");
  if (c.env != "cube_room" && c.env != "key_door") fail("env.name", "must be cube_room or key_door");
  if (c.env == "cube_room" && c.grid < 2) fail("env.grid", "must be at least 2 for cube_room");
  if (c.env == "key_door" && c.grid < 4) fail("env.grid", "must be at least 4 for key_door");
  if (c.episode_limit < 1) fail("env.episode_limit", "must be positive");
  if (c.behaviour != "agent" && c.behaviour != "uniform_random") fail("env.behaviour", "must be agent or uniform_random");
  if (c.instructed && c.env != "key_door") fail("env.instructed", "only key_door has instructions");
  for (auto w : c.view_layers)
    if (w == 0) fail("net.view_layers", "widths must be positive");
  for (auto w : c.lstm_layers)
    if (w == 0) fail("net.lstm_layers", "widths must be positive");
  if (c.skip_mode != "concat" && c.skip_mode != "none") fail("net.skip_mode", "must be concat or none");
  if (c.head_hidden == 0) fail("net.head_hidden", "must be positive");
  if (c.vocab < 6) fail("net.vocab", "must cover the 6 environment tokens");
  if (c.word_embedding == 0) fail("net.word_embedding", "must be positive");
  if (c.instruction_width == 0) fail("net.instruction_width", "must be positive");
  if (c.max_instruction < 2) fail("net.max_instruction", "instructions have 2 tokens");
  if (c.unroll < 2) fail("rl.unroll", "must be at least 2");
  if (c.batch < 1) fail("rl.batch", "must be positive");
  if (!(c.gamma > 0.0 && c.gamma <= 1.0)) fail("rl.gamma", "must be in (0, 1]");
  if (!(c.lambda >= 0.0 && c.lambda <= 1.0)) fail("rl.lambda", "must be in [0, 1]");
  if (!(c.rho_bar > 0.0)) fail("rl.rho_bar", "must be positive");
  if (!(c.c_bar > 0.0)) fail("rl.c_bar", "must be positive");
  if (c.value_weight < 0.0) fail("rl.value_weight", "must be non-negative");
  if (c.entropy_cost < 0.0) fail("rl.entropy_cost", "must be non-negative");
  if (!(c.popart_step > 0.0 && c.popart_step <= 1.0)) fail("rl.popart_step", "must be in (0, 1]");
  if (!(c.learning_rate > 0.0)) fail("optimizer.learning_rate", "must be positive");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0)) fail("optimizer.beta1", "must be in [0, 1)");
  if (!(c.beta2 >= 0.0 && c.beta2 < 1.0)) fail("optimizer.beta2", "must be in [0, 1)");
  if (!(c.epsilon > 0.0)) fail("optimizer.epsilon", "must be positive");
  if (c.horizon < 1) fail("pbl.horizon", "must be at least 1");
  if (c.time_samples < 1 || c.time_samples > c.unroll - 1) fail("pbl.time_samples", "must be in [1, rl.unroll - 1]");
  if (c.future_samples < 1 || c.future_samples > c.horizon) fail("pbl.future_samples", "must be in [1, pbl.horizon]");
  if (c.forward_weight < 0.0) fail("pbl.forward_weight", "must be non-negative");
  if (c.reverse_weight < 0.0) fail("pbl.reverse_weight", "must be non-negative");
  if (c.regularizer < 0.0) fail("pbl.regularizer", "must be non-negative");
  for (auto w : c.g_layers)
    if (w == 0) fail("pbl.g_layers", "widths must be positive");
  for (auto w : c.g_rev_layers)
    if (w == 0) fail("pbl.g_rev_layers", "widths must be positive");
  if (c.cpc_weight < 0.0) fail("cpc.weight", "must be non-negative");
  if (c.cpc_negatives < 1) fail("cpc.negatives", "must be at least 1");
  for (auto w : c.d_layers)
    if (w == 0) fail("cpc.d_layers", "widths must be positive");
  if (c.pc_weight < 0.0) fail("pixel_control.weight", "must be non-negative");
  if (c.pc_n_step < 1) fail("pixel_control.n_step", "must be at least 1");
  if (!(c.pc_gamma >= 0.0 && c.pc_gamma <= 1.0)) fail("pixel_control.gamma", "must be in [0, 1]");
  const std::size_t positions = static_cast<std::size_t>(2 * c.grid - 1);
  if (c.pc_cell_rows != 0 && positions % c.pc_cell_rows != 0)
    fail("pixel_control.cell_rows", "must divide the view length " + std::to_string(positions));
  if (c.pc_cell_cols == 0 || 6 % c.pc_cell_cols != 0) fail("pixel_control.cell_cols", "must divide the 6 channels");
  if (c.pc_hidden == 0) fail("pixel_control.hidden", "must be positive");
  for (auto w : c.probe_hidden)
    if (w == 0) fail("probe.hidden", "widths must be positive");
  if (!(c.probe_learning_rate > 0.0)) fail("probe.learning_rate", "must be positive");
  if (c.diag_batch < 2) fail("diagnostics.batch", "must be at least 2");
  if (c.behaviour == "uniform_random" && c.rl_enabled)
    fail("rl.enabled", "the RL loss needs the agent's own behaviour policy");
  if (c.method == Method::rl_only && !c.rl_enabled) fail("rl.enabled", "rl_only requires the RL loss");
}

/// Reads `key = value` lines; `#` starts a comment. Unknown keys, bad
/// values and constraint violations are errors naming the key and line.
inline ExperimentConfig parse_config_text(const std::string& text, const std::string& origin = "<config>") {
  ExperimentConfig c;
  std::stringstream in(text);
  std::string line;
  int number = 0;
  std::vector<std::string> seen;
  while (std::getline(in, line)) {
    ++number;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(number);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto& table = detail::fields();
    auto it = std::find_if(table.begin(), table.end(), [&](const detail::Field& f) { return f.key == key; });
    if (it == table.end()) throw ConfigError(where + ": unknown key '" + key + "'");
    if (std::find(seen.begin(), seen.end(), key) != seen.end())
      throw ConfigError(where + ": duplicate key '" + key + "'");
    seen.push_back(key);
    try {
      it->set(c, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + key + ": " + e.what());
    }
  }
  try {
    validate(c);
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return c;
}

inline ExperimentConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

inline std::string serialize_config(const ExperimentConfig& c) {
  std::string out;
  for (const auto& f : detail::fields()) out += f.key + " = " + f.get(c) + "\n";
  return out;
}

}  // namespace pebble::harness

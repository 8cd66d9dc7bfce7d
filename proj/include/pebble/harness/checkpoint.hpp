#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "pebble/harness/agent.hpp"

namespace pebble::harness {

// Text checkpoint, one token stream:
//   pebble-checkpoint 1
//   frames <n>
//   updates <n>
//   config <line count>, then the serialized config lines
//   popart <tasks>, then one "<mean> <second moment>" line per task
//   probe_inputs <n>, then one line: count, means, second-moment sums
//   params <count>, then per parameter "param <name> <rows> <cols>" and one
//   line of row-major values
//   end
// Reals are written with 17 significant digits so a load is exact.
inline constexpr const char* kCheckpointMagic = "pebble-checkpoint";
inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointInfo {
  long long frames = 0;
  long long updates = 0;
  ExperimentConfig config;
};

namespace detail {
inline std::string real17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void expect(std::istream& in, const std::string& word) {
  std::string got;
  if (!(in >> got) || got != word)
    throw CheckpointError("checkpoint: expected '" + word + "', found '" + got + "'");
}
}  // namespace detail

inline void save_checkpoint(Agent& agent, const std::string& path, long long frames, long long updates) {
  std::ostringstream out;
  out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  out << "frames " << frames << '\n' << "updates " << updates << '\n';
  const std::string cfg = serialize_config(agent.config());
  out << "config " << std::count(cfg.begin(), cfg.end(), '\n') << '\n' << cfg;
  auto& pa = agent.popart();
  out << "popart " << pa.tasks() << '\n';
  for (std::size_t i = 0; i < pa.tasks(); ++i)
    out << detail::real17(pa.mean(i)) << ' ' << detail::real17(pa.second_moment(i)) << '\n';
  const std::vector<double> ps =
      agent.config().probe_enabled ? agent.probe().input_statistics() : std::vector<double>{};
  out << "probe_inputs " << ps.size() << '\n';
  for (std::size_t i = 0; i < ps.size(); ++i) out << (i ? " " : "") << detail::real17(ps[i]);
  out << '\n';
  const auto params = agent.all_parameters();
  out << "params " << params.size() << '\n';
  for (const auto* p : params) {
    out << "param " << p->name << ' ' << p->value.rows() << ' ' << p->value.cols() << '\n';
    const auto v = p->value.data();
    for (std::size_t i = 0; i < v.size(); ++i) out << (i ? " " : "") << detail::real17(v[i]);
    out << '\n';
  }
  out << "end\n";
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw CheckpointError("cannot write checkpoint " + tmp);
    f << out.str();
    if (!f) throw CheckpointError("failed writing checkpoint " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw CheckpointError("cannot move checkpoint into " + path);
}

/// Header and embedded config only.
inline CheckpointInfo read_checkpoint_info(std::istream& in) {
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != kCheckpointMagic)
    throw CheckpointError("not a pebble checkpoint (bad header)");
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  CheckpointInfo info;
  detail::expect(in, "frames");
  in >> info.frames;
  detail::expect(in, "updates");
  in >> info.updates;
  detail::expect(in, "config");
  std::size_t lines = 0;
  in >> lines;
  std::string line, text;
  std::getline(in, line);
  for (std::size_t i = 0; i < lines; ++i) {
    if (!std::getline(in, line)) throw CheckpointError("checkpoint: truncated config block");
    text += line + "\n";
  }
  info.config = parse_config_text(text, "checkpoint config");
  return info;
}

inline CheckpointInfo read_checkpoint_info(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  return read_checkpoint_info(in);
}

/// Loads parameter values and PopArt statistics into an agent whose
/// widths must match the stored ones.
inline CheckpointInfo load_checkpoint(Agent& agent, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  CheckpointInfo info = read_checkpoint_info(in);
  detail::expect(in, "popart");
  std::size_t tasks = 0;
  in >> tasks;
  if (tasks != agent.popart().tasks())
    throw CheckpointError("checkpoint has " + std::to_string(tasks) + " value tasks, config has " +
                          std::to_string(agent.popart().tasks()));
  for (std::size_t i = 0; i < tasks; ++i) {
    double m = 0.0, s = 0.0;
    if (!(in >> m >> s)) throw CheckpointError("checkpoint: truncated popart block");
    agent.popart().set(i, m, s);
  }
  detail::expect(in, "probe_inputs");
  std::size_t stats = 0;
  in >> stats;
  std::vector<double> ps(stats);
  for (auto& v : ps)
    if (!(in >> v)) throw CheckpointError("checkpoint: truncated probe statistics");
  if (agent.config().probe_enabled) {
    try {
      agent.probe().set_input_statistics(ps);
    } catch (const ShapeError& e) {
      throw CheckpointError(std::string("width mismatch for probe input statistics: ") + e.what());
    }
  }
  detail::expect(in, "params");
  std::size_t count = 0;
  in >> count;
  auto params = agent.all_parameters();
  std::vector<bool> loaded(params.size(), false);
  for (std::size_t n = 0; n < count; ++n) {
    detail::expect(in, "param");
    std::string name;
    std::size_t rows = 0, cols = 0;
    in >> name >> rows >> cols;
    auto it = std::find_if(params.begin(), params.end(), [&](const Parameter* p) { return p->name == name; });
    if (it == params.end()) throw CheckpointError("checkpoint parameter '" + name + "' does not exist in this config");
    Parameter& p = **it;
    if (p.value.rows() != rows || p.value.cols() != cols)
      throw CheckpointError("width mismatch for '" + name + "': checkpoint " + std::to_string(rows) + "x" +
                            std::to_string(cols) + ", config " + std::to_string(p.value.rows()) + "x" +
                            std::to_string(p.value.cols()));
    for (auto& v : p.value.data())
      if (!(in >> v)) throw CheckpointError("checkpoint: truncated values for '" + name + "'");
    loaded[static_cast<std::size_t>(it - params.begin())] = true;
  }
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!loaded[i]) throw CheckpointError("checkpoint lacks parameter '" + params[i]->name + "'");
  detail::expect(in, "end");
  return info;
}

}  // namespace pebble::harness

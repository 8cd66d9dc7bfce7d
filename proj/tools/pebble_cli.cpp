#include <cstdio>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "pebble/pebble.hpp"

using namespace pebble;
using namespace pebble::harness;

namespace {

int cmd_train(const std::string& config_path, std::uint64_t seed, const std::string& out) {
  const ExperimentConfig cfg = parse_config(config_path);
  logger()->info("train: method {} env {} frames {} seed {}", method_name(cfg.method), cfg.env, cfg.total_frames, seed);
  TrainingOptions opt;
  opt.out_dir = out;
  const TrainingResult r = run_training(cfg, seed, opt);
  std::printf("frames %lld updates %lld\n", r.frames, r.updates);
  if (!r.probe_losses.empty()) std::printf("final probe loss %s\n", format_real(r.final_probe_loss()).c_str());
  if (auto m = r.final_memory_loss()) std::printf("final memory probe loss %s\n", format_real(*m).c_str());
  if (r.final_metrics)
    std::printf("z effective rank %s cosine %s\n", format_real(r.final_metrics->latents.effective_rank).c_str(),
                format_real(r.final_metrics->latents.mean_cosine).c_str());
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& config_path, std::size_t episodes, std::uint64_t seed) {
  const ExperimentConfig cfg = parse_config(config_path);
  Agent agent(cfg, seed);
  load_checkpoint(agent, checkpoint);
  const EvalResult r = evaluate(agent, cfg, episodes, seed);
  for (std::size_t k = 0; k < r.mean_return.size(); ++k)
    std::printf("task %zu episodes %zu mean_return %s\n", k, r.episodes[k], format_real(r.mean_return[k]).c_str());
  if (cfg.env == "key_door") {
    const EvalResult u = evaluate_policy(nullptr, cfg, EvalPolicy::uniform_random, episodes, seed);
    const EvalResult h = evaluate_policy(nullptr, cfg, EvalPolicy::scripted, episodes, seed);
    try {
      const NormalizedScoreTable t = aggregate_normalized_score(u.mean_return, h.mean_return, r.mean_return);
      std::printf("normalized %s capped %s\n", format_real(t.mean_normalized).c_str(),
                  format_real(t.mean_capped).c_str());
    } catch (const std::invalid_argument& e) {
      logger()->error("no normalized score: {}", e.what());
    }
  }
  return 0;
}

int cmd_probe_report(const std::string& checkpoint, const std::string& out, std::uint64_t seed) {
  const CheckpointInfo info = read_checkpoint_info(checkpoint);
  Agent agent(info.config, 0);
  load_checkpoint(agent, checkpoint);
  const ProbeTrace tr = probe_rollout(agent, static_cast<std::size_t>(info.config.episode_limit), seed);
  std::filesystem::create_directories(out);
  CsvTable csv;
  csv.columns = {"step", "object_cell", "since_visible", "probe_loss"};
  for (std::size_t i = 0; i < tr.maps.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "probe_%03zu.pgm", i);
    probe::write_pgm(out + "/" + name, tr.maps[i], info.config.grid);
    csv.rows.push_back({static_cast<double>(i), static_cast<double>(tr.object_cell[i]),
                        tr.since_visible[i] >= 0 ? std::optional<double>(tr.since_visible[i]) : std::nullopt,
                        tr.loss[i]});
  }
  write_csv(csv, out + "/probe_loss.csv");
  std::printf("wrote %zu maps to %s\n", tr.maps.size(), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pebble: latent prediction agents on small gridworlds"};
  app.require_subcommand(1);

  std::string config, out, checkpoint;
  std::uint64_t seed = 0;
  std::size_t episodes = 0;

  auto* train = app.add_subcommand("train", "train an agent");
  train->add_option("--config", config, "config file")->required();
  train->add_option("--seed", seed, "seed")->required();
  train->add_option("--out", out, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--config", config, "config file")->required();
  eval->add_option("--episodes", episodes, "episodes")->required();
  eval->add_option("--seed", seed, "seed")->required();

  auto* report = app.add_subcommand("probe-report", "write probe maps and losses for one episode");
  report->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  report->add_option("--out", out, "output directory")->required();
  report->add_option("--seed", seed, "episode seed");

  CLI11_PARSE(app, argc, argv);
  try {
    configure_logging();
    if (train->parsed()) return cmd_train(config, seed, out);
    if (eval->parsed()) return cmd_eval(checkpoint, config, episodes, seed);
    if (report->parsed()) return cmd_probe_report(checkpoint, out, seed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}

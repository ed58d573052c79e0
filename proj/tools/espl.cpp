// Command-line surface for the training loop: train from a config file,
// resume from a checkpoint, export the evolutionary tree, and recompute
// ratings offline from a metrics log.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>

#include <CLI11.hpp>

#include "espl/espl.hpp"

namespace {

int cmd_train(const std::string& config_path, const std::string& env,
              int iters, long long seed, const std::string& checkpoint_dir,
              const std::string& metrics_path) {
  espl::EsplConfig cfg = espl::load_config(config_path);
  if (!env.empty()) cfg.env = env;
  if (iters >= 0) cfg.iterations = iters;
  if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);

  espl::JsonlFileSink sink(metrics_path);
  espl::RunResult result = espl::run(cfg, &sink, checkpoint_dir);

  const espl::TrainerState& s = result.state;
  std::cout << "finished after " << s.iteration << " iterations ("
            << s.pop.size() << " prompts in population)\n";
  std::cout << "best prompt: " << result.best_prompt_id;
  if (!std::isnan(result.final_expected_reward))
    std::cout << "  expected reward " << result.final_expected_reward;
  std::cout << "\n";
  if (!checkpoint_dir.empty())
    std::cout << "checkpoint: "
              << (std::filesystem::path(checkpoint_dir) / "checkpoint_final.json")
                     .string()
              << "\n";
  return 0;
}

int cmd_resume(const std::string& checkpoint_path, const std::string& metrics_path,
               std::string checkpoint_dir) {
  espl::TrainerState state = espl::load_checkpoint_file(checkpoint_path);
  if (checkpoint_dir.empty())
    checkpoint_dir = std::filesystem::path(checkpoint_path).parent_path().string();

  espl::JsonlFileSink sink(metrics_path);
  int start = state.iteration;
  espl::RunResult result = espl::run_loop(std::move(state), &sink, checkpoint_dir);
  std::cout << "resumed at iteration " << start << ", finished after "
            << result.state.iteration << " iterations\n";
  std::cout << "best prompt: " << result.best_prompt_id << "\n";
  return 0;
}

int cmd_export_tree(const std::string& checkpoint_path, const std::string& format) {
  std::ifstream in(checkpoint_path);
  if (!in) throw espl::IoError("cannot open checkpoint '" + checkpoint_path + "'");
  nlohmann::json j = nlohmann::json::parse(in);
  espl::Population pop = espl::import_tree_json(j.at("population"));
  if (format == "dot")
    std::cout << espl::export_tree_dot(pop);
  else if (format == "json")
    std::cout << espl::export_tree_json(pop).dump(2) << "\n";
  else
    throw espl::ConfigError("unknown export format '" + format + "'");
  return 0;
}

int cmd_replay_ratings(const std::string& metrics_path) {
  std::ifstream in(metrics_path);
  if (!in) throw espl::IoError("cannot open metrics '" + metrics_path + "'");
  auto ratings = espl::replay_ratings(in);
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [id, r] : ratings)
    out[id] = {{"mu", r.mu}, {"sigma", r.sigma}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Evolving system-prompt training loop"};
  app.require_subcommand(1);

  std::string config_path, env, checkpoint_dir, metrics_path = "metrics.jsonl";
  int iters = -1;
  long long seed = -1;
  auto* train = app.add_subcommand("train", "run the training loop from a config");
  train->add_option("--config", config_path, "config file (key = value lines)")
      ->required();
  train->add_option("--env", env, "override environment: synthetic|http");
  train->add_option("--iters", iters, "override iteration count");
  train->add_option("--seed", seed, "override global seed");
  train->add_option("--checkpoint-dir", checkpoint_dir,
                    "directory for checkpoints (omit to disable)");
  train->add_option("--metrics", metrics_path, "metrics JSONL output path");

  std::string resume_checkpoint, resume_metrics = "metrics.jsonl", resume_dir;
  auto* resume = app.add_subcommand("resume", "continue from a checkpoint");
  resume->add_option("--checkpoint", resume_checkpoint, "checkpoint file")
      ->required();
  resume->add_option("--metrics", resume_metrics, "metrics JSONL output path");
  resume->add_option("--checkpoint-dir", resume_dir,
                     "directory for new checkpoints (default: alongside input)");

  std::string tree_checkpoint, tree_format = "dot";
  auto* tree = app.add_subcommand("export-tree", "print the evolutionary tree");
  tree->add_option("--checkpoint", tree_checkpoint, "checkpoint file")->required();
  tree->add_option("--format", tree_format, "dot|json");

  std::string replay_metrics;
  auto* replay =
      app.add_subcommand("replay-ratings", "recompute ratings from a metrics log");
  replay->add_option("--metrics", replay_metrics, "metrics JSONL file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed())
      return cmd_train(config_path, env, iters, seed, checkpoint_dir, metrics_path);
    if (resume->parsed())
      return cmd_resume(resume_checkpoint, resume_metrics, resume_dir);
    if (tree->parsed()) return cmd_export_tree(tree_checkpoint, tree_format);
    if (replay->parsed()) return cmd_replay_ratings(replay_metrics);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

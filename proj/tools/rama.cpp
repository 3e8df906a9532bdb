// rama: train, evaluate, plot and inspect retrospective-addressing experiments.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rama/report.hpp"
#include "rama/trainer.hpp"

namespace fs = std::filesystem;
using namespace rama;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream o;
  o << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return o.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

struct TrainArgs {
  std::string config_path, out_dir, resume;
  std::vector<std::string> overrides;
  std::int64_t seed = -1;
};

int cmd_train(const TrainArgs& a) {
  RamaConfig cfg;
  Checkpoint ck;
  if (!a.resume.empty()) {
    ck = load_checkpoint(a.resume);
    cfg = parse_config(ck.config_text, a.resume);
  } else if (!a.config_path.empty()) {
    cfg = load_config(a.config_path);
  }
  for (const auto& o : a.overrides) apply_override(cfg, o);
  if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
  validate(cfg);

  const fs::path out = a.out_dir;
  fs::create_directories(out);
  const std::string echo = emit_config(cfg);
  write_text(out / "config.txt", echo);

  nlohmann::json manifest;
  manifest["config"] = echo;
  manifest["build"] = RAMA_BUILD_ID;
  manifest["seeds"] = {{"trainer", cfg.seed}, {"env", cfg.env_seed}};
  manifest["start_time"] = utc_now();
  manifest["resumed_from"] = a.resume;
  nlohmann::json artifacts = {{"config", "config.txt"}, {"checkpoint", "checkpoint.bin"}, {"buffer", "buffer"}};
  for (std::size_t k = 0; k < cfg.tasks.size(); ++k) {
    artifacts["episodes_" + std::to_string(k)] = "episodes_" + std::to_string(k) + ".csv";
    artifacts["train_" + std::to_string(k)] = "train_" + std::to_string(k) + ".csv";
  }
  manifest["artifacts"] = artifacts;
  write_text(out / "manifest.json", manifest.dump(2) + "\n");

  TrainerHooks hooks;
  hooks.out_dir = out;
  hooks.on_episode = [](std::size_t k, const RunMetrics& m) {
    const auto& e = m.episodes.back();
    std::cerr << "task " << k << " episode " << e.episode_idx << " env_steps " << e.env_steps << " return "
              << std::fixed << std::setprecision(2) << e.episode_return << "\n";
    return true;
  };
  Trainer trainer(cfg, hooks);
  if (!a.resume.empty()) trainer.resume(ck, fs::path(a.resume).parent_path() / "buffer");
  const auto metrics = trainer.run();
  for (std::size_t k = 0; k < metrics.size(); ++k)
    std::cout << metrics[k].task.str() << ": " << metrics[k].episodes.size() << " episodes, mean return "
              << format_real(metrics[k].mean_return()) << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& task_text, int episodes, std::int64_t seed) {
  if (episodes < 1) throw UsageError("--episodes must be >= 1");
  const Checkpoint ck = load_checkpoint(checkpoint);
  RamaConfig cfg = parse_config(ck.config_text, checkpoint);
  validate(cfg);
  const TaskId task = task_text.empty() ? cfg.tasks.at(static_cast<std::size_t>(ck.meta_or("task_index", 0)))
                                        : TaskId::parse(task_text);
  const Environment probe(task, 0, cfg.obs_mode);
  WorldModel<float> world(world_config(cfg, probe.action_dim(), probe.obs_spec()), 0);
  ActorCritic<float> ac(agent_config(cfg, probe.action_dim()), 0);
  ck.restore(world.parameters());
  ck.restore(ac.actor_parameters());
  ck.restore(ac.value_parameters());
  const auto s = static_cast<std::uint64_t>(seed < 0 ? 0 : seed);
  const double mean = evaluate(world, ac, task, cfg.obs_mode, episodes, s);
  std::cout << "task " << task.str() << " episodes " << episodes << " seed " << s << " mean_return " << format_real(mean)
            << "\n";
  return 0;
}

int cmd_plot(const std::vector<std::string>& csvs, const std::string& out) {
  if (csvs.empty()) throw UsageError("plot needs at least one CSV file");
  std::vector<Curve> curves;
  for (const auto& path : csvs) curves.push_back(read_episode_csv(path));
  write_text(out, render_svg(curves));
  std::cout << "wrote " << out << " (" << curves.size() << (curves.size() == 1 ? " curve" : " curves") << ")\n";
  return 0;
}

int cmd_inspect(const std::string& path) {
  std::cout << format_summary(summarize_buffer(path));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Retrospective addressing for model-based multitask RL"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train on the configured task sequence");
  t->add_option("--config", train.config_path, "config file (key = value)");
  t->add_option("--out", train.out_dir, "output directory")->required();
  t->add_option("--set", train.overrides, "override KEY=VALUE (repeatable)");
  t->add_option("--seed", train.seed, "trainer seed");
  t->add_option("--resume", train.resume, "checkpoint to resume from");

  std::string ckpt, task;
  int episodes = 10;
  std::int64_t eval_seed = 0;
  auto* e = app.add_subcommand("eval", "mean greedy return of a checkpoint");
  e->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  e->add_option("--task", task, "task, e.g. Loco/stand (default: the checkpoint's task)");
  e->add_option("--episodes", episodes, "number of episodes");
  e->add_option("--seed", eval_seed, "environment seed");

  std::vector<std::string> csvs;
  std::string svg = "returns.svg";
  auto* p = app.add_subcommand("plot", "plot return curves from episode CSVs");
  p->add_option("csv", csvs, "episodes_*.csv files")->required();
  p->add_option("--out", svg, "SVG output path");

  std::string buffer_dir;
  auto* b = app.add_subcommand("inspect-buffer", "summarize an episode buffer directory");
  b->add_option("path", buffer_dir, "buffer directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(ckpt, task, episodes, eval_seed);
    if (*p) return cmd_plot(csvs, svg);
    if (*b) return cmd_inspect(buffer_dir);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kExitConfig;
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}

// janus: command line front end. Exit codes: 0 ok, 1 a counted check failed
// under --check, 2 bad input or a runtime error.

#include <chrono>
#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "janus/commands.hpp"

using namespace janus;
namespace fs = std::filesystem;

namespace {

io::json load_config(const std::string& path) { return path.empty() ? io::json::object() : io::read_json(path); }

int finish(const cli::CheckReport& r, bool check, double seconds) {
  std::cout << r.text() << std::flush;
  std::fprintf(stderr, "elapsed %.1fs\n", seconds);
  if (check && !r.ok()) return 1;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Janus-problem testbed: density solver, toy scene, denoiser, distillation, evaluation"};
  app.require_subcommand(1);
  app.fallthrough();
  bool check = false;
  app.add_flag("--check", check, "exit nonzero if any acceptance assertion fails");

  std::string config, out, model, theta, run_dir, grid_file, seeds_text, arm;
  double azimuth = 0.0, threshold = 0.25;
  std::size_t begin = 0, end = 0;
  std::int64_t seed = -1, iterations = -1;
  bool plots = false;

  auto* fp = app.add_subcommand("fokker-planck", "evolve the mixture forward and invert it with exact scores");
  fp->add_option("--config", config, "JSON config")->check(CLI::ExistingFile);
  fp->add_option("--out", out, "output directory")->required();
  fp->add_flag("--plots", plots, "also write SVG plots");

  auto* sc = app.add_subcommand("scene", "toy scene utilities");
  sc->require_subcommand(1);
  auto* render = sc->add_subcommand("render", "render a texture at one azimuth");
  render->add_option("--azimuth", azimuth, "degrees")->required();
  render->add_option("--theta", theta, "texture file (default: the canonical object)")->check(CLI::ExistingFile);
  render->add_option("--out", out, "output directory")->required();
  auto* dataset = sc->add_subcommand("dataset", "generate (a shard of) the training corpus");
  dataset->add_option("--config", config, "JSON dataset config")->check(CLI::ExistingFile);
  dataset->add_option("--begin", begin, "first sample index");
  dataset->add_option("--end", end, "one past the last sample (default: count)");
  dataset->add_option("--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train the toy denoiser and measure its biases");
  train->add_option("--config", config, "JSON config")->check(CLI::ExistingFile);
  train->add_option("--out", out, "output directory")->required();
  train->add_flag("--plots", plots, "also write SVG plots");

  auto* distill = app.add_subcommand("distill", "distill a texture from a trained denoiser");
  distill->add_option("--model", model, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  distill->add_option("--config", config, "JSON distillation config")->check(CLI::ExistingFile);
  distill->add_option("--arm", arm, "baseline|attention|pruning|staging|full (overrides the config's acg switches)");
  distill->add_option("--seed", seed, "override the config seed");
  distill->add_option("--iterations", iterations, "override the iteration count");
  distill->add_option("--out", out, "output directory")->required();
  distill->add_flag("--plots", plots, "also write SVG plots");

  auto* evaluate = app.add_subcommand("evaluate", "score a distillation run");
  evaluate->add_option("run-dir", run_dir, "distill run directory")->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--threshold", threshold, "Janus energy-ratio threshold");

  auto* ablate = app.add_subcommand("ablate", "run a configuration grid over paired seeds");
  ablate->add_option("--grid", grid_file, "JSON grid")->required()->check(CLI::ExistingFile);
  ablate->add_option("--seeds", seeds_text, "comma separated seeds")->required();
  ablate->add_option("--model", model, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  ablate->add_option("--out", out, "output directory")->required();
  ablate->add_flag("--plots", plots, "also write SVG plots");

  auto* plot = app.add_subcommand("plots", "write SVG plots for a run directory");
  plot->add_option("run-dir", run_dir, "run directory")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const auto t0 = std::chrono::steady_clock::now();
  auto seconds = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  auto maybe_plots = [&](const fs::path& dir) {
    if (!plots) return;
    for (const auto& f : eval::emit_plots(dir)) std::cout << "wrote " << f.string() << '\n';
  };

  try {
    if (*fp) {
      const auto r = cli::run_fokker_planck(cli::FokkerPlanckConfig::from_json(load_config(config)), out);
      maybe_plots(out);
      return finish(r, check, seconds());
    }
    if (*render) {
      cli::run_scene_render(theta, azimuth, out);
      return 0;
    }
    if (*dataset) {
      const auto c = cli::dataset_config_from_json(load_config(config));
      cli::run_scene_dataset(c, begin, end == 0 ? c.count : end, out);
      return 0;
    }
    if (*train) {
      const auto r = cli::run_train(cli::TrainRunConfig::from_json(load_config(config)), out);
      maybe_plots(out);
      return finish(r, check, seconds());
    }
    if (*distill) {
      auto c = sds::DistillConfig::from_json(load_config(config));
      if (!arm.empty()) {
        bool found = false;
        for (const auto& a : eval::default_arms())
          if (a.name == arm) c.acg = a.acg, found = true;
        if (!found) throw ConfigError("unknown arm " + arm);
      }
      if (seed >= 0) c.seed = static_cast<std::uint64_t>(seed);
      if (iterations >= 0) c.iterations = static_cast<int>(iterations);
      c.validate();
      const auto r = cli::run_distill(c, model, out);
      maybe_plots(out);
      return finish(r, check, seconds());
    }
    if (*evaluate) return finish(cli::run_evaluate(run_dir, threshold), check, seconds());
    if (*ablate) {
      const auto grid = eval::AblationGrid::from_json(io::read_json(grid_file));
      const auto r = cli::run_ablate(grid, cli::parse_seeds(seeds_text), model, out);
      std::cout << io::read_text(fs::path(out) / "summary.txt");
      maybe_plots(out);
      return finish(r, check, seconds());
    }
    if (*plot) {
      for (const auto& f : eval::emit_plots(run_dir)) std::cout << "wrote " << f.string() << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}

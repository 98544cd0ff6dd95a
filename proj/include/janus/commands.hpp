#pragma once

// The work behind each CLI subcommand. Each command writes its artifacts to a
// run directory and returns the assertions it evaluated; the CLI turns failed
// counted assertions into a nonzero exit under --check.

#include <filesystem>
#include <string>
#include <vector>

#include "janus/density_lab.hpp"
#include "janus/diffusion.hpp"
#include "janus/eval.hpp"
#include "janus/persistence.hpp"
#include "janus/scene.hpp"

namespace janus::cli {

namespace fs = std::filesystem;

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
  bool counted = true;  // informational rows never fail --check
};

struct CheckReport {
  std::vector<Check> checks;

  void add(std::string name, bool passed, std::string detail, bool counted = true);
  bool ok() const;
  std::string text() const;
  io::json to_json() const;
};

struct FokkerPlanckConfig {
  density::GaussianMixture mixture = density::long_tailed_mixture();
  density::SdeSchedule sde{};
  density::GridSpec grid{};
  std::size_t steps = 4000;

  static FokkerPlanckConfig from_json(const io::json& j);
  io::json to_json() const;
};

/// density.csv, metrics.json, manifest.json.
CheckReport run_fokker_planck(const FokkerPlanckConfig& cfg, const fs::path& out);

scene::DatasetConfig dataset_config_from_json(const io::json& j);
io::json dataset_config_to_json(const scene::DatasetConfig& c);

/// Renders theta (or the canonical object when theta_file is empty) at one
/// azimuth: view.bin, view.csv and view.json.
void run_scene_render(const fs::path& theta_file, double azimuth, const fs::path& out);
/// Generates samples [begin, end) of the configured dataset into out.
void run_scene_dataset(const scene::DatasetConfig& cfg, std::size_t begin, std::size_t end, const fs::path& out);

struct TrainRunConfig {
  scene::DatasetConfig data{};
  diffusion::TrainConfig train{};
  int samples = 500;  // viewpoint-free ancestral samples; 0 skips generation
  std::uint64_t sample_seed = 11;
  int attention_calls = 100;
  std::uint64_t attention_seed = 3;

  static TrainRunConfig from_json(const io::json& j);
  io::json to_json() const;
};

/// model/, loss_trace.csv, attention.csv, generation.csv, metrics.json, manifest.json.
CheckReport run_train(const TrainRunConfig& cfg, const fs::path& out);

/// Content hash and parameter hash of a saved checkpoint, for run manifests.
io::json model_info(const fs::path& model_dir);

/// Loads the checkpoint, distills, saves the run.
CheckReport run_distill(const sds::DistillConfig& cfg, const fs::path& model_dir, const fs::path& out);

/// Writes <run>/eval/{janus.json, view_score.json, rebalance.csv, rebalance.json}.
CheckReport run_evaluate(const fs::path& run_dir, double threshold = 0.25);

/// cells.csv, summary.csv, summary.txt, summary.json, manifest.json and runs/.
CheckReport run_ablate(const eval::AblationGrid& grid, const std::vector<std::uint64_t>& seeds,
                       const fs::path& model_dir, const fs::path& out);

/// The paired-seed assertions over a finished ablation (shared with the
/// acceptance binary).
CheckReport ablation_checks(const eval::AblationSummary& s, const std::vector<std::uint64_t>& seeds);

/// Parses "1,2,3".
std::vector<std::uint64_t> parse_seeds(const std::string& text);

}  // namespace janus::cli

#pragma once

// Metrics over distillation results, the ablation driver, and SVG plots.
// Scores come from the proxy embedder, so they only compare runs inside this
// testbed; they say nothing about CLIP-scale numbers.

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "janus/clip_proxy.hpp"
#include "janus/scene.hpp"
#include "janus/sds.hpp"

namespace janus::eval {

struct JanusVerdict {
  double face_energy_back = 0.0;
  double face_energy_front = 0.0;
  double ratio = 0.0;
  double threshold = 0.25;
  bool fired = false;

  io::json to_json() const;
};

/// Face-channel energy over the back-sector azimuth bins against the front
/// bins; fired iff ratio > threshold. eps_div guards an empty front.
JanusVerdict janus_rate(const scene::TextureField& theta, double threshold = 0.25, double eps_div = 1e-12);

struct ViewScoreRow {
  double azimuth = 0.0;
  Sector sector = Sector::front;
  std::optional<double> sigma;  // empty when the render embeds to zero
};

struct ViewScoreReport {
  std::array<ViewScoreRow, 4> rows;
  std::optional<double> mean;  // over non-degenerate rows
  int degenerate = 0;

  io::json to_json() const;
};

/// Renders 0, 90, 180 and 270 degrees and scores each against front, side,
/// back and side respectively.
ViewScoreReport view_dependent_score(const scene::TextureField& theta,
                                     const scene::Renderer& renderer = scene::Renderer());

struct RebalanceHistogram {
  std::array<std::size_t, kSectorCount> kept{};
  std::array<std::size_t, kSectorCount> pruned{};

  std::size_t total() const;
  /// Front share of the kept rows; 0 when nothing was kept.
  double kept_front_share() const;
  std::string csv() const;
  io::json to_json() const;
};

/// Pseudo-GT sector counts over the rows outside the calibration window.
RebalanceHistogram rebalance_histogram(const sds::DistillRunRecord& record);

struct AblationArm {
  std::string name;
  sds::AcgConfig acg;
};

/// baseline, +attention, +pruning, +staging, full.
std::vector<AblationArm> default_arms();

struct AblationCell {
  std::string arm;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  JanusVerdict janus;
  std::optional<double> view_score;
  double kept_front_share = 0.0;
  std::size_t pruned = 0;
};

struct ArmSummary {
  std::string name;
  int runs = 0;
  int fired = 0;
  int failed = 0;
  double fired_fraction = 0.0;
  std::optional<double> mean_view_score;
  double mean_kept_front_share = 0.0;
};

struct AblationSummary {
  std::vector<AblationCell> cells;  // arm-major, seeds in the given order
  std::vector<ArmSummary> arms;
  double threshold = 0.25;

  const ArmSummary& arm(const std::string& name) const;
  const AblationCell* cell(const std::string& arm, std::uint64_t seed) const;
  std::string cells_csv() const;
  std::string summary_csv() const;
  std::string table() const;
  io::json to_json() const;
};

struct AblationGrid {
  sds::DistillConfig base;
  std::vector<AblationArm> arms = default_arms();
  double threshold = 0.25;

  /// {"base": {...}, "arms": [{"name", "acg"}], "threshold"}; every key optional.
  static AblationGrid from_json(const io::json& j);
  io::json to_json() const;
};

/// Runs every arm with every seed. A failed run is recorded and skipped.
/// When run_dir is set each run is saved under <run_dir>/<arm>/seed-<s>.
AblationSummary ablation_suite(const AblationGrid& grid, const std::vector<std::uint64_t>& seeds,
                               const sds::NoiseModel& model, const scene::Renderer& renderer = scene::Renderer(),
                               const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                               const io::json& model_info = {});

/// Writes SVG plots for whatever run directory it is given (fokker-planck,
/// train or distill) and returns the files written, sorted.
std::vector<std::filesystem::path> emit_plots(const std::filesystem::path& run_dir);

}  // namespace janus::eval

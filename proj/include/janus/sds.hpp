#pragma once

// Score distillation of a TextureField against the toy denoiser, with the
// three mitigation hooks: attention control on the viewpoint token, proxy
// similarity pruning of pseudo-GT images, and object-then-full prompt staging.

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "janus/clip_proxy.hpp"
#include "janus/diffusion.hpp"
#include "janus/scene.hpp"

namespace janus::sds {

using diffusion::Denoiser;
using diffusion::DiscreteSchedule;
using diffusion::TokenSequence;
using Eigen::VectorXd;

/// x0~ = (x_t - sqrt(1 - abar) eps) / sqrt(abar).
VectorXd pseudo_ground_truth(const DiscreteSchedule& sched, std::span<const double> x_t, int t,
                             std::span<const double> eps_pred);

/// gamma(t) = sqrt(1 - abar) / sqrt(abar).
double gamma(const DiscreteSchedule& sched, int t);
/// omega(t) = 1 - abar.
double omega(const DiscreteSchedule& sched, int t);

/// omega (eps_pred - eps) J^T, through the renderer adjoint.
scene::TextureField gradient_noise_form(const scene::Renderer& r, const scene::Viewpoint& v, double w,
                                        std::span<const double> eps_pred, std::span<const double> eps);
/// (omega / gamma) (x0 - x0~) J^T.
scene::TextureField gradient_image_form(const scene::Renderer& r, const scene::Viewpoint& v, double w, double g,
                                        std::span<const double> x0, std::span<const double> pseudo_gt);
/// omega / (2 gamma) |x0 - sg(x0~)|^2, whose theta-gradient is the image form.
double surrogate_loss(double w, double g, std::span<const double> x0, std::span<const double> pseudo_gt);

struct AcgConfig {
  bool attention = false;
  double side_factor = 5.0;   // lambda_side = side_factor * prompt length
  double back_factor = 10.0;  // lambda_back = back_factor * prompt length
  bool control_during_calibration = true;
  bool pruning = false;
  double alpha = 0.5;
  double calibration_fraction = 0.1;
  bool staging = false;
  double stage_fraction = 0.5;
};

struct DistillConfig {
  int iterations = 1500;
  double t_lo = 0.02;
  double t_hi = 0.98;
  double step_size = 0.05;
  std::uint64_t seed = 1;
  int descriptors = 6;  // length of the description part of the full prompt
  AcgConfig acg{};

  void validate() const;
  /// Iterations in the calibration window: ceil(fraction * iterations).
  int calibration_iterations() const;
  /// First stage-2 iteration: ceil(rho * iterations).
  int stage_boundary() const;
  io::json to_json() const;
  static DistillConfig from_json(const io::json& j);
};

struct StagedPrompt {
  TokenSequence object_prompt;  // [object]
  TokenSequence full_prompt;    // [object, d0, ..., d_{n-1}]
  double stage_fraction = 0.5;

  static StagedPrompt make(const diffusion::Vocabulary& vocab, int descriptors, double stage_fraction);
};

/// Appends the sector token of classify_sector(v); the base must not already
/// carry a viewpoint token.
TokenSequence viewpoint_prompt(const diffusion::Vocabulary& vocab, const TokenSequence& base,
                               const scene::Viewpoint& v);

struct RecordRow {
  int iter = 0;
  double azimuth = 0.0;
  Sector sector = Sector::front;
  int t = 0;
  std::optional<double> sigma;  // absent for degenerate pseudo-GT
  bool pruned = false;
  bool controlled = false;
  int stage = 1;
  double loss = 0.0;
  double grad_norm = 0.0;
  Sector pgt_sector = Sector::front;  // proxy argmax of the pseudo-GT
  bool calibration = false;
  std::size_t prompt_descriptors = 0;
};

struct DistillRunRecord {
  std::vector<RecordRow> rows;
  scene::TextureField theta;
  clip::PruneState prune_state;

  std::string csv() const;
  static DistillRunRecord parse_csv(const std::string& text);
};

/// Everything one SDS iteration needs besides theta.
struct StepInputs {
  scene::Viewpoint view;
  int t = 1;
  std::vector<double> eps;
  TokenSequence prompt;
  const diffusion::Control* control = nullptr;
  const clip::PruneState* prune = nullptr;  // null: never prune
};

struct StepOutcome {
  RecordRow row;
  scene::TextureField gradient;  // zero when pruned
  VectorXd pseudo_gt;
};

/// The noise predictor seen by the distillation loop. Tests substitute stubs.
class NoiseModel {
 public:
  virtual ~NoiseModel() = default;
  virtual VectorXd predict(std::span<const double> x_t, int t, const TokenSequence& seq,
                           const diffusion::Control* control) const = 0;
  virtual const DiscreteSchedule& schedule() const = 0;
  virtual const diffusion::Vocabulary& vocabulary() const = 0;
};

class DenoiserModel final : public NoiseModel {
 public:
  explicit DenoiserModel(const Denoiser& d) : d_(d) {}
  VectorXd predict(std::span<const double> x_t, int t, const TokenSequence& seq,
                   const diffusion::Control* control) const override {
    return d_.denoise(x_t, t, seq, control);
  }
  const DiscreteSchedule& schedule() const override { return d_.schedule(); }
  const diffusion::Vocabulary& vocabulary() const override { return d_.vocabulary(); }

 private:
  const Denoiser& d_;
};

/// Renders, noises, predicts, scores the pseudo-GT, and (unless pruned) applies
/// theta -= step_size * gradient. Throws StepFailed on a non-finite gradient.
StepOutcome sds_step(scene::TextureField& theta, const StepInputs& in, const NoiseModel& model,
                     const scene::Renderer& renderer, const clip::ProxyEmbedder& embedder, double step_size,
                     int iteration);

DistillRunRecord run_distillation(const DistillConfig& cfg, const StagedPrompt& staged, const NoiseModel& model,
                                  const scene::Renderer& renderer = scene::Renderer());

/// record.csv, theta.bin, calibration.json, manifest.json.
void save_run(const DistillRunRecord& rec, const DistillConfig& cfg, const std::filesystem::path& dir,
              const io::json& model_info);

}  // namespace janus::sds

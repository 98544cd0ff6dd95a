#pragma once

// A small conditional epsilon-prediction denoiser with real cross-attention.
//
// Each of the W image columns (a K x C patch) is a query. Tokens are keys and
// values. Two residual cross-attention blocks mix prompt information into the
// column states; the pooled state then sets prior logits over a bank of
// learned prototype images, and the prediction is the posterior mean of that
// bank under the forward noising kernel:
//
//
//   v    = abar q + 1 - abar
//   l_k  = b_k + u_k . z - |x_t - sqrt(abar) mu_k|^2 / (2 v)
//   x0^  = sum_k softmax(l)_k (mu_k + sqrt(abar) q / v (x_t - sqrt(abar) mu_k))
//   eps^ = g (x_t - sqrt(abar) x0^) / sqrt(1 - abar)
//
// which is the exact posterior mean when the data are a mixture of isotropic
// Gaussians N(mu_k, q I) with prior softmax(b + U z). log q is a learned
// linear function of the timestep features.
//
// The gain g starts at zero, so an untrained model predicts zero noise.
// Descriptor tokens share the object embedding plus a fixed small offset;
// they carry no viewpoint information and only compete for attention.

#include <Eigen/Dense>
#include <array>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "janus/common.hpp"
#include "janus/density_lab.hpp"
#include "janus/persistence.hpp"
#include "janus/scene.hpp"
#include "janus/tokens.hpp"

namespace janus::diffusion {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// 1000-step discretization of the VP schedule: beta_i = beta(t_i) / N on a
/// uniform grid, abar_i = prod (1 - beta_j). Index i runs 1..N.
struct DiscreteSchedule {
  density::SdeSchedule sde{};
  int steps = 1000;
  std::vector<double> betas;       // betas[i - 1]
  std::vector<double> alpha_bars;  // alpha_bars[i - 1]

  static DiscreteSchedule from_sde(const density::SdeSchedule& sde, int steps = 1000);
  double beta(int i) const { return betas.at(static_cast<std::size_t>(i - 1)); }
  double alpha_bar(int i) const { return alpha_bars.at(static_cast<std::size_t>(i - 1)); }
  /// Step index for a fraction of the horizon, clamped to [1, N].
  int index(double fraction) const;
};

/// Row-stochastic N x T map (rows: pixel queries, columns: tokens).
struct AttentionMap {
  MatrixXd values;

  Eigen::Index queries() const { return values.rows(); }
  Eigen::Index tokens() const { return values.cols(); }
  /// Largest |row sum - 1|.
  double row_sum_error() const;
};

/// softmax(Q K^T / sqrt(d)) row by row.
AttentionMap attention_map(const MatrixXd& queries, const MatrixXd& keys);

struct ControlSpec {
  std::array<double, kSectorCount> lambda{0.0, 0.0, 0.0};  // front, side, back

  void validate() const;
  double for_sector(Sector s) const { return lambda[static_cast<std::size_t>(s)]; }
  /// lambda_front = 0, lambda_side = side_factor * T, lambda_back = back_factor * T.
  static ControlSpec for_prompt_length(std::size_t tokens, double side_factor = 5.0, double back_factor = 10.0);
};

struct ControlResult {
  AttentionMap map;
  bool controlled = false;  // false when the prompt has no viewpoint token
};

/// Multiplies the viewpoint-token column by (1 + lambda_sector). No renormalization.
ControlResult control_attention(const AttentionMap& m, const TokenSequence& seq, const ControlSpec& spec,
                                Sector sector);

struct Control {
  ControlSpec spec;
  Sector sector = Sector::front;
  // timesteps outside [first_step, last_step] run uncontrolled
  int first_step = 1;
  int last_step = std::numeric_limits<int>::max();

  bool active(int t) const { return t >= first_step && t <= last_step; }
};

/// Called with each block's map after control, before it weights V. The
/// callee may read or overwrite the map.
using AttentionHook = std::function<void(int block, MatrixXd& map)>;

struct DenoiserConfig {
  int width = 32;
  int blocks = 2;
  int prototypes = 128;
  int time_features = 16;
  double descriptor_offset = 0.05;
  double initial_spread = 0.01;  // per-pixel variance of each prototype
  // added to the learned spread; keeps the head from snapping every input
  // onto the nearest prototype
  double spread_floor = 0.3;
  int image_columns = 18;
  int patch = 36;  // K x C values per column
  int descriptors = 8;

  void validate() const;
  int image_size() const { return image_columns * patch; }
};

/// Location of one parameter tensor inside the flat parameter vector.
struct ParamSlot {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

class Denoiser {
 public:
  Denoiser() = default;
  /// Random init from `seed`; prototypes must hold `prototypes` images.
  Denoiser(const DenoiserConfig& cfg, const DiscreteSchedule& sched, std::uint64_t seed,
           const std::vector<std::vector<double>>& prototypes);

  const DenoiserConfig& config() const { return cfg_; }
  const DiscreteSchedule& schedule() const { return sched_; }
  const Vocabulary& vocabulary() const { return vocab_; }
  std::vector<double>& parameters() { return params_; }
  const std::vector<double>& parameters() const { return params_; }
  const MatrixXd& descriptor_offsets() const { return offsets_; }
  const std::vector<ParamSlot>& layout() const { return layout_; }
  const ParamSlot& slot(const std::string& name) const;

  /// Predicted noise for x_t at step t (1..N).
  VectorXd denoise(std::span<const double> x_t, int t, const TokenSequence& seq, const Control* control = nullptr,
                   const AttentionHook& hook = {}) const;

  /// Squared-error epsilon loss for one (x0, eps, t) triple; accumulates
  /// d loss / d params into `grad` (same length as parameters()).
  double loss_and_gradient(std::span<const double> x0, std::span<const double> eps, int t,
                           const TokenSequence& seq, std::vector<double>& grad) const;

  void save(const std::filesystem::path& dir, const io::json& extra = {}) const;
  static Denoiser load(const std::filesystem::path& dir);

 private:
  struct Cache;
  void forward(std::span<const double> x_t, int t, const TokenSequence& seq, const Control* control,
                 const AttentionHook& hook, Cache* cache, VectorXd& eps) const;
  void build_layout();
  MatrixXd token_matrix(const TokenSequence& seq) const;

  DenoiserConfig cfg_;
  DiscreteSchedule sched_;
  Vocabulary vocab_;
  std::vector<double> params_;
  MatrixXd offsets_;  // descriptors x width, fixed
  std::vector<ParamSlot> layout_;
};

/// x_t = sqrt(abar) x0 + sqrt(1 - abar) eps.
VectorXd noisy_image(const DiscreteSchedule& sched, std::span<const double> x0, std::span<const double> eps, int t);

struct TrainConfig {
  int epochs = 30;
  int batch = 32;
  double learning_rate = 2e-3;
  double attention_decay = 10.0;  // decoupled weight decay on the query/key projections
  std::uint64_t seed = 7;
  std::size_t heldout = 256;
  DenoiserConfig model{};
  density::SdeSchedule sde{};
};

struct TrainResult {
  Denoiser model;
  std::vector<double> loss_trace;  // mean batch loss per optimizer step
  double untrained_heldout = 0.0;
  double trained_heldout = 0.0;
};

/// Adam with a constant step. Held-out loss uses a separate seeded set of
/// (image, t, eps) triples drawn from the same scene distribution.
TrainResult train_denoiser(const scene::Dataset& data, const TrainConfig& cfg);

/// Mean epsilon loss over held-out triples derived from `seed`.
double heldout_loss(const Denoiser& model, const scene::DatasetConfig& data_cfg, std::size_t count,
                    std::uint64_t seed);

/// Moving average with the given window (length n - window + 1).
std::vector<double> smooth(std::span<const double> trace, std::size_t window);

/// DDPM ancestral sampling from pure noise with the posterior variance beta~.
std::vector<double> ancestral_sample(const Denoiser& model, const TokenSequence& seq, Rng& rng,
                                     const Control* control = nullptr);

/// Mean attention mass on the viewpoint token, averaged over queries and
/// blocks and over `calls` noisy versions of dataset images, one value per
/// prompt. Prompts without a viewpoint token report 0.
std::vector<double> mean_keyword_attention(const Denoiser& model, const scene::Dataset& data,
                                           const std::vector<TokenSequence>& prompts, int calls,
                                           std::uint64_t seed);

}  // namespace janus::diffusion

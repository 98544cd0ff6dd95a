#pragma once

// Variance-preserving SDE machinery on 1-D densities: closed-form marginals
// and scores of Gaussian mixtures, plus explicit finite-volume solvers for the
// forward Fokker-Planck equation and its reverse-time counterpart.

#include <array>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace janus::density {

struct SdeSchedule {
  double beta_min = 0.1;
  double beta_max = 20.0;
  double horizon = 1.0;

  void validate() const;
  double beta(double t) const;
  /// Integral of beta over [0, t].
  double integrated_beta(double t) const;
  /// m(t) = exp(-1/2 * integral of beta); the mean scale of the marginal.
  double mean_scale(double t) const;
  double drift(double x, double t) const { return -0.5 * beta(t) * x; }
  double diffusion_squared(double t) const { return beta(t); }
};

struct GaussianMixture {
  std::vector<double> weights;
  std::vector<double> means;
  std::vector<double> stdevs;

  void validate() const;
  std::size_t size() const { return weights.size(); }
  double pdf(double x) const;
  /// log p(x) via log-sum-exp; finite wherever some component is representable.
  double log_pdf(double x) const;
  /// d/dx log p(x) via log-sum-exp weights. Always finite.
  double score(double x) const;

  static GaussianMixture standard_normal();
};

/// The 0.7/0.2/0.1 mixture at -2/0/2 with stdev 0.3 used throughout the tests
/// and the default `fokker-planck` config.
GaussianMixture long_tailed_mixture();

struct GridSpec {
  double lo = -8.0;
  double hi = 8.0;
  std::size_t points = 512;

  void validate() const;
  double dx() const { return (hi - lo) / static_cast<double>(points - 1); }
  double x(std::size_t i) const { return lo + dx() * static_cast<double>(i); }
};

struct DensityGrid {
  std::vector<double> xs;
  std::vector<double> values;
  double t = 0.0;

  double dx() const { return xs[1] - xs[0]; }
  /// Trapezoidal integral of values.
  double mass() const;
  /// Throws ContractError when the grid invariants do not hold.
  void validate(double mass_tol = 1e-3) const;
};

/// Samples the mixture pdf on the grid and renormalizes to unit trapezoidal mass.
DensityGrid discretize(const GaussianMixture& mix, const GridSpec& grid, double t = 0.0);

GaussianMixture analytic_marginal(const GaussianMixture& mix, const SdeSchedule& sched, double t);

/// Exact score of the marginal at (t, x). Empty when the marginal density
/// underflows to zero at x.
std::optional<double> analytic_score(const GaussianMixture& mix, const SdeSchedule& sched, double t,
                                     double x);

/// Where the reverse solver takes its score from. `exact` uses the closed-form
/// marginal of a mixture; `learned` wraps any callable (t, x) -> score.
class ScoreSource {
 public:
  enum class Kind { exact, learned };
  using Fn = std::function<double(double t, double x)>;
  using AtTime = std::function<double(double x)>;

  static ScoreSource exact(GaussianMixture mix, SdeSchedule sched);
  static ScoreSource learned(Fn fn);

  Kind kind() const { return kind_; }
  double operator()(double t, double x) const { return bind_(t)(x); }
  /// Score field frozen at time t; lets exact sources precompute the marginal.
  AtTime at(double t) const { return bind_(t); }

 private:
  using Binder = std::function<AtTime(double t)>;
  ScoreSource(Kind k, Binder b) : kind_(k), bind_(std::move(b)) {}
  Kind kind_;
  Binder bind_;
};

struct SolverStats {
  std::size_t outer_steps = 0;
  std::size_t substeps = 0;
  double dt_cap = 0.0;
  /// Largest magnitude of a negative value clamped to zero.
  double clamped_negative = 0.0;
  /// Largest |mass - 1| seen after any outer step, before renormalization.
  double max_mass_drift = 0.0;
};

/// Evolves p0 (time stamp p0.t) forward under the Fokker-Planck equation of the
/// VP-SDE up to t_end, in `steps` outer steps. Each outer step is split into
/// enough substeps to respect dt <= 0.4 dx^2 / max g^2.
DensityGrid evolve_forward(const DensityGrid& p0, const SdeSchedule& sched, std::size_t steps,
                           std::optional<double> t_end = std::nullopt, SolverStats* stats = nullptr);

/// Evolves qT under the reverse-time drift (g^2/2 * score - f) with s = T - t,
/// returning q at t = 0. qT.t is ignored; the run always spans the full horizon.
DensityGrid evolve_reverse(const DensityGrid& qT, const SdeSchedule& sched, const ScoreSource& score,
                           std::size_t steps, SolverStats* stats = nullptr);

/// 1/2 * integral |p - q| (trapezoidal). Grids must share xs.
double total_variation(const DensityGrid& p, const DensityGrid& q);

/// Masses of the grid over the basins separated at the midpoints between
/// consecutive sorted means. Returned fractions sum to the grid mass.
std::vector<double> basin_masses(const DensityGrid& grid, std::span<const double> means);

}  // namespace janus::density

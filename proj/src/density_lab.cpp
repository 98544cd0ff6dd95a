#include "janus/density_lab.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "janus/common.hpp"

namespace janus::density {

namespace {

constexpr double kNegativeClamp = 1e-9;
constexpr double kMassTolerance = 1e-3;
constexpr double kBlowUp = 1e6;
constexpr double kCflFactor = 0.4;

double log_component(double x, double mean, double stdev, double weight) {
  const double z = (x - mean) / stdev;
  return std::log(weight) - std::log(stdev) - 0.5 * std::log(2.0 * kPi) - 0.5 * z * z;
}

// One explicit conservative update of the interior nodes. `velocity` is the
// advective velocity at a face position, `diffusivity` the constant D in the
// flux -D dp/dx. Boundary nodes stay pinned at zero (absorbing).
enum class Advection { upwind, central };

template <class Velocity>
void flux_step(std::vector<double>& p, std::vector<double>& scratch, const std::vector<double>& faces,
               Velocity&& velocity, double diffusivity, double dt, double dx, Advection scheme) {
  const std::size_t n = p.size();
  scratch.assign(n - 1, 0.0);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double u = velocity(faces[i]);
    double adv;
    if (scheme == Advection::central)
      adv = 0.5 * u * (p[i] + p[i + 1]);
    else
      adv = u > 0.0 ? u * p[i] : u * p[i + 1];
    scratch[i] = adv - diffusivity * (p[i + 1] - p[i]) / dx;
  }
  const double r = dt / dx;
  for (std::size_t i = 1; i + 1 < n; ++i) p[i] -= r * (scratch[i] - scratch[i - 1]);
  p.front() = 0.0;
  p.back() = 0.0;
}

double trapezoid(const std::vector<double>& v, double dx) {
  if (v.size() < 2) return 0.0;
  double s = 0.5 * (v.front() + v.back());
  for (std::size_t i = 1; i + 1 < v.size(); ++i) s += v[i];
  return s * dx;
}

// Post-step bookkeeping shared by both solvers.
void check_and_clamp(std::vector<double>& p, double dx, std::size_t step, SolverStats& stats) {
  for (double& v : p) {
    if (!std::isfinite(v)) throw SolverDiverged(step, "non-finite density value");
    if (v > kBlowUp) throw SolverDiverged(step, "density blow-up");
    if (v < 0.0) {
      if (-v >= kNegativeClamp) throw SolverDiverged(step, "negative density beyond tolerance");
      stats.clamped_negative = std::max(stats.clamped_negative, -v);
      v = 0.0;
    }
  }
  const double drift = std::abs(trapezoid(p, dx) - 1.0);
  stats.max_mass_drift = std::max(stats.max_mass_drift, drift);
  if (drift > kMassTolerance) throw SolverDiverged(step, "mass drift beyond tolerance");
}

void renormalize(std::vector<double>& p, double dx) {
  const double m = trapezoid(p, dx);
  if (m > 0.0)
    for (double& v : p) v /= m;
}

std::vector<double> face_positions(const std::vector<double>& xs) {
  std::vector<double> faces(xs.size() - 1);
  for (std::size_t i = 0; i + 1 < xs.size(); ++i) faces[i] = 0.5 * (xs[i] + xs[i + 1]);
  return faces;
}

}  // namespace

void SdeSchedule::validate() const {
  if (!(beta_min > 0.0) || !(beta_max >= beta_min) || !std::isfinite(beta_max))
    throw ConfigError("SDE schedule requires 0 < beta_min <= beta_max");
  if (!(horizon > 0.0)) throw ConfigError("SDE horizon must be positive");
}

double SdeSchedule::beta(double t) const { return beta_min + (beta_max - beta_min) * (t / horizon); }

double SdeSchedule::integrated_beta(double t) const {
  return beta_min * t + 0.5 * (beta_max - beta_min) * t * t / horizon;
}

double SdeSchedule::mean_scale(double t) const { return std::exp(-0.5 * integrated_beta(t)); }

void GaussianMixture::validate() const {
  if (weights.empty() || weights.size() != means.size() || weights.size() != stdevs.size())
    throw ConfigError("mixture needs matching nonempty weights/means/stdevs");
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw ConfigError("mixture weights must be nonnegative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-12) throw ConfigError("mixture weights must sum to 1");
  for (double s : stdevs)
    if (!(s > 0.0)) throw ConfigError("mixture stdevs must be positive");
}

double GaussianMixture::pdf(double x) const {
  double p = 0.0;
  for (std::size_t i = 0; i < size(); ++i) {
    const double z = (x - means[i]) / stdevs[i];
    p += weights[i] * std::exp(-0.5 * z * z) / (stdevs[i] * std::sqrt(2.0 * kPi));
  }
  return p;
}

double GaussianMixture::log_pdf(double x) const {
  double hi = -std::numeric_limits<double>::infinity();
  std::vector<double> l(size());
  for (std::size_t i = 0; i < size(); ++i) {
    l[i] = weights[i] > 0.0 ? log_component(x, means[i], stdevs[i], weights[i])
                            : -std::numeric_limits<double>::infinity();
    hi = std::max(hi, l[i]);
  }
  double s = 0.0;
  for (double li : l) s += std::exp(li - hi);
  return hi + std::log(s);
}

double GaussianMixture::score(double x) const {
  double hi = -std::numeric_limits<double>::infinity();
  std::vector<double> l(size());
  for (std::size_t i = 0; i < size(); ++i) {
    l[i] = weights[i] > 0.0 ? log_component(x, means[i], stdevs[i], weights[i])
                            : -std::numeric_limits<double>::infinity();
    hi = std::max(hi, l[i]);
  }
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < size(); ++i) {
    const double r = std::exp(l[i] - hi);
    den += r;
    num += r * (-(x - means[i]) / (stdevs[i] * stdevs[i]));
  }
  return num / den;
}

GaussianMixture GaussianMixture::standard_normal() { return {{1.0}, {0.0}, {1.0}}; }

GaussianMixture long_tailed_mixture() { return {{0.7, 0.2, 0.1}, {-2.0, 0.0, 2.0}, {0.3, 0.3, 0.3}}; }

void GridSpec::validate() const {
  if (!(hi > lo)) throw ConfigError("grid requires lo < hi");
  if (points < 256) throw ConfigError("grid requires at least 256 points");
}

double DensityGrid::mass() const { return trapezoid(values, dx()); }

void DensityGrid::validate(double mass_tol) const {
  if (xs.size() != values.size() || xs.size() < 2) throw ContractError("density grid shape mismatch");
  for (double v : values)
    if (!(v >= 0.0)) throw ContractError("density grid has negative or NaN values");
  if (std::abs(mass() - 1.0) > mass_tol) throw ContractError("density grid is not normalized");
}

DensityGrid discretize(const GaussianMixture& mix, const GridSpec& grid, double t) {
  mix.validate();
  grid.validate();
  DensityGrid out;
  out.t = t;
  out.xs.resize(grid.points);
  out.values.resize(grid.points);
  for (std::size_t i = 0; i < grid.points; ++i) {
    out.xs[i] = grid.x(i);
    out.values[i] = mix.pdf(out.xs[i]);
  }
  renormalize(out.values, grid.dx());
  return out;
}

GaussianMixture analytic_marginal(const GaussianMixture& mix, const SdeSchedule& sched, double t) {
  sched.validate();
  mix.validate();
  if (!(t >= 0.0 && t <= sched.horizon)) throw RangeError("time outside [0, T]");
  const double m = sched.mean_scale(t);
  GaussianMixture out = mix;
  for (std::size_t i = 0; i < mix.size(); ++i) {
    out.means[i] = m * mix.means[i];
    out.stdevs[i] = std::sqrt(m * m * mix.stdevs[i] * mix.stdevs[i] + (1.0 - m * m));
  }
  return out;
}

std::optional<double> analytic_score(const GaussianMixture& mix, const SdeSchedule& sched, double t,
                                     double x) {
  const GaussianMixture marginal = analytic_marginal(mix, sched, t);
  if (!(marginal.pdf(x) > 0.0)) return std::nullopt;
  return marginal.score(x);
}

ScoreSource ScoreSource::exact(GaussianMixture mix, SdeSchedule sched) {
  mix.validate();
  sched.validate();
  return ScoreSource(Kind::exact, [mix = std::move(mix), sched](double t) -> AtTime {
    GaussianMixture marginal = analytic_marginal(mix, sched, std::clamp(t, 0.0, sched.horizon));
    return [marginal = std::move(marginal)](double x) { return marginal.score(x); };
  });
}

ScoreSource ScoreSource::learned(Fn fn) {
  if (!fn) throw ContractError("learned score source needs a callable");
  return ScoreSource(Kind::learned, [fn = std::move(fn)](double t) -> AtTime {
    return [fn, t](double x) { return fn(t, x); };
  });
}

namespace {

struct StepPlan {
  double dt_cap;
};

StepPlan plan(const DensityGrid& g, const SdeSchedule& sched) {
  const double dx = g.dx();
  const double max_g2 = std::max(sched.beta(0.0), sched.beta(sched.horizon));
  return {kCflFactor * dx * dx / max_g2};
}

}  // namespace

DensityGrid evolve_forward(const DensityGrid& p0, const SdeSchedule& sched, std::size_t steps,
                           std::optional<double> t_end, SolverStats* stats) {
  sched.validate();
  p0.validate();
  if (steps == 0) throw ConfigError("steps must be positive");
  const double t0 = p0.t;
  const double t1 = t_end.value_or(sched.horizon);
  if (!(t0 >= 0.0 && t1 <= sched.horizon && t1 >= t0)) throw RangeError("time outside [0, T]");

  SolverStats local;
  const double dx = p0.dx();
  const StepPlan pl = plan(p0, sched);
  local.dt_cap = pl.dt_cap;
  const double outer_dt = (t1 - t0) / static_cast<double>(steps);
  const std::size_t sub =
      outer_dt > 0.0 ? static_cast<std::size_t>(std::ceil(outer_dt / pl.dt_cap - 1e-12)) : 0;
  const double dt = sub > 0 ? outer_dt / static_cast<double>(sub) : 0.0;

  // Cell Peclet number |f| dx / D = |x| dx; central differencing of the drift
  // is monotone while it stays below 2, otherwise fall back to upwind.
  const double peclet = std::max(std::abs(p0.xs.front()), std::abs(p0.xs.back())) * dx;
  const Advection forward_scheme = peclet < 2.0 ? Advection::central : Advection::upwind;

  DensityGrid out = p0;
  const std::vector<double> faces = face_positions(out.xs);
  std::vector<double> scratch;
  double t = t0;
  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t k = 0; k < sub; ++k) {
      // Coefficients frozen at the substep midpoint.
      const double tm = t + 0.5 * dt;
      const double b = sched.beta(tm);
      flux_step(out.values, scratch, faces, [b](double x) { return -0.5 * b * x; }, 0.5 * b, dt, dx,
                forward_scheme);
      t += dt;
    }
    check_and_clamp(out.values, dx, s, local);
    local.substeps += sub;
    ++local.outer_steps;
  }
  renormalize(out.values, dx);
  out.t = t1;
  if (stats) *stats = local;
  return out;
}

DensityGrid evolve_reverse(const DensityGrid& qT, const SdeSchedule& sched, const ScoreSource& score,
                           std::size_t steps, SolverStats* stats) {
  sched.validate();
  qT.validate();
  if (steps == 0) throw ConfigError("steps must be positive");

  SolverStats local;
  const double dx = qT.dx();
  const StepPlan pl = plan(qT, sched);
  local.dt_cap = pl.dt_cap;
  const double T = sched.horizon;
  const double outer_ds = T / static_cast<double>(steps);
  const std::size_t sub = static_cast<std::size_t>(std::ceil(outer_ds / pl.dt_cap - 1e-12));
  const double ds = outer_ds / static_cast<double>(sub);

  DensityGrid out = qT;
  const std::vector<double> faces = face_positions(out.xs);
  std::vector<double> scratch;
  double s = 0.0;
  for (std::size_t step = 0; step < steps; ++step) {
    for (std::size_t k = 0; k < sub; ++k) {
      const double t = T - (s + 0.5 * ds);
      const double b = sched.beta(t);
      // Reverse drift: g^2/2 * score - f = b/2 * (score + x). Pure advection.
      const ScoreSource::AtTime field = score.at(t);
      auto velocity = [&](double x) { return 0.5 * b * (field(x) + x); };
      flux_step(out.values, scratch, faces, velocity, 0.0, ds, dx, Advection::upwind);
      s += ds;
    }
    check_and_clamp(out.values, dx, step, local);
    local.substeps += sub;
    ++local.outer_steps;
  }
  renormalize(out.values, dx);
  out.t = 0.0;
  if (stats) *stats = local;
  return out;
}

double total_variation(const DensityGrid& p, const DensityGrid& q) {
  if (p.xs.size() != q.xs.size()) throw ContractError("total_variation: grid size mismatch");
  std::vector<double> diff(p.values.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = std::abs(p.values[i] - q.values[i]);
  return 0.5 * trapezoid(diff, p.dx());
}

std::vector<double> basin_masses(const DensityGrid& grid, std::span<const double> means) {
  std::vector<double> sorted(means.begin(), means.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> cuts;
  for (std::size_t i = 0; i + 1 < sorted.size(); ++i) cuts.push_back(0.5 * (sorted[i] + sorted[i + 1]));

  std::vector<double> out(sorted.size(), 0.0);
  const double dx = grid.dx();
  // Trapezoid per cell, with each cell split at a cut proportionally.
  for (std::size_t i = 0; i + 1 < grid.xs.size(); ++i) {
    const double a = grid.xs[i], b = grid.xs[i + 1];
    const double area = 0.5 * (grid.values[i] + grid.values[i + 1]) * dx;
    std::size_t basin = static_cast<std::size_t>(std::upper_bound(cuts.begin(), cuts.end(), a) - cuts.begin());
    if (basin < cuts.size() && cuts[basin] < b) {
      const double frac = (cuts[basin] - a) / dx;
      out[basin] += area * frac;
      out[basin + 1] += area * (1.0 - frac);
    } else {
      out[basin] += area;
    }
  }
  return out;
}

}  // namespace janus::density

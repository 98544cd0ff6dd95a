#include "janus/sds.hpp"

#include <cmath>
#include <sstream>

namespace janus::sds {

namespace {

std::span<const double> view(const VectorXd& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

double norm(const scene::TextureField& t) {
  double s = 0.0;
  for (double v : t.values) s += v * v;
  return std::sqrt(s);
}

}  // namespace

VectorXd pseudo_ground_truth(const DiscreteSchedule& sched, std::span<const double> x_t, int t,
                             std::span<const double> eps_pred) {
  if (x_t.size() != eps_pred.size()) throw ContractError("image and noise differ in size");
  const double ab = sched.alpha_bar(t);
  if (!(ab > 1e-12)) throw RangeError("alpha_bar underflows at this timestep");
  const auto n = static_cast<Eigen::Index>(x_t.size());
  return (Eigen::Map<const VectorXd>(x_t.data(), n) - std::sqrt(1.0 - ab) * Eigen::Map<const VectorXd>(eps_pred.data(), n)) /
         std::sqrt(ab);
}

double gamma(const DiscreteSchedule& sched, int t) {
  const double ab = sched.alpha_bar(t);
  return std::sqrt(1.0 - ab) / std::sqrt(ab);
}

double omega(const DiscreteSchedule& sched, int t) { return 1.0 - sched.alpha_bar(t); }

scene::TextureField gradient_noise_form(const scene::Renderer& r, const scene::Viewpoint& v, double w,
                                        std::span<const double> eps_pred, std::span<const double> eps) {
  std::vector<double> g(eps.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = w * (eps_pred[i] - eps[i]);
  return r.render_adjoint(g, v);
}

scene::TextureField gradient_image_form(const scene::Renderer& r, const scene::Viewpoint& v, double w, double g,
                                        std::span<const double> x0, std::span<const double> pseudo_gt) {
  std::vector<double> d(x0.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = w / g * (x0[i] - pseudo_gt[i]);
  return r.render_adjoint(d, v);
}

double surrogate_loss(double w, double g, std::span<const double> x0, std::span<const double> pseudo_gt) {
  double s = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i) s += (x0[i] - pseudo_gt[i]) * (x0[i] - pseudo_gt[i]);
  return w / (2.0 * g) * s;
}

void DistillConfig::validate() const {
  if (iterations <= 0) throw ConfigError("iterations must be positive");
  if (!(t_lo > 0.0 && t_lo < t_hi && t_hi <= 1.0)) throw ConfigError("t_range must satisfy 0 < t_lo < t_hi <= 1");
  if (!(step_size > 0.0) || !std::isfinite(step_size)) throw ConfigError("step_size must be positive");
  if (descriptors < 0) throw ConfigError("descriptor count must be >= 0");
  if (!(acg.stage_fraction > 0.0 && acg.stage_fraction < 1.0)) throw ConfigError("stage fraction must lie in (0, 1)");
  if (!(acg.calibration_fraction > 0.0 && acg.calibration_fraction < 1.0))
    throw ConfigError("calibration fraction must lie in (0, 1)");
  if (!(acg.alpha >= 0.0 && acg.alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (acg.side_factor < 0.0 || acg.back_factor < 0.0) throw ConfigError("control factors must be >= 0");
}

int DistillConfig::calibration_iterations() const {
  return static_cast<int>(std::ceil(acg.calibration_fraction * iterations));
}

int DistillConfig::stage_boundary() const { return static_cast<int>(std::ceil(acg.stage_fraction * iterations)); }

io::json DistillConfig::to_json() const {
  return {{"iterations", iterations},
          {"t_range", {t_lo, t_hi}},
          {"step_size", step_size},
          {"seed", seed},
          {"descriptors", descriptors},
          {"weighting", "1 - alpha_bar"},
          {"sampling", "uniform"},
          {"acg",
           {{"attention", acg.attention},
            {"side_factor", acg.side_factor},
            {"back_factor", acg.back_factor},
            {"control_during_calibration", acg.control_during_calibration},
            {"pruning", acg.pruning},
            {"alpha", acg.alpha},
            {"calibration_fraction", acg.calibration_fraction},
            {"staging", acg.staging},
            {"stage_fraction", acg.stage_fraction}}}};
}

DistillConfig DistillConfig::from_json(const io::json& j) {
  DistillConfig c;
  c.iterations = j.value("iterations", c.iterations);
  if (j.contains("t_range")) {
    c.t_lo = j.at("t_range").at(0);
    c.t_hi = j.at("t_range").at(1);
  }
  c.step_size = j.value("step_size", c.step_size);
  c.seed = j.value("seed", c.seed);
  c.descriptors = j.value("descriptors", c.descriptors);
  if (j.contains("acg")) {
    const auto& a = j.at("acg");
    c.acg.attention = a.value("attention", c.acg.attention);
    c.acg.side_factor = a.value("side_factor", c.acg.side_factor);
    c.acg.back_factor = a.value("back_factor", c.acg.back_factor);
    c.acg.control_during_calibration = a.value("control_during_calibration", c.acg.control_during_calibration);
    c.acg.pruning = a.value("pruning", c.acg.pruning);
    c.acg.alpha = a.value("alpha", c.acg.alpha);
    c.acg.calibration_fraction = a.value("calibration_fraction", c.acg.calibration_fraction);
    c.acg.staging = a.value("staging", c.acg.staging);
    c.acg.stage_fraction = a.value("stage_fraction", c.acg.stage_fraction);
  }
  c.validate();
  return c;
}

StagedPrompt StagedPrompt::make(const diffusion::Vocabulary& vocab, int descriptors, double stage_fraction) {
  if (descriptors > vocab.descriptors) throw ConfigError("prompt asks for more descriptors than the vocabulary has");
  return {TokenSequence::object_prompt(vocab, 0), TokenSequence::object_prompt(vocab, descriptors), stage_fraction};
}

TokenSequence viewpoint_prompt(const diffusion::Vocabulary& vocab, const TokenSequence& base,
                               const scene::Viewpoint& v) {
  if (base.viewpoint_index()) throw ContractError("prompt already carries a viewpoint token");
  auto ids = base.ids;
  ids.push_back(vocab.viewpoint_token(scene::classify_sector(v)));
  return TokenSequence::from_ids(vocab, std::move(ids));
}

StepOutcome sds_step(scene::TextureField& theta, const StepInputs& in, const NoiseModel& model,
                     const scene::Renderer& renderer, const clip::ProxyEmbedder& embedder, double step_size,
                     int iteration) {
  const auto& sched = model.schedule();
  StepOutcome out;
  auto& row = out.row;
  row.iter = iteration;
  row.azimuth = in.view.azimuth;
  row.sector = scene::classify_sector(in.view);
  row.t = in.t;
  row.prompt_descriptors = in.prompt.descriptor_count();

  const auto x0 = renderer.render(theta, in.view).pixels;
  const VectorXd xt = diffusion::noisy_image(sched, x0, in.eps, in.t);
  const VectorXd eh = model.predict(view(xt), in.t, in.prompt, in.control);
  if (!eh.allFinite()) throw StepFailed(static_cast<std::size_t>(iteration), "non-finite noise prediction");
  row.controlled = in.control && in.control->active(in.t) && in.prompt.viewpoint_index().has_value();
  out.pseudo_gt = pseudo_ground_truth(sched, view(xt), in.t, view(eh));

  const auto d = clip::score(embedder, view(out.pseudo_gt), row.sector);
  if (!d.degenerate) row.sigma = d.sigma;
  row.pgt_sector = d.image_sector;
  if (in.prune) {
    if (!in.prune->calibrated) throw ContractError("prune state is not calibrated");
    row.pruned = d.degenerate || d.sigma < in.prune->tau;
  }

  const double w = omega(sched, in.t), g = gamma(sched, in.t);
  out.gradient = gradient_noise_form(renderer, in.view, w, view(eh), in.eps);
  row.loss = surrogate_loss(w, g, x0, view(out.pseudo_gt));
  row.grad_norm = norm(out.gradient);
  if (!std::isfinite(row.grad_norm) || !std::isfinite(row.loss)) throw StepFailed(static_cast<std::size_t>(iteration), "non-finite gradient");
  if (row.pruned) {
    std::fill(out.gradient.values.begin(), out.gradient.values.end(), 0.0);
    return out;
  }
  for (std::size_t i = 0; i < theta.size(); ++i) theta.values[i] -= step_size * out.gradient.values[i];
  return out;
}

DistillRunRecord run_distillation(const DistillConfig& cfg, const StagedPrompt& staged, const NoiseModel& model,
                                  const scene::Renderer& renderer) {
  cfg.validate();
  const auto& sched = model.schedule();
  const auto& vocab = model.vocabulary();
  const clip::ProxyEmbedder embedder(renderer);
  Rng rng(derive_seed(cfg.seed, "distill"));
  DistillRunRecord rec;
  rec.theta = scene::TextureField::zeros();
  rec.prune_state.alpha = cfg.acg.alpha;
  const int calib = cfg.calibration_iterations();
  const int boundary = cfg.stage_boundary();
  const int t_min = sched.index(cfg.t_lo), t_max = sched.index(cfg.t_hi);
  std::vector<double> sigmas;
  for (int it = 0; it < cfg.iterations; ++it) {
    StepInputs in;
    in.view = scene::sample_viewpoint(rng, scene::SamplingMode::uniform);
    in.t = t_min + std::min(t_max - t_min, static_cast<int>(uniform01(rng) * (t_max - t_min + 1)));
    in.eps.resize(static_cast<std::size_t>(renderer.image_size()));
    for (auto& e : in.eps) e = standard_normal(rng);
    const bool stage1 = cfg.acg.staging && it < boundary;
    in.prompt = viewpoint_prompt(vocab, stage1 ? staged.object_prompt : staged.full_prompt, in.view);
    diffusion::Control control;
    if (cfg.acg.attention && (it >= calib || cfg.acg.control_during_calibration)) {
      control.spec = diffusion::ControlSpec::for_prompt_length(in.prompt.size(), cfg.acg.side_factor, cfg.acg.back_factor);
      control.sector = scene::classify_sector(in.view);
      in.control = &control;
    }
    if (cfg.acg.pruning && it >= calib) in.prune = &rec.prune_state;
    StepOutcome o;
    try {
      o = sds_step(rec.theta, in, model, renderer, embedder, cfg.step_size, it);
    } catch (const StepFailed&) {
      throw;
    } catch (const Error& e) {
      throw StepFailed(static_cast<std::size_t>(it), e.what());
    }
    o.row.stage = stage1 ? 1 : 2;
    o.row.calibration = it < calib;
    if (it < calib && o.row.sigma) sigmas.push_back(*o.row.sigma);
    if (it == calib - 1) {
      if (sigmas.empty()) {
        if (cfg.acg.pruning) throw CalibrationError("every pseudo-GT in the calibration window was degenerate");
      } else {
        rec.prune_state = clip::calibrate(sigmas, cfg.acg.alpha);
      }
    }
    rec.rows.push_back(o.row);
  }
  return rec;
}

std::string DistillRunRecord::csv() const {
  std::ostringstream os;
  os << "iter,azimuth,sector,t,sigma,pruned,controlled,stage,loss,grad_norm,pgt_sector,calibration,prompt_descriptors\n";
  for (const auto& r : rows) {
    os << r.iter << ',' << io::fmt(r.azimuth) << ',' << sector_name(r.sector) << ',' << r.t << ','
       << (r.sigma ? io::fmt(*r.sigma) : std::string()) << ',' << r.pruned << ',' << r.controlled << ',' << r.stage
       << ',' << io::fmt(r.loss) << ',' << io::fmt(r.grad_norm) << ',' << sector_name(r.pgt_sector) << ','
       << r.calibration << ',' << r.prompt_descriptors << '\n';
  }
  return os.str();
}

DistillRunRecord DistillRunRecord::parse_csv(const std::string& text) {
  DistillRunRecord rec;
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  if (line.rfind("iter,azimuth,sector", 0) != 0) throw Error("not a distillation record");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 13) throw Error("malformed record row: " + line);
    RecordRow r;
    r.iter = std::stoi(f[0]);
    r.azimuth = std::stod(f[1]);
    r.sector = sector_from_name(f[2]);
    r.t = std::stoi(f[3]);
    if (!f[4].empty()) r.sigma = std::stod(f[4]);
    r.pruned = f[5] == "1";
    r.controlled = f[6] == "1";
    r.stage = std::stoi(f[7]);
    r.loss = std::stod(f[8]);
    r.grad_norm = std::stod(f[9]);
    r.pgt_sector = sector_from_name(f[10]);
    r.calibration = f[11] == "1";
    r.prompt_descriptors = static_cast<std::size_t>(std::stoul(f[12]));
    rec.rows.push_back(r);
  }
  return rec;
}

void save_run(const DistillRunRecord& rec, const DistillConfig& cfg, const std::filesystem::path& dir,
              const io::json& model_info) {
  io::write_text(dir / "record.csv", rec.csv());
  scene::save_texture(rec.theta, dir / "theta.bin");
  io::write_json(dir / "calibration.json", rec.prune_state.to_json());
  io::json m;
  m["kind"] = "distill";
  m["config"] = cfg.to_json();
  m["model"] = model_info;
  m["theta_shape"] = {rec.theta.azimuth_bins, rec.theta.height_bins, rec.theta.channels};
  m["rows"] = rec.rows.size();
  m["hashes"] = {{"record.csv", io::git_blob_hash_file(dir / "record.csv")},
                 {"theta.bin", io::git_blob_hash_file(dir / "theta.bin")},
                 {"calibration.json", io::git_blob_hash_file(dir / "calibration.json")}};
  io::write_json(dir / "manifest.json", m);
}

}  // namespace janus::sds

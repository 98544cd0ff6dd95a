#include <algorithm>
#include <cmath>
#include <limits>
#include <filesystem>

#include "doctest.h"
#include "janus/sds.hpp"

using namespace janus;
using namespace janus::sds;
using diffusion::TokenSequence;
using diffusion::Vocabulary;
using scene::Viewpoint;

namespace {

const scene::Renderer kRenderer;
const DiscreteSchedule kSched = DiscreteSchedule::from_sde({});

std::vector<double> normal_vector(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = standard_normal(rng);
  return v;
}

std::span<const double> as_span(const VectorXd& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

// Small untrained denoiser with its gain switched on so predictions are not zero.
diffusion::Denoiser small_denoiser() {
  diffusion::DenoiserConfig cfg;
  cfg.prototypes = 8;
  cfg.width = 16;
  std::vector<std::vector<double>> protos;
  const auto gt = scene::make_ground_truth_object();
  for (int k = 0; k < cfg.prototypes; ++k) protos.push_back(kRenderer.render(gt, Viewpoint(-180.0 + 45.0 * k)).pixels);
  diffusion::Denoiser d(cfg, kSched, 3, protos);
  d.parameters()[d.slot("head.gain").offset] = 1.0;
  return d;
}

const diffusion::Denoiser& shared_denoiser() {
  static const diffusion::Denoiser d = small_denoiser();
  return d;
}

// Returns whatever noise it was built with: the SDS residual vanishes.
class EchoModel final : public NoiseModel {
 public:
  explicit EchoModel(std::vector<double> eps) : eps_(std::move(eps)) {}
  VectorXd predict(std::span<const double>, int, const TokenSequence&, const diffusion::Control*) const override {
    return Eigen::Map<const VectorXd>(eps_.data(), static_cast<Eigen::Index>(eps_.size()));
  }
  const DiscreteSchedule& schedule() const override { return kSched; }
  const Vocabulary& vocabulary() const override { return vocab_; }

 private:
  std::vector<double> eps_;
  Vocabulary vocab_{};
};

// Predicts the noise that makes the pseudo-GT equal a fixed target image.
class TargetModel final : public NoiseModel {
 public:
  explicit TargetModel(std::vector<double> target) : target_(std::move(target)) {}
  VectorXd predict(std::span<const double> x_t, int t, const TokenSequence&, const diffusion::Control*) const override {
    const double ab = kSched.alpha_bar(t);
    VectorXd e(static_cast<Eigen::Index>(x_t.size()));
    for (std::size_t i = 0; i < x_t.size(); ++i) e[static_cast<Eigen::Index>(i)] = (x_t[i] - std::sqrt(ab) * target_[i]) / std::sqrt(1.0 - ab);
    return e;
  }
  const DiscreteSchedule& schedule() const override { return kSched; }
  const Vocabulary& vocabulary() const override { return vocab_; }

 private:
  std::vector<double> target_;
  Vocabulary vocab_{};
};

scene::TextureField random_theta(Rng& rng, double scale = 0.5) {
  auto th = scene::TextureField::zeros();
  for (auto& v : th.values) v = scale * standard_normal(rng);
  return th;
}

DistillConfig short_config(int iterations = 60) {
  DistillConfig c;
  c.iterations = iterations;
  c.seed = 11;
  return c;
}

}  // namespace

TEST_CASE("pseudo-GT inverts the forward noising") {
  Rng rng(1);
  const auto gt = scene::make_ground_truth_object();
  for (int i = 0; i < 100; ++i) {
    const auto x0 = kRenderer.render(gt, Viewpoint(360.0 * uniform01(rng))).pixels;
    const int t = 1 + static_cast<int>(rng() % 1000);
    const auto eps = normal_vector(rng, x0.size());
    const auto xt = diffusion::noisy_image(kSched, x0, eps, t);
    const auto back = pseudo_ground_truth(kSched, as_span(xt), t, eps);
    for (std::size_t k = 0; k < x0.size(); ++k) REQUIRE(std::abs(back[static_cast<Eigen::Index>(k)] - x0[k]) <= 1e-6);
  }
}

TEST_CASE("pseudo-GT with zero predicted noise rescales x_t") {
  Rng rng(2);
  const auto xt = normal_vector(rng, 648);
  const std::vector<double> zero(648, 0.0);
  for (int t : {1, 200, 999}) {
    const auto p = pseudo_ground_truth(kSched, xt, t, zero);
    const double s = std::sqrt(kSched.alpha_bar(t));
    for (std::size_t k = 0; k < xt.size(); ++k) CHECK(p[static_cast<Eigen::Index>(k)] == doctest::Approx(xt[k] / s).epsilon(1e-15));
  }
}

TEST_CASE("pseudo-GT at the smallest timestep stays within the noise bound") {
  Rng rng(3);
  const int t = 1;
  const double ab = kSched.alpha_bar(t);
  for (int i = 0; i < 20; ++i) {
    const auto xt = normal_vector(rng, 648);
    auto eps = normal_vector(rng, 648);
    for (auto& e : eps) e *= 3.0;
    const auto p = pseudo_ground_truth(kSched, xt, t, eps);
    const Eigen::Map<const VectorXd> x(xt.data(), 648), e(eps.data(), 648);
    // |x0~ - x_t| <= |(1/sqrt(abar) - 1) x_t| + sqrt(1 - abar) |eps| / sqrt(abar)
    const double bound = (1.0 / std::sqrt(ab) - 1.0) * x.norm() + std::sqrt(1.0 - ab) * e.norm() / std::sqrt(ab);
    CHECK((p - x).norm() <= bound * (1.0 + 1e-12));
    // the rescaling part is tiny next to the noise part at t = 1
    CHECK((p - x / std::sqrt(ab)).norm() <= std::sqrt(1.0 - ab) * e.norm() / std::sqrt(ab) * (1.0 + 1e-12));
  }
}

TEST_CASE("pseudo-GT rejects an underflowing alpha bar") {
  const auto steep = DiscreteSchedule::from_sde({0.1, 990.0, 1.0});
  REQUIRE(steep.alpha_bar(1000) <= 1e-12);
  const std::vector<double> x(648, 0.0);
  CHECK_THROWS_AS(pseudo_ground_truth(steep, x, 1000, x), RangeError);
  CHECK_NOTHROW(pseudo_ground_truth(steep, x, 1, x));
  CHECK_THROWS_AS(DiscreteSchedule::from_sde({0.1, 20000.0, 1.0}), ConfigError);
}

TEST_CASE("weights") {
  for (int t : {1, 20, 500, 980}) {
    const double ab = kSched.alpha_bar(t);
    CHECK(omega(kSched, t) == 1.0 - ab);
    CHECK(gamma(kSched, t) == doctest::Approx(std::sqrt(1.0 - ab) / std::sqrt(ab)).epsilon(1e-15));
  }
}

TEST_CASE("noise and image forms of the gradient agree") {
  const DenoiserModel model(shared_denoiser());
  const auto vocab = model.vocabulary();
  Rng rng(4);
  const auto theta = random_theta(rng);
  for (int i = 0; i < 20; ++i) {
    const Viewpoint v(360.0 * uniform01(rng));
    const int t = kSched.index(0.02) + static_cast<int>(rng() % 940);
    const auto eps = normal_vector(rng, 648);
    const auto x0 = kRenderer.render(theta, v).pixels;
    const auto xt = diffusion::noisy_image(kSched, x0, eps, t);
    const auto prompt = viewpoint_prompt(vocab, TokenSequence::object_prompt(vocab, 2), v);
    const auto eh = model.predict(as_span(xt), t, prompt, nullptr);
    const auto pgt = pseudo_ground_truth(kSched, as_span(xt), t, as_span(eh));
    const double w = omega(kSched, t), g = gamma(kSched, t);
    const auto a = gradient_noise_form(kRenderer, v, w, as_span(eh), eps);
    const auto b = gradient_image_form(kRenderer, v, w, g, x0, as_span(pgt));
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      num += (a.values[k] - b.values[k]) * (a.values[k] - b.values[k]);
      den += a.values[k] * a.values[k];
    }
    REQUIRE(den > 0.0);
    CHECK(std::sqrt(num / den) <= 1e-6);
  }
}

TEST_CASE("gradient matches central differences of the surrogate") {
  const DenoiserModel model(shared_denoiser());
  const auto& vocab = model.vocabulary();
  Rng rng(5);
  const auto theta = random_theta(rng);
  const Viewpoint v(-20.0);
  const int t = 300;
  const auto eps = normal_vector(rng, 648);
  const auto x0 = kRenderer.render(theta, v).pixels;
  const auto xt = diffusion::noisy_image(kSched, x0, eps, t);
  const auto prompt = viewpoint_prompt(vocab, TokenSequence::object_prompt(vocab, 0), v);
  const auto eh = model.predict(as_span(xt), t, prompt, nullptr);
  const auto pgt = pseudo_ground_truth(kSched, as_span(xt), t, as_span(eh));
  const double w = omega(kSched, t), g = gamma(kSched, t);
  const auto grad = gradient_noise_form(kRenderer, v, w, as_span(eh), eps);
  double gmax = 0.0;
  for (double x : grad.values) gmax = std::max(gmax, std::abs(x));
  std::vector<std::size_t> live;
  for (std::size_t k = 0; k < grad.size(); ++k)
    if (std::abs(grad.values[k]) > 1e-3 * gmax) live.push_back(k);
  REQUIRE(live.size() > 20);
  auto loss = [&](const scene::TextureField& th) { return surrogate_loss(w, g, kRenderer.render(th, v).pixels, as_span(pgt)); };
  for (int i = 0; i < 20; ++i) {
    const std::size_t k = live[rng() % live.size()];
    auto up = theta, dn = theta;
    up.values[k] += 1e-4;
    dn.values[k] -= 1e-4;
    const double fd = (loss(up) - loss(dn)) / 2e-4;
    CHECK(std::abs(fd - grad.values[k]) <= 1e-3 * std::abs(grad.values[k]));
  }
}

TEST_CASE("a model that predicts the true noise leaves theta alone") {
  Rng rng(6);
  auto theta = random_theta(rng);
  const auto before = theta;
  StepInputs in;
  in.view = Viewpoint(40.0);
  in.t = 400;
  in.eps = normal_vector(rng, 648);
  const Vocabulary vocab;
  in.prompt = viewpoint_prompt(vocab, TokenSequence::object_prompt(vocab, 0), in.view);
  const EchoModel model(in.eps);
  const clip::ProxyEmbedder emb(kRenderer);
  const auto out = sds_step(theta, in, model, kRenderer, emb, 0.1, 0);
  for (double x : out.gradient.values) CHECK(x == 0.0);
  CHECK(out.row.grad_norm == 0.0);
  CHECK(theta == before);
}

TEST_CASE("a front-looking pseudo-GT at a back view is pruned and theta is untouched") {
  const auto gt = scene::make_ground_truth_object();
  const TargetModel model(kRenderer.render(gt, Viewpoint(0.0)).pixels);
  const clip::ProxyEmbedder emb(kRenderer);
  // calibration over the ground-truth object's own views
  Rng cal(derive_seed(7, "calibration"));
  std::vector<double> sig;
  for (int i = 0; i < 300; ++i) {
    const Viewpoint v(-180.0 + 360.0 * uniform01(cal));
    sig.push_back(clip::score(emb, kRenderer.render(gt, v).pixels, scene::classify_sector(v)).sigma);
  }
  const auto state = clip::calibrate(sig, 0.5);

  Rng rng(7);
  auto theta = random_theta(rng, 0.2);
  const auto before = theta;
  StepInputs in;
  in.view = Viewpoint(170.0);
  in.t = 500;
  in.eps = normal_vector(rng, 648);
  in.prompt = viewpoint_prompt(model.vocabulary(), TokenSequence::object_prompt(model.vocabulary(), 0), in.view);
  in.prune = &state;
  const auto out = sds_step(theta, in, model, kRenderer, emb, 0.1, 3);
  CHECK(out.row.pruned);
  CHECK(out.row.pgt_sector == Sector::front);
  CHECK(out.row.sector == Sector::back);
  CHECK(out.row.sigma.has_value());
  CHECK(*out.row.sigma < state.tau);
  for (double x : out.gradient.values) CHECK(x == 0.0);
  CHECK(theta == before);

  // the same pseudo-GT at a front view is kept and moves theta
  in.view = Viewpoint(10.0);
  in.prompt = viewpoint_prompt(model.vocabulary(), TokenSequence::object_prompt(model.vocabulary(), 0), in.view);
  const auto kept = sds_step(theta, in, model, kRenderer, emb, 0.1, 4);
  CHECK_FALSE(kept.row.pruned);
  CHECK_FALSE(theta == before);
}

TEST_CASE("pruning needs a calibrated state") {
  const DenoiserModel model(shared_denoiser());
  Rng rng(8);
  auto theta = random_theta(rng);
  StepInputs in;
  in.view = Viewpoint(0.0);
  in.t = 100;
  in.eps = normal_vector(rng, 648);
  in.prompt = viewpoint_prompt(model.vocabulary(), TokenSequence::object_prompt(model.vocabulary(), 0), in.view);
  const clip::PruneState raw;
  in.prune = &raw;
  CHECK_THROWS_AS(sds_step(theta, in, model, kRenderer, clip::ProxyEmbedder(kRenderer), 0.1, 0), ContractError);
}

TEST_CASE("a non-finite prediction fails the step with its iteration") {
  std::vector<double> eps(648, 0.0);
  eps[5] = std::numeric_limits<double>::quiet_NaN();
  const EchoModel model(eps);
  Rng rng(9);
  auto theta = random_theta(rng);
  StepInputs in;
  in.view = Viewpoint(0.0);
  in.t = 100;
  in.eps.assign(648, 0.0);
  in.prompt = viewpoint_prompt(model.vocabulary(), TokenSequence::object_prompt(model.vocabulary(), 0), in.view);
  try {
    sds_step(theta, in, model, kRenderer, clip::ProxyEmbedder(kRenderer), 0.1, 17);
    FAIL("expected StepFailed");
  } catch (const StepFailed& e) {
    CHECK(e.iteration() == 17);
  }
}

TEST_CASE("viewpoint prompts") {
  const Vocabulary vocab;
  const auto obj = TokenSequence::object_prompt(vocab, 0);
  CHECK(viewpoint_prompt(vocab, obj, Viewpoint(170.0)).ids == std::vector<int>{Vocabulary::kObject, Vocabulary::kBack});
  CHECK(viewpoint_prompt(vocab, obj, Viewpoint(-30.0)).ids == std::vector<int>{Vocabulary::kObject, Vocabulary::kFront});
  const auto two = TokenSequence::object_prompt(vocab, 2);
  CHECK(viewpoint_prompt(vocab, two, Viewpoint(90.0)).ids ==
        std::vector<int>{Vocabulary::kObject, vocab.descriptor_token(0), vocab.descriptor_token(1), Vocabulary::kSide});
  const auto filled = viewpoint_prompt(vocab, obj, Viewpoint(0.0));
  CHECK_THROWS_AS(viewpoint_prompt(vocab, filled, Viewpoint(0.0)), ContractError);
}

TEST_CASE("staged prompts") {
  const Vocabulary vocab;
  const auto sp = StagedPrompt::make(vocab, 6, 0.5);
  CHECK(sp.object_prompt.ids == std::vector<int>{Vocabulary::kObject});
  CHECK(sp.full_prompt.size() == 7);
  for (int id : sp.object_prompt.ids)
    CHECK(std::find(sp.full_prompt.ids.begin(), sp.full_prompt.ids.end(), id) != sp.full_prompt.ids.end());
  CHECK_THROWS_AS(StagedPrompt::make(vocab, 9, 0.5), ConfigError);
}

TEST_CASE("config validation and window arithmetic") {
  DistillConfig c;
  c.iterations = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = DistillConfig{};
  c.t_lo = 0.5;
  c.t_hi = 0.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = DistillConfig{};
  c.acg.stage_fraction = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = DistillConfig{};
  c.iterations = 1501;
  CHECK(c.calibration_iterations() == 151);
  CHECK(c.stage_boundary() == 751);
  c.iterations = 1500;
  CHECK(c.calibration_iterations() == 150);
  CHECK(c.stage_boundary() == 750);
}

TEST_CASE("config JSON round trip") {
  DistillConfig c;
  c.iterations = 321;
  c.seed = 99;
  c.step_size = 0.125;
  c.acg.attention = true;
  c.acg.alpha = 0.25;
  c.acg.stage_fraction = 0.3;
  const auto j = c.to_json();
  const auto back = DistillConfig::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(j.at("weighting") == "1 - alpha_bar");
  CHECK_THROWS_AS(DistillConfig::from_json({{"iterations", 0}}), ConfigError);
}

TEST_CASE("distillation is deterministic and records every iteration") {
  const DenoiserModel model(shared_denoiser());
  auto cfg = short_config();
  cfg.acg.attention = cfg.acg.pruning = cfg.acg.staging = true;
  const auto sp = StagedPrompt::make(model.vocabulary(), cfg.descriptors, cfg.acg.stage_fraction);
  const auto a = run_distillation(cfg, sp, model);
  const auto b = run_distillation(cfg, sp, model);
  CHECK(a.rows.size() == static_cast<std::size_t>(cfg.iterations));
  CHECK(a.csv() == b.csv());
  CHECK(a.theta == b.theta);
  cfg.seed = 12;
  CHECK(run_distillation(cfg, sp, model).csv() != a.csv());
}

TEST_CASE("stage boundary and calibration window") {
  const DenoiserModel model(shared_denoiser());
  auto cfg = short_config(61);
  cfg.acg.pruning = cfg.acg.staging = true;
  cfg.acg.alpha = 0.0;  // prune against the mean so that some rows are pruned
  const auto sp = StagedPrompt::make(model.vocabulary(), cfg.descriptors, cfg.acg.stage_fraction);
  const auto rec = run_distillation(cfg, sp, model);
  const int boundary = cfg.stage_boundary(), calib = cfg.calibration_iterations();
  CHECK(boundary == 31);
  CHECK(calib == 7);
  int pruned = 0;
  for (const auto& r : rec.rows) {
    CHECK(r.calibration == (r.iter < calib));
    if (r.calibration) CHECK_FALSE(r.pruned);
    CHECK(r.stage == (r.iter < boundary ? 1 : 2));
    CHECK(r.prompt_descriptors == (r.iter < boundary ? 0u : static_cast<std::size_t>(cfg.descriptors)));
    pruned += r.pruned;
  }
  CHECK(pruned > 0);
  CHECK(rec.prune_state.calibrated);
  CHECK(rec.prune_state.collected == static_cast<std::size_t>(calib));
}

TEST_CASE("attention control marks controlled rows") {
  const DenoiserModel model(shared_denoiser());
  auto cfg = short_config(20);
  const auto sp = StagedPrompt::make(model.vocabulary(), cfg.descriptors, cfg.acg.stage_fraction);
  for (const auto& r : run_distillation(cfg, sp, model).rows) CHECK_FALSE(r.controlled);
  cfg.acg.attention = true;
  for (const auto& r : run_distillation(cfg, sp, model).rows) CHECK(r.controlled);
}

TEST_CASE("record CSV round trip") {
  const DenoiserModel model(shared_denoiser());
  auto cfg = short_config(30);
  cfg.acg.pruning = true;
  const auto sp = StagedPrompt::make(model.vocabulary(), cfg.descriptors, cfg.acg.stage_fraction);
  const auto rec = run_distillation(cfg, sp, model);
  const auto text = rec.csv();
  CHECK(text.substr(0, text.find('\n')) ==
        "iter,azimuth,sector,t,sigma,pruned,controlled,stage,loss,grad_norm,pgt_sector,calibration,prompt_descriptors");
  const auto back = DistillRunRecord::parse_csv(text);
  REQUIRE(back.rows.size() == rec.rows.size());
  CHECK(back.csv() == text);
}

TEST_CASE("saved runs carry hashes of their files") {
  const DenoiserModel model(shared_denoiser());
  const auto cfg = short_config(15);
  const auto sp = StagedPrompt::make(model.vocabulary(), cfg.descriptors, cfg.acg.stage_fraction);
  const auto rec = run_distillation(cfg, sp, model);
  const auto dir = std::filesystem::temp_directory_path() / "janus_test_save_run";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  save_run(rec, cfg, dir, {{"content_hash", "abc"}});
  const auto m = io::read_json(dir / "manifest.json");
  CHECK(m.at("kind") == "distill");
  CHECK(m.at("rows") == 15);
  for (const char* f : {"record.csv", "theta.bin", "calibration.json"})
    CHECK(m.at("hashes").at(f) == io::git_blob_hash_file(dir / f));
  CHECK(scene::load_texture(dir / "theta.bin") == rec.theta);
  std::filesystem::remove_all(dir);
}

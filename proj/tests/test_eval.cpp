#include <cmath>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "janus/eval.hpp"

using namespace janus;
using namespace janus::eval;
namespace fs = std::filesystem;

namespace {

const scene::Renderer kRenderer;

// Ground truth with its face copied onto the opposite azimuth bins.
scene::TextureField two_faced() {
  auto th = scene::make_ground_truth_object();
  const auto src = th;
  for (int a = 0; a < th.azimuth_bins; ++a)
    for (int h = 0; h < th.height_bins; ++h) {
      const int m = (a + th.azimuth_bins / 2) % th.azimuth_bins;
      th.at(a, h, scene::kFace) = src.at(a, h, scene::kFace) + src.at(m, h, scene::kFace);
    }
  return th;
}

sds::RecordRow row(int iter, bool calibration, Sector pgt, bool pruned) {
  sds::RecordRow r;
  r.iter = iter;
  r.calibration = calibration;
  r.pgt_sector = pgt;
  r.pruned = pruned;
  return r;
}

const diffusion::Denoiser& small_denoiser() {
  static const diffusion::Denoiser d = [] {
    diffusion::DenoiserConfig cfg;
    cfg.prototypes = 8;
    cfg.width = 8;
    std::vector<std::vector<double>> protos;
    const auto gt = scene::make_ground_truth_object();
    for (int k = 0; k < 8; ++k) protos.push_back(kRenderer.render(gt, scene::Viewpoint(45.0 * k)).pixels);
    diffusion::Denoiser m(cfg, diffusion::DiscreteSchedule::from_sde({}), 2, protos);
    m.parameters()[m.slot("head.gain").offset] = 1.0;
    return m;
  }();
  return d;
}

AblationGrid small_grid() {
  AblationGrid g;
  g.base.iterations = 40;
  g.arms = {default_arms()[0], default_arms()[4]};
  return g;
}

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("the ground truth has no back face") {
  const auto v = janus_rate(scene::make_ground_truth_object());
  CHECK(v.face_energy_front > 0.0);
  CHECK(v.ratio == v.face_energy_back / v.face_energy_front);
  CHECK(v.ratio < 1e-6);
  CHECK_FALSE(v.fired);
}

TEST_CASE("a mirrored face fires the verdict") {
  const auto v = janus_rate(two_faced());
  CHECK(v.ratio == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(v.fired);
  CHECK_FALSE(janus_rate(two_faced(), 1.5).fired);
}

TEST_CASE("a blank texture does not fire") {
  const auto v = janus_rate(scene::TextureField::zeros());
  CHECK(v.face_energy_front == 0.0);
  CHECK(v.ratio == 0.0);
  CHECK_FALSE(v.fired);
}

TEST_CASE("the verdict ignores body and tail and the overall face scale") {
  auto th = two_faced();
  for (int a = 0; a < th.azimuth_bins; ++a)
    for (int h = 0; h < th.height_bins; ++h) th.at(a, h, scene::kFace) *= a < 18 ? 0.3 : 1.0;
  const double r0 = janus_rate(th).ratio;
  auto b = th;
  for (int a = 0; a < th.azimuth_bins; ++a)
    for (int h = 0; h < th.height_bins; ++h) {
      b.at(a, h, scene::kBody) *= 7.0;
      b.at(a, h, scene::kTail) = -3.0;
    }
  CHECK(janus_rate(b).ratio == r0);
  auto f = th;
  for (int a = 0; a < th.azimuth_bins; ++a)
    for (int h = 0; h < th.height_bins; ++h) f.at(a, h, scene::kFace) *= 4.0;
  CHECK(janus_rate(f).ratio == doctest::Approx(r0).epsilon(1e-12));
  auto bad = th;
  bad.values[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(janus_rate(bad), ContractError);
}

TEST_CASE("view-dependent score") {
  const auto gt = view_dependent_score(scene::make_ground_truth_object());
  CHECK(gt.degenerate == 0);
  REQUIRE(gt.mean.has_value());
  CHECK(gt.rows[0].azimuth == 0.0);
  CHECK(gt.rows[1].sector == Sector::side);
  CHECK(gt.rows[2].sector == Sector::back);
  CHECK(gt.rows[3].sector == Sector::side);
  double s = 0.0;
  for (const auto& r : gt.rows) s += *r.sigma;
  CHECK(*gt.mean == doctest::Approx(s / 4.0).epsilon(1e-15));
  // the ground truth reads correctly from every side
  for (const auto& r : gt.rows) CHECK(*r.sigma > 0.0);
  // a two-faced object looks like a front from behind
  const auto jn = view_dependent_score(two_faced());
  CHECK(*jn.rows[2].sigma < *gt.rows[2].sigma);

  const auto blank = view_dependent_score(scene::TextureField::zeros());
  CHECK(blank.degenerate == 4);
  CHECK_FALSE(blank.mean.has_value());
  CHECK(blank.to_json().at("mean").is_null());
}

TEST_CASE("rebalance histogram counts every row past the calibration window") {
  sds::DistillRunRecord rec;
  rec.rows = {row(0, true, Sector::front, false),  row(1, true, Sector::back, false),
              row(2, false, Sector::front, false), row(3, false, Sector::front, true),
              row(4, false, Sector::side, false),  row(5, false, Sector::back, true),
              row(6, false, Sector::back, false),  row(7, false, Sector::front, false)};
  const auto h = rebalance_histogram(rec);
  CHECK(h.total() == 6);
  CHECK(h.kept == std::array<std::size_t, 3>{2, 1, 1});
  CHECK(h.pruned == std::array<std::size_t, 3>{1, 0, 1});
  CHECK(h.kept_front_share() == 0.5);
  CHECK(h.csv() == "sector,kept,pruned\nfront,2,1\nside,1,0\nback,1,1\n");
  CHECK(h.to_json().at("total") == 6);

  rec.rows.resize(2);
  CHECK_THROWS_AS(rebalance_histogram(rec), ContractError);
  CHECK(RebalanceHistogram{}.kept_front_share() == 0.0);
}

TEST_CASE("default arms") {
  const auto a = default_arms();
  REQUIRE(a.size() == 5);
  CHECK(a[0].name == "baseline");
  CHECK_FALSE((a[0].acg.attention || a[0].acg.pruning || a[0].acg.staging));
  CHECK(a[4].name == "full");
  CHECK((a[4].acg.attention && a[4].acg.pruning && a[4].acg.staging));
}

TEST_CASE("grid JSON: arms inherit the base and switch on only what they name") {
  const io::json j = {{"base", {{"iterations", 77}, {"acg", {{"alpha", 0.3}, {"pruning", true}}}}},
                      {"threshold", 0.4},
                      {"arms", {{{"name", "plain"}}, {{"name", "pr"}, {"acg", {{"pruning", true}}}}}}};
  const auto g = AblationGrid::from_json(j);
  CHECK(g.base.iterations == 77);
  CHECK(g.threshold == 0.4);
  REQUIRE(g.arms.size() == 2);
  CHECK_FALSE(g.arms[0].acg.pruning);
  CHECK(g.arms[1].acg.pruning);
  CHECK(g.arms[1].acg.alpha == 0.3);
  CHECK(AblationGrid::from_json(g.to_json()).to_json() == g.to_json());
  CHECK(AblationGrid::from_json(io::json::object()).arms.size() == 5);
}

TEST_CASE("ablation preconditions") {
  const sds::DenoiserModel model(small_denoiser());
  auto g = small_grid();
  CHECK_THROWS_AS(ablation_suite(g, {1, 2}, model), ConfigError);
  g.arms.resize(1);
  CHECK_THROWS_AS(ablation_suite(g, {1, 2, 3}, model), ConfigError);
}

TEST_CASE("ablation is deterministic and arm-major") {
  const sds::DenoiserModel model(small_denoiser());
  const auto g = small_grid();
  const std::vector<std::uint64_t> seeds{3, 1, 2};
  const auto dir = scratch("janus_test_ablation");
  const auto a = ablation_suite(g, seeds, model, kRenderer, dir, {{"content_hash", "x"}});
  const auto b = ablation_suite(g, seeds, model);
  CHECK(a.cells_csv() == b.cells_csv());
  CHECK(a.summary_csv() == b.summary_csv());
  REQUIRE(a.cells.size() == 6);
  CHECK(a.cells[0].arm == "baseline");
  CHECK(a.cells[0].seed == 3);
  CHECK(a.cells[3].arm == "full");
  CHECK(a.cells[5].seed == 2);
  CHECK(a.cell("full", 1) == &a.cells[4]);
  CHECK(a.cell("full", 9) == nullptr);
  CHECK(a.arm("baseline").runs == 3);
  CHECK_THROWS_AS(a.arm("missing"), ContractError);
  for (const auto& c : a.cells) CHECK(c.ok);
  CHECK(fs::exists(dir / "full" / "seed-2" / "record.csv"));
  // a run saved by the suite is the run a fresh distillation produces
  auto cfg = g.base;
  cfg.acg = g.arms[1].acg;
  cfg.seed = 2;
  const auto sp = sds::StagedPrompt::make(model.vocabulary(), cfg.descriptors, cfg.acg.stage_fraction);
  CHECK(io::read_text(dir / "full" / "seed-2" / "record.csv") == sds::run_distillation(cfg, sp, model).csv());
  fs::remove_all(dir);
}

TEST_CASE("plots need artifacts") {
  const auto dir = scratch("janus_test_plots_empty");
  CHECK_THROWS_AS(emit_plots(dir), MissingArtifact);
  fs::remove_all(dir);
}

TEST_CASE("plots for a distillation run") {
  const sds::DenoiserModel model(small_denoiser());
  sds::DistillConfig cfg;
  cfg.iterations = 30;
  cfg.acg.pruning = true;
  const auto sp = sds::StagedPrompt::make(model.vocabulary(), cfg.descriptors, cfg.acg.stage_fraction);
  const auto rec = sds::run_distillation(cfg, sp, model);
  const auto dir = scratch("janus_test_plots_run");
  sds::save_run(rec, cfg, dir, {});
  const auto files = emit_plots(dir);
  REQUIRE_FALSE(files.empty());
  CHECK(std::is_sorted(files.begin(), files.end()));
  for (const auto& f : files) {
    CHECK(f.extension() == ".svg");
    CHECK(io::read_text(f).starts_with("<svg"));
  }
  CHECK(emit_plots(dir) == files);
  fs::remove_all(dir);
}

#include <cmath>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "janus/diffusion.hpp"

using namespace janus;
using namespace janus::diffusion;

namespace {

const scene::Renderer kRenderer;
const DiscreteSchedule kSched = DiscreteSchedule::from_sde({});

MatrixXd random_matrix(Rng& rng, int r, int c, double scale = 1.0) {
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * standard_normal(rng);
  return m;
}

AttentionMap random_map(Rng& rng, int n, int t) { return attention_map(random_matrix(rng, n, 8), random_matrix(rng, t, 8)); }

std::vector<double> normal_vector(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = standard_normal(rng);
  return v;
}

std::vector<std::vector<double>> gt_prototypes(int k) {
  std::vector<std::vector<double>> p;
  const auto gt = scene::make_ground_truth_object();
  for (int i = 0; i < k; ++i) p.push_back(kRenderer.render(gt, scene::Viewpoint(-180.0 + 360.0 * i / k)).pixels);
  return p;
}

// Small model with every parameter nudged away from its init so no gradient
// path is trivially zero.
Denoiser live_denoiser(std::uint64_t seed = 5) {
  DenoiserConfig cfg;
  cfg.prototypes = 6;
  cfg.width = 8;
  cfg.time_features = 4;
  cfg.descriptors = 6;
  Denoiser d(cfg, kSched, seed, gt_prototypes(cfg.prototypes));
  Rng rng(seed);
  for (auto& p : d.parameters()) p += 0.05 * standard_normal(rng);
  d.parameters()[d.slot("head.gain").offset] = 1.0;
  return d;
}

scene::DatasetConfig tiny_data(std::size_t count = 120) {
  scene::DatasetConfig c;
  c.count = count;
  c.descriptors = 6;
  return c;
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.epochs = 2;
  c.batch = 16;
  c.heldout = 16;
  c.model.prototypes = 16;
  c.model.width = 8;
  return c;
}

}  // namespace

TEST_CASE("attention rows are stochastic and match an extended-precision softmax") {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 18, t = 1 + trial % 7, d = 8;
    const auto q = random_matrix(rng, n, d, 2.0), k = random_matrix(rng, t, d, 2.0);
    const auto m = attention_map(q, k);
    CHECK(m.row_sum_error() <= 1e-12);
    for (int r = 0; r < n; ++r) {
      std::vector<long double> s(t);
      long double mx = -1e300L, tot = 0.0L;
      for (int j = 0; j < t; ++j) {
        long double dot = 0.0L;
        for (int c = 0; c < d; ++c) dot += static_cast<long double>(q(r, c)) * k(j, c);
        s[j] = dot / std::sqrt(static_cast<long double>(d));
        mx = std::max(mx, s[j]);
      }
      for (auto& x : s) tot += (x = std::exp(x - mx));
      for (int j = 0; j < t; ++j) CHECK(std::abs(m.values(r, j) - static_cast<double>(s[j] / tot)) <= 1e-14);
    }
  }
}

TEST_CASE("a single token takes all the attention") {
  Rng rng(2);
  const auto m = attention_map(random_matrix(rng, 5, 4), random_matrix(rng, 1, 4));
  for (int r = 0; r < 5; ++r) CHECK(m.values(r, 0) == 1.0);
  CHECK_THROWS_AS(attention_map(random_matrix(rng, 5, 4), random_matrix(rng, 3, 5)), ContractError);
}

TEST_CASE("control laws: identity, single-column scaling, zeroing, monotonicity") {
  const Vocabulary vocab{6};
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int nd = trial % 4;
    std::vector<int> ids{Vocabulary::kObject};
    for (int i = 0; i < nd; ++i) ids.push_back(vocab.descriptor_token(i));
    ids.push_back(Vocabulary::kBack);
    const auto seq = TokenSequence::from_ids(vocab, ids);
    const auto m = random_map(rng, 18, static_cast<int>(ids.size()));
    const auto vp = static_cast<Eigen::Index>(ids.size() - 1);

    ControlSpec zero;
    const auto id = control_attention(m, seq, zero, Sector::back);
    CHECK(id.controlled);
    CHECK((id.map.values.array() == m.values.array()).all());

    ControlSpec s;
    const double lam = 10.0 * uniform01(rng);
    s.lambda = {0.0, 0.0, lam};
    const auto c = control_attention(m, seq, s, Sector::back);
    for (Eigen::Index j = 0; j < m.tokens(); ++j)
      for (Eigen::Index r = 0; r < m.queries(); ++r)
        CHECK(c.map.values(r, j) == (j == vp ? m.values(r, j) * (1.0 + lam) : m.values(r, j)));
    // front is never amplified
    CHECK((control_attention(m, seq, s, Sector::front).map.values.array() == m.values.array()).all());

    s.lambda = {0.0, 0.0, -1.0};
    const auto z = control_attention(m, seq, s, Sector::back);
    CHECK((z.map.values.col(vp).array() == 0.0).all());

    ControlSpec lo, hi;
    lo.lambda[2] = lam;
    hi.lambda[2] = lam + 0.5;
    const auto a = control_attention(m, seq, lo, Sector::back), b = control_attention(m, seq, hi, Sector::back);
    CHECK((b.map.values.col(vp).array() > a.map.values.col(vp).array()).all());
  }
}

TEST_CASE("control edge cases") {
  const Vocabulary vocab{6};
  Rng rng(4);
  const auto plain = TokenSequence::object_prompt(vocab, 2);
  const auto m = random_map(rng, 18, 3);
  ControlSpec s;
  s.lambda = {0.0, 5.0, 10.0};
  const auto r = control_attention(m, plain, s, Sector::back);
  CHECK_FALSE(r.controlled);
  CHECK((r.map.values.array() == m.values.array()).all());
  CHECK_THROWS_AS(control_attention(random_map(rng, 18, 4), plain, s, Sector::back), ContractError);
  s.lambda[1] = -1.5;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.lambda[1] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(s.validate(), ConfigError);
  const auto p = ControlSpec::for_prompt_length(8);
  CHECK(p.lambda == std::array<double, 3>{0.0, 40.0, 80.0});
}

TEST_CASE("zero control leaves the prediction bitwise unchanged") {
  const auto d = live_denoiser();
  const auto& vocab = d.vocabulary();
  Rng rng(5);
  const auto x = normal_vector(rng, 648);
  const auto seq = TokenSequence::from_ids(vocab, {Vocabulary::kObject, Vocabulary::kBack});
  Control c;
  c.sector = Sector::back;
  for (int t : {10, 500, 990}) {
    const auto a = d.denoise(x, t, seq);
    const auto b = d.denoise(x, t, seq, &c);
    CHECK((a.array() == b.array()).all());
  }
}

TEST_CASE("control equals a hook that scales the viewpoint column") {
  const auto d = live_denoiser();
  const auto& vocab = d.vocabulary();
  Rng rng(6);
  const auto seq = TokenSequence::from_ids(vocab, {Vocabulary::kObject, vocab.descriptor_token(0), Vocabulary::kSide});
  Control c;
  c.spec = ControlSpec::for_prompt_length(seq.size());
  c.sector = Sector::side;
  for (int i = 0; i < 5; ++i) {
    const auto x = normal_vector(rng, 648);
    const int t = 1 + static_cast<int>(rng() % 1000);
    const auto a = d.denoise(x, t, seq, &c);
    const auto b = d.denoise(x, t, seq, nullptr, [&](int, MatrixXd& m) { m.col(2) *= 1.0 + c.spec.lambda[1]; });
    CHECK((a.array() == b.array()).all());
    CHECK((a - d.denoise(x, t, seq)).norm() > 0.0);
  }
}

TEST_CASE("control only acts inside its timestep range") {
  const auto d = live_denoiser();
  const auto seq = TokenSequence::from_ids(d.vocabulary(), {Vocabulary::kObject, Vocabulary::kBack});
  Control c;
  c.spec = ControlSpec::for_prompt_length(2);
  c.sector = Sector::back;
  c.first_step = 300;
  c.last_step = 600;
  Rng rng(7);
  const auto x = normal_vector(rng, 648);
  for (int t : {299, 601}) CHECK((d.denoise(x, t, seq, &c).array() == d.denoise(x, t, seq).array()).all());
  for (int t : {300, 600}) CHECK((d.denoise(x, t, seq, &c) - d.denoise(x, t, seq)).norm() > 0.0);
}

TEST_CASE("denoise rejects bad inputs") {
  const auto d = live_denoiser();
  const auto seq = TokenSequence::object_prompt(d.vocabulary(), 0);
  std::vector<double> x(648, 0.0);
  CHECK_THROWS_AS(d.denoise(x, 0, seq), RangeError);
  CHECK_THROWS_AS(d.denoise(x, 1001, seq), RangeError);
  CHECK_THROWS_AS(d.denoise(std::vector<double>(10, 0.0), 5, seq), ContractError);
  x[3] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(d.denoise(x, 5, seq), ContractError);
}

TEST_CASE("an untrained model predicts zero noise and scores |eps|^2") {
  DenoiserConfig cfg;
  cfg.prototypes = 8;
  const Denoiser d(cfg, kSched, 1, gt_prototypes(8));
  Rng rng(8);
  const auto x = normal_vector(rng, 648);
  CHECK(d.denoise(x, 400, TokenSequence::object_prompt(d.vocabulary(), 0)).norm() == 0.0);
  const double l = heldout_loss(d, scene::DatasetConfig{}, 200, 4);
  CHECK(l == doctest::Approx(648.0).epsilon(0.1));
}

TEST_CASE("parameter gradient matches central differences") {
  auto d = live_denoiser(9);
  const auto& vocab = d.vocabulary();
  Rng rng(10);
  const auto x0 = kRenderer.render(scene::make_ground_truth_object(), scene::Viewpoint(150.0)).pixels;
  const auto eps = normal_vector(rng, 648);
  const auto seq = TokenSequence::from_ids(vocab, {Vocabulary::kObject, vocab.descriptor_token(1), Vocabulary::kBack});
  const int t = 350;
  std::vector<double> grad(d.parameters().size(), 0.0);
  d.loss_and_gradient(x0, eps, t, seq, grad);
  // one coordinate from each tensor plus a few random ones
  std::vector<std::size_t> picks;
  for (const auto& s : d.layout()) picks.push_back(s.offset + rng() % s.size());
  while (picks.size() < 20 + d.layout().size()) picks.push_back(rng() % grad.size());
  std::vector<double> scratch(grad.size());
  int checked = 0;
  for (auto j : picks) {
    const double h = 1e-5, keep = d.parameters()[j];
    d.parameters()[j] = keep + h;
    const double up = d.loss_and_gradient(x0, eps, t, seq, scratch);
    d.parameters()[j] = keep - h;
    const double dn = d.loss_and_gradient(x0, eps, t, seq, scratch);
    d.parameters()[j] = keep;
    const double fd = (up - dn) / (2.0 * h);
    CHECK(std::abs(fd - grad[j]) <= 1e-5 * std::max(1.0, std::abs(grad[j])));
    checked += std::abs(grad[j]) > 1e-8;
  }
  CHECK(checked >= 20);
}

TEST_CASE("checkpoints round trip") {
  auto d = live_denoiser(11);
  const auto dir = std::filesystem::temp_directory_path() / "janus_test_ckpt";
  std::filesystem::remove_all(dir);
  d.save(dir);
  const auto back = Denoiser::load(dir);
  CHECK(back.parameters() == d.parameters());
  CHECK(back.config().spread_floor == d.config().spread_floor);
  CHECK(back.config().prototypes == d.config().prototypes);
  Rng rng(12);
  const auto x = normal_vector(rng, 648);
  const auto seq = TokenSequence::from_ids(d.vocabulary(), {Vocabulary::kObject, d.vocabulary().descriptor_token(3)});
  CHECK((back.denoise(x, 77, seq).array() == d.denoise(x, 77, seq).array()).all());
  std::filesystem::remove_all(dir);
  CHECK_THROWS(Denoiser::load(dir));
}

TEST_CASE("config validation") {
  DenoiserConfig c;
  CHECK_NOTHROW(c.validate());
  c.spread_floor = -0.1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = DenoiserConfig{};
  c.spread_floor = 0.0;
  CHECK_NOTHROW(c.validate());
  c.initial_spread = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = DenoiserConfig{};
  c.time_features = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("smoothing") {
  const std::vector<double> v{1, 2, 3, 4, 5};
  CHECK(smooth(v, 2) == std::vector<double>{1.5, 2.5, 3.5, 4.5});
  CHECK(smooth(v, 1) == v);
  CHECK(smooth(v, 5) == std::vector<double>{3.0});
}

TEST_CASE("training is deterministic and lowers the held-out loss") {
  const auto data = scene::generate_dataset(tiny_data(200));
  const auto a = train_denoiser(data, tiny_train());
  const auto b = train_denoiser(data, tiny_train());
  CHECK(a.model.parameters() == b.model.parameters());
  CHECK(a.loss_trace == b.loss_trace);
  CHECK(a.loss_trace.size() == 2 * ((200 + 15) / 16));
  CHECK(a.trained_heldout < a.untrained_heldout);
}

TEST_CASE("training rejects bad settings") {
  auto data = scene::generate_dataset(tiny_data());
  auto c = tiny_train();
  c.learning_rate = 0.0;
  CHECK_THROWS_AS(train_denoiser(data, c), ConfigError);
  c = tiny_train();
  c.model.prototypes = 1000;
  CHECK_THROWS_AS(train_denoiser(data, c), ConfigError);
  CHECK_THROWS_AS(train_denoiser(scene::Dataset{}, tiny_train()), ContractError);
}

TEST_CASE("a non-finite loss fails training with its step") {
  auto data = scene::generate_dataset(tiny_data());
  for (auto& s : data.samples) s.image.pixels[7] = std::numeric_limits<double>::quiet_NaN();
  try {
    train_denoiser(data, tiny_train());
    FAIL("expected TrainingFailed");
  } catch (const TrainingFailed& e) {
    CHECK(e.step() == 1);
  }
}

TEST_CASE("keyword attention") {
  const auto d = live_denoiser();
  const auto& vocab = d.vocabulary();
  const auto data = scene::generate_dataset(tiny_data(20));
  const std::vector<TokenSequence> prompts{
      TokenSequence::object_prompt(vocab, 3),
      TokenSequence::from_ids(vocab, {Vocabulary::kBack}),
      TokenSequence::from_ids(vocab, {Vocabulary::kObject, Vocabulary::kBack}),
  };
  const auto m = mean_keyword_attention(d, data, prompts, 10, 1);
  REQUIRE(m.size() == 3);
  CHECK(m[0] == 0.0);
  CHECK(m[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(m[2] > 0.0);
  CHECK(m[2] < 1.0);
  CHECK(mean_keyword_attention(d, data, prompts, 10, 1) == m);
  CHECK_THROWS_AS(mean_keyword_attention(d, data, prompts, 0, 1), ContractError);
}

TEST_CASE("ancestral sampling is seeded and finite") {
  const auto d = live_denoiser();
  const auto seq = TokenSequence::object_prompt(d.vocabulary(), 0);
  Rng a(3), b(3);
  const auto x = ancestral_sample(d, seq, a);
  CHECK(x == ancestral_sample(d, seq, b));
  CHECK(x.size() == 648u);
  for (double v : x) CHECK(std::isfinite(v));
}

#include "janus/commands.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "janus/clip_proxy.hpp"

namespace janus::cli {

namespace {

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

io::json hashes_of(const fs::path& dir, std::initializer_list<const char*> files) {
  io::json h;
  for (const char* f : files) h[f] = io::git_blob_hash_file(dir / f);
  return h;
}

template <class T>
void take(const io::json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

}  // namespace

void CheckReport::add(std::string name, bool passed, std::string detail, bool counted) {
  checks.push_back({std::move(name), passed, std::move(detail), counted});
}

bool CheckReport::ok() const {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed || !c.counted; });
}

std::string CheckReport::text() const {
  std::ostringstream os;
  for (const auto& c : checks)
    os << (c.passed ? "PASS" : (c.counted ? "FAIL" : "NOTE")) << "  " << c.name << "  " << c.detail << '\n';
  return os.str();
}

io::json CheckReport::to_json() const {
  io::json a = io::json::array();
  for (const auto& c : checks)
    a.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}, {"counted", c.counted}});
  return a;
}

// ---- fokker-planck ----

FokkerPlanckConfig FokkerPlanckConfig::from_json(const io::json& j) {
  FokkerPlanckConfig c;
  if (j.contains("mixture")) {
    const auto& m = j.at("mixture");
    c.mixture.weights = m.at("weights").get<std::vector<double>>();
    c.mixture.means = m.at("means").get<std::vector<double>>();
    c.mixture.stdevs = m.at("stdevs").get<std::vector<double>>();
  }
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    take(s, "beta_min", c.sde.beta_min);
    take(s, "beta_max", c.sde.beta_max);
    take(s, "horizon", c.sde.horizon);
  }
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    take(g, "lo", c.grid.lo);
    take(g, "hi", c.grid.hi);
    take(g, "points", c.grid.points);
  }
  take(j, "steps", c.steps);
  c.mixture.validate();
  c.sde.validate();
  c.grid.validate();
  if (c.steps == 0) throw ConfigError("steps must be positive");
  return c;
}

io::json FokkerPlanckConfig::to_json() const {
  return {{"mixture", {{"weights", mixture.weights}, {"means", mixture.means}, {"stdevs", mixture.stdevs}}},
          {"schedule", {{"beta_min", sde.beta_min}, {"beta_max", sde.beta_max}, {"horizon", sde.horizon}}},
          {"grid", {{"lo", grid.lo}, {"hi", grid.hi}, {"points", grid.points}}},
          {"steps", steps}};
}

CheckReport run_fokker_planck(const FokkerPlanckConfig& cfg, const fs::path& out) {
  using namespace density;
  fs::create_directories(out);
  const auto p_data = discretize(cfg.mixture, cfg.grid, 0.0);
  SolverStats fwd_stats, rev_stats;
  const auto p_fwd = evolve_forward(p_data, cfg.sde, cfg.steps, std::nullopt, &fwd_stats);
  const auto p_T = discretize(analytic_marginal(cfg.mixture, cfg.sde, cfg.sde.horizon), cfg.grid, cfg.sde.horizon);
  const auto q_T = discretize(GaussianMixture::standard_normal(), cfg.grid, cfg.sde.horizon);
  const auto q_0 = evolve_reverse(q_T, cfg.sde, ScoreSource::exact(cfg.mixture, cfg.sde), cfg.steps, &rev_stats);

  std::ostringstream csv;
  csv << "x,p_data,p_forward_T,p_analytic_T,p_reverse_0\n";
  for (std::size_t i = 0; i < p_data.xs.size(); ++i)
    csv << io::fmt(p_data.xs[i]) << ',' << io::fmt(p_data.values[i]) << ',' << io::fmt(p_fwd.values[i]) << ','
        << io::fmt(p_T.values[i]) << ',' << io::fmt(q_0.values[i]) << '\n';
  io::write_text(out / "density.csv", csv.str());

  const double tv = total_variation(p_data, q_0);
  const double tv_fwd = total_variation(p_fwd, p_T);
  const auto basins = basin_masses(q_0, cfg.mixture.means);
  // basins are listed in sorted-mean order; pair them with the sorted weights
  std::vector<std::size_t> order(cfg.mixture.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return cfg.mixture.means[a] < cfg.mixture.means[b]; });
  double worst = 0.0;
  io::json basin_j = io::json::array(), ratio_j = io::json::array();
  for (std::size_t k = 0; k < order.size(); ++k) {
    const double w = cfg.mixture.weights[order[k]];
    worst = std::max(worst, std::abs(basins[k] - w));
    basin_j.push_back({{"mean", cfg.mixture.means[order[k]]}, {"weight", w}, {"recovered", basins[k]}});
    ratio_j.push_back(basins[k]);
  }
  auto stats_j = [](const SolverStats& s) {
    return io::json{{"outer_steps", s.outer_steps},
                    {"substeps", s.substeps},
                    {"dt_cap", s.dt_cap},
                    {"clamped_negative", s.clamped_negative},
                    {"max_mass_drift", s.max_mass_drift}};
  };
  // wall-clock time goes to stderr only, so reruns stay byte-identical
  io::write_json(out / "metrics.json", {{"tv_distance", tv},
                                        {"basin_ratios", ratio_j},
                                        {"steps", cfg.steps},
                                        {"tv_reverse_vs_data", tv},
                                        {"tv_forward_vs_analytic", tv_fwd},
                                        {"basins", basin_j},
                                        {"max_basin_error", worst},
                                        {"forward", stats_j(fwd_stats)},
                                        {"reverse", stats_j(rev_stats)}});
  io::write_json(out / "manifest.json",
                 {{"kind", "fokker-planck"}, {"config", cfg.to_json()}, {"hashes", hashes_of(out, {"density.csv", "metrics.json"})}});

  CheckReport r;
  r.add("reverse TV < 2e-2", tv < 2e-2, "tv=" + num(tv));
  r.add("basin masses within 0.03", worst <= 0.03, "max error=" + num(worst));
  r.add("forward TV vs analytic marginal", tv_fwd < 2e-2, "tv=" + num(tv_fwd), false);
  return r;
}

// ---- scene ----

scene::DatasetConfig dataset_config_from_json(const io::json& j) {
  scene::DatasetConfig c;
  take(j, "count", c.count);
  take(j, "caption_noise", c.caption_noise);
  take(j, "seed", c.seed);
  take(j, "descriptors", c.descriptors);
  if (j.contains("ratios")) c.ratios.weights = j.at("ratios").get<std::array<double, kSectorCount>>();
  if (j.contains("render")) {
    take(j.at("render"), "width", c.render.width);
    take(j.at("render"), "half_window", c.render.half_window);
  }
  c.ratios.validate();
  if (c.count == 0) throw ConfigError("dataset count must be positive");
  if (c.caption_noise < 0.0 || c.caption_noise > 1.0) throw ConfigError("caption_noise must lie in [0, 1]");
  if (c.descriptors < 0) throw ConfigError("descriptors must be nonnegative");
  return c;
}

io::json dataset_config_to_json(const scene::DatasetConfig& c) {
  return {{"count", c.count},
          {"caption_noise", c.caption_noise},
          {"seed", c.seed},
          {"descriptors", c.descriptors},
          {"ratios", c.ratios.weights},
          {"render", {{"width", c.render.width}, {"half_window", c.render.half_window}}}};
}

void run_scene_render(const fs::path& theta_file, double azimuth, const fs::path& out) {
  fs::create_directories(out);
  const auto theta = theta_file.empty() ? scene::make_ground_truth_object() : scene::load_texture(theta_file);
  const scene::Renderer renderer;
  const scene::Viewpoint v(azimuth);
  const auto img = renderer.render(theta, v);
  io::write_f64(out / "view.bin", img.pixels);
  std::ostringstream csv;
  csv << "column,row,channel,value\n";
  for (int j = 0; j < img.width; ++j)
    for (int k = 0; k < img.rows; ++k)
      for (int c = 0; c < img.channels; ++c) csv << j << ',' << k << ',' << c << ',' << io::fmt(img.at(j, k, c)) << '\n';
  io::write_text(out / "view.csv", csv.str());
  const clip::ProxyEmbedder embedder(renderer);
  const auto e = embedder.embed_image(img);
  io::json j = {{"azimuth", v.azimuth},
                {"sector", std::string(sector_name(classify_sector(v)))},
                {"shape", {img.width, img.rows, img.channels}},
                {"embedding", e.vector},
                {"degenerate", e.degenerate},
                {"energy", {img.channel_energy(scene::kBody), img.channel_energy(scene::kFace), img.channel_energy(scene::kTail)}},
                {"source", theta_file.empty() ? std::string("ground-truth") : theta_file.filename().string()}};
  if (!e.degenerate) j["embedding_sector"] = std::string(sector_name(clip::argmax_sector(e.vector)));
  io::write_json(out / "view.json", j);
}

void run_scene_dataset(const scene::DatasetConfig& cfg, std::size_t begin, std::size_t end, const fs::path& out) {
  if (begin >= end || end > cfg.count) throw ConfigError("shard range must satisfy begin < end <= count");
  scene::Dataset ds;
  ds.config = cfg;
  ds.samples = scene::generate_samples(cfg, begin, end);
  ds.config.count = end - begin;
  fs::create_directories(out);
  scene::save_dataset(ds, out);
  // the saved manifest describes the shard; record where it came from
  auto m = io::read_json(out / "manifest.json");
  m["shard"] = {{"begin", begin}, {"end", end}, {"of", cfg.count}};
  io::write_json(out / "manifest.json", m);
}

// ---- train ----

TrainRunConfig TrainRunConfig::from_json(const io::json& j) {
  TrainRunConfig c;
  if (j.contains("data")) c.data = dataset_config_from_json(j.at("data"));
  if (j.contains("train")) {
    const auto& t = j.at("train");
    take(t, "epochs", c.train.epochs);
    take(t, "batch", c.train.batch);
    take(t, "learning_rate", c.train.learning_rate);
    take(t, "attention_decay", c.train.attention_decay);
    take(t, "seed", c.train.seed);
    take(t, "heldout", c.train.heldout);
    if (t.contains("model")) {
      const auto& m = t.at("model");
      take(m, "width", c.train.model.width);
      take(m, "blocks", c.train.model.blocks);
      take(m, "prototypes", c.train.model.prototypes);
      take(m, "time_features", c.train.model.time_features);
      take(m, "descriptor_offset", c.train.model.descriptor_offset);
      take(m, "initial_spread", c.train.model.initial_spread);
      take(m, "spread_floor", c.train.model.spread_floor);
    }
  }
  c.train.model.descriptors = c.data.descriptors;
  c.train.model.image_columns = c.data.render.width;
  if (j.contains("evaluation")) {
    const auto& e = j.at("evaluation");
    take(e, "samples", c.samples);
    take(e, "sample_seed", c.sample_seed);
    take(e, "attention_calls", c.attention_calls);
    take(e, "attention_seed", c.attention_seed);
  }
  if (c.train.epochs <= 0 || c.train.batch <= 0) throw ConfigError("epochs and batch must be positive");
  if (!(c.train.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (c.train.attention_decay < 0.0) throw ConfigError("attention_decay must be nonnegative");
  if (c.samples < 0 || c.attention_calls <= 0) throw ConfigError("samples must be >= 0 and attention_calls > 0");
  if (c.data.descriptors < 6) throw ConfigError("the attention sweep needs at least 6 descriptors");
  c.train.model.validate();
  return c;
}

io::json TrainRunConfig::to_json() const {
  const auto& m = train.model;
  return {{"data", dataset_config_to_json(data)},
          {"train",
           {{"epochs", train.epochs},
            {"batch", train.batch},
            {"learning_rate", train.learning_rate},
            {"attention_decay", train.attention_decay},
            {"seed", train.seed},
            {"heldout", train.heldout},
            {"model",
             {{"width", m.width},
              {"blocks", m.blocks},
              {"prototypes", m.prototypes},
              {"time_features", m.time_features},
              {"descriptor_offset", m.descriptor_offset},
              {"initial_spread", m.initial_spread},
              {"spread_floor", m.spread_floor}}}}},
          {"evaluation",
           {{"samples", samples},
            {"sample_seed", sample_seed},
            {"attention_calls", attention_calls},
            {"attention_seed", attention_seed}}}};
}

io::json model_info(const fs::path& model_dir) {
  return {{"content_hash", io::content_hash_dir(model_dir)}};
}

CheckReport run_train(const TrainRunConfig& cfg, const fs::path& out) {
  using namespace diffusion;
  fs::create_directories(out);
  const auto data = scene::generate_dataset(cfg.data);
  auto result = train_denoiser(data, cfg.train);
  const auto& model = result.model;
  model.save(out / "model");

  constexpr std::size_t kWindow = 50;
  const auto sm = smooth(result.loss_trace, std::min(kWindow, result.loss_trace.size()));
  std::ostringstream lt;
  lt << "step,loss,smoothed\n";
  for (std::size_t i = 0; i < result.loss_trace.size(); ++i) {
    lt << i << ',' << io::fmt(result.loss_trace[i]) << ',';
    // smoothed[k] averages steps k .. k + window - 1; align it with the last one
    const std::size_t w = result.loss_trace.size() - sm.size();
    if (i >= w) lt << io::fmt(sm[i - w]);
    lt << '\n';
  }
  io::write_text(out / "loss_trace.csv", lt.str());
  std::size_t rises = 0;
  for (std::size_t i = 1; i < sm.size(); ++i) rises += sm[i] > sm[i - 1];

  // [object, d0 .. d(k-1), back view] for k = 0 .. descriptors
  const auto& vocab = model.vocabulary();
  std::vector<TokenSequence> prompts;
  for (int k = 0; k <= vocab.descriptors; ++k) {
    std::vector<int> ids{Vocabulary::kObject};
    for (int d = 0; d < k; ++d) ids.push_back(vocab.descriptor_token(d));
    ids.push_back(vocab.viewpoint_token(Sector::back));
    prompts.push_back(TokenSequence::from_ids(vocab, ids));
  }
  const auto mass = mean_keyword_attention(model, data, prompts, cfg.attention_calls, cfg.attention_seed);
  std::ostringstream at;
  at << "prompt_length,descriptors,viewpoint_mass\n";
  for (std::size_t k = 0; k < prompts.size(); ++k)
    at << prompts[k].size() << ',' << k << ',' << io::fmt(mass[k]) << '\n';
  io::write_text(out / "attention.csv", at.str());

  std::array<int, kSectorCount> gen{};
  int gen_degenerate = 0;
  if (cfg.samples > 0) {
    const clip::ProxyEmbedder embedder;
    const auto prompt = TokenSequence::object_prompt(vocab, 0);
    std::ostringstream gc;
    gc << "sample,sector,face_energy\n";
    for (int i = 0; i < cfg.samples; ++i) {
      Rng rng(derive_seed(cfg.sample_seed, "sample/" + std::to_string(i)));
      const auto x = ancestral_sample(model, prompt, rng);
      const auto e = embedder.embed_image(x);
      double face = 0.0;
      for (std::size_t p = scene::kFace; p < x.size(); p += 3) face += x[p] * x[p];
      std::string name = "degenerate";
      if (e.degenerate) {
        ++gen_degenerate;
      } else {
        const auto s = clip::argmax_sector(e.vector);
        ++gen[static_cast<std::size_t>(s)];
        name = sector_name(s);
      }
      gc << i << ',' << name << ',' << io::fmt(face) << '\n';
    }
    io::write_text(out / "generation.csv", gc.str());
  }
  const double front_fraction = cfg.samples > 0 ? static_cast<double>(gen[0]) / cfg.samples : 0.0;

  io::json metrics = {{"heldout_untrained", result.untrained_heldout},
                      {"heldout_trained", result.trained_heldout},
                      {"heldout_ratio", result.trained_heldout / result.untrained_heldout},
                      {"optimizer_steps", result.loss_trace.size()},
                      {"smoothing_window", kWindow},
                      {"smoothed_rises", rises},
                      {"viewpoint_mass", mass}};
  if (cfg.samples > 0)
    metrics["generation"] = {{"samples", cfg.samples},
                             {"front", gen[0]},
                             {"side", gen[1]},
                             {"back", gen[2]},
                             {"degenerate", gen_degenerate},
                             {"front_fraction", front_fraction}};
  io::write_json(out / "metrics.json", metrics);
  io::json hashes = hashes_of(out, {"loss_trace.csv", "attention.csv", "metrics.json"});
  if (cfg.samples > 0) hashes["generation.csv"] = io::git_blob_hash_file(out / "generation.csv");
  io::write_json(out / "manifest.json",
                 {{"kind", "train"}, {"config", cfg.to_json()}, {"model", model_info(out / "model")}, {"hashes", hashes}});

  CheckReport r;
  const double ratio = result.trained_heldout / result.untrained_heldout;
  r.add("held-out loss drops below 0.2x untrained", ratio < 0.2,
        num(result.untrained_heldout) + " -> " + num(result.trained_heldout));
  if (cfg.samples > 0)
    r.add("viewpoint-free samples front fraction > 0.45", front_fraction > 0.45,
          std::to_string(gen[0]) + "/" + std::to_string(cfg.samples) + " = " + num(front_fraction));
  if (mass.size() > 6)
    r.add("viewpoint attention falls with 6 descriptors", mass[6] < mass[0],
          num(mass[0]) + " -> " + num(mass[6]));
  r.add("smoothed loss never rises", rises == 0,
        std::to_string(rises) + " rises over " + std::to_string(sm.size()) + " smoothed steps", false);
  return r;
}

// ---- distill / evaluate ----

CheckReport run_distill(const sds::DistillConfig& cfg, const fs::path& model_dir, const fs::path& out) {
  const auto model = diffusion::Denoiser::load(model_dir);
  const sds::DenoiserModel nm(model);
  const auto staged = sds::StagedPrompt::make(model.vocabulary(), cfg.descriptors, cfg.acg.stage_fraction);
  const auto rec = sds::run_distillation(cfg, staged, nm);
  fs::create_directories(out);
  sds::save_run(rec, cfg, out, model_info(model_dir));

  CheckReport r;
  const int calib = cfg.calibration_iterations();
  bool pure = true;
  for (const auto& row : rec.rows)
    if (row.calibration != (row.iter < calib) || (row.calibration && row.pruned)) pure = false;
  r.add("one record row per iteration", rec.rows.size() == static_cast<std::size_t>(cfg.iterations),
        std::to_string(rec.rows.size()) + " rows");
  r.add("no pruning inside the calibration window", pure, "window " + std::to_string(calib));
  r.add("final texture finite", rec.theta.all_finite(), "");
  return r;
}

CheckReport run_evaluate(const fs::path& run_dir, double threshold) {
  io::require_file(run_dir / "record.csv");
  io::require_file(run_dir / "theta.bin");
  const auto rec = sds::DistillRunRecord::parse_csv(io::read_text(run_dir / "record.csv"));
  const auto theta = scene::load_texture(run_dir / "theta.bin");
  const auto out = run_dir / "eval";
  fs::create_directories(out);
  const auto jr = eval::janus_rate(theta, threshold);
  const auto vs = eval::view_dependent_score(theta);
  const auto h = eval::rebalance_histogram(rec);
  io::write_json(out / "janus.json", jr.to_json());
  io::write_json(out / "view_score.json", vs.to_json());
  io::write_text(out / "rebalance.csv", h.csv());
  io::write_json(out / "rebalance.json", h.to_json());

  std::size_t past = 0;
  for (const auto& row : rec.rows) past += !row.calibration;
  CheckReport r;
  r.add("histogram covers every post-calibration row", h.total() == past,
        std::to_string(h.total()) + " of " + std::to_string(past));
  r.add("janus verdict", !jr.fired, "ratio=" + num(jr.ratio), false);
  return r;
}

// ---- ablate ----

CheckReport ablation_checks(const eval::AblationSummary& s, const std::vector<std::uint64_t>& seeds) {
  CheckReport r;
  auto has = [&](const char* n) {
    return std::any_of(s.arms.begin(), s.arms.end(), [&](const auto& a) { return a.name == n; });
  };
  auto fired = [&](const std::string& arm) {
    int f = 0, missing = 0;
    for (auto seed : seeds) {
      const auto* c = s.cell(arm, seed);
      if (!c || !c->ok) ++missing;
      else f += c->janus.fired;
    }
    return std::pair{f, missing};
  };
  if (has("baseline") && has("full")) {
    const auto [b, bm] = fired("baseline");
    const auto [f, fm] = fired("full");
    r.add("full ACG fires no more often than baseline", bm == 0 && fm == 0 && f <= b,
          "full " + std::to_string(f) + " vs baseline " + std::to_string(b));
    r.add("full ACG fires strictly less in aggregate", bm == 0 && fm == 0 && f < b,
          "full " + std::to_string(f) + " vs baseline " + std::to_string(b));
  }
  if (has("baseline") && has("attention")) {
    const auto [b, bm] = fired("baseline");
    const auto [a, am] = fired("attention");
    r.add("attention control fires no more often than baseline", bm == 0 && am == 0 && a <= b,
          "attention " + std::to_string(a) + " vs baseline " + std::to_string(b));
  }
  if (has("baseline") && has("pruning")) {
    bool all = true;
    std::string detail;
    for (auto seed : seeds) {
      const auto* b = s.cell("baseline", seed);
      const auto* p = s.cell("pruning", seed);
      const bool lower = b && p && b->ok && p->ok && p->kept_front_share < b->kept_front_share;
      all = all && lower;
      detail += "seed " + std::to_string(seed) + ": " + (b && b->ok ? num(b->kept_front_share) : "-") + " -> " +
                (p && p->ok ? num(p->kept_front_share) : "-") + "; ";
    }
    r.add("pruning lowers the kept front share on every seed", all, detail);
  }
  return r;
}

CheckReport run_ablate(const eval::AblationGrid& grid, const std::vector<std::uint64_t>& seeds,
                       const fs::path& model_dir, const fs::path& out) {
  const auto model = diffusion::Denoiser::load(model_dir);
  const sds::DenoiserModel nm(model);
  fs::create_directories(out);
  const auto info = model_info(model_dir);
  const auto s = eval::ablation_suite(grid, seeds, nm, scene::Renderer(), out / "runs", info);
  io::write_text(out / "cells.csv", s.cells_csv());
  io::write_text(out / "summary.csv", s.summary_csv());
  io::write_text(out / "summary.txt", s.table());
  io::write_json(out / "summary.json", s.to_json());
  io::write_json(out / "manifest.json", {{"kind", "ablate"},
                                         {"grid", grid.to_json()},
                                         {"seeds", seeds},
                                         {"model", info},
                                         {"hashes", hashes_of(out, {"cells.csv", "summary.csv", "summary.json"})}});
  return ablation_checks(s, seeds);
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = std::min(text.find(',', pos), text.size());
    const auto piece = text.substr(pos, comma - pos);
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(piece.data(), piece.data() + piece.size(), v);
    if (piece.empty() || ec != std::errc() || p != piece.data() + piece.size())
      throw ConfigError("bad seed list: " + text);
    seeds.push_back(v);
    pos = comma + 1;
  }
  return seeds;
}

}  // namespace janus::cli

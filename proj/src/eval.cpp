#include "janus/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace janus::eval {

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

io::json opt(const std::optional<double>& v) { return v ? io::json(*v) : io::json(nullptr); }

}  // namespace

io::json JanusVerdict::to_json() const {
  return {{"face_energy_back", face_energy_back},
          {"face_energy_front", face_energy_front},
          {"ratio", ratio},
          {"threshold", threshold},
          {"fired", fired}};
}

JanusVerdict janus_rate(const scene::TextureField& theta, double threshold, double eps_div) {
  if (!theta.all_finite()) throw ContractError("texture must be finite");
  if (theta.channels <= scene::kFace) throw ContractError("texture has no face channel");
  JanusVerdict v;
  v.threshold = threshold;
  for (int a = 0; a < theta.azimuth_bins; ++a) {
    const Sector s = classify_sector(scene::Viewpoint(theta.bin_angle(a)));
    if (s == Sector::side) continue;
    double e = 0.0;
    for (int h = 0; h < theta.height_bins; ++h) e += theta.at(a, h, scene::kFace) * theta.at(a, h, scene::kFace);
    (s == Sector::front ? v.face_energy_front : v.face_energy_back) += e;
  }
  v.ratio = v.face_energy_back / std::max(v.face_energy_front, eps_div);
  v.fired = v.ratio > threshold;
  return v;
}

io::json ViewScoreReport::to_json() const {
  io::json r = io::json::array();
  for (const auto& row : rows)
    r.push_back({{"azimuth", row.azimuth},
                 {"phrase", std::string(sector_phrase(row.sector))},
                 {"sigma", opt(row.sigma)},
                 {"degenerate", !row.sigma}});
  return {{"note", "proxy-embedder scores; comparable only within this testbed"},
          {"rows", r},
          {"mean", opt(mean)},
          {"degenerate", degenerate}};
}

ViewScoreReport view_dependent_score(const scene::TextureField& theta, const scene::Renderer& renderer) {
  const clip::ProxyEmbedder embedder(renderer);
  constexpr std::array<double, 4> az{0.0, 90.0, 180.0, 270.0};
  constexpr std::array<Sector, 4> sec{Sector::front, Sector::side, Sector::back, Sector::side};
  ViewScoreReport rep;
  double sum = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    auto& row = rep.rows[i];
    row.azimuth = az[i];
    row.sector = sec[i];
    const auto e = embedder.embed_image(renderer.render(theta, scene::Viewpoint(az[i])));
    if (e.degenerate) {
      ++rep.degenerate;
      continue;
    }
    row.sigma = clip::similarity(e.vector, clip::embed_text(sec[i]));
    sum += *row.sigma;
    ++n;
  }
  if (n > 0) rep.mean = sum / n;
  return rep;
}

std::size_t RebalanceHistogram::total() const {
  std::size_t t = 0;
  for (std::size_t s = 0; s < kSectorCount; ++s) t += kept[s] + pruned[s];
  return t;
}

double RebalanceHistogram::kept_front_share() const {
  const std::size_t k = kept[0] + kept[1] + kept[2];
  return k == 0 ? 0.0 : static_cast<double>(kept[0]) / static_cast<double>(k);
}

std::string RebalanceHistogram::csv() const {
  std::ostringstream os;
  os << "sector,kept,pruned\n";
  for (std::size_t s = 0; s < kSectorCount; ++s)
    os << sector_name(static_cast<Sector>(s)) << ',' << kept[s] << ',' << pruned[s] << '\n';
  return os.str();
}

io::json RebalanceHistogram::to_json() const {
  io::json j;
  for (std::size_t s = 0; s < kSectorCount; ++s)
    j[std::string(sector_name(static_cast<Sector>(s)))] = {{"kept", kept[s]}, {"pruned", pruned[s]}};
  j["total"] = total();
  j["kept_front_share"] = kept_front_share();
  return j;
}

RebalanceHistogram rebalance_histogram(const sds::DistillRunRecord& record) {
  RebalanceHistogram h;
  bool any = false;
  for (const auto& r : record.rows) {
    if (r.calibration) continue;
    any = true;
    auto& bucket = r.pruned ? h.pruned : h.kept;
    ++bucket[static_cast<std::size_t>(r.pgt_sector)];
  }
  if (!any) throw ContractError("record has no rows past the calibration window");
  return h;
}

std::vector<AblationArm> default_arms() {
  std::vector<AblationArm> arms(5);
  arms[0].name = "baseline";
  arms[1].name = "attention";
  arms[1].acg.attention = true;
  arms[2].name = "pruning";
  arms[2].acg.pruning = true;
  arms[3].name = "staging";
  arms[3].acg.staging = true;
  arms[4].name = "full";
  arms[4].acg.attention = arms[4].acg.pruning = arms[4].acg.staging = true;
  return arms;
}

AblationGrid AblationGrid::from_json(const io::json& j) {
  AblationGrid g;
  if (j.contains("base")) g.base = sds::DistillConfig::from_json(j.at("base"));
  g.threshold = j.value("threshold", g.threshold);
  if (j.contains("arms")) {
    g.arms.clear();
    for (const auto& a : j.at("arms")) {
      // arms inherit the base settings with every switch off, then apply their own
      io::json cj = g.base.to_json();
      cj["acg"]["attention"] = cj["acg"]["pruning"] = cj["acg"]["staging"] = false;
      cj["acg"].merge_patch(a.value("acg", io::json::object()));
      const auto c = sds::DistillConfig::from_json(cj);
      g.arms.push_back({a.at("name").get<std::string>(), c.acg});
    }
  }
  return g;
}

io::json AblationGrid::to_json() const {
  io::json arms_j = io::json::array();
  for (const auto& a : arms) {
    sds::DistillConfig c = base;
    c.acg = a.acg;
    arms_j.push_back({{"name", a.name}, {"acg", c.to_json().at("acg")}});
  }
  return {{"base", base.to_json()}, {"arms", arms_j}, {"threshold", threshold}};
}

const ArmSummary& AblationSummary::arm(const std::string& name) const {
  for (const auto& a : arms)
    if (a.name == name) return a;
  throw ContractError("no ablation arm named " + name);
}

const AblationCell* AblationSummary::cell(const std::string& arm_name, std::uint64_t seed) const {
  for (const auto& c : cells)
    if (c.arm == arm_name && c.seed == seed) return &c;
  return nullptr;
}

std::string AblationSummary::cells_csv() const {
  std::ostringstream os;
  os << "arm,seed,ok,janus_ratio,janus_fired,view_score,kept_front_share,pruned,error\n";
  for (const auto& c : cells) {
    os << c.arm << ',' << c.seed << ',' << c.ok << ',';
    if (c.ok)
      os << io::fmt(c.janus.ratio) << ',' << c.janus.fired << ','
         << (c.view_score ? io::fmt(*c.view_score) : std::string()) << ',' << io::fmt(c.kept_front_share) << ','
         << c.pruned << ',';
    else
      os << ",,,,,";
    // errors are free text; keep the CSV one line per cell
    std::string e = c.error;
    std::replace(e.begin(), e.end(), ',', ';');
    std::replace(e.begin(), e.end(), '\n', ' ');
    os << e << '\n';
  }
  return os.str();
}

std::string AblationSummary::summary_csv() const {
  std::ostringstream os;
  os << "arm,runs,failed,fired,fired_fraction,mean_view_score,mean_kept_front_share\n";
  for (const auto& a : arms)
    os << a.name << ',' << a.runs << ',' << a.failed << ',' << a.fired << ',' << io::fmt(a.fired_fraction) << ','
       << (a.mean_view_score ? io::fmt(*a.mean_view_score) : std::string()) << ','
       << io::fmt(a.mean_kept_front_share) << '\n';
  return os.str();
}

std::string AblationSummary::table() const {
  std::ostringstream os;
  os << "# view scores use the proxy embedder; compare within this testbed only\n";
  os << "# janus threshold " << fixed(threshold, 3) << "\n";
  char line[160];
  std::snprintf(line, sizeof line, "%-12s %5s %6s %6s %9s %11s %12s\n", "arm", "runs", "failed", "fired", "JR",
                "view score", "front share");
  os << line;
  for (const auto& a : arms) {
    std::snprintf(line, sizeof line, "%-12s %5d %6d %6d %8s%% %11s %12s\n", a.name.c_str(), a.runs, a.failed, a.fired,
                  fixed(100.0 * a.fired_fraction, 2).c_str(),
                  a.mean_view_score ? fixed(*a.mean_view_score, 4).c_str() : "-",
                  fixed(a.mean_kept_front_share, 4).c_str());
    os << line;
  }
  return os.str();
}

io::json AblationSummary::to_json() const {
  io::json cj = io::json::array();
  for (const auto& c : cells) {
    io::json o = {{"arm", c.arm}, {"seed", c.seed}, {"ok", c.ok}};
    if (c.ok) {
      o["janus"] = c.janus.to_json();
      o["view_score"] = opt(c.view_score);
      o["kept_front_share"] = c.kept_front_share;
      o["pruned"] = c.pruned;
    } else {
      o["error"] = c.error;
    }
    cj.push_back(o);
  }
  io::json aj = io::json::array();
  for (const auto& a : arms)
    aj.push_back({{"name", a.name},
                  {"runs", a.runs},
                  {"failed", a.failed},
                  {"fired", a.fired},
                  {"fired_fraction", a.fired_fraction},
                  {"mean_view_score", opt(a.mean_view_score)},
                  {"mean_kept_front_share", a.mean_kept_front_share}});
  return {{"threshold", threshold}, {"cells", cj}, {"arms", aj}};
}

AblationSummary ablation_suite(const AblationGrid& grid, const std::vector<std::uint64_t>& seeds,
                               const sds::NoiseModel& model, const scene::Renderer& renderer,
                               const std::optional<std::filesystem::path>& run_dir, const io::json& model_info) {
  if (grid.arms.size() < 2) throw ConfigError("an ablation needs at least two configurations");
  if (seeds.size() < 3) throw ConfigError("an ablation needs at least three seeds");
  AblationSummary out;
  out.threshold = grid.threshold;
  for (const auto& arm : grid.arms) {
    ArmSummary as;
    as.name = arm.name;
    double view_sum = 0.0, share_sum = 0.0;
    int view_n = 0;
    for (const auto seed : seeds) {
      AblationCell cell;
      cell.arm = arm.name;
      cell.seed = seed;
      try {
        sds::DistillConfig cfg = grid.base;
        cfg.acg = arm.acg;
        cfg.seed = seed;
        const auto staged = sds::StagedPrompt::make(model.vocabulary(), cfg.descriptors, cfg.acg.stage_fraction);
        const auto rec = sds::run_distillation(cfg, staged, model, renderer);
        if (run_dir) {
          const auto dir = *run_dir / arm.name / ("seed-" + std::to_string(seed));
          std::filesystem::create_directories(dir);
          sds::save_run(rec, cfg, dir, model_info);
        }
        cell.janus = janus_rate(rec.theta, grid.threshold);
        cell.view_score = view_dependent_score(rec.theta, renderer).mean;
        const auto h = rebalance_histogram(rec);
        cell.kept_front_share = h.kept_front_share();
        cell.pruned = h.pruned[0] + h.pruned[1] + h.pruned[2];
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
      if (cell.ok) {
        ++as.runs;
        as.fired += cell.janus.fired;
        share_sum += cell.kept_front_share;
        if (cell.view_score) view_sum += *cell.view_score, ++view_n;
      } else {
        ++as.failed;
      }
      out.cells.push_back(std::move(cell));
    }
    if (as.runs > 0) {
      as.fired_fraction = static_cast<double>(as.fired) / as.runs;
      as.mean_kept_front_share = share_sum / as.runs;
    }
    if (view_n > 0) as.mean_view_score = view_sum / view_n;
    out.arms.push_back(as);
  }
  return out;
}

}  // namespace janus::eval

// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fails.
//
//   acceptance --cli <path to janus> [--work <dir>]
//
// Criteria 7-10 share one trained model (default train config) and one
// default ablation; 11 drives the CLI binary twice per entry point on small
// configs and compares hashes of everything except the SVG plots.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "janus/commands.hpp"

using namespace janus;
namespace fs = std::filesystem;

namespace {

struct Line {
  int id;
  std::string title;
  bool passed;
  std::string detail;
};

std::vector<Line> lines;

void report(int id, std::string title, bool passed, std::string detail) {
  std::printf("[%2d] %s  %s  (%s)\n", id, passed ? "PASS" : "FAIL", title.c_str(), detail.c_str());
  std::fflush(stdout);
  lines.push_back({id, std::move(title), passed, std::move(detail)});
}

std::string num(double v) {
  char b[64];
  std::snprintf(b, sizeof b, "%.4g", v);
  return b;
}

class Clock {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

double max_abs_diff(const Eigen::VectorXd& a, std::span<const double> b) {
  double m = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[static_cast<std::size_t>(i)]));
  return m;
}

void criterion_1() {
  Clock c;
  const auto r = cli::run_fokker_planck(cli::FokkerPlanckConfig{}, fs::temp_directory_path() / "janus_acc_fp");
  const double s = c.seconds();
  report(1, "Fokker-Planck inversion recovers the mixture", r.checks[0].passed && r.checks[1].passed && s < 60.0,
         r.checks[0].detail + ", basin " + r.checks[1].detail + ", " + num(s) + "s");
}

void criterion_2() {
  Clock c;
  const auto mix = density::long_tailed_mixture();
  const density::SdeSchedule sched;
  Rng rng(2);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double t = 0.01 + 0.99 * uniform01(rng);
    const double x = -4.0 + 8.0 * uniform01(rng);
    const auto m = density::analytic_marginal(mix, sched, t);
    const double h = 1e-5;
    const double fd = (m.log_pdf(x + h) - m.log_pdf(x - h)) / (2 * h);
    const auto s = density::analytic_score(mix, sched, t, x);
    worst = std::max(worst, s ? std::abs(*s - fd) : INFINITY);
  }
  const double sec = c.seconds();
  report(2, "analytic score matches finite differences", worst < 1e-5 && sec < 5.0,
         "max |err| " + num(worst) + ", " + num(sec) + "s");
}

void criterion_3() {
  const auto sched = diffusion::DiscreteSchedule::from_sde({});
  Rng rng(3);
  double worst = 0.0;
  const auto gt = scene::make_ground_truth_object();
  const scene::Renderer r;
  for (int i = 0; i < 100; ++i) {
    const auto x0 = r.render(gt, scene::Viewpoint(-180.0 + 360.0 * uniform01(rng))).pixels;
    const int t = 1 + static_cast<int>(rng() % 1000);
    std::vector<double> eps(x0.size());
    for (auto& e : eps) e = standard_normal(rng);
    const auto xt = diffusion::noisy_image(sched, x0, eps, t);
    const auto back = sds::pseudo_ground_truth(sched, {xt.data(), static_cast<std::size_t>(xt.size())}, t, eps);
    worst = std::max(worst, max_abs_diff(back, x0));
  }
  report(3, "pseudo-GT with the true noise reproduces x0", worst <= 1e-6, "max abs " + num(worst));
}

void criterion_4(const diffusion::Denoiser& model) {
  const scene::Renderer r;
  const sds::DenoiserModel nm(model);
  const auto& sched = model.schedule();
  const auto prompt = sds::viewpoint_prompt(model.vocabulary(), diffusion::TokenSequence::object_prompt(model.vocabulary(), 0),
                                            scene::Viewpoint(0.0));
  Rng rng(4);
  double worst_form = 0.0;
  auto theta = scene::TextureField::zeros();
  for (auto& v : theta.values) v = 0.5 * standard_normal(rng);
  std::vector<double> eps(static_cast<std::size_t>(r.image_size()));
  for (int i = 0; i < 20; ++i) {
    const scene::Viewpoint v(-180.0 + 360.0 * uniform01(rng));
    const int t = sched.index(0.02) + static_cast<int>(rng() % static_cast<unsigned>(sched.index(0.98) - sched.index(0.02)));
    for (auto& e : eps) e = standard_normal(rng);
    const auto x0 = r.render(theta, v).pixels;
    const auto xt = diffusion::noisy_image(sched, x0, eps, t);
    const auto pred = nm.predict({xt.data(), eps.size()}, t, prompt, nullptr);
    const auto pgt = sds::pseudo_ground_truth(sched, {xt.data(), eps.size()}, t, {pred.data(), eps.size()});
    const double w = sds::omega(sched, t), g = sds::gamma(sched, t);
    const auto a = sds::gradient_noise_form(r, v, w, {pred.data(), eps.size()}, eps);
    const auto b = sds::gradient_image_form(r, v, w, g, x0, {pgt.data(), eps.size()});
    double num2 = 0.0, den2 = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      num2 += (a.values[k] - b.values[k]) * (a.values[k] - b.values[k]);
      den2 += a.values[k] * a.values[k];
    }
    worst_form = std::max(worst_form, std::sqrt(num2 / std::max(den2, 1e-300)));
  }

  // finite differences of the surrogate loss at one fixed draw
  const scene::Viewpoint v(35.0);
  const int t = 400;
  for (auto& e : eps) e = standard_normal(rng);
  const auto x0 = r.render(theta, v).pixels;
  const auto xt = diffusion::noisy_image(sched, x0, eps, t);
  const auto pred = nm.predict({xt.data(), eps.size()}, t, prompt, nullptr);
  const auto pgt = sds::pseudo_ground_truth(sched, {xt.data(), eps.size()}, t, {pred.data(), eps.size()});
  const double w = sds::omega(sched, t), g = sds::gamma(sched, t);
  const auto grad = sds::gradient_noise_form(r, v, w, {pred.data(), eps.size()}, eps);
  std::vector<std::size_t> live;
  double gmax = 0.0;
  for (double x : grad.values) gmax = std::max(gmax, std::abs(x));
  for (std::size_t k = 0; k < grad.size(); ++k)
    if (std::abs(grad.values[k]) > 1e-3 * gmax) live.push_back(k);
  double worst_fd = 0.0;
  auto loss_at = [&](const scene::TextureField& th) {
    return sds::surrogate_loss(w, g, r.render(th, v).pixels, {pgt.data(), eps.size()});
  };
  for (int i = 0; i < 20; ++i) {
    const std::size_t k = live[rng() % live.size()];
    auto tp = theta, tm = theta;
    const double h = 1e-4;
    tp.values[k] += h;
    tm.values[k] -= h;
    const double fd = (loss_at(tp) - loss_at(tm)) / (2 * h);
    worst_fd = std::max(worst_fd, std::abs(fd - grad.values[k]) / std::abs(grad.values[k]));
  }
  report(4, "noise and image gradient forms agree; finite differences match",
         worst_form <= 1e-6 && worst_fd <= 1e-3, "form rel " + num(worst_form) + ", fd rel " + num(worst_fd));
}

void criterion_5() {
  using diffusion::AttentionMap;
  const diffusion::Vocabulary vocab{8};
  Rng rng(5);
  bool identity = true, scaling = true, zeroing = true, monotone = true;
  for (int i = 0; i < 50; ++i) {
    const int T = 2 + static_cast<int>(rng() % 7);
    std::vector<int> ids{diffusion::Vocabulary::kObject};
    for (int d = 0; d + 2 < T; ++d) ids.push_back(vocab.descriptor_token(d));
    const auto sector = static_cast<Sector>(rng() % 3);
    ids.push_back(vocab.viewpoint_token(sector));
    const auto seq = diffusion::TokenSequence::from_ids(vocab, ids);
    Eigen::MatrixXd q(18, 8), k(T, 8);
    for (Eigen::Index a = 0; a < q.size(); ++a) q.data()[a] = standard_normal(rng);
    for (Eigen::Index a = 0; a < k.size(); ++a) k.data()[a] = standard_normal(rng);
    const auto m = diffusion::attention_map(q, k);
    const auto vp = static_cast<Eigen::Index>(*seq.viewpoint_index());

    diffusion::ControlSpec zero;
    identity = identity && (diffusion::control_attention(m, seq, zero, sector).map.values.array() ==
                            m.values.array()).all();

    const double lambda = 0.5 + 9.0 * uniform01(rng);
    diffusion::ControlSpec s;
    s.lambda[static_cast<std::size_t>(sector)] = lambda;
    const auto c = diffusion::control_attention(m, seq, s, sector).map.values;
    for (Eigen::Index col = 0; col < c.cols(); ++col) {
      const Eigen::VectorXd want = col == vp ? Eigen::VectorXd(m.values.col(col) * (1.0 + lambda)) : Eigen::VectorXd(m.values.col(col));
      scaling = scaling && (c.col(col).array() == want.array()).all();
    }

    diffusion::ControlSpec neg;
    neg.lambda[static_cast<std::size_t>(sector)] = -1.0;
    zeroing = zeroing && (diffusion::control_attention(m, seq, neg, sector).map.values.col(vp).array() == 0.0).all();

    double prev = -1.0;
    for (double l : {-1.0, -0.5, 0.0, 0.5, 1.0, 5.0, 20.0}) {
      diffusion::ControlSpec ls;
      ls.lambda[static_cast<std::size_t>(sector)] = l;
      const double mass = diffusion::control_attention(m, seq, ls, sector).map.values.col(vp).sum();
      monotone = monotone && mass >= prev;
      prev = mass;
    }
  }
  report(5, "attention control laws", identity && scaling && zeroing && monotone,
         std::string("identity ") + (identity ? "ok" : "broken") + ", scaling " + (scaling ? "ok" : "broken") +
             ", zeroing " + (zeroing ? "ok" : "broken") + ", monotone " + (monotone ? "ok" : "broken"));
}

void criterion_6() {
  Rng rng(6);
  std::vector<double> sig(200);
  for (auto& s : sig) s = -0.5 + 1.5 * uniform01(rng);
  const auto a1 = clip::calibrate(sig, 1.0), a0 = clip::calibrate(sig, 0.0);
  // sigma_min 0.2, sigma_mean 0.5
  const std::vector<double> pair{0.2, 0.8};
  const auto mid = clip::calibrate(pair, 0.5);
  const bool endpoints = a1.tau == a1.sigma_min && a0.tau == a0.sigma_mean && std::abs(mid.tau - 0.35) <= 1e-15;
  bool monotone = true;
  std::size_t prev = sig.size() + 1;
  std::string rates;
  for (int i = 0; i <= 10; ++i) {
    const auto st = clip::calibrate(sig, i / 10.0);
    std::size_t pruned = 0;
    for (double s : sig) pruned += s < st.tau;
    monotone = monotone && pruned <= prev;
    prev = pruned;
    if (i % 5 == 0) rates += (rates.empty() ? "" : "/") + std::to_string(pruned);
  }
  report(6, "threshold arithmetic and prune-rate monotonicity", endpoints && monotone,
         "tau(0.2,0.5,0.5)=" + num(mid.tau) + ", pruned at alpha 0/0.5/1: " + rates);
}

void criterion_7(const io::json& metrics, double seconds) {
  const auto& g = metrics.at("generation");
  const double f = g.at("front_fraction").get<double>();
  report(7, "viewpoint-free generation favours the front", f > 0.45 && seconds < 900.0,
         std::to_string(g.at("front").get<int>()) + "/" + std::to_string(g.at("samples").get<int>()) +
             " front (" + num(f) + "), train+sample " + num(seconds) + "s");
}

void criterion_8(const io::json& metrics) {
  const auto mass = metrics.at("viewpoint_mass").get<std::vector<double>>();
  report(8, "descriptor tokens dilute viewpoint attention", mass.size() > 6 && mass[6] < mass[0],
         "mass " + num(mass[0]) + " -> " + num(mass[6]) + " with 6 descriptors");
}

void criteria_9_10(const fs::path& model_dir, const fs::path& work) {
  Clock c;
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  const auto r = cli::run_ablate(eval::AblationGrid{}, seeds, model_dir, work / "ablate");
  const double sec = c.seconds();
  std::map<std::string, const cli::Check*> by;
  for (const auto& ch : r.checks) by[ch.name] = &ch;
  const auto* prune = by.at("pruning lowers the kept front share on every seed");
  report(9, "pruning lowers the kept pseudo-GT front share", prune->passed, prune->detail);
  const auto* le = by.at("full ACG fires no more often than baseline");
  const auto* lt = by.at("full ACG fires strictly less in aggregate");
  report(10, "full ACG reduces Janus verdicts", le->passed && lt->passed && sec < 2700.0,
         lt->detail + ", grid " + num(sec) + "s");
}

std::string tree_hash(const fs::path& root) {
  std::vector<std::pair<std::string, std::string>> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().extension() != ".svg")
      files.emplace_back(fs::relative(e.path(), root).generic_string(), io::git_blob_hash_file(e.path()));
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& [n, h] : files) all += n + ' ' + h + '\n';
  return io::git_blob_hash({reinterpret_cast<const unsigned char*>(all.data()), all.size()}) + " (" +
         std::to_string(files.size()) + " files)";
}

int run(const std::string& cmd) {
  const int rc = std::system((cmd + " > /dev/null 2>&1").c_str());
  return rc;
}

void criterion_11(const std::string& cli_path, const fs::path& work) {
  const fs::path w = work / "determinism";
  fs::remove_all(w);
  fs::create_directories(w);
  io::write_json(w / "train.json", {{"data", {{"count", 600}}},
                                    {"train", {{"epochs", 2}, {"heldout", 64}}},
                                    {"evaluation", {{"samples", 8}, {"attention_calls", 10}}}});
  io::write_json(w / "distill.json", {{"iterations", 200}});
  io::write_json(w / "grid.json",
                 {{"base", {{"iterations", 150}}},
                  {"arms", {{{"name", "baseline"}}, {{"name", "full"}, {"acg", {{"attention", true}, {"pruning", true}, {"staging", true}}}}}}});
  io::write_json(w / "dataset.json", {{"count", 50}});
  const std::string q = "'" + cli_path + "'";
  std::vector<std::string> failed;
  int ran = 0;
  auto twice = [&](const std::string& name, const std::function<std::string(const fs::path&)>& cmd,
                   const std::function<fs::path(const fs::path&)>& artifacts) {
    std::string h[2];
    for (int k = 0; k < 2; ++k) {
      const fs::path out = w / (name + "-" + std::to_string(k));
      if (run(cmd(out)) != 0) {
        failed.push_back(name + " (exit)");
        return;
      }
      h[k] = tree_hash(artifacts(out));
    }
    ++ran;
    if (h[0] != h[1]) failed.push_back(name);
  };
  auto same = [](const fs::path& p) { return p; };
  const std::string wd = "'" + w.string() + "'";
  twice("fokker-planck", [&](const fs::path& o) { return q + " fokker-planck --out '" + o.string() + "' --plots"; }, same);
  twice("scene-render", [&](const fs::path& o) { return q + " scene render --azimuth 150 --out '" + o.string() + "'"; }, same);
  twice("scene-dataset",
        [&](const fs::path& o) { return q + " scene dataset --config " + wd + "/dataset.json --begin 10 --end 40 --out '" + o.string() + "'"; },
        same);
  twice("train", [&](const fs::path& o) { return q + " train --config " + wd + "/train.json --out '" + o.string() + "' --plots"; }, same);
  const std::string model = "'" + (w / "train-0" / "model").string() + "'";
  twice("distill",
        [&](const fs::path& o) {
          return q + " distill --model " + model + " --config " + wd + "/distill.json --arm full --seed 9 --out '" + o.string() + "' --plots";
        },
        same);
  // evaluate writes into its run directory; evaluate each distill copy
  twice("evaluate",
        [&](const fs::path& o) {
          fs::remove_all(o);
          fs::copy(w / "distill-0", o, fs::copy_options::recursive);
          fs::remove_all(o / "eval");
          return q + " evaluate '" + o.string() + "'";
        },
        [](const fs::path& o) { return o / "eval"; });
  twice("ablate",
        [&](const fs::path& o) {
          return q + " ablate --grid " + wd + "/grid.json --seeds 4,5,6 --model " + model + " --out '" + o.string() + "' --plots";
        },
        same);
  twice("plots",
        [&](const fs::path& o) {
          fs::remove_all(o);
          fs::copy(w / "distill-0", o, fs::copy_options::recursive);
          return q + " plots '" + o.string() + "'";
        },
        same);
  std::string detail = std::to_string(ran) + " entry points rerun";
  for (const auto& f : failed) detail += "; differs: " + f;
  report(11, "reruns are byte-identical", failed.empty() && ran == 8, detail);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string cli_path, work = "acceptance_work";
  app.add_option("--cli", cli_path, "path to the janus executable")->required()->check(CLI::ExistingFile);
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);
  const fs::path w = fs::absolute(work);
  fs::create_directories(w);

  try {
    criterion_1();
    criterion_2();
    criterion_3();
    criterion_5();
    criterion_6();

    Clock c;
    const auto train = cli::run_train(cli::TrainRunConfig{}, w / "train");
    const double train_seconds = c.seconds();
    const auto metrics = io::read_json(w / "train" / "metrics.json");
    const auto model = diffusion::Denoiser::load(w / "train" / "model");
    criterion_4(model);
    criterion_7(metrics, train_seconds);
    criterion_8(metrics);
    criteria_9_10(w / "train" / "model", w);
    criterion_11(fs::absolute(cli_path).string(), w);
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }

  std::sort(lines.begin(), lines.end(), [](const Line& a, const Line& b) { return a.id < b.id; });
  int failed = 0;
  std::printf("\nsummary\n");
  for (const auto& l : lines) {
    std::printf("  %2d %s %s\n", l.id, l.passed ? "PASS" : "FAIL", l.title.c_str());
    failed += !l.passed;
  }
  std::printf("%d of %zu criteria pass\n", static_cast<int>(lines.size()) - failed, lines.size());
  return failed == 0 ? 0 : 1;
}

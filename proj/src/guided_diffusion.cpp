#include "janus/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace janus::diffusion {

namespace {

using RMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RMap = Eigen::Map<RMat>;
using CRMap = Eigen::Map<const RMat>;

void softmax_rows(MatrixXd& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double mx = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - mx).exp();
    s.row(r) /= s.row(r).sum();
  }
}

VectorXd time_features(int t, int f) {
  VectorXd s(f);
  const int half = f / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    s[2 * i] = std::sin(t * freq);
    s[2 * i + 1] = std::cos(t * freq);
  }
  return s;
}

void fisher_yates(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(v[i - 1], v[std::min(j, i - 1)]);
  }
}

std::span<const double> view(const VectorXd& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

int draw_step(Rng& rng, int n) { return 1 + std::min(n - 1, static_cast<int>(uniform01(rng) * n)); }

std::vector<double> draw_normal(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = standard_normal(rng);
  return v;
}

}  // namespace

DiscreteSchedule DiscreteSchedule::from_sde(const density::SdeSchedule& sde, int steps) {
  sde.validate();
  if (steps < 2) throw ConfigError("discrete schedule needs at least 2 steps");
  DiscreteSchedule d;
  d.sde = sde;
  d.steps = steps;
  double abar = 1.0;
  for (int i = 1; i <= steps; ++i) {
    const double t = sde.horizon * (i - 1) / (steps - 1);
    const double b = sde.beta(t) * sde.horizon / steps;
    if (!(b < 1.0)) throw ConfigError("schedule step beta must stay below 1; raise the step count");
    abar *= 1.0 - b;
    d.betas.push_back(b);
    d.alpha_bars.push_back(abar);
  }
  return d;
}

int DiscreteSchedule::index(double fraction) const {
  return std::clamp(static_cast<int>(std::lround(fraction * steps)), 1, steps);
}

double AttentionMap::row_sum_error() const {
  double e = 0.0;
  for (Eigen::Index r = 0; r < values.rows(); ++r) e = std::max(e, std::abs(values.row(r).sum() - 1.0));
  return e;
}

AttentionMap attention_map(const MatrixXd& queries, const MatrixXd& keys) {
  if (queries.cols() != keys.cols()) throw ContractError("queries and keys differ in width");
  AttentionMap m;
  m.values = queries * keys.transpose() / std::sqrt(static_cast<double>(queries.cols()));
  softmax_rows(m.values);
  return m;
}

void ControlSpec::validate() const {
  for (double l : lambda)
    if (!std::isfinite(l) || l < -1.0) throw ConfigError("control coefficients must be finite and >= -1");
}

ControlSpec ControlSpec::for_prompt_length(std::size_t tokens, double side_factor, double back_factor) {
  ControlSpec c;
  c.lambda = {0.0, side_factor * static_cast<double>(tokens), back_factor * static_cast<double>(tokens)};
  return c;
}

ControlResult control_attention(const AttentionMap& m, const TokenSequence& seq, const ControlSpec& spec,
                                Sector sector) {
  if (static_cast<Eigen::Index>(seq.size()) != m.tokens()) throw ContractError("prompt length does not match map");
  spec.validate();
  ControlResult r{m, false};
  const auto vp = seq.viewpoint_index();
  if (!vp) return r;
  r.map.values.col(static_cast<Eigen::Index>(*vp)) *= 1.0 + spec.for_sector(sector);
  r.controlled = true;
  return r;
}

void DenoiserConfig::validate() const {
  if (width <= 0 || blocks <= 0 || prototypes <= 0 || time_features <= 0 || time_features % 2 != 0 ||
      image_columns <= 0 || patch <= 0 || descriptors < 0)
    throw ConfigError("invalid denoiser configuration");
  if (!(initial_spread > 0.0) || !(spread_floor >= 0.0)) throw ConfigError("spreads must be positive");
}

// ---------------------------------------------------------------------------

struct Denoiser::Cache {
  RMat x;         // N x P
  VectorXd tf;    // time features
  MatrixXd e;     // T x d token matrix
  std::vector<MatrixXd> h_in, q, k, v, m, mc, a;
  VectorXd scale;  // per-token control factor
  MatrixXd h_out;
  VectorXd z, pi, x0hat, resid, dist, mubar;
  double abar = 0.0, gain = 0.0, var = 0.0, spread = 0.0;
};

void Denoiser::build_layout() {
  const int d = cfg_.width, N = cfg_.image_columns, P = cfg_.patch, K = cfg_.prototypes;
  layout_.clear();
  std::size_t off = 0;
  auto add = [&](std::string name, int r, int c) {
    layout_.push_back({std::move(name), off, r, c});
    off += static_cast<std::size_t>(r) * c;
  };
  add("embed.w_in", P, d);
  add("embed.b_in", 1, d);
  add("embed.pos", N, d);
  add("embed.w_t", cfg_.time_features, d);
  add("embed.b_t", 1, d);
  add("tokens", Vocabulary::kFirstDescriptor, d);
  for (int b = 0; b < cfg_.blocks; ++b)
    for (const char* w : {"wq", "wk", "wv", "wo"}) add("block" + std::to_string(b) + "." + w, d, d);
  add("head.bias", 1, K);
  add("head.u", K, d);
  add("head.proto", K, cfg_.image_size());
  add("head.gain", 1, 1);
  add("head.log_spread", 1, 1);
  add("head.spread_t", cfg_.time_features, 1);
  params_.assign(off, 0.0);
}

const ParamSlot& Denoiser::slot(const std::string& name) const {
  for (const auto& s : layout_)
    if (s.name == name) return s;
  throw ContractError("no parameter named " + name);
}

Denoiser::Denoiser(const DenoiserConfig& cfg, const DiscreteSchedule& sched, std::uint64_t seed,
                   const std::vector<std::vector<double>>& prototypes)
    : cfg_(cfg), sched_(sched), vocab_{cfg.descriptors} {
  cfg_.validate();
  if (static_cast<int>(prototypes.size()) != cfg_.prototypes) throw ContractError("wrong number of prototypes");
  build_layout();
  Rng rng(derive_seed(seed, "denoiser-init"));
  auto fill = [&](const std::string& name, double scale) {
    const auto& s = slot(name);
    for (std::size_t i = 0; i < s.size(); ++i) params_[s.offset + i] = scale * standard_normal(rng);
  };
  const double d = cfg_.width;
  fill("embed.w_in", 1.0 / std::sqrt(static_cast<double>(cfg_.patch)));
  fill("embed.pos", 0.1);
  fill("embed.w_t", 1.0 / std::sqrt(static_cast<double>(cfg_.time_features)));
  fill("tokens", 1.0);
  for (int b = 0; b < cfg_.blocks; ++b)
    for (const char* w : {"wq", "wk", "wv", "wo"}) fill("block" + std::to_string(b) + "." + w, 1.0 / std::sqrt(d));
  const auto& pr = slot("head.proto");
  for (int k = 0; k < cfg_.prototypes; ++k) {
    if (static_cast<int>(prototypes[k].size()) != cfg_.image_size()) throw ContractError("prototype has wrong size");
    std::copy(prototypes[k].begin(), prototypes[k].end(), params_.begin() + static_cast<std::ptrdiff_t>(pr.offset + k * pr.cols));
  }
  params_[slot("head.log_spread").offset] = std::log(cfg_.initial_spread);
  offsets_.resize(cfg_.descriptors, cfg_.width);
  for (Eigen::Index i = 0; i < offsets_.size(); ++i) offsets_.data()[i] = cfg_.descriptor_offset * standard_normal(rng);
}

MatrixXd Denoiser::token_matrix(const TokenSequence& seq) const {
  seq.validate(vocab_);
  const auto& ts = slot("tokens");
  CRMap table(params_.data() + ts.offset, ts.rows, ts.cols);
  MatrixXd e(static_cast<Eigen::Index>(seq.size()), cfg_.width);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const int id = seq.ids[i];
    const auto r = static_cast<Eigen::Index>(i);
    if (seq.roles[i] == TokenRole::descriptor)
      e.row(r) = table.row(Vocabulary::kObject) + offsets_.row(id - Vocabulary::kFirstDescriptor);
    else
      e.row(r) = table.row(id);
  }
  return e;
}

void Denoiser::forward(std::span<const double> x_t, int t, const TokenSequence& seq, const Control* control,
                       const AttentionHook& hook, Cache* c, VectorXd& eps) const {
  const int N = cfg_.image_columns, P = cfg_.patch, d = cfg_.width;
  if (static_cast<int>(x_t.size()) != cfg_.image_size()) throw ContractError("image size does not match the model");
  if (t < 1 || t > sched_.steps) throw RangeError("timestep out of range");
  auto M = [&](const std::string& n) {
    const auto& s = slot(n);
    return CRMap(params_.data() + s.offset, s.rows, s.cols);
  };
  Cache local;
  Cache& k = c ? *c : local;
  k.x = CRMap(x_t.data(), N, P);
  k.tf = time_features(t, cfg_.time_features);
  const Eigen::RowVectorXd tau = k.tf.transpose() * M("embed.w_t") + M("embed.b_t");
  MatrixXd h = k.x * M("embed.w_in") + M("embed.pos");
  h.rowwise() += M("embed.b_in").row(0) + tau;
  k.e = token_matrix(seq);
  const auto T = static_cast<Eigen::Index>(seq.size());
  k.scale = VectorXd::Ones(T);
  if (control && control->active(t)) {
    control->spec.validate();
    if (const auto vp = seq.viewpoint_index())
      k.scale[static_cast<Eigen::Index>(*vp)] = 1.0 + control->spec.for_sector(control->sector);
  }
  const double rs = 1.0 / std::sqrt(static_cast<double>(d));
  k.h_in.clear(), k.q.clear(), k.k.clear(), k.v.clear(), k.m.clear(), k.mc.clear(), k.a.clear();
  for (int b = 0; b < cfg_.blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    MatrixXd q = h * M(p + "wq");
    MatrixXd kk = k.e * M(p + "wk");
    MatrixXd v = k.e * M(p + "wv");
    MatrixXd m = q * kk.transpose() * rs;
    softmax_rows(m);
    MatrixXd mc = m * k.scale.asDiagonal();
    if (hook) hook(b, mc);
    MatrixXd a = mc * v;
    k.h_in.push_back(h);
    h += a * M(p + "wo");
    k.q.push_back(std::move(q)), k.k.push_back(std::move(kk)), k.v.push_back(std::move(v));
    k.m.push_back(std::move(m)), k.mc.push_back(std::move(mc)), k.a.push_back(std::move(a));
  }
  k.h_out = h;
  k.z = h.colwise().mean().transpose();

  // Each prototype is an isotropic Gaussian with variance q(t); x_t then has
  // variance v = abar q + 1 - abar around sqrt(abar) mu_k.
  const auto protos = M("head.proto");
  const double abar = sched_.alpha_bar(t), sa = std::sqrt(abar), s1 = std::sqrt(1.0 - abar);
  const double q = cfg_.spread_floor + std::exp(M("head.log_spread")(0, 0) + k.tf.dot(M("head.spread_t").col(0)));
  const double v = abar * q + 1.0 - abar;
  const Eigen::Map<const VectorXd> x(x_t.data(), cfg_.image_size());
  VectorXd logits = M("head.bias").row(0).transpose() + M("head.u") * k.z;
  k.dist = ((protos * sa).rowwise() - x.transpose()).rowwise().squaredNorm();
  logits -= k.dist / (2.0 * v);
  const double mx = logits.maxCoeff();
  k.pi = (logits.array() - mx).exp();
  k.pi /= k.pi.sum();
  k.mubar = protos.transpose() * k.pi;
  k.x0hat = (1.0 - abar * q / v) * k.mubar + (sa * q / v) * x;
  k.resid = (x - sa * k.x0hat) / s1;
  k.abar = abar;
  k.spread = q;
  k.var = v;
  k.gain = M("head.gain")(0, 0);
  eps = k.gain * k.resid;
}

VectorXd Denoiser::denoise(std::span<const double> x_t, int t, const TokenSequence& seq, const Control* control,
                           const AttentionHook& hook) const {
  for (double v : x_t)
    if (!std::isfinite(v)) throw ContractError("noisy image must be finite");
  VectorXd eps;
  forward(x_t, t, seq, control, hook, nullptr, eps);
  return eps;
}

double Denoiser::loss_and_gradient(std::span<const double> x0, std::span<const double> eps, int t,
                                   const TokenSequence& seq, std::vector<double>& grad) const {
  if (grad.size() != params_.size()) throw ContractError("gradient buffer has wrong size");
  const VectorXd xt = noisy_image(sched_, x0, eps, t);
  Cache c;
  VectorXd eh;
  forward(view(xt), t, seq, nullptr, {}, &c, eh);
  const Eigen::Map<const VectorXd> e(eps.data(), static_cast<Eigen::Index>(eps.size()));
  const VectorXd r = eh - e;
  const double loss = r.squaredNorm();

  auto G = [&](const std::string& n) {
    const auto& s = slot(n);
    return RMap(grad.data() + s.offset, s.rows, s.cols);
  };
  auto M = [&](const std::string& n) {
    const auto& s = slot(n);
    return CRMap(params_.data() + s.offset, s.rows, s.cols);
  };
  const int N = cfg_.image_columns;
  const double abar = c.abar, sa = std::sqrt(abar), s1 = std::sqrt(1.0 - abar);

  // head
  const VectorXd deh = 2.0 * r;
  G("head.gain")(0, 0) += deh.dot(c.resid);
  const VectorXd dx0 = -c.gain * sa / s1 * deh;
  const double q = c.spread, v = c.var, kappa = abar * q / v;
  const auto protos = M("head.proto");
  auto gproto = G("head.proto");
  gproto.noalias() += (1.0 - kappa) * c.pi * dx0.transpose();
  const VectorXd dpi = (1.0 - kappa) * (protos * dx0);
  const VectorXd dl = c.pi.array() * (dpi.array() - c.pi.dot(dpi));
  G("head.bias").row(0) += dl.transpose();
  G("head.u").noalias() += dl * c.z.transpose();
  // d/dmu_k of -|x - sa mu_k|^2 / (2v) = sa (x - sa mu_k) / v
  {
    RMat resid = (-sa * protos).rowwise() + xt.transpose();
    gproto.noalias() += (dl.array() * sa / v).matrix().asDiagonal() * resid;
  }
  {
    const double dkappa = abar * (1.0 - abar) / (v * v), dcoef = sa * (1.0 - abar) / (v * v);
    double dq = dx0.dot(dcoef * xt - dkappa * c.mubar);
    dq += abar / (2.0 * v * v) * dl.dot(c.dist);
    const double learned = q - cfg_.spread_floor;
    G("head.log_spread")(0, 0) += learned * dq;
    G("head.spread_t").col(0) += learned * dq * c.tf;
  }
  const VectorXd dz = M("head.u").transpose() * dl;

  MatrixXd dh = (dz / N).transpose().replicate(N, 1);
  MatrixXd de = MatrixXd::Zero(c.e.rows(), c.e.cols());
  const double rs = 1.0 / std::sqrt(static_cast<double>(cfg_.width));
  for (int b = cfg_.blocks - 1; b >= 0; --b) {
    const std::string p = "block" + std::to_string(b) + ".";
    const MatrixXd da = dh * M(p + "wo").transpose();
    G(p + "wo").noalias() += c.a[b].transpose() * dh;
    const MatrixXd dmc = da * c.v[b].transpose();
    const MatrixXd dv = c.mc[b].transpose() * da;
    const MatrixXd dm = dmc * c.scale.asDiagonal();
    const VectorXd rowdot = (dm.array() * c.m[b].array()).rowwise().sum();
    const MatrixXd ds = c.m[b].array() * (dm.colwise() - rowdot).array();
    const MatrixXd dq = ds * c.k[b] * rs;
    const MatrixXd dk = ds.transpose() * c.q[b] * rs;
    G(p + "wq").noalias() += c.h_in[b].transpose() * dq;
    G(p + "wk").noalias() += c.e.transpose() * dk;
    G(p + "wv").noalias() += c.e.transpose() * dv;
    de.noalias() += dk * M(p + "wk").transpose() + dv * M(p + "wv").transpose();
    dh += dq * M(p + "wq").transpose();
  }
  G("embed.w_in").noalias() += c.x.transpose() * dh;
  const Eigen::RowVectorXd dcol = dh.colwise().sum();
  G("embed.b_in").row(0) += dcol;
  G("embed.pos") += dh;
  G("embed.b_t").row(0) += dcol;
  G("embed.w_t").noalias() += c.tf * dcol;
  auto gt = G("tokens");
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const int row = seq.roles[i] == TokenRole::descriptor ? Vocabulary::kObject : seq.ids[i];
    gt.row(row) += de.row(static_cast<Eigen::Index>(i));
  }
  return loss;
}

void Denoiser::save(const std::filesystem::path& dir, const io::json& extra) const {
  io::write_f64(dir / "params.bin", params_);
  std::vector<double> off(offsets_.size());
  RMap(off.data(), offsets_.rows(), offsets_.cols()) = offsets_;
  io::write_f64(dir / "descriptor_offsets.bin", off);
  io::json m = extra.is_object() ? extra : io::json::object();
  m["kind"] = "denoiser";
  m["config"] = {{"width", cfg_.width},
                 {"blocks", cfg_.blocks},
                 {"prototypes", cfg_.prototypes},
                 {"time_features", cfg_.time_features},
                 {"descriptor_offset", cfg_.descriptor_offset},
                 {"initial_spread", cfg_.initial_spread},
                 {"spread_floor", cfg_.spread_floor},
                 {"image_columns", cfg_.image_columns},
                 {"patch", cfg_.patch},
                 {"descriptors", cfg_.descriptors}};
  m["schedule"] = {{"beta_min", sched_.sde.beta_min},
                   {"beta_max", sched_.sde.beta_max},
                   {"horizon", sched_.sde.horizon},
                   {"steps", sched_.steps}};
  io::json vocab = io::json::array();
  for (int id = 0; id < vocab_.size(); ++id) vocab.push_back(vocab_.name(id));
  m["vocabulary"] = vocab;
  io::json layout = io::json::array();
  for (const auto& s : layout_) layout.push_back({{"name", s.name}, {"offset", s.offset}, {"shape", {s.rows, s.cols}}});
  m["layout"] = layout;
  m["descriptor_offsets_shape"] = {offsets_.rows(), offsets_.cols()};
  m["params_hash"] = io::git_blob_hash_file(dir / "params.bin");
  io::write_json(dir / "manifest.json", m);
}

Denoiser Denoiser::load(const std::filesystem::path& dir) {
  const auto m = io::read_json(dir / "manifest.json");
  Denoiser d;
  const auto& c = m.at("config");
  d.cfg_.width = c.at("width");
  d.cfg_.blocks = c.at("blocks");
  d.cfg_.prototypes = c.at("prototypes");
  d.cfg_.time_features = c.at("time_features");
  d.cfg_.descriptor_offset = c.at("descriptor_offset");
  d.cfg_.initial_spread = c.at("initial_spread");
  d.cfg_.spread_floor = c.value("spread_floor", 0.0);
  d.cfg_.image_columns = c.at("image_columns");
  d.cfg_.patch = c.at("patch");
  d.cfg_.descriptors = c.at("descriptors");
  d.cfg_.validate();
  const auto& s = m.at("schedule");
  density::SdeSchedule sde;
  sde.beta_min = s.at("beta_min");
  sde.beta_max = s.at("beta_max");
  sde.horizon = s.at("horizon");
  d.sched_ = DiscreteSchedule::from_sde(sde, s.at("steps").get<int>());
  d.vocab_ = Vocabulary{d.cfg_.descriptors};
  d.build_layout();
  auto p = io::read_f64(dir / "params.bin");
  if (p.size() != d.params_.size()) throw Error("checkpoint parameter count does not match its manifest");
  d.params_ = std::move(p);
  const auto off = io::read_f64(dir / "descriptor_offsets.bin");
  if (off.size() != static_cast<std::size_t>(d.cfg_.descriptors * d.cfg_.width))
    throw Error("descriptor offsets do not match the manifest");
  d.offsets_ = CRMap(off.data(), d.cfg_.descriptors, d.cfg_.width);
  return d;
}

VectorXd noisy_image(const DiscreteSchedule& sched, std::span<const double> x0, std::span<const double> eps, int t) {
  if (x0.size() != eps.size()) throw ContractError("image and noise differ in size");
  const double ab = sched.alpha_bar(t);
  const auto n = static_cast<Eigen::Index>(x0.size());
  return std::sqrt(ab) * Eigen::Map<const VectorXd>(x0.data(), n) +
         std::sqrt(1.0 - ab) * Eigen::Map<const VectorXd>(eps.data(), n);
}

double heldout_loss(const Denoiser& model, const scene::DatasetConfig& data_cfg, std::size_t count,
                    std::uint64_t seed) {
  scene::DatasetConfig cfg = data_cfg;
  cfg.seed = derive_seed(seed, "heldout-images");
  const auto samples = scene::generate_samples(cfg, 0, count);
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Rng rng(derive_seed(seed, "heldout-noise/" + std::to_string(i)));
    const int t = draw_step(rng, model.schedule().steps);
    const auto eps = draw_normal(rng, samples[i].image.size());
    const VectorXd xt = noisy_image(model.schedule(), samples[i].image.pixels, eps, t);
    const VectorXd eh = model.denoise(view(xt), t, samples[i].caption);
    total += (eh - Eigen::Map<const VectorXd>(eps.data(), static_cast<Eigen::Index>(eps.size()))).squaredNorm();
  }
  return total / static_cast<double>(samples.size());
}

TrainResult train_denoiser(const scene::Dataset& data, const TrainConfig& cfg) {
  if (data.samples.empty()) throw ContractError("training set is empty");
  if (cfg.epochs <= 0 || cfg.batch <= 0 || !(cfg.learning_rate > 0.0) || cfg.attention_decay < 0.0)
    throw ConfigError("invalid training settings");
  DenoiserConfig mc = cfg.model;
  mc.descriptors = data.config.descriptors;
  mc.image_columns = data.samples.front().image.width;
  mc.patch = data.samples.front().image.rows * data.samples.front().image.channels;
  if (static_cast<std::size_t>(mc.prototypes) > data.samples.size()) throw ConfigError("more prototypes than images");

  Rng rng(derive_seed(cfg.seed, "train"));
  std::vector<std::size_t> order(data.samples.size());
  std::iota(order.begin(), order.end(), 0);
  fisher_yates(order, rng);
  std::vector<std::vector<double>> protos;
  for (int k = 0; k < mc.prototypes; ++k) protos.push_back(data.samples[order[static_cast<std::size_t>(k)]].image.pixels);

  TrainResult out;
  out.model = Denoiser(mc, DiscreteSchedule::from_sde(cfg.sde), cfg.seed, protos);
  Denoiser& model = out.model;
  const std::uint64_t hseed = derive_seed(cfg.seed, "heldout");
  out.untrained_heldout = heldout_loss(model, data.config, cfg.heldout, hseed);

  auto& theta = model.parameters();
  std::vector<double> grad(theta.size()), m1(theta.size(), 0.0), m2(theta.size(), 0.0);
  const double b1 = 0.9, b2 = 0.999, eps_adam = 1e-8;
  std::vector<double> decay(theta.size(), 0.0);
  for (const auto& sl : model.layout())
    if (sl.name.ends_with(".wq") || sl.name.ends_with(".wk"))
      std::fill_n(decay.begin() + static_cast<std::ptrdiff_t>(sl.offset), sl.size(), cfg.attention_decay);
  std::size_t step = 0;
  const int steps = model.schedule().steps;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    fisher_yates(order, rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      std::fill(grad.begin(), grad.end(), 0.0);
      double loss = 0.0;
      // timesteps stratified across the batch: one draw per equal-width slice
      const double slices = static_cast<double>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = data.samples[order[i]];
        const double u = (static_cast<double>(i - start) + uniform01(rng)) / slices;
        const int t = 1 + std::min(steps - 1, static_cast<int>(u * steps));
        const auto eps = draw_normal(rng, s.image.size());
        loss += model.loss_and_gradient(s.image.pixels, eps, t, s.caption, grad);
      }
      const double nb = static_cast<double>(end - start);
      loss /= nb;
      ++step;
      if (!std::isfinite(loss)) throw TrainingFailed(step, "loss is not finite");
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
      for (std::size_t j = 0; j < theta.size(); ++j) {
        const double g = grad[j] / nb;
        if (!std::isfinite(g)) throw TrainingFailed(step, "gradient is not finite");
        m1[j] = b1 * m1[j] + (1 - b1) * g;
        m2[j] = b2 * m2[j] + (1 - b2) * g * g;
        theta[j] -= cfg.learning_rate * ((m1[j] / c1) / (std::sqrt(m2[j] / c2) + eps_adam) + decay[j] * theta[j]);
      }
      out.loss_trace.push_back(loss);
    }
  }
  out.trained_heldout = heldout_loss(model, data.config, cfg.heldout, hseed);
  return out;
}

std::vector<double> smooth(std::span<const double> trace, std::size_t window) {
  if (window == 0 || trace.size() < window) return {};
  std::vector<double> out;
  double s = std::accumulate(trace.begin(), trace.begin() + static_cast<std::ptrdiff_t>(window), 0.0);
  out.push_back(s / static_cast<double>(window));
  for (std::size_t i = window; i < trace.size(); ++i) {
    s += trace[i] - trace[i - window];
    out.push_back(s / static_cast<double>(window));
  }
  return out;
}

std::vector<double> ancestral_sample(const Denoiser& model, const TokenSequence& seq, Rng& rng,
                                     const Control* control) {
  const auto& sc = model.schedule();
  const auto n = static_cast<std::size_t>(model.config().image_size());
  VectorXd x = Eigen::Map<const VectorXd>(draw_normal(rng, n).data(), static_cast<Eigen::Index>(n));
  for (int i = sc.steps; i >= 1; --i) {
    const VectorXd eh = model.denoise(view(x), i, seq, control);
    const double b = sc.beta(i), ab = sc.alpha_bar(i);
    x = (x - b / std::sqrt(1.0 - ab) * eh) / std::sqrt(1.0 - b);
    if (i > 1) {
      const double var = (1.0 - sc.alpha_bar(i - 1)) / (1.0 - ab) * b;
      const auto z = draw_normal(rng, n);
      x += std::sqrt(var) * Eigen::Map<const VectorXd>(z.data(), static_cast<Eigen::Index>(n));
    }
  }
  return {x.data(), x.data() + x.size()};
}

std::vector<double> mean_keyword_attention(const Denoiser& model, const scene::Dataset& data,
                                           const std::vector<TokenSequence>& prompts, int calls,
                                           std::uint64_t seed) {
  if (data.samples.empty() || calls <= 0) throw ContractError("need samples and a positive call count");
  std::vector<double> out;
  for (const auto& seq : prompts) {
    const auto vp = seq.viewpoint_index();
    if (!vp) {
      out.push_back(0.0);
      continue;
    }
    const auto col = static_cast<Eigen::Index>(*vp);
    double total = 0.0;
    for (int c = 0; c < calls; ++c) {
      Rng rng(derive_seed(seed, "keyword/" + std::to_string(c)));
      const auto& s = data.samples[static_cast<std::size_t>(uniform01(rng) * static_cast<double>(data.samples.size()))];
      const int t = draw_step(rng, model.schedule().steps);
      const auto eps = draw_normal(rng, s.image.size());
      const VectorXd xt = noisy_image(model.schedule(), s.image.pixels, eps, t);
      double mass = 0.0;
      model.denoise(view(xt), t, seq, nullptr, [&](int, MatrixXd& m) { mass += m.col(col).mean(); });
      total += mass / model.config().blocks;
    }
    out.push_back(total / calls);
  }
  return out;
}

}  // namespace janus::diffusion

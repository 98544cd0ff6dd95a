#include "janus/scene.hpp"

#include <cmath>

#include "janus/persistence.hpp"

namespace janus::scene {

TextureField TextureField::zeros(int A, int H, int C) {
  TextureField t;
  t.azimuth_bins = A;
  t.height_bins = H;
  t.channels = C;
  t.values.assign(static_cast<std::size_t>(A) * H * C, 0.0);
  return t;
}

bool TextureField::all_finite() const {
  for (double v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

double RenderedView::channel_energy(int c) const {
  double e = 0.0;
  for (int j = 0; j < width; ++j)
    for (int k = 0; k < rows; ++k) e += at(j, k, c) * at(j, k, c);
  return e;
}

Sector classify_sector(const Viewpoint& v, const SectorSpec& spec) {
  const double a = wrap_degrees(v.azimuth);
  if (a >= -spec.front_half && a < spec.front_half) return Sector::front;
  if ((a >= -spec.side_outer && a < -spec.front_half) || (a >= spec.front_half && a < spec.side_outer))
    return Sector::side;
  return Sector::back;
}

Renderer::Renderer(RenderConfig cfg, int azimuth_bins, int height_bins, int channels)
    : cfg_(cfg), bins_(azimuth_bins), rows_(height_bins), channels_(channels) {
  if (cfg_.width <= 0 || cfg_.width > bins_) throw ContractError("render width must satisfy 0 < W <= A");
  if (!(cfg_.half_window > 0.0 && cfg_.half_window <= 180.0)) throw ConfigError("half window must be in (0, 180]");
}

double Renderer::column_offset(int j) const {
  return -cfg_.half_window + j * (2.0 * cfg_.half_window / cfg_.width);
}

double Renderer::falloff(double offset) const { return std::cos(deg2rad(offset * 90.0 / cfg_.half_window)); }

double Renderer::blend_kernel(double delta) const {
  const double bw = 360.0 / bins_;
  const double d = std::abs(delta) / bw;
  if (d >= 1.0) return 0.0;
  return 0.5 * (1.0 + std::cos(kPi * d));
}

Renderer::Tap Renderer::tap(int j, double azimuth) const {
  const double off = column_offset(j);
  const double phi = wrap_degrees(azimuth + off);
  const double bw = 360.0 / bins_;
  const double u = (phi + 180.0) / bw;
  const double fl = std::floor(u);
  const double frac = u - fl;
  const int a0 = static_cast<int>(fl) % bins_;
  const int a1 = (a0 + 1) % bins_;
  const double f = falloff(off);
  return {a0, a1, f * blend_kernel(frac * bw), f * blend_kernel((1.0 - frac) * bw)};
}

void Renderer::check(const TextureField& theta) const {
  if (theta.azimuth_bins != bins_ || theta.height_bins != rows_ || theta.channels != channels_ ||
      theta.size() != static_cast<std::size_t>(texture_size()))
    throw ContractError("texture shape does not match renderer");
}

RenderedView Renderer::render(const TextureField& theta, const Viewpoint& v) const {
  check(theta);
  RenderedView out;
  out.width = cfg_.width;
  out.rows = rows_;
  out.channels = channels_;
  out.azimuth = v.azimuth;
  out.pixels.assign(static_cast<std::size_t>(image_size()), 0.0);
  for (int j = 0; j < cfg_.width; ++j) {
    const Tap tp = tap(j, v.azimuth);
    for (int k = 0; k < rows_; ++k)
      for (int c = 0; c < channels_; ++c)
        out.pixels[out.index(j, k, c)] = tp.w0 * theta.at(tp.a0, k, c) + tp.w1 * theta.at(tp.a1, k, c);
  }
  return out;
}

TextureField Renderer::render_adjoint(std::span<const double> grad_pixels, const Viewpoint& v) const {
  if (grad_pixels.size() != static_cast<std::size_t>(image_size()))
    throw ContractError("pixel gradient has wrong size");
  TextureField g = TextureField::zeros(bins_, rows_, channels_);
  for (int j = 0; j < cfg_.width; ++j) {
    const Tap tp = tap(j, v.azimuth);
    for (int k = 0; k < rows_; ++k)
      for (int c = 0; c < channels_; ++c) {
        const double gp = grad_pixels[(static_cast<std::size_t>(j) * rows_ + k) * channels_ + c];
        g.at(tp.a0, k, c) += tp.w0 * gp;
        g.at(tp.a1, k, c) += tp.w1 * gp;
      }
  }
  return g;
}

Eigen::MatrixXd Renderer::jacobian(const Viewpoint& v) const {
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(image_size(), texture_size());
  const TextureField shape = TextureField::zeros(bins_, rows_, channels_);
  for (int j = 0; j < cfg_.width; ++j) {
    const Tap tp = tap(j, v.azimuth);
    for (int k = 0; k < rows_; ++k)
      for (int c = 0; c < channels_; ++c) {
        const auto row = static_cast<Eigen::Index>((static_cast<std::size_t>(j) * rows_ + k) * channels_ + c);
        J(row, static_cast<Eigen::Index>(shape.index(tp.a0, k, c))) += tp.w0;
        J(row, static_cast<Eigen::Index>(shape.index(tp.a1, k, c))) += tp.w1;
      }
  }
  return J;
}

double feature_bump(double delta_deg, double half_width) {
  const double d = std::abs(wrap_degrees(delta_deg));
  if (d >= half_width) return 0.0;
  const double c = std::cos(kPi * d / (2.0 * half_width));
  return c * c;
}

TextureField make_ground_truth_object(int A, int H, int C) {
  if (C < 3) throw ContractError("ground-truth object needs body, face and tail channels");
  TextureField t = TextureField::zeros(A, H, C);
  for (int a = 0; a < A; ++a) {
    const double ang = t.bin_angle(a);
    const double face = feature_bump(ang - 0.0);
    const double tail = feature_bump(ang - 180.0);
    for (int h = 0; h < H; ++h) {
      t.at(a, h, kBody) = 1.0;
      t.at(a, h, kFace) = face;
      t.at(a, h, kTail) = tail;
    }
  }
  return t;
}

void SectorRatios::validate() const {
  for (double w : weights)
    if (!(w > 0.0) || !std::isfinite(w)) throw ConfigError("sector ratios must be positive");
}

std::array<double, kSectorCount> SectorRatios::probabilities() const {
  validate();
  const double s = weights[0] + weights[1] + weights[2];
  return {weights[0] / s, weights[1] / s, weights[2] / s};
}

Viewpoint sample_in_sector(Rng& rng, Sector s) {
  const double u = uniform01(rng);
  switch (s) {
    case Sector::front: return Viewpoint(-60.0 + 120.0 * u);
    case Sector::side: {
      const double x = 120.0 * u;  // two 60-degree arcs laid end to end
      return Viewpoint(x < 60.0 ? -120.0 + x : 60.0 + (x - 60.0));
    }
    case Sector::back: {
      const double x = 120.0 * u;
      return Viewpoint(x < 60.0 ? -180.0 + x : 120.0 + (x - 60.0));
    }
  }
  return Viewpoint(0.0);
}

Viewpoint sample_viewpoint(Rng& rng, SamplingMode mode, const SectorRatios& ratios) {
  const auto p = mode == SamplingMode::uniform ? std::array<double, 3>{1.0 / 3, 1.0 / 3, 1.0 / 3}
                                               : ratios.probabilities();
  const double u = uniform01(rng);
  Sector s = Sector::back;
  if (u < p[0])
    s = Sector::front;
  else if (u < p[0] + p[1])
    s = Sector::side;
  return sample_in_sector(rng, s);
}

std::array<std::size_t, kSectorCount> Dataset::sector_histogram() const {
  std::array<std::size_t, kSectorCount> h{};
  for (const auto& s : samples) ++h[static_cast<std::size_t>(s.sector)];
  return h;
}

std::vector<Sample> generate_samples(const DatasetConfig& cfg, std::size_t begin, std::size_t end) {
  if (!(cfg.caption_noise >= 0.0 && cfg.caption_noise <= 1.0)) throw ConfigError("caption_noise must lie in [0, 1]");
  cfg.ratios.validate();
  const diffusion::Vocabulary vocab{cfg.descriptors};
  const TextureField object = make_ground_truth_object();
  const Renderer renderer(cfg.render);
  std::vector<Sample> out;
  out.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) {
    Rng rng(derive_seed(cfg.seed, "sample/" + std::to_string(i)));
    const Viewpoint v = sample_viewpoint(rng, SamplingMode::longtail, cfg.ratios);
    Sample s;
    s.sector = classify_sector(v);
    s.image = renderer.render(object, v);
    std::vector<int> ids{diffusion::Vocabulary::kObject};
    if (uniform01(rng) >= cfg.caption_noise) ids.push_back(vocab.viewpoint_token(s.sector));
    s.caption = diffusion::TokenSequence::from_ids(vocab, std::move(ids));
    out.push_back(std::move(s));
  }
  return out;
}

Dataset generate_dataset(const DatasetConfig& cfg) {
  if (cfg.count == 0) throw ConfigError("dataset size must be positive");
  Dataset ds;
  ds.config = cfg;
  ds.samples = generate_samples(cfg, 0, cfg.count);
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::vector<double> images, azimuths;
  std::vector<std::int32_t> captions, sectors;
  for (const auto& s : ds.samples) {
    images.insert(images.end(), s.image.pixels.begin(), s.image.pixels.end());
    azimuths.push_back(s.image.azimuth);
    sectors.push_back(static_cast<std::int32_t>(s.sector));
    for (std::size_t k = 0; k < 2; ++k) captions.push_back(k < s.caption.size() ? s.caption.ids[k] : -1);
  }
  io::write_f64(dir / "images.bin", images);
  io::write_f64(dir / "azimuths.bin", azimuths);
  io::write_i32(dir / "captions.bin", captions);
  io::write_i32(dir / "sectors.bin", sectors);
  const auto& c = ds.config;
  const auto& first = ds.samples.front().image;
  io::json m;
  m["kind"] = "dataset";
  m["count"] = ds.samples.size();
  m["seed"] = c.seed;
  m["ratios"] = c.ratios.weights;
  m["caption_noise"] = c.caption_noise;
  m["descriptors"] = c.descriptors;
  m["render"] = {{"width", c.render.width}, {"half_window", c.render.half_window}};
  m["shapes"] = {{"images", {ds.samples.size(), first.width, first.rows, first.channels}},
                 {"captions", {ds.samples.size(), 2}},
                 {"sectors", {ds.samples.size()}},
                 {"azimuths", {ds.samples.size()}}};
  m["dtype"] = {{"images", "f64le"}, {"captions", "i32le"}, {"sectors", "i32le"}, {"azimuths", "f64le"}};
  io::write_json(dir / "manifest.json", m);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto m = io::read_json(dir / "manifest.json");
  Dataset ds;
  auto& c = ds.config;
  c.count = m.at("count").get<std::size_t>();
  c.seed = m.at("seed").get<std::uint64_t>();
  c.ratios.weights = m.at("ratios").get<std::array<double, 3>>();
  c.caption_noise = m.at("caption_noise").get<double>();
  c.descriptors = m.at("descriptors").get<int>();
  c.render.width = m.at("render").at("width").get<int>();
  c.render.half_window = m.at("render").at("half_window").get<double>();
  const auto shape = m.at("shapes").at("images").get<std::vector<std::size_t>>();
  const auto images = io::read_f64(dir / "images.bin");
  const auto azimuths = io::read_f64(dir / "azimuths.bin");
  const auto captions = io::read_i32(dir / "captions.bin");
  const auto sectors = io::read_i32(dir / "sectors.bin");
  const std::size_t per = shape[1] * shape[2] * shape[3];
  if (images.size() != c.count * per || captions.size() != 2 * c.count || sectors.size() != c.count)
    throw Error("dataset tensors do not match manifest shapes");
  const diffusion::Vocabulary vocab{c.descriptors};
  ds.samples.resize(c.count);
  for (std::size_t i = 0; i < c.count; ++i) {
    auto& s = ds.samples[i];
    s.image.width = static_cast<int>(shape[1]);
    s.image.rows = static_cast<int>(shape[2]);
    s.image.channels = static_cast<int>(shape[3]);
    s.image.azimuth = azimuths[i];
    s.image.pixels.assign(images.begin() + static_cast<std::ptrdiff_t>(i * per),
                          images.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    s.sector = static_cast<Sector>(sectors[i]);
    std::vector<int> ids;
    for (std::size_t k = 0; k < 2; ++k)
      if (captions[2 * i + k] >= 0) ids.push_back(captions[2 * i + k]);
    s.caption = diffusion::TokenSequence::from_ids(vocab, std::move(ids));
  }
  return ds;
}

void save_texture(const TextureField& theta, const std::filesystem::path& file) { io::write_f64(file, theta.values); }

TextureField load_texture(const std::filesystem::path& file, int A, int H, int C) {
  TextureField t = TextureField::zeros(A, H, C);
  auto v = io::read_f64(file);
  if (v.size() != t.size()) throw Error("texture file has wrong size: " + file.string());
  t.values = std::move(v);
  return t;
}

}  // namespace janus::scene

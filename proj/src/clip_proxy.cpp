#include "janus/clip_proxy.hpp"

#include <algorithm>
#include <cmath>

namespace janus::clip {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

ProxyEmbedder::ProxyEmbedder(const scene::Renderer& renderer) {
  const auto gt = scene::make_ground_truth_object();
  auto body = scene::TextureField::zeros();
  for (int a = 0; a < body.azimuth_bins; ++a)
    for (int h = 0; h < body.height_bins; ++h) body.at(a, h, scene::kBody) = 1.0;
  templates_[0] = renderer.render(gt, scene::Viewpoint(0.0)).pixels;
  templates_[1] = renderer.render(body, scene::Viewpoint(90.0)).pixels;
  templates_[2] = renderer.render(gt, scene::Viewpoint(180.0)).pixels;
  // The body-only template matches every view fairly well, so raw cosines
  // favour side. Shift the axes so the ground truth seen exactly at a sector
  // boundary ties the two neighbouring sectors.
  const Embedding c60 = template_cosines(renderer.render(gt, scene::Viewpoint(60.0)).pixels);
  const Embedding c120 = template_cosines(renderer.render(gt, scene::Viewpoint(120.0)).pixels);
  offsets_[1] = c60[1] - c60[0];
  offsets_[2] = c120[2] - (c120[1] - offsets_[1]);
}

Embedding ProxyEmbedder::template_cosines(std::span<const double> pixels) const {
  if (pixels.size() != templates_[0].size()) throw ContractError("image size does not match the embedder");
  Embedding e{};
  const double n = std::sqrt(dot(pixels, pixels));
  if (n == 0.0) return e;
  for (std::size_t s = 0; s < kSectorCount; ++s)
    e[s] = dot(pixels, templates_[s]) / (n * std::sqrt(dot(templates_[s], templates_[s])));
  return e;
}

ImageEmbedding ProxyEmbedder::embed_image(std::span<const double> pixels) const {
  for (double p : pixels)
    if (!std::isfinite(p)) throw ContractError("image must be finite");
  ImageEmbedding out;
  Embedding c = template_cosines(pixels);
  if (c == Embedding{}) {
    out.degenerate = true;
    return out;
  }
  for (std::size_t s = 0; s < kSectorCount; ++s) c[s] -= offsets_[s];
  const double mean = (c[0] + c[1] + c[2]) / 3.0;
  for (std::size_t s = 0; s < kSectorCount; ++s) out.vector[s] = c[s] - mean;
  out.degenerate = out.vector == Embedding{};
  return out;
}

ImageEmbedding ProxyEmbedder::embed_image(const scene::RenderedView& img) const { return embed_image(img.pixels); }

Embedding embed_text(Sector s) {
  Embedding e{};
  e[static_cast<std::size_t>(s)] = 1.0;
  return e;
}

Embedding embed_text(std::string_view sector_phrase) { return embed_text(sector_from_phrase(sector_phrase)); }

double similarity(const Embedding& a, const Embedding& b) {
  const double na = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
  const double nb = std::sqrt(b[0] * b[0] + b[1] * b[1] + b[2] * b[2]);
  if (na == 0.0 || nb == 0.0) throw DegenerateSimilarity("similarity of a zero embedding");
  return std::clamp((a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb), -1.0, 1.0);
}

Sector argmax_sector(const Embedding& e) {
  return static_cast<Sector>(std::max_element(e.begin(), e.end()) - e.begin());
}

io::json PruneState::to_json() const {
  return {{"sigma_min", sigma_min}, {"sigma_mean", sigma_mean}, {"alpha", alpha},
          {"tau", tau},             {"n", collected},           {"calibrated", calibrated}};
}

PruneState calibrate(std::span<const double> sigmas, double alpha) {
  if (sigmas.empty()) throw CalibrationError("no similarities collected");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  // sorted sum so the result does not depend on arrival order
  std::vector<double> s(sigmas.begin(), sigmas.end());
  std::sort(s.begin(), s.end());
  double sum = 0.0;
  for (double x : s) sum += x;
  PruneState st;
  st.sigma_min = s.front();
  st.sigma_mean = std::clamp(sum / static_cast<double>(s.size()), s.front(), s.back());
  st.alpha = alpha;
  st.tau = alpha * st.sigma_min + (1.0 - alpha) * st.sigma_mean;
  st.calibrated = true;
  st.collected = s.size();
  return st;
}

PruneDecision score(const ProxyEmbedder& embedder, std::span<const double> pixels, Sector sector) {
  const auto e = embedder.embed_image(pixels);
  PruneDecision d;
  d.degenerate = e.degenerate;
  if (e.degenerate) return d;
  d.sigma = similarity(e.vector, embed_text(sector));
  d.image_sector = argmax_sector(e.vector);
  return d;
}

PruneDecision should_prune(const ProxyEmbedder& embedder, std::span<const double> pseudo_gt, Sector sector,
                           const PruneState& state) {
  if (!state.calibrated) throw ContractError("prune state is not calibrated");
  PruneDecision d = score(embedder, pseudo_gt, sector);
  d.prune = d.degenerate || d.sigma < state.tau;
  return d;
}

PruneDecision should_prune(const ProxyEmbedder& embedder, const scene::RenderedView& pseudo_gt,
                           std::string_view sector_phrase, const PruneState& state) {
  return should_prune(embedder, pseudo_gt.pixels, sector_from_phrase(sector_phrase), state);
}

}  // namespace janus::clip

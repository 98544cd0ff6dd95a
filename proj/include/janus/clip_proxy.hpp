#pragma once

// Deterministic stand-in for a two-tower image/text embedder, plus the
// similarity-threshold pruning rule used during distillation.
//
// The image tower takes cosines against three rendered templates (the
// canonical object seen from the front, a body-only view, the object seen
// from behind), shifts them so that the sector boundaries are ties, and
// subtracts their mean, so the embedding says which template the image
// resembles most rather than how much body it shows. The text tower
// is the one-hot axis of the named sector.

#include <array>
#include <span>
#include <string_view>
#include <vector>

#include "janus/persistence.hpp"
#include "janus/scene.hpp"

namespace janus::clip {

using Embedding = std::array<double, kSectorCount>;

struct ImageEmbedding {
  Embedding vector{};
  bool degenerate = false;  // zero image or no template preference
};

class ProxyEmbedder {
 public:
  explicit ProxyEmbedder(const scene::Renderer& renderer = scene::Renderer());

  ImageEmbedding embed_image(const scene::RenderedView& img) const;
  ImageEmbedding embed_image(std::span<const double> pixels) const;
  /// Raw template cosines before centering.
  Embedding template_cosines(std::span<const double> pixels) const;
  const std::array<std::vector<double>, kSectorCount>& templates() const { return templates_; }
  /// Per-axis shift subtracted from the template cosines before centering.
  const Embedding& offsets() const { return offsets_; }

 private:
  std::array<std::vector<double>, kSectorCount> templates_;
  Embedding offsets_{};
};

/// One-hot axis for "front view" / "side view" / "back view".
Embedding embed_text(std::string_view sector_phrase);
Embedding embed_text(Sector s);

/// Cosine similarity; throws DegenerateSimilarity when either vector is zero.
double similarity(const Embedding& a, const Embedding& b);

/// Argmax sector of an embedding (ties resolve to the earlier sector).
Sector argmax_sector(const Embedding& e);

struct PruneState {
  double sigma_min = 0.0;
  double sigma_mean = 0.0;
  double alpha = 0.5;
  double tau = 0.0;
  bool calibrated = false;
  std::size_t collected = 0;

  io::json to_json() const;
};

/// tau = alpha * min + (1 - alpha) * mean over the collected similarities.
PruneState calibrate(std::span<const double> sigmas, double alpha);

struct PruneDecision {
  bool prune = false;
  double sigma = 0.0;
  bool degenerate = false;
  Sector image_sector = Sector::front;  // argmax of the pseudo-GT embedding
};

/// Prune iff sigma < tau (strict). A degenerate embedding is always pruned.
PruneDecision should_prune(const ProxyEmbedder& embedder, std::span<const double> pseudo_gt, Sector sector,
                           const PruneState& state);
PruneDecision should_prune(const ProxyEmbedder& embedder, const scene::RenderedView& pseudo_gt,
                           std::string_view sector_phrase, const PruneState& state);

/// Similarity of an image against a sector phrase without a threshold.
/// Degenerate images report sigma = 0 and the flag set.
PruneDecision score(const ProxyEmbedder& embedder, std::span<const double> pixels, Sector sector);

}  // namespace janus::clip

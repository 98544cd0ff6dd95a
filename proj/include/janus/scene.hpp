#pragma once

// The synthetic world: a textured cylinder seen from azimuthal viewpoints.
//
// A TextureField stores A azimuth bins x H height rows x C channels
// (channel 0 body, 1 face, 2 tail). The renderer unwraps the half of the
// cylinder facing the camera into W columns; column j looks at azimuth
// v + offset(j), offset(j) = -hw + j * 2hw / W, blends the two nearest texture
// columns with a raised-cosine kernel and scales by a cosine falloff that
// vanishes at the window edge. Rendering is linear in the texture.

#include <Eigen/Dense>
#include <array>
#include <filesystem>
#include <span>
#include <vector>

#include "janus/common.hpp"
#include "janus/tokens.hpp"

namespace janus::scene {

constexpr int kBody = 0;
constexpr int kFace = 1;
constexpr int kTail = 2;

struct TextureField {
  int azimuth_bins = 36;
  int height_bins = 12;
  int channels = 3;
  std::vector<double> values;  // [a][h][c]

  static TextureField zeros(int A = 36, int H = 12, int C = 3);
  std::size_t size() const { return values.size(); }
  std::size_t index(int a, int h, int c) const {
    return (static_cast<std::size_t>(a) * height_bins + h) * channels + c;
  }
  double& at(int a, int h, int c) { return values[index(a, h, c)]; }
  double at(int a, int h, int c) const { return values[index(a, h, c)]; }
  double bin_width() const { return 360.0 / azimuth_bins; }
  /// Angle of bin a in degrees: -180 + a * 360 / A.
  double bin_angle(int a) const { return -180.0 + a * bin_width(); }
  bool all_finite() const;
  bool operator==(const TextureField&) const = default;
};

struct Viewpoint {
  double azimuth = 0.0;
  Viewpoint() = default;
  explicit Viewpoint(double deg) : azimuth(wrap_degrees(deg)) {}
};

struct RenderedView {
  int width = 18;
  int rows = 12;
  int channels = 3;
  std::vector<double> pixels;  // [j][k][c]; one column is a contiguous patch
  double azimuth = 0.0;

  std::size_t size() const { return pixels.size(); }
  std::size_t index(int j, int k, int c) const {
    return (static_cast<std::size_t>(j) * rows + k) * channels + c;
  }
  double at(int j, int k, int c) const { return pixels[index(j, k, c)]; }
  /// Sum of squares of one channel.
  double channel_energy(int c) const;
  bool operator==(const RenderedView&) const = default;
};

/// Sector boundaries in degrees: front [-60, 60), side [-120, -60) U [60, 120),
/// back [-180, -120) U [120, 180).
struct SectorSpec {
  double front_half = 60.0;
  double side_outer = 120.0;
};

Sector classify_sector(const Viewpoint& v, const SectorSpec& spec = {});

struct RenderConfig {
  int width = 18;
  double half_window = 90.0;
};

class Renderer {
 public:
  explicit Renderer(RenderConfig cfg = {}, int azimuth_bins = 36, int height_bins = 12, int channels = 3);

  const RenderConfig& config() const { return cfg_; }
  int image_size() const { return cfg_.width * rows_ * channels_; }
  int texture_size() const { return bins_ * rows_ * channels_; }
  int rows() const { return rows_; }
  int channels() const { return channels_; }

  /// Column offset from the view azimuth, in degrees.
  double column_offset(int j) const;
  /// Cosine falloff at a window offset: cos(offset * 90 / hw).
  double falloff(double offset) const;
  /// Raised-cosine interpolation weight for a texture column `delta` degrees
  /// away from the sampled azimuth (1 at 0, 0 beyond one bin width).
  double blend_kernel(double delta) const;

  RenderedView render(const TextureField& theta, const Viewpoint& v) const;
  /// J^T g: gradient of <g, render(theta, v)> with respect to theta.
  TextureField render_adjoint(std::span<const double> grad_pixels, const Viewpoint& v) const;
  /// Dense Jacobian d pixels / d theta (image_size x texture_size).
  Eigen::MatrixXd jacobian(const Viewpoint& v) const;

 private:
  struct Tap {
    int a0, a1;
    double w0, w1;  // blend weight times falloff
  };
  Tap tap(int j, double azimuth) const;
  void check(const TextureField& theta) const;

  RenderConfig cfg_;
  int bins_, rows_, channels_;
};

/// The canonical object: body 1 everywhere, face bump cos^2(pi d / 120) for
/// |d| < 60 around azimuth 0, tail bump of the same shape around 180.
TextureField make_ground_truth_object(int A = 36, int H = 12, int C = 3);
/// Smooth bump used for face and tail: cos^2(pi * d / (2 * half_width)) inside.
double feature_bump(double delta_deg, double half_width = 60.0);

enum class SamplingMode { uniform, longtail };

struct SectorRatios {
  std::array<double, kSectorCount> weights{2.0, 1.0, 1.0};
  void validate() const;
  std::array<double, kSectorCount> probabilities() const;
};

/// Draws a sector (uniform: 1/3 each; longtail: proportional to ratios), then
/// an azimuth uniformly within it.
Viewpoint sample_viewpoint(Rng& rng, SamplingMode mode, const SectorRatios& ratios = {});
Viewpoint sample_in_sector(Rng& rng, Sector s);

struct DatasetConfig {
  std::size_t count = 4000;
  SectorRatios ratios{};
  double caption_noise = 0.3;
  std::uint64_t seed = 7;
  int descriptors = 8;
  RenderConfig render{};
};

struct Sample {
  RenderedView image;
  diffusion::TokenSequence caption;
  Sector sector = Sector::front;
};

struct Dataset {
  DatasetConfig config;
  std::vector<Sample> samples;

  std::array<std::size_t, kSectorCount> sector_histogram() const;
};

/// Sample i is drawn from its own stream derive_seed(seed, i), so any index
/// range can be generated independently and concatenated.
Dataset generate_dataset(const DatasetConfig& cfg);
std::vector<Sample> generate_samples(const DatasetConfig& cfg, std::size_t begin, std::size_t end);

/// images.bin (f64, count x W x K x C), captions.bin (i32, count x 2, -1 padded),
/// sectors.bin (i32), azimuths.bin (f64), manifest.json.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

void save_texture(const TextureField& theta, const std::filesystem::path& file);
TextureField load_texture(const std::filesystem::path& file, int A = 36, int H = 12, int C = 3);

}  // namespace janus::scene

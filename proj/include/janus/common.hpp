#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace janus {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Argument outside its documented domain (times, angles, probabilities).
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Caller broke a precondition (shapes, uncalibrated state, filled slot).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class SolverDiverged : public Error {
 public:
  SolverDiverged(std::size_t step, const std::string& what)
      : Error("solver diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class TrainingFailed : public Error {
 public:
  TrainingFailed(std::size_t step, const std::string& what)
      : Error("training failed at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class StepFailed : public Error {
 public:
  StepFailed(std::size_t iteration, const std::string& what)
      : Error("distillation step " + std::to_string(iteration) + " failed: " + what),
        iteration_(iteration) {}
  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::size_t iteration_;
};

class CalibrationError : public Error {
 public:
  using Error::Error;
};

class VocabularyError : public Error {
 public:
  using Error::Error;
};

class DegenerateSimilarity : public Error {
 public:
  using Error::Error;
};

class MissingArtifact : public Error {
 public:
  explicit MissingArtifact(const std::string& path)
      : Error("missing artifact: " + path), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

using Rng = std::mt19937_64;

/// Derives an independent stream seed from a parent seed and a label.
/// Used so that sharded or nested work stays reproducible.
std::uint64_t derive_seed(std::uint64_t parent, std::string_view label);

/// Standard normal draw. Box-Muller over 53-bit uniforms so that streams are
/// identical across standard library implementations.
double standard_normal(Rng& rng);

/// Uniform double in [0, 1) from the top 53 bits of one engine draw.
double uniform01(Rng& rng);

/// Wraps an angle in degrees into [-180, 180).
double wrap_degrees(double deg);

constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double d) { return d * kPi / 180.0; }

}  // namespace janus

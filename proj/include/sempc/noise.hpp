#pragma once

#include <sempc/core.hpp>

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace sempc {

/// Counter-based seed derivation: run i of a batch with base seed b always
/// gets the same, well-mixed stream regardless of scheduling.
inline std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  return splitmix64(splitmix64(base) ^ (index * 0xD1B54A32D192ED03ULL + 1));
}

using Rng = std::mt19937_64;

/// Additive sub-Gaussian disturbance w_t.
///
/// `variance_proxy()` returns the sigma certifying w ~ subG(sigma^2):
///  - gaussian: componentwise N(0, sigma^2), proxy sigma;
///  - uniform_ball: uniform in the radius-R ball, proxy R;
///  - bounded_sphere: uniform on the radius-R sphere (zero mean, bounded), proxy R;
///  - zero: deterministic, proxy 0.
class NoiseModel {
 public:
  enum class Kind { zero, gaussian, uniform_ball, bounded_sphere };

  NoiseModel() = default;

  static NoiseModel zero() { return {}; }
  static NoiseModel gaussian(double sigma) { return {Kind::gaussian, sigma}; }
  static NoiseModel uniform_ball(double radius) { return {Kind::uniform_ball, radius}; }
  static NoiseModel bounded_sphere(double radius) { return {Kind::bounded_sphere, radius}; }

  [[nodiscard]] Kind kind() const { return kind_; }
  [[nodiscard]] double scale() const { return scale_; }
  [[nodiscard]] double variance_proxy() const { return kind_ == Kind::zero ? 0.0 : scale_; }

  [[nodiscard]] static std::string kind_name(Kind k) {
    switch (k) {
      case Kind::zero: return "zero";
      case Kind::gaussian: return "gaussian";
      case Kind::uniform_ball: return "uniform_ball";
      case Kind::bounded_sphere: return "bounded_sphere";
    }
    return "unknown";
  }

 private:
  NoiseModel(Kind k, double scale) : kind_(k), scale_(scale) {
    require(std::isfinite(scale) && scale >= 0.0, "noise scale must be finite and >= 0");
  }

  Kind kind_ = Kind::zero;
  double scale_ = 0.0;
};

inline Vector sample_noise(const NoiseModel& model, int dim, Rng& rng) {
  require(dim >= 1, "sample_noise: dim must be >= 1");
  Vector w = Vector::Zero(dim);
  if (model.kind() == NoiseModel::Kind::zero || model.scale() == 0.0) return w;
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int i = 0; i < dim; ++i) w[i] = gauss(rng);
  switch (model.kind()) {
    case NoiseModel::Kind::gaussian:
      w *= model.scale();
      break;
    case NoiseModel::Kind::uniform_ball: {
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      const double r = model.scale() * std::pow(unit(rng), 1.0 / dim);
      w *= r / w.norm();
      break;
    }
    case NoiseModel::Kind::bounded_sphere:
      w *= model.scale() / w.norm();
      break;
    case NoiseModel::Kind::zero:
      break;
  }
  return w;
}

}  // namespace sempc

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>

namespace sempc {

template <typename Scalar>
using VectorT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Vector = VectorT<double>;
using Matrix = MatrixT<double>;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a record violates its documented invariants.
class InvalidParameter : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Input outside the plant's input set. The plant layer never clamps.
class InputSetError : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidParameter(what);
}

// ---------------------------------------------------------------------------
// Axis-aligned box
// ---------------------------------------------------------------------------

struct Box {
  Vector lower;
  Vector upper;

  Box() = default;
  Box(Vector lo, Vector hi) : lower(std::move(lo)), upper(std::move(hi)) {}

  static Box symmetric(Eigen::Index dim, double half_width) {
    return {Vector::Constant(dim, -half_width), Vector::Constant(dim, half_width)};
  }

  [[nodiscard]] Eigen::Index dim() const { return lower.size(); }

  [[nodiscard]] bool valid() const {
    if (lower.size() != upper.size() || lower.size() == 0) return false;
    for (Eigen::Index i = 0; i < lower.size(); ++i) {
      if (!std::isfinite(lower[i]) || !std::isfinite(upper[i]) || lower[i] > upper[i]) return false;
    }
    return true;
  }

  [[nodiscard]] bool has_volume() const { return valid() && ((upper - lower).array() > 0.0).all(); }

  template <typename Scalar>
  [[nodiscard]] bool contains(const VectorT<Scalar>& v) const {
    if (v.size() != lower.size()) return false;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      if (v[i] < Scalar(lower[i]) || v[i] > Scalar(upper[i])) return false;
    }
    return true;
  }

  [[nodiscard]] Vector clamp(const Vector& v) const { return v.cwiseMax(lower).cwiseMin(upper); }
};

// Wraps an angle to (-pi, pi].
inline double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double w = std::remainder(a, two_pi);
  if (w <= -std::numbers::pi) w += two_pi;
  return w;
}

}  // namespace sempc

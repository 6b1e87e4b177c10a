#pragma once

// Exact rational arithmetic for the deviation experiment. Needs GMP at link time.

#include <sempc/core.hpp>
#include <sempc/sim.hpp>
#include <sempc/systems.hpp>

#include <boost/multiprecision/gmp.hpp>

#include <vector>

namespace sempc {

using Rational = boost::multiprecision::mpq_rational;
using RationalVector = VectorT<Rational>;
using RationalMatrix = MatrixT<Rational>;

/// Every finite double is a dyadic rational, so this conversion is exact.
inline RationalVector to_rational(const Vector& v) {
  RationalVector out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) out[i] = Rational(v[i]);
  return out;
}

inline RationalMatrix to_rational(const Matrix& m) {
  RationalMatrix out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out(i, j) = Rational(m(i, j));
  return out;
}

/// Nearest double, used when handing rational states to a double controller.
inline Vector to_double(const RationalVector& v) {
  Vector out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) out[i] = v[i].convert_to<double>();
  return out;
}

/// Wraps a double feedback law for a rational rollout: states are rounded to
/// double for the controller and the chosen input is lifted back exactly.
inline FeedbackT<Rational> lift_feedback(Feedback inner) {
  return [inner = std::move(inner)](int t, const RationalVector& X, const RationalVector& x) {
    return to_rational(inner(t, to_double(X), to_double(x)));
  };
}

/// e_{t+1} = A e_t + w_t from e_0 = 0, in exact arithmetic.
inline std::vector<RationalVector> autonomous_deviation(const RationalMatrix& a, const std::vector<Vector>& noises) {
  std::vector<RationalVector> e;
  e.reserve(noises.size() + 1);
  e.push_back(RationalVector::Zero(a.rows()));
  for (const auto& w : noises) e.push_back(RationalVector(a * e.back() + to_rational(w)));
  return e;
}

}  // namespace sempc

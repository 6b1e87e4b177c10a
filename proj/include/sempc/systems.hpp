#pragma once

#include <sempc/core.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>

namespace sempc {

/// Discrete-time plant x+ = f(x, u).
///
/// The transition never includes the disturbance; additive noise is applied by
/// the simulation layer. `Scalar` is `double` for everything except exact
/// deviation experiments on linear plants, which run in rational arithmetic.
template <typename Scalar = double>
class BasicPlant {
 public:
  using State = VectorT<Scalar>;
  using Input = VectorT<Scalar>;
  using Transition = std::function<State(const State&, const Input&)>;
  /// a - b in state coordinates (wraps angles where the plant has them).
  using Difference = std::function<State(const State&, const State&)>;
  struct Jacobians {
    MatrixT<Scalar> state;  // df/dx
    MatrixT<Scalar> input;  // df/du
  };
  using JacobianFn = std::function<Jacobians(const State&, const Input&)>;

  BasicPlant(std::string name, int state_dim, int input_dim, Transition transition, Box input_set,
             double lipschitz, bool lipschitz_certified)
      : name_(std::move(name)),
        state_dim_(state_dim),
        input_dim_(input_dim),
        transition_(std::move(transition)),
        input_set_(std::move(input_set)),
        lipschitz_(lipschitz),
        lipschitz_certified_(lipschitz_certified) {
    require(state_dim_ > 0, "plant state_dim must be positive");
    require(input_dim_ > 0, "plant input_dim must be positive");
    require(static_cast<bool>(transition_), "plant transition must be set");
    require(input_set_.valid() && input_set_.dim() == input_dim_,
            "plant input_set must be a nonempty bounded box of dimension input_dim");
    require(std::isfinite(lipschitz_) && lipschitz_ >= 0.0, "plant lipschitz must be >= 0");
  }

  [[nodiscard]] const std::string& name() const { return name_; }
  [[nodiscard]] int state_dim() const { return state_dim_; }
  [[nodiscard]] int input_dim() const { return input_dim_; }
  [[nodiscard]] const Box& input_set() const { return input_set_; }
  [[nodiscard]] double lipschitz() const { return lipschitz_; }
  [[nodiscard]] bool lipschitz_certified() const { return lipschitz_certified_; }

  BasicPlant& with_difference(Difference d) {
    difference_ = std::move(d);
    return *this;
  }
  BasicPlant& with_jacobian(JacobianFn j) {
    jacobian_ = std::move(j);
    return *this;
  }
  BasicPlant& with_lipschitz(double value, bool certified) {
    require(std::isfinite(value) && value >= 0.0, "plant lipschitz must be >= 0");
    lipschitz_ = value;
    lipschitz_certified_ = certified;
    return *this;
  }

  /// Raw evaluation without input-set checks; used by the optimizer on
  /// already-projected inputs and by finite differencing.
  [[nodiscard]] State evaluate(const State& x, const Input& u) const { return transition_(x, u); }

  [[nodiscard]] State difference(const State& a, const State& b) const {
    return difference_ ? difference_(a, b) : State(a - b);
  }

  [[nodiscard]] bool has_jacobian() const { return static_cast<bool>(jacobian_); }
  [[nodiscard]] Jacobians jacobian(const State& x, const Input& u) const { return jacobian_(x, u); }

 private:
  std::string name_;
  int state_dim_;
  int input_dim_;
  Transition transition_;
  Box input_set_;
  double lipschitz_;
  bool lipschitz_certified_;
  Difference difference_;
  JacobianFn jacobian_;
};

using Plant = BasicPlant<double>;

/// f(x, u) with dimension and input-set checks.
template <typename Scalar>
typename BasicPlant<Scalar>::State step_nominal(const BasicPlant<Scalar>& plant,
                                                const VectorT<Scalar>& state,
                                                const VectorT<Scalar>& input) {
  if (state.size() != plant.state_dim()) {
    throw DimensionError("step_nominal: state has dimension " + std::to_string(state.size()) +
                         ", plant '" + plant.name() + "' expects " + std::to_string(plant.state_dim()));
  }
  if (input.size() != plant.input_dim()) {
    throw DimensionError("step_nominal: input has dimension " + std::to_string(input.size()) +
                         ", plant '" + plant.name() + "' expects " + std::to_string(plant.input_dim()));
  }
  if (!plant.input_set().contains(input)) {
    throw InputSetError("step_nominal: input outside the input set of plant '" + plant.name() + "'");
  }
  auto next = plant.evaluate(state, input);
  if (next.size() != plant.state_dim()) {
    throw DimensionError("step_nominal: transition of plant '" + plant.name() +
                         "' returned a state of the wrong dimension");
  }
  return next;
}

// ---------------------------------------------------------------------------
// Linear plants
// ---------------------------------------------------------------------------

/// Largest singular value, i.e. the Euclidean Lipschitz constant of x -> A x.
inline double spectral_norm(const Matrix& a) {
  if (a.size() == 0) return 0.0;
  Eigen::JacobiSVD<Matrix> svd(a);
  return svd.singularValues()(0);
}

/// f(x, u) = A x + B u. The Lipschitz constant is certified as ||A||_2.
template <typename Scalar = double>
BasicPlant<Scalar> make_linear_plant(const Matrix& a, const Matrix& b, Box input_set,
                                     std::string name = "linear") {
  require(a.rows() == a.cols() && a.rows() > 0, "linear plant: A must be square and nonempty");
  require(b.rows() == a.rows() && b.cols() > 0, "linear plant: B must have as many rows as A");
  MatrixT<Scalar> as = a.template cast<Scalar>();
  MatrixT<Scalar> bs = b.template cast<Scalar>();
  auto transition = [as, bs](const VectorT<Scalar>& x, const VectorT<Scalar>& u) -> VectorT<Scalar> {
    VectorT<Scalar> next = as * x;
    next += bs * u;
    return next;
  };
  BasicPlant<Scalar> plant(std::move(name), static_cast<int>(a.rows()), static_cast<int>(b.cols()),
                           transition, std::move(input_set), spectral_norm(a), true);
  plant.with_jacobian([as, bs](const VectorT<Scalar>&, const VectorT<Scalar>&) {
    return typename BasicPlant<Scalar>::Jacobians{as, bs};
  });
  return plant;
}

/// f(x, u) = A x + beta * tanh(x) + B u, componentwise tanh.
///
/// tanh is 1-Lipschitz per component, so L = ||A||_2 + |beta| is a certified
/// bound. Used as the nonlinear benchmark with an honest Lipschitz constant.
inline Plant make_tanh_plant(const Matrix& a, double beta, const Matrix& b, Box input_set) {
  require(a.rows() == a.cols() && a.rows() > 0, "tanh plant: A must be square and nonempty");
  require(b.rows() == a.rows() && b.cols() > 0, "tanh plant: B must have as many rows as A");
  auto transition = [a, beta, b](const Vector& x, const Vector& u) -> Vector {
    return a * x + beta * x.array().tanh().matrix() + b * u;
  };
  Plant plant("tanh", static_cast<int>(a.rows()), static_cast<int>(b.cols()), transition,
              std::move(input_set), spectral_norm(a) + std::abs(beta), true);
  plant.with_jacobian([a, beta, b](const Vector& x, const Vector&) {
    Vector slope = (1.0 - x.array().tanh().square()).matrix();
    Matrix dx = a;
    dx.diagonal() += beta * slope;
    return Plant::Jacobians{dx, b};
  });
  return plant;
}

// ---------------------------------------------------------------------------
// Unicycle
// ---------------------------------------------------------------------------

/// Polar-coordinate posture stabilizer for the unicycle.
///
/// With rho the distance to the origin and alpha the bearing error,
///   v = k_rho * rho * cos(alpha),  w = k_alpha * alpha + k_rho * sin(alpha) cos(alpha).
/// alpha is folded into (-pi/2, pi/2] so the vehicle reverses when the origin is
/// behind it; v is unaffected by the fold and the law is discontinuous only
/// where the origin is exactly abeam.
struct UnicycleStabilizer {
  double k_rho = 1.0;
  double k_alpha = 3.0;

  struct Output {
    double v = 0.0;
    double omega = 0.0;
  };

  // rho*cos(alpha) and rho*sin(alpha) expressed in the state.
  static double along(const Vector& x) { return -(x[0] * std::cos(x[2]) + x[1] * std::sin(x[2])); }
  static double across(const Vector& x) { return x[0] * std::sin(x[2]) - x[1] * std::cos(x[2]); }

  static double folded_bearing(double across, double along) {
    double alpha = std::atan2(across, along);
    if (alpha > std::numbers::pi / 2) alpha -= std::numbers::pi;
    if (alpha <= -std::numbers::pi / 2) alpha += std::numbers::pi;
    return alpha;
  }

  [[nodiscard]] Output operator()(const Vector& x) const {
    const double rho2 = x[0] * x[0] + x[1] * x[1];
    if (rho2 < 1e-24) return {};
    const double c = along(x);
    const double s = across(x);
    return {k_rho * c, k_alpha * folded_bearing(s, c) + k_rho * s * c / rho2};
  }
};

struct UnicycleParams {
  double step_size = 0.1;
  UnicycleStabilizer stabilizer{};
  Box input_set = Box::symmetric(2, 2.0);
  /// Declared Lipschitz constant used for the tube. See estimate_lipschitz for
  /// an empirical value; in the Euclidean norm the unicycle map is never a
  /// contraction, so this is a modelling choice rather than a certificate.
  double lipschitz = 0.96;
};

/// State [p_x, p_y, theta], input [u_v, u_omega]; explicit Euler step with the
/// stabilizer added to the input. theta is wrapped to (-pi, pi].
inline Plant make_unicycle(const UnicycleParams& params) {
  require(params.step_size > 0.0, "unicycle step_size must be positive");
  require(params.input_set.dim() == 2, "unicycle input_set must be 2-dimensional");
  const double eta = params.step_size;
  const UnicycleStabilizer stab = params.stabilizer;
  auto transition = [eta, stab](const Vector& x, const Vector& u) -> Vector {
    const auto st = stab(x);
    const double v = st.v + u[0];
    const double w = st.omega + u[1];
    Vector next(3);
    next[0] = x[0] + eta * v * std::cos(x[2]);
    next[1] = x[1] + eta * v * std::sin(x[2]);
    next[2] = wrap_angle(x[2] + eta * w);
    return next;
  };
  Plant plant("unicycle", 3, 2, transition, params.input_set, params.lipschitz, false);
  plant.with_difference([](const Vector& a, const Vector& b) -> Vector {
    Vector d = a - b;
    d[2] = wrap_angle(d[2]);
    return d;
  });
  plant.with_jacobian([eta, stab](const Vector& x, const Vector& u) {
    const double ct = std::cos(x[2]);
    const double st = std::sin(x[2]);
    Matrix dx = Matrix::Identity(3, 3);
    Matrix du = Matrix::Zero(3, 2);
    const double rho2 = x[0] * x[0] + x[1] * x[1];
    const auto out = stab(x);
    const double v = out.v + u[0];
    // d(along), d(across) w.r.t. (px, py, theta)
    Eigen::Vector3d dc(-ct, -st, 0.0);
    Eigen::Vector3d ds(st, -ct, 0.0);
    Eigen::Vector3d dv = Eigen::Vector3d::Zero();
    Eigen::Vector3d dw = Eigen::Vector3d::Zero();
    if (rho2 >= 1e-24) {
      const double c = UnicycleStabilizer::along(x);
      const double s = UnicycleStabilizer::across(x);
      dc[2] = s;
      ds[2] = -c;
      dv = stab.k_rho * dc;
      const Eigen::Vector3d dalpha = (c * ds - s * dc) / rho2;
      const Eigen::Vector3d drho2(2.0 * x[0], 2.0 * x[1], 0.0);
      const Eigen::Vector3d dsc = (s * dc + c * ds) / rho2 - (s * c / (rho2 * rho2)) * drho2;
      dw = stab.k_alpha * dalpha + stab.k_rho * dsc;
    }
    for (int j = 0; j < 3; ++j) {
      dx(0, j) += eta * dv[j] * ct;
      dx(1, j) += eta * dv[j] * st;
      dx(2, j) += eta * dw[j];
    }
    dx(0, 2) -= eta * v * st;
    dx(1, 2) += eta * v * ct;
    du(0, 0) = eta * ct;
    du(1, 0) = eta * st;
    du(2, 1) = eta;
    return Plant::Jacobians{dx, du};
  });
  return plant;
}

// ---------------------------------------------------------------------------
// Planar quadrotor
// ---------------------------------------------------------------------------

struct QuadrotorParams {
  double step_size = 0.001;
  double gravity = 9.8;
  double arm_length = 0.25;
  double inertia = 0.035;
  double mass = 0.141;
  /// 2x6 state-feedback gain [K1; K2]; thrust = m g + K1 x, torque = K2 x.
  Matrix gain = Matrix::Zero(2, 6);
  Box input_set = Box::symmetric(2, 3.0);
  double lipschitz = 0.9985;
};

/// State [p_x, p_z, theta, v_x, v_z, theta_dot] with body-frame velocities;
/// input [thrust, torque] added on top of the stabilizer.
inline Plant make_quadrotor(const QuadrotorParams& params) {
  require(params.step_size > 0.0, "quadrotor step_size must be positive");
  require(params.gravity > 0.0 && params.arm_length > 0.0 && params.inertia > 0.0 && params.mass > 0.0,
          "quadrotor physical constants must be positive");
  require(params.gain.rows() == 2 && params.gain.cols() == 6, "quadrotor gain must be 2x6");
  require(params.input_set.dim() == 2, "quadrotor input_set must be 2-dimensional");
  const auto p = params;
  auto transition = [p](const Vector& x, const Vector& u) -> Vector {
    const double c = std::cos(x[2]);
    const double s = std::sin(x[2]);
    const double thrust = p.mass * p.gravity + p.gain.row(0).dot(x) + u[0];
    const double torque = p.gain.row(1).dot(x) + u[1];
    Vector rate(6);
    rate[0] = x[3] * c - x[4] * s;
    rate[1] = x[3] * s + x[4] * c;
    rate[2] = x[5];
    rate[3] = x[4] * x[5] - p.gravity * s;
    rate[4] = -x[3] * x[5] - p.gravity * c + thrust / p.mass;
    rate[5] = p.arm_length / p.inertia * torque;
    return x + p.step_size * rate;
  };
  Plant plant("quadrotor", 6, 2, transition, params.input_set, params.lipschitz, false);
  plant.with_jacobian([p](const Vector& x, const Vector&) {
    const double c = std::cos(x[2]);
    const double s = std::sin(x[2]);
    const double lj = p.arm_length / p.inertia;
    Matrix d = Matrix::Zero(6, 6);
    d(0, 2) = -x[3] * s - x[4] * c;
    d(0, 3) = c;
    d(0, 4) = -s;
    d(1, 2) = x[3] * c - x[4] * s;
    d(1, 3) = s;
    d(1, 4) = c;
    d(2, 5) = 1.0;
    d(3, 2) = -p.gravity * c;
    d(3, 4) = x[5];
    d(3, 5) = x[4];
    d(4, 2) = p.gravity * s;
    d(4, 3) = -x[5];
    d(4, 5) = -x[3];
    d.row(4) += p.gain.row(0) / p.mass;
    d.row(5) += lj * p.gain.row(1);
    Matrix du = Matrix::Zero(6, 2);
    du(4, 0) = 1.0 / p.mass;
    du(5, 1) = lj;
    return Plant::Jacobians{Matrix::Identity(6, 6) + p.step_size * d, p.step_size * du};
  });
  return plant;
}

// ---------------------------------------------------------------------------
// Lipschitz estimation
// ---------------------------------------------------------------------------

struct LipschitzEstimate {
  double value = 0.0;
  std::uint64_t seed = 0;
  int samples = 0;
};

/// Sampled lower bound on the state-Lipschitz constant of f over `domain`.
///
/// Half the pairs are drawn independently from the domain, the other half as
/// small random offsets around a sampled point (finite-difference probing).
/// Inputs are drawn uniformly from the plant's input set.
inline LipschitzEstimate estimate_lipschitz(const Plant& plant, const Box& domain, int samples,
                                            std::uint64_t seed) {
  require(samples >= 2, "estimate_lipschitz: samples must be >= 2");
  require(domain.valid() && domain.dim() == plant.state_dim(),
          "estimate_lipschitz: domain must be a box of the plant's state dimension");
  if (!domain.has_volume()) throw InvalidParameter("estimate_lipschitz: domain has zero volume");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const Vector extent = domain.upper - domain.lower;
  const Box& uset = plant.input_set();

  auto draw_box = [&](const Box& box) {
    Vector v(box.dim());
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = box.lower[i] + unit(rng) * (box.upper[i] - box.lower[i]);
    return v;
  };

  double best = 0.0;
  for (int k = 0; k < samples; ++k) {
    const Vector x = draw_box(domain);
    Vector y;
    if (k % 2 == 0) {
      y = draw_box(domain);
    } else {
      Vector dir(x.size());
      for (Eigen::Index i = 0; i < dir.size(); ++i) dir[i] = gauss(rng);
      const double scale = 1e-4 * std::pow(10.0, 2.0 * unit(rng));
      y = domain.clamp(x + scale * extent.cwiseProduct(dir.normalized()));
    }
    const Vector u = draw_box(uset);
    const double dxn = plant.difference(x, y).norm();
    if (!(dxn > 0.0)) continue;
    const double dfn = plant.difference(plant.evaluate(x, u), plant.evaluate(y, u)).norm();
    best = std::max(best, dfn / dxn);
  }
  return {best, seed, samples};
}

}  // namespace sempc

#pragma once

#include <sempc/core.hpp>

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace sempc {

using Point2 = Eigen::Vector2d;

struct Disk {
  Point2 center = Point2::Zero();
  double radius = 1.0;
};

struct Rect {
  Point2 lower = Point2::Zero();
  Point2 upper = Point2::Ones();
};

/// A planar obstacle acting on two coordinates of the state.
struct Obstacle {
  std::variant<Disk, Rect> shape;
  std::array<int, 2> dims{0, 1};

  [[nodiscard]] bool is_disk() const { return std::holds_alternative<Disk>(shape); }

  void validate(int state_dim) const {
    if (const auto* d = std::get_if<Disk>(&shape)) {
      require(std::isfinite(d->radius) && d->radius > 0.0, "obstacle: disk radius must be positive");
      require(d->center.allFinite(), "obstacle: disk center must be finite");
    } else {
      const auto& r = std::get<Rect>(shape);
      require(r.lower.allFinite() && r.upper.allFinite(), "obstacle: rectangle corners must be finite");
      require((r.lower.array() <= r.upper.array()).all(), "obstacle: rectangle corners must be ordered");
    }
    for (int d : dims) require(d >= 0 && d < state_dim, "obstacle: projection index out of range");
    require(dims[0] != dims[1], "obstacle: projection indices must differ");
  }
};

inline Obstacle make_disk(double cx, double cy, double radius, std::array<int, 2> dims = {0, 1}) {
  return {Disk{Point2(cx, cy), radius}, dims};
}

inline Obstacle make_rect(double x0, double y0, double x1, double y1, std::array<int, 2> dims = {0, 1}) {
  return {Rect{Point2(x0, y0), Point2(x1, y1)}, dims};
}

/// Signed distance from a point to a shape together with its gradient.
/// Positive outside, negative penetration depth inside.
struct SignedDistance {
  double value = 0.0;
  Point2 gradient = Point2::Zero();
};

inline SignedDistance signed_distance(const Disk& d, const Point2& p) {
  const Point2 off = p - d.center;
  const double r = off.norm();
  SignedDistance out;
  out.value = r - d.radius;
  out.gradient = r > 0.0 ? Point2(off / r) : Point2(1.0, 0.0);
  return out;
}

inline SignedDistance signed_distance(const Rect& rect, const Point2& p) {
  const Point2 below = rect.lower - p;
  const Point2 above = p - rect.upper;
  const Point2 outside = below.cwiseMax(above).cwiseMax(0.0);
  SignedDistance out;
  if (outside.squaredNorm() > 0.0) {
    out.value = outside.norm();
    Point2 g;
    for (int i = 0; i < 2; ++i) g[i] = below[i] > 0.0 ? -outside[i] : outside[i];
    out.gradient = g / out.value;
    return out;
  }
  // inside: distance to the nearest face
  const std::array<double, 4> faces{-below[0], -above[0], -below[1], -above[1]};
  int k = 0;
  for (int i = 1; i < 4; ++i)
    if (faces[static_cast<std::size_t>(i)] < faces[static_cast<std::size_t>(k)]) k = i;
  out.value = -faces[static_cast<std::size_t>(k)];
  const std::array<Point2, 4> normals{Point2(-1, 0), Point2(1, 0), Point2(0, -1), Point2(0, 1)};
  out.gradient = normals[static_cast<std::size_t>(k)];
  return out;
}

/// Safe set C = R^n minus the union of obstacles, optionally intersected with
/// a planar workspace box.
struct SafeSet {
  std::vector<Obstacle> obstacles;
  struct Workspace {
    Rect box;
    std::array<int, 2> dims{0, 1};
  };
  std::optional<Workspace> workspace;

  void validate(int state_dim) const {
    for (const auto& o : obstacles) o.validate(state_dim);
    if (workspace) {
      Obstacle probe{workspace->box, workspace->dims};
      probe.validate(state_dim);
    }
  }
};

inline Point2 project(const Vector& x, const std::array<int, 2>& dims) {
  return {x[dims[0]], x[dims[1]]};
}

/// Signed clearance of one obstacle (or the workspace, as entry index
/// obstacles.size()) with the gradient lifted to the full state.
struct Clearance {
  double value = 0.0;
  Vector gradient;
};

inline std::vector<Clearance> clearances(const SafeSet& set, const Vector& x) {
  std::vector<Clearance> out;
  out.reserve(set.obstacles.size() + 1);
  for (const auto& o : set.obstacles) {
    const Point2 p = project(x, o.dims);
    const auto sd = std::visit([&](const auto& shape) { return signed_distance(shape, p); }, o.shape);
    Clearance c{sd.value, Vector::Zero(x.size())};
    c.gradient[o.dims[0]] = sd.gradient[0];
    c.gradient[o.dims[1]] = sd.gradient[1];
    out.push_back(std::move(c));
  }
  if (set.workspace) {
    const Point2 p = project(x, set.workspace->dims);
    const auto sd = signed_distance(set.workspace->box, p);
    // inside the workspace is safe: flip the sign
    Clearance c{-sd.value, Vector::Zero(x.size())};
    c.gradient[set.workspace->dims[0]] = -sd.gradient[0];
    c.gradient[set.workspace->dims[1]] = -sd.gradient[1];
    out.push_back(std::move(c));
  }
  return out;
}

/// Largest erosion depth for which x is still a member; negative inside an
/// obstacle. +infinity for an unconstrained set.
inline double signed_margin(const SafeSet& set, const Vector& x) {
  double m = std::numeric_limits<double>::infinity();
  for (const auto& o : set.obstacles) {
    const Point2 p = project(x, o.dims);
    m = std::min(m, std::visit([&](const auto& shape) { return signed_distance(shape, p).value; }, o.shape));
  }
  if (set.workspace) m = std::min(m, -signed_distance(set.workspace->box, project(x, set.workspace->dims)).value);
  return m;
}

/// x in C eroded by the ball of radius `erosion`: every obstacle is farther
/// than `erosion` and, with a workspace, x lies deeper than `erosion` inside it.
inline bool is_member_eroded(const SafeSet& set, const Vector& x, double erosion) {
  return signed_margin(set, x) > erosion;
}

/// Gap between two disks: center distance minus both radii. Nonpositive when
/// they overlap.
inline double min_corridor_width(const Disk& a, const Disk& b) {
  return (a.center - b.center).norm() - a.radius - b.radius;
}

inline double min_corridor_width(const Obstacle& a, const Obstacle& b) {
  require(a.is_disk() && b.is_disk(), "min_corridor_width: both obstacles must be disks");
  return min_corridor_width(std::get<Disk>(a.shape), std::get<Disk>(b.shape));
}

/// Narrowest gap over all pairs of disks in the set; nullopt with fewer than two.
inline std::optional<double> min_corridor_width(const SafeSet& set) {
  std::optional<double> best;
  for (std::size_t i = 0; i < set.obstacles.size(); ++i) {
    for (std::size_t j = i + 1; j < set.obstacles.size(); ++j) {
      const auto& a = set.obstacles[i];
      const auto& b = set.obstacles[j];
      if (!a.is_disk() || !b.is_disk() || a.dims != b.dims) continue;
      const double w = min_corridor_width(a, b);
      if (!best || w < *best) best = w;
    }
  }
  return best;
}

}  // namespace sempc

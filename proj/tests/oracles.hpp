#pragma once

// Test-only reference computations. Nothing here calls into the library's
// projection, kernel or Jacobian code, so they can serve as oracles for it.

#include <Eigen/Geometry>

#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "probpnp/geometry.hpp"

namespace oracle {

using namespace probpnp;

inline double huber(double s, double delta) { return s <= delta * delta ? s : delta * (2.0 * std::sqrt(s) - delta); }

inline Mat3 rot(const Pose& pose) {
  if (const auto* p = std::get_if<YawOnly>(&pose)) return Eigen::AngleAxisd(p->theta, Vec3::UnitY()).matrix();
  if (const auto* p = std::get_if<Yaw4DoF>(&pose)) return Eigen::AngleAxisd(p->theta, Vec3::UnitY()).matrix();
  return std::get<Quat6DoF>(pose).q.normalized().toRotationMatrix();
}

inline Vec3 trans(const Pose& pose) {
  if (const auto* p = std::get_if<YawOnly>(&pose)) return p->t_fixed;
  if (const auto* p = std::get_if<Yaw4DoF>(&pose)) return p->t;
  return std::get<Quat6DoF>(pose).t;
}

/// 0.5 rho(|w o (pi(R x + t) - x2d)|^2); +inf behind the camera.
inline double point_cost(const Mat3& R, const Vec3& t, const Camera& cam, const Vec3& x3d, const Vec2& x2d,
                         const Vec2& w, double delta) {
  const Vec3 p = R * x3d + t;
  if (p.z() <= 1e-4) return std::numeric_limits<double>::infinity();
  const double u = cam.fx * p.x() / p.z() + cam.cx;
  const double v = cam.fy * p.y() / p.z() + cam.cy;
  const double fu = w.x() * (u - x2d.x());
  const double fv = w.y() * (v - x2d.y());
  return 0.5 * huber(fu * fu + fv * fv, delta);
}

inline double cost(const CorrespondenceSet& set, const Pose& pose, double delta) {
  const Mat3 R = rot(pose);
  const Vec3 t = trans(pose);
  double c = 0.0;
  for (const auto& p : set.points) c += point_cost(R, t, set.camera, p.x3d, p.x2d, p.w2d, delta);
  return c;
}

/// Pose moved by h along tangent coordinate k (translation first, then
/// rotation as a left increment about a camera axis).
inline Pose perturb(const Pose& pose, int k, double h) {
  if (const auto* p = std::get_if<YawOnly>(&pose)) return YawOnly{p->theta + h, p->t_fixed};
  if (const auto* p = std::get_if<Yaw4DoF>(&pose)) {
    Yaw4DoF q = *p;
    if (k < 3) q.t(k) += h; else q.theta += h;
    return q;
  }
  Quat6DoF q = std::get<Quat6DoF>(pose);
  if (k < 3) {
    q.t(k) += h;
  } else {
    q.q = Eigen::Quaterniond(Eigen::AngleAxisd(h, Vec3::Unit(k - 3))) * q.q;
  }
  return q;
}

/// Central difference of f around x, coordinate by coordinate.
inline VecX central_diff(const std::function<double(const VecX&)>& f, const VecX& x, double h) {
  VecX g(x.size());
  for (int k = 0; k < x.size(); ++k) {
    VecX a = x, b = x;
    a(k) += h;
    b(k) -= h;
    g(k) = (f(a) - f(b)) / (2.0 * h);
  }
  return g;
}

inline double rel_err(const VecX& analytic, const VecX& numeric, double floor = 1e-8) {
  return (analytic - numeric).lpNorm<Eigen::Infinity>() / std::max(numeric.lpNorm<Eigen::Infinity>(), floor);
}

/// Flattened (x3d, x2d, w2d) of one point, and the inverse.
inline VecX pack(const Correspondence& c) {
  VecX v(7);
  v << c.x3d, c.x2d, c.w2d;
  return v;
}
inline Correspondence unpack(const VecX& v) {
  return Correspondence{v.segment<3>(0), v.segment<2>(3), v.segment<2>(5)};
}

/// Periodic trapezoid rule over yaw in [-pi, pi) with n nodes.
struct YawGrid {
  std::vector<double> theta;
  std::vector<double> log_p;
  double h = 0.0;
};

inline YawGrid yaw_grid(const CorrespondenceSet& set, const Vec3& t_fixed, double delta, int n = 16384) {
  YawGrid g;
  g.h = 2.0 * std::numbers::pi / n;
  g.theta.resize(n);
  g.log_p.resize(n);
  for (int k = 0; k < n; ++k) {
    g.theta[k] = -std::numbers::pi + k * g.h;
    g.log_p[k] = -cost(set, YawOnly{g.theta[k], t_fixed}, delta);
  }
  return g;
}

inline double lse(const std::vector<double>& x) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : x) m = std::max(m, v);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

/// log of the integral of exp(log_p) over the circle.
inline double log_partition(const YawGrid& g) { return lse(g.log_p) + std::log(g.h); }

/// Posterior expectation of f(theta) on the grid.
inline double expect(const YawGrid& g, const std::function<double(double)>& f) {
  const double z = lse(g.log_p);
  double acc = 0.0;
  for (std::size_t k = 0; k < g.theta.size(); ++k) acc += std::exp(g.log_p[k] - z) * f(g.theta[k]);
  return acc;
}

/// Posterior mass in `bins` equal yaw bins.
inline std::vector<double> yaw_histogram(const YawGrid& g, int bins) {
  std::vector<double> mass(bins, 0.0);
  const double z = lse(g.log_p);
  for (std::size_t k = 0; k < g.theta.size(); ++k) {
    int b = static_cast<int>((g.theta[k] + std::numbers::pi) / (2.0 * std::numbers::pi) * bins);
    b = std::clamp(b, 0, bins - 1);
    mass[b] += std::exp(g.log_p[k] - z);
  }
  return mass;
}

}  // namespace oracle

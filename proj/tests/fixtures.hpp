#pragma once

// Synthetic correspondence sets shared by the unit and acceptance tests.

#include <numbers>
#include <random>

#include "probpnp/geometry.hpp"
#include "probpnp/robust_pnp.hpp"

namespace fixture {

using namespace probpnp;

inline Camera default_camera() { return Camera{500.0, 500.0, 320.0, 240.0}; }

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

inline Eigen::Quaterniond random_quat(Rng& rng) {
  std::normal_distribution<double> n;
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  if (q.w() < 0) q.coeffs() *= -1.0;
  return q;
}

inline Pose random_pose(PoseSpace space, Rng& rng, double depth = 4.0) {
  const Vec3 t(uniform(rng, -0.5, 0.5), uniform(rng, -0.5, 0.5), depth + uniform(rng, -0.5, 0.5));
  const double theta = uniform(rng, -std::numbers::pi, std::numbers::pi);
  switch (space) {
    case PoseSpace::kYawOnly:
      return YawOnly{theta, Vec3(0.0, 0.0, depth)};
    case PoseSpace::kYaw4DoF:
      return Yaw4DoF{t, theta};
    case PoseSpace::kQuat6DoF:
      return Quat6DoF{t, random_quat(rng)};
  }
  return YawOnly{};
}

struct Instance {
  CorrespondenceSet set;
  Pose gt;
};

/// n points in a cube of side `size` centred on the object origin, observed
/// from `gt` with Gaussian pixel noise and weights drawn from [w_lo, w_hi].
inline Instance random_instance(PoseSpace space, int n, Rng& rng, double noise_px = 0.0, double w_lo = 0.5,
                                double w_hi = 1.5, double size = 0.5) {
  Instance inst;
  inst.gt = random_pose(space, rng);
  inst.set.camera = default_camera();
  std::normal_distribution<double> noise(0.0, 1.0);
  const Mat3 R = rotation(inst.gt);
  const Vec3 t = translation(inst.gt);
  for (int i = 0; i < n; ++i) {
    Correspondence c;
    c.x3d = Vec3(uniform(rng, -0.5, 0.5), uniform(rng, -0.5, 0.5), uniform(rng, -0.5, 0.5)) * size;
    c.x2d = project(inst.set.camera, R * c.x3d + t) + noise_px * Vec2(noise(rng), noise(rng));
    c.w2d = Vec2(uniform(rng, w_lo, w_hi), uniform(rng, w_lo, w_hi));
    inst.set.points.push_back(c);
  }
  return inst;
}

/// Yaw-only square whose likelihood is exactly invariant under 90 degree
/// yaw: every observed corner is paired with all four model corners. The
/// object sits below the optical axis so the square projects to an ellipse,
/// which keeps mirrored yaws apart.
/// Weight and relative Huber threshold for the bundled symmetric scene:
/// four separated modes with the exact pairs at the mode centres.
inline constexpr double kSymmetricWeight = 0.1;
inline constexpr double kSymmetricDeltaRel = 0.2;

inline Instance symmetric_square(double theta_gt, double weight, double half = 0.3,
                                 const Vec3& t = Vec3(0.0, 1.5, 4.0)) {
  Instance inst;
  inst.gt = YawOnly{wrap_angle(theta_gt), t};
  inst.set.camera = default_camera();
  const Vec3 corners[4] = {{half, 0.0, 0.0}, {0.0, 0.0, half}, {-half, 0.0, 0.0}, {0.0, 0.0, -half}};
  const Mat3 R = yaw_rotation(theta_gt);
  for (const Vec3& seen : corners) {
    const Vec2 uv = project(inst.set.camera, R * seen + t);
    for (const Vec3& model : corners) inst.set.points.push_back({model, uv, Vec2(weight, weight)});
  }
  return inst;
}

}  // namespace fixture

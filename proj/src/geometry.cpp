#include "probpnp/geometry.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "probpnp/detail/point_terms.hpp"

namespace probpnp {

namespace {

bool finite(const auto& m) { return m.allFinite(); }

}  // namespace

void validate(const Camera& camera) {
  if (!(camera.fx > 0.0) || !(camera.fy > 0.0) || !std::isfinite(camera.fx) || !std::isfinite(camera.fy) ||
      !std::isfinite(camera.cx) || !std::isfinite(camera.cy)) {
    throw Error(ErrorCode::kInvalidArgument, "camera intrinsics must be finite with fx, fy > 0");
  }
}

int dof(PoseSpace space) {
  switch (space) {
    case PoseSpace::kYawOnly: return 1;
    case PoseSpace::kYaw4DoF: return 4;
    case PoseSpace::kQuat6DoF: return 6;
  }
  return 0;
}

int min_points(PoseSpace space) {
  switch (space) {
    case PoseSpace::kYawOnly: return 2;
    case PoseSpace::kYaw4DoF: return 3;
    case PoseSpace::kQuat6DoF: return 4;
  }
  return 0;
}

PoseSpace space_of(const Pose& pose) {
  switch (pose.index()) {
    case 0: return PoseSpace::kYawOnly;
    case 1: return PoseSpace::kYaw4DoF;
    default: return PoseSpace::kQuat6DoF;
  }
}

Mat3 yaw_rotation(double theta) {
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  Mat3 R;
  R << c, 0.0, s,  //
      0.0, 1.0, 0.0,  //
      -s, 0.0, c;
  return R;
}

double wrap_angle(double theta) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  double w = std::fmod(theta + std::numbers::pi, kTwoPi);
  if (w < 0.0) w += kTwoPi;
  w -= std::numbers::pi;
  // fmod can round up to exactly +pi.
  if (w >= std::numbers::pi) w -= kTwoPi;
  return w;
}

Mat3 rotation(const Pose& pose) {
  return std::visit(
      [](const auto& p) -> Mat3 {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, Quat6DoF>) {
          return p.q.toRotationMatrix();
        } else {
          return yaw_rotation(p.theta);
        }
      },
      pose);
}

Vec3 translation(const Pose& pose) {
  return std::visit(
      [](const auto& p) -> Vec3 {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, YawOnly>) {
          return p.t_fixed;
        } else {
          return p.t;
        }
      },
      pose);
}

Pose retract(const Pose& pose, const VecX& delta) {
  if (delta.size() != dof(space_of(pose))) {
    throw Error(ErrorCode::kInvalidArgument, "tangent increment has wrong dimension");
  }
  return std::visit(
      [&](const auto& p) -> Pose {
        using T = std::decay_t<decltype(p)>;
        T out = p;
        if constexpr (std::is_same_v<T, YawOnly>) {
          out.theta = wrap_angle(p.theta + delta(0));
        } else if constexpr (std::is_same_v<T, Yaw4DoF>) {
          out.t = p.t + delta.head<3>();
          out.theta = wrap_angle(p.theta + delta(3));
        } else {
          out.t = p.t + delta.head<3>();
          const Vec3 omega = delta.tail<3>();
          const double angle = omega.norm();
          Eigen::Quaterniond dq = Eigen::Quaterniond::Identity();
          if (angle > 0.0) dq = Eigen::Quaterniond(Eigen::AngleAxisd(angle, omega / angle));
          out.q = (dq * p.q).normalized();
        }
        return out;
      },
      pose);
}

void validate(const Pose& pose) {
  std::visit(
      [](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, YawOnly>) {
          if (!std::isfinite(p.theta) || !finite(p.t_fixed)) {
            throw Error(ErrorCode::kInvalidArgument, "yaw-only pose must be finite");
          }
        } else if constexpr (std::is_same_v<T, Yaw4DoF>) {
          if (!std::isfinite(p.theta) || !finite(p.t)) {
            throw Error(ErrorCode::kInvalidArgument, "4DoF pose must be finite");
          }
        } else {
          if (!finite(p.t) || !finite(p.q.coeffs())) {
            throw Error(ErrorCode::kInvalidArgument, "6DoF pose must be finite");
          }
          if (std::abs(p.q.norm() - 1.0) > 1e-9) {
            throw Error(ErrorCode::kInvalidArgument, "6DoF pose quaternion is not unit length");
          }
        }
      },
      pose);
}

Vec4 quat_to_vec(const Eigen::Quaterniond& q) { return Vec4(q.w(), q.x(), q.y(), q.z()); }

Eigen::Quaterniond vec_to_quat(const Vec4& wxyz) { return Eigen::Quaterniond(wxyz(0), wxyz(1), wxyz(2), wxyz(3)); }

void validate(const CorrespondenceSet& set, PoseSpace space) {
  validate(set.camera);
  if (set.size() < min_points(space)) {
    throw Error(ErrorCode::kInvalidArgument, "correspondence set has " + std::to_string(set.size()) +
                                                 " points; pose space needs at least " +
                                                 std::to_string(min_points(space)));
  }
  bool any_weight = false;
  for (int i = 0; i < set.size(); ++i) {
    const auto& c = set.points[i];
    if (!finite(c.x3d) || !finite(c.x2d) || !finite(c.w2d)) {
      throw Error(ErrorCode::kInvalidArgument, "point " + std::to_string(i) + " is not finite");
    }
    if ((c.w2d.array() < 0.0).any()) {
      throw Error(ErrorCode::kInvalidArgument, "point " + std::to_string(i) + " has a negative weight");
    }
    any_weight = any_weight || (c.w2d.array() > 0.0).any();
  }
  if (!any_weight) throw Error(ErrorCode::kDegenerateSet, "every weight is zero");
}

Vec3 transform(const Pose& pose, const Vec3& x3d) { return rotation(pose) * x3d + translation(pose); }

std::optional<Vec2> try_project(const Camera& camera, const Vec3& p_cam, double z_min) {
  if (!(p_cam.z() > z_min)) return std::nullopt;
  return Vec2(camera.fx * p_cam.x() / p_cam.z() + camera.cx, camera.fy * p_cam.y() / p_cam.z() + camera.cy);
}

Vec2 project(const Camera& camera, const Vec3& p_cam, double z_min) {
  auto uv = try_project(camera, p_cam, z_min);
  if (!uv) throw Error(ErrorCode::kBehindCamera, "point depth " + std::to_string(p_cam.z()) + " below floor");
  return *uv;
}

std::optional<Residual> try_residual(const Pose& pose, const Correspondence& corr, const Camera& camera) {
  auto uv = try_project(camera, transform(pose, corr.x3d));
  if (!uv) return std::nullopt;
  Residual res;
  res.r = *uv - corr.x2d;
  res.f = corr.w2d.cwiseProduct(res.r);
  return res;
}

Residual residual(const Pose& pose, const Correspondence& corr, const Camera& camera) {
  auto res = try_residual(pose, corr, camera);
  if (!res) throw Error(ErrorCode::kBehindCamera, "correspondence projects behind the camera");
  return *res;
}

Mat2X jac_pose(const Pose& pose, const Correspondence& corr, const Camera& camera) {
  detail::PointTerms<double> terms;
  if (!detail::point_terms<double>(detail::make_frame(pose), camera, corr.x3d, corr.x2d, corr.w2d, true, terms)) {
    throw Error(ErrorCode::kBehindCamera, "correspondence projects behind the camera");
  }
  return terms.J;
}

CorrespondenceGrad jac_correspondence(const Pose& pose, const Correspondence& corr, const Camera& camera,
                                      double delta) {
  const Mat3 R = rotation(pose);
  const Vec3 p = R * corr.x3d + translation(pose);
  if (!(p.z() > kMinDepth)) throw Error(ErrorCode::kBehindCamera, "correspondence projects behind the camera");

  const double inv_z = 1.0 / p.z();
  const Vec2 r(camera.fx * p.x() * inv_z + camera.cx - corr.x2d.x(),
               camera.fy * p.y() * inv_z + camera.cy - corr.x2d.y());
  const Vec2 f = corr.w2d.cwiseProduct(r);
  // dc/df = rho'(|f|^2) f
  const Vec2 g_f = detail::huber_weight(f.squaredNorm(), delta) * f;

  CorrespondenceGrad grad;
  grad.w2d = g_f.cwiseProduct(r);
  grad.x2d = -g_f.cwiseProduct(corr.w2d);
  const Vec2 g_proj = g_f.cwiseProduct(corr.w2d);
  Eigen::Matrix<double, 2, 3> dproj;
  dproj << camera.fx * inv_z, 0.0, -camera.fx * p.x() * inv_z * inv_z,  //
      0.0, camera.fy * inv_z, -camera.fy * p.y() * inv_z * inv_z;
  grad.x3d = R.transpose() * (dproj.transpose() * g_proj);
  return grad;
}

}  // namespace probpnp

#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <optional>
#include <variant>
#include <vector>

#include "probpnp/errors.hpp"

namespace probpnp {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;
/// 2 x d Jacobian block, d <= 6. Fixed capacity keeps it off the heap.
using Mat2X = Eigen::Matrix<double, 2, Eigen::Dynamic, 0, 2, 6>;

/// Pinhole intrinsics in pixels.
struct Camera {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
};

void validate(const Camera& camera);

enum class PoseSpace { kYawOnly, kYaw4DoF, kQuat6DoF };

/// Tangent dimension of a pose space: 1, 4 or 6.
int dof(PoseSpace space);
/// Minimum number of correspondences needed to pin down a pose.
int min_points(PoseSpace space);

/// Yaw about the camera Y axis with a known translation.
struct YawOnly {
  double theta = 0.0;
  Vec3 t_fixed = Vec3::Zero();
};

/// Yaw about the camera Y axis plus free translation. Tangent order: (t, theta).
struct Yaw4DoF {
  Vec3 t = Vec3::Zero();
  double theta = 0.0;
};

/// Full rotation as a unit quaternion. Tangent order: (t, omega) where omega
/// is a left rotation increment, R <- Exp(omega) R.
struct Quat6DoF {
  Vec3 t = Vec3::Zero();
  Eigen::Quaterniond q = Eigen::Quaterniond::Identity();
};

using Pose = std::variant<YawOnly, Yaw4DoF, Quat6DoF>;

PoseSpace space_of(const Pose& pose);
Mat3 rotation(const Pose& pose);
Vec3 translation(const Pose& pose);
/// Rotation about the camera Y axis; R_y(pi/2) maps e_x to -e_z.
Mat3 yaw_rotation(double theta);
/// Wraps to [-pi, pi).
double wrap_angle(double theta);
/// Applies a tangent-space increment. Quaternions are renormalized.
Pose retract(const Pose& pose, const VecX& delta);
/// Throws kInvalidArgument if the pose is not finite or q is not unit.
void validate(const Pose& pose);

/// Quaternion as (w, x, y, z).
Vec4 quat_to_vec(const Eigen::Quaterniond& q);
Eigen::Quaterniond vec_to_quat(const Vec4& wxyz);

struct Correspondence {
  Vec3 x3d = Vec3::Zero();
  Vec2 x2d = Vec2::Zero();
  Vec2 w2d = Vec2::Zero();
};

struct CorrespondenceSet {
  std::vector<Correspondence> points;
  Camera camera;

  int size() const { return static_cast<int>(points.size()); }
};

/// Checks finiteness, non-negative weights, the point-count minimum of the
/// pose space, and that some weight is nonzero.
void validate(const CorrespondenceSet& set, PoseSpace space);

inline constexpr double kMinDepth = 1e-4;

Vec3 transform(const Pose& pose, const Vec3& x3d);

std::optional<Vec2> try_project(const Camera& camera, const Vec3& p_cam, double z_min = kMinDepth);
/// Throws kBehindCamera when p_cam.z <= z_min.
Vec2 project(const Camera& camera, const Vec3& p_cam, double z_min = kMinDepth);

struct Residual {
  Vec2 r;  // unweighted reprojection error
  Vec2 f;  // w2d o r
};

std::optional<Residual> try_residual(const Pose& pose, const Correspondence& corr, const Camera& camera);
Residual residual(const Pose& pose, const Correspondence& corr, const Camera& camera);

/// d f / d y in the local tangent parameterization of the pose.
Mat2X jac_pose(const Pose& pose, const Correspondence& corr, const Camera& camera);

/// Gradient of c = 0.5 * rho(|f|^2) with respect to one correspondence.
struct CorrespondenceGrad {
  Vec3 x3d = Vec3::Zero();
  Vec2 x2d = Vec2::Zero();
  Vec2 w2d = Vec2::Zero();

  CorrespondenceGrad& operator+=(const CorrespondenceGrad& o) {
    x3d += o.x3d;
    x2d += o.x2d;
    w2d += o.w2d;
    return *this;
  }
  CorrespondenceGrad& operator*=(double s) {
    x3d *= s;
    x2d *= s;
    w2d *= s;
    return *this;
  }
};

CorrespondenceGrad jac_correspondence(const Pose& pose, const Correspondence& corr, const Camera& camera,
                                      double delta);

}  // namespace probpnp

#include <gtest/gtest.h>

#include <numbers>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "probpnp/geometry.hpp"
#include "probpnp/robust_pnp.hpp"

using namespace probpnp;

namespace {

constexpr double kPi = std::numbers::pi;

double point_c(const Pose& pose, const Correspondence& c, const Camera& cam, double delta) {
  return oracle::point_cost(oracle::rot(pose), oracle::trans(pose), cam, c.x3d, c.x2d, c.w2d, delta);
}

}  // namespace

TEST(Transform, IdentityQuaternion) {
  const Vec3 p = transform(Quat6DoF{}, Vec3(1, 2, 3));
  EXPECT_TRUE(p.isApprox(Vec3(1, 2, 3)));
}

TEST(Transform, QuarterYawMapsXToMinusZ) {
  const Vec3 p = transform(Yaw4DoF{Vec3::Zero(), kPi / 2}, Vec3(1, 0, 0));
  EXPECT_NEAR((p - Vec3(0, 0, -1)).norm(), 0.0, 1e-15);
}

TEST(Transform, HalfTurnAboutYQuaternion) {
  const Quat6DoF pose{Vec3(0, 0, 5), Eigen::Quaterniond(0, 0, 1, 0)};
  EXPECT_NEAR((transform(pose, Vec3(1, 0, 0)) - Vec3(-1, 0, 5)).norm(), 0.0, 1e-14);
  const Mat3 ref = Eigen::AngleAxisd(kPi, Vec3::UnitY()).matrix();
  EXPECT_TRUE(rotation(pose).isApprox(ref, 1e-14));
}

TEST(Transform, YawOnlyUsesFixedTranslation) {
  const YawOnly pose{0.3, Vec3(1, 2, 3)};
  EXPECT_TRUE(transform(pose, Vec3::Zero()).isApprox(Vec3(1, 2, 3)));
  EXPECT_TRUE(yaw_rotation(0.3).isApprox(oracle::rot(pose)));
}

TEST(Project, Arithmetic) {
  const Camera cam{100, 100, 0, 0};
  EXPECT_TRUE(project(cam, Vec3(0.1, -0.2, 2)).isApprox(Vec2(5, -10)));
  const Camera c2{320, 410, 12.5, -7};
  EXPECT_TRUE(project(c2, Vec3(0, 0, 3.3)).isApprox(Vec2(12.5, -7)));
  EXPECT_TRUE(project(Camera{1, 1, 0, 0}, Vec3(1, 1, 1)).isApprox(Vec2(1, 1)));
}

TEST(Project, BehindCameraThrows) {
  const Camera cam{100, 100, 0, 0};
  EXPECT_FALSE(try_project(cam, Vec3(0, 0, 1e-5)).has_value());
  try {
    project(cam, Vec3(0, 0, -1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kBehindCamera);
  }
}

TEST(Residual, ExactCorrespondenceIsZero) {
  const Camera cam = fixture::default_camera();
  const Quat6DoF pose{Vec3(0.1, 0, 4), Eigen::Quaterniond(Eigen::AngleAxisd(0.4, Vec3(1, 1, 0).normalized()))};
  Correspondence c{Vec3(0.2, -0.1, 0.3), Vec2::Zero(), Vec2(2, 3)};
  c.x2d = project(cam, transform(pose, c.x3d));
  const Residual r = residual(pose, c, cam);
  EXPECT_LT(r.r.norm(), 1e-12);
  EXPECT_LT(r.f.norm(), 1e-12);
}

TEST(Residual, ElementwiseWeights) {
  const Camera cam{1, 1, 0, 0};
  // projection (1, 1); x2d chosen so r = (2, -1)
  const Correspondence c{Vec3(1, 1, 1), Vec2(-1, 2), Vec2(0.5, 3)};
  const Residual r = residual(Quat6DoF{}, c, cam);
  EXPECT_TRUE(r.r.isApprox(Vec2(2, -1)));
  EXPECT_TRUE(r.f.isApprox(Vec2(1, -3)));
  Correspondence z = c;
  z.w2d.setZero();
  EXPECT_EQ(residual(Quat6DoF{}, z, cam).f, Vec2::Zero());
}

TEST(Residual, DoublingWeightsDoublesF) {
  Rng rng(3);
  auto inst = fixture::random_instance(PoseSpace::kQuat6DoF, 5, rng, 2.0);
  for (auto c : inst.set.points) {
    const Residual a = residual(inst.gt, c, inst.set.camera);
    c.w2d *= 2.0;
    const Residual b = residual(inst.gt, c, inst.set.camera);
    EXPECT_EQ(a.r, b.r);
    EXPECT_TRUE(b.f.isApprox(2.0 * a.f));
  }
}

TEST(JacPose, ZeroWeightGivesZeroMatrix) {
  Rng rng(4);
  auto inst = fixture::random_instance(PoseSpace::kQuat6DoF, 1, rng);
  inst.set.points[0].w2d.setZero();
  EXPECT_EQ(jac_pose(inst.gt, inst.set.points[0], inst.set.camera).norm(), 0.0);
}

TEST(JacPose, AxisPointHasNoYawSensitivity) {
  const Camera cam = fixture::default_camera();
  const YawOnly pose{0.7, Vec3(0.2, 0.1, 4)};
  const Correspondence c{Vec3(0, 0.3, 0), Vec2(300, 200), Vec2(1, 1)};
  EXPECT_LT(jac_pose(pose, c, cam).norm(), 1e-12);
}

class JacobianFd : public ::testing::TestWithParam<PoseSpace> {};

TEST_P(JacobianFd, JacPoseMatchesFiniteDifferences) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    auto inst = fixture::random_instance(GetParam(), 1, rng, 3.0);
    const auto& c = inst.set.points[0];
    const Mat2X J = jac_pose(inst.gt, c, inst.set.camera);
    const int d = dof(GetParam());
    MatX num(2, d);
    const double h = 1e-6;
    for (int k = 0; k < d; ++k) {
      auto f = [&](double s) {
        const Pose p = oracle::perturb(inst.gt, k, s);
        const Vec3 q = oracle::rot(p) * c.x3d + oracle::trans(p);
        const auto& cam = inst.set.camera;
        return Vec2(c.w2d.x() * (cam.fx * q.x() / q.z() + cam.cx - c.x2d.x()),
                    c.w2d.y() * (cam.fy * q.y() / q.z() + cam.cy - c.x2d.y()));
      };
      num.col(k) = (f(h) - f(-h)) / (2 * h);
    }
    EXPECT_LT((J - num).cwiseAbs().maxCoeff() / std::max(num.cwiseAbs().maxCoeff(), 1e-8), 1e-5);
  }
}

TEST_P(JacobianFd, JacCorrespondenceMatchesFiniteDifferences) {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    auto inst = fixture::random_instance(GetParam(), 1, rng, 4.0);
    const auto& c = inst.set.points[0];
    const auto& cam = inst.set.camera;
    // Alternate between the quadratic and linear Huber branches.
    const double fnorm = residual(inst.gt, c, cam).f.norm();
    const double delta = trial % 2 == 0 ? 10.0 * fnorm + 1.0 : 0.3 * fnorm;
    const CorrespondenceGrad g = jac_correspondence(inst.gt, c, cam, delta);
    VecX analytic(7);
    analytic << g.x3d, g.x2d, g.w2d;
    const VecX numeric = oracle::central_diff(
        [&](const VecX& v) { return point_c(inst.gt, oracle::unpack(v), cam, delta); }, oracle::pack(c), 1e-6);
    EXPECT_LT(oracle::rel_err(analytic, numeric), 1e-5) << "trial " << trial;
  }
}

INSTANTIATE_TEST_SUITE_P(AllSpaces, JacobianFd,
                         ::testing::Values(PoseSpace::kYawOnly, PoseSpace::kYaw4DoF, PoseSpace::kQuat6DoF));

TEST(JacCorrespondence, ZeroResidualGivesZeroGradient) {
  const Camera cam = fixture::default_camera();
  const Yaw4DoF pose{Vec3(0, 0, 4), 0.2};
  Correspondence c{Vec3(0.1, 0.2, -0.1), Vec2::Zero(), Vec2(1.5, 0.7)};
  c.x2d = project(cam, transform(pose, c.x3d));
  const auto g = jac_correspondence(pose, c, cam, 1.0);
  EXPECT_LT(g.x3d.norm() + g.x2d.norm() + g.w2d.norm(), 1e-9);
}

TEST(JacCorrespondence, InactiveWeightGradientIsWeightTimesSquaredResidual) {
  const Camera cam = fixture::default_camera();
  const Yaw4DoF pose{Vec3(0, 0, 4), 0.2};
  const Correspondence c{Vec3(0.1, 0.2, -0.1), Vec2(330, 250), Vec2(1.5, 0.7)};
  const Residual r = residual(pose, c, cam);
  const auto g = jac_correspondence(pose, c, cam, 1e6);
  EXPECT_TRUE(g.w2d.isApprox(c.w2d.cwiseProduct(r.r.cwiseAbs2()), 1e-12));
}

TEST(Retract, QuaternionStaysUnit) {
  Rng rng(5);
  Pose p = Quat6DoF{Vec3(0, 0, 4), fixture::random_quat(rng)};
  std::normal_distribution<double> n;
  for (int i = 0; i < 1000; ++i) {
    VecX d(6);
    for (int k = 0; k < 6; ++k) d(k) = n(rng);
    p = retract(p, d);
    EXPECT_NEAR(std::get<Quat6DoF>(p).q.norm(), 1.0, 1e-9);
  }
}

TEST(Retract, YawIsWrapped) {
  const Pose p = retract(YawOnly{3.0, Vec3::Zero()}, VecX::Constant(1, 1.0));
  const double theta = std::get<YawOnly>(p).theta;
  EXPECT_GE(theta, -kPi);
  EXPECT_LT(theta, kPi);
  EXPECT_NEAR(theta, 4.0 - 2 * kPi, 1e-12);
}

TEST(Validate, RejectsBadInputs) {
  EXPECT_THROW(validate(Camera{-1, 1, 0, 0}), Error);
  EXPECT_THROW(validate(Pose{Quat6DoF{Vec3::Zero(), Eigen::Quaterniond(2, 0, 0, 0)}}), Error);
  CorrespondenceSet set;
  set.camera = fixture::default_camera();
  for (int i = 0; i < 4; ++i) set.points.push_back({Vec3::Random(), Vec2::Random(), Vec2::Zero()});
  try {
    validate(set, PoseSpace::kQuat6DoF);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateSet);
  }
  set.points.pop_back();
  set.points[0].w2d = Vec2(1, 1);
  EXPECT_THROW(validate(set, PoseSpace::kQuat6DoF), Error);
  EXPECT_NO_THROW(validate(set, PoseSpace::kYawOnly));
}

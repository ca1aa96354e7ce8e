#include <gtest/gtest.h>

#include <numbers>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "probpnp/epro_loss.hpp"

using namespace probpnp;

namespace {

constexpr double kPi = std::numbers::pi;

// Grid nodes as an equally weighted sample batch, so the analytic expectation
// path runs on deterministic quadrature instead of AMIS.
McBatch quadrature_batch(const oracle::YawGrid& g, const Vec3& t) {
  McBatch b;
  for (std::size_t k = 0; k < g.theta.size(); ++k) {
    b.poses.push_back(YawOnly{g.theta[k], t});
    b.log_p.push_back(g.log_p[k]);
    b.log_q.push_back(0.0);
    b.log_v.push_back(g.log_p[k]);
  }
  return b;
}

double quadrature_kl(const CorrespondenceSet& set, const Pose& gt, double delta, int n) {
  const Vec3 t = std::get<YawOnly>(gt).t_fixed;
  return oracle::cost(set, gt, delta) + oracle::log_partition(oracle::yaw_grid(set, t, delta, n));
}

VecX flatten(const std::vector<CorrespondenceGrad>& g) {
  VecX v(7 * g.size());
  for (std::size_t i = 0; i < g.size(); ++i) v.segment<7>(7 * i) << g[i].x3d, g[i].x2d, g[i].w2d;
  return v;
}

VecX flatten(const CorrespondenceSet& set) {
  VecX v(7 * set.size());
  for (int i = 0; i < set.size(); ++i) v.segment<7>(7 * i) = oracle::pack(set.points[i]);
  return v;
}

CorrespondenceSet with_params(CorrespondenceSet set, const VecX& v) {
  for (int i = 0; i < set.size(); ++i) set.points[i] = oracle::unpack(v.segment<7>(7 * i));
  return set;
}

fixture::Instance yaw_instance(std::uint64_t seed, int n = 6, double noise = 1.0) {
  Rng rng(seed);
  return fixture::random_instance(PoseSpace::kYawOnly, n, rng, noise, 0.1, 0.3);
}

}  // namespace

TEST(TargetCost, MatchesOracleAndRejectsBehindCamera) {
  Rng rng(1);
  for (PoseSpace s : {PoseSpace::kYawOnly, PoseSpace::kYaw4DoF, PoseSpace::kQuat6DoF}) {
    const auto inst = fixture::random_instance(s, 8, rng, 3.0);
    const double delta = adaptive_delta(inst.set, 0.5);
    EXPECT_NEAR(target_cost(inst.set, inst.gt, delta), oracle::cost(inst.set, inst.gt, delta), 1e-9);
  }
  auto inst = fixture::random_instance(PoseSpace::kYawOnly, 6, rng);
  // model point that lands 1 m behind the camera at the target pose
  inst.set.points[0].x3d = oracle::rot(inst.gt).transpose() * (Vec3(0, 0, -1) - oracle::trans(inst.gt));
  try {
    target_cost(inst.set, inst.gt, 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kBehindCamera);
  }
}

TEST(KlLoss, ZeroWeightsAreDegenerate) {
  auto inst = yaw_instance(2);
  for (auto& p : inst.set.points) p.w2d.setZero();
  EXPECT_EQ(target_cost(inst.set, inst.gt, 1.0), 0.0);
  for (int i = 0; i < inst.set.size(); ++i) {
    const CorrespondenceGrad g = jac_correspondence(inst.gt, inst.set.points[i], inst.set.camera, 1.0);
    EXPECT_EQ(g.x3d.norm() + g.x2d.norm() + g.w2d.norm(), 0.0);
  }
  try {
    kl_loss(inst.set, inst.gt, LossOptions{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateSet);
  }
}

TEST(KlLoss, ConsistentInstanceAndQuadraticExpansion) {
  Rng rng(3);
  auto inst = fixture::random_instance(PoseSpace::kQuat6DoF, 8, rng, 0.0, 1.0, 2.0);
  LossOptions opts;
  opts.delta = 1e3;
  const LossReport rep = kl_loss(inst.set, inst.gt, opts);
  EXPECT_LT(rep.l_tgt, 1e-12);
  EXPECT_EQ(rep.l_kl, rep.l_tgt + rep.l_pred);
  EXPECT_EQ(rep.batch.size(), 512u);
  // Zero target gradient, so sum_i w_i . dL/dw_i = -E[sum_i |f_i|^2], which is
  // the pose dimension for a near-Gaussian posterior.
  for (const auto& c : inst.set.points) {
    const CorrespondenceGrad g = jac_correspondence(inst.gt, c, inst.set.camera, 1e3);
    EXPECT_LT(g.x3d.norm() + g.x2d.norm() + g.w2d.norm(), 1e-9);
  }
  double wg = 0.0;
  for (int i = 0; i < inst.set.size(); ++i) wg += inst.set.points[i].w2d.dot(rep.grads[i].w2d);
  EXPECT_NEAR(wg, -6.0, 0.6);

  const Vec2 shift(3.0, 4.0);
  inst.set.points[2].x2d += shift;
  const double expected = 0.5 * inst.set.points[2].w2d.cwiseProduct(shift).squaredNorm();
  EXPECT_NEAR(target_cost(inst.set, inst.gt, 1e3) - rep.l_tgt, expected, 1e-9 * expected);
}

TEST(KlLoss, SeededRunsReproduce) {
  const auto inst = yaw_instance(4);
  LossOptions opts;
  opts.mc.seed = 9;
  const LossReport a = kl_loss(inst.set, inst.gt, opts);
  const LossReport b = kl_loss(inst.set, inst.gt, opts);
  EXPECT_EQ(a.l_kl, b.l_kl);
  EXPECT_EQ(flatten(a.grads), flatten(b.grads));
}

TEST(KlLoss, AmisValueMatchesQuadrature) {
  double abs_sum = 0.0;
  for (int s = 0; s < 10; ++s) {
    Rng rng(500 + s);
    const auto inst = fixture::random_instance(PoseSpace::kYawOnly, 6, rng, 1.0);
    LossOptions opts;
    opts.mc.seed = s;
    const LossReport rep = kl_loss(inst.set, inst.gt, opts);
    const double err = rep.l_kl - quadrature_kl(inst.set, inst.gt, rep.delta, 16384);
    EXPECT_LT(std::abs(err), 0.12) << "seed " << s;
    abs_sum += std::abs(err);
  }
  EXPECT_LT(abs_sum / 10, 0.05);
}

// Full analytic gradient with the quadrature batch against central differences
// of l_tgt + quadrature l_pred, every parameter of every point.
TEST(KlGradients, MatchFiniteDifferencesOfQuadratureLoss) {
  for (std::uint64_t seed : {10u, 11u, 12u}) {
    const auto inst = yaw_instance(seed, 5, 2.0);
    const double delta = adaptive_delta(inst.set, 0.5);  // some points Huber-active
    const Vec3 t = std::get<YawOnly>(inst.gt).t_fixed;
    const int n = 4096;
    const McBatch qb = quadrature_batch(oracle::yaw_grid(inst.set, t, delta, n), t);
    const VecX analytic = flatten(kl_gradients(inst.set, inst.gt, qb, delta));
    const VecX x = flatten(inst.set);
    const VecX numeric = oracle::central_diff(
        [&](const VecX& v) { return quadrature_kl(with_params(inst.set, v), inst.gt, delta, n); }, x, 1e-6);
    EXPECT_LT(oracle::rel_err(analytic, numeric), 1e-3) << "seed " << seed;
  }
}

TEST(KlGradients, AmisGradientsConvergeToQuadrature) {
  const auto inst = yaw_instance(20);
  const double delta = adaptive_delta(inst.set, 1.0);
  const Vec3 t = std::get<YawOnly>(inst.gt).t_fixed;
  const VecX ref =
      flatten(kl_gradients(inst.set, inst.gt, quadrature_batch(oracle::yaw_grid(inst.set, t, delta), t), delta));
  Rng srng(1);
  const SolveResult solved = solve(inst.set, inst.gt, SolverOptions{}, srng);
  std::vector<double> mse;
  for (int K : {256, 1024, 4096}) {
    double acc = 0.0;
    for (int r = 0; r < 12; ++r) {
      const McBatch b = amis(inst.set, solved, McConfig{4, K / 4, static_cast<std::uint64_t>(100 + r)}, delta);
      acc += (flatten(kl_gradients(inst.set, inst.gt, b, delta)) - ref).squaredNorm();
    }
    mse.push_back(acc);
  }
  EXPECT_LT(mse[1], mse[0]);
  EXPECT_LT(mse[2], mse[1]);
}

TEST(GradWeights, SplitSumsToKlWeightGradient) {
  Rng rng(30);
  for (int trial = 0; trial < 5; ++trial) {
    const auto inst = fixture::random_instance(PoseSpace::kYaw4DoF, 8, rng, 1.0);
    LossOptions opts;
    opts.delta = 1e4;  // Huber inactive
    opts.mc.seed = trial;
    const LossReport rep = kl_loss(inst.set, inst.gt, opts);
    const WeightGradSplit split = grad_weights(inst.set, inst.gt, rep.batch, *opts.delta);
    for (int i = 0; i < inst.set.size(); ++i) {
      const Vec2 sum = -(split.uncertainty[i] + split.discrimination[i]);
      EXPECT_LE((sum - split.total[i]).norm(), 1e-10 * split.total[i].norm());
      EXPECT_LE((split.total[i] - rep.grads[i].w2d).norm(), 1e-10 * rep.grads[i].w2d.norm());
    }
  }
}

// Yaw-only scene with t = (0, 0, 4): a point on the object's X axis stays on
// the image row v = cy for every yaw, so its v residual does not depend on pose.
TEST(GradWeights, LargeGtErrorOnPoseInsensitiveResidualPushesWeightDown) {
  auto inst = yaw_instance(40);
  const Pose& gt = inst.gt;
  Correspondence c{Vec3(0.05, 0, 0), Vec2::Zero(), Vec2(1.0, 1.0)};
  c.x2d = project(inst.set.camera, transform(gt, c.x3d)) + Vec2(0, 40.0);
  inst.set.points.push_back(c);
  const double delta = adaptive_delta(inst.set, 0.5);
  ASSERT_GT(40.0, delta);  // residual is in the Huber-active branch
  Rng rng(1);
  const SolveResult solved = solve(inst.set, gt, SolverOptions{}, rng);
  const McBatch b = amis(inst.set, solved, McConfig{4, 256, 3}, delta);
  const WeightGradSplit split = grad_weights(inst.set, gt, b, delta);
  const int i = inst.set.size() - 1;
  EXPECT_LT(split.uncertainty[i](1), 0.0);
  EXPECT_GT(split.total[i](1), 0.0);
}

TEST(GradWeights, ZeroGtErrorWithPosteriorSpreadPushesWeightUp) {
  auto inst = yaw_instance(41);
  const Pose& gt = inst.gt;
  Correspondence c{Vec3(0.6, 0.2, 0.1), Vec2::Zero(), Vec2(0.05, 0.05)};
  c.x2d = project(inst.set.camera, transform(gt, c.x3d));
  inst.set.points.push_back(c);
  const double delta = adaptive_delta(inst.set, 1.0);
  Rng rng(2);
  const SolveResult solved = solve(inst.set, gt, SolverOptions{}, rng);
  const McBatch b = amis(inst.set, solved, McConfig{4, 256, 4}, delta);
  const WeightGradSplit split = grad_weights(inst.set, gt, b, delta);
  const int i = inst.set.size() - 1;
  EXPECT_EQ(split.uncertainty[i].norm(), 0.0);
  EXPECT_GT(split.discrimination[i](0), 0.0);
  EXPECT_LT(split.total[i](0), 0.0);
}

TEST(SmoothL1, Values) {
  EXPECT_DOUBLE_EQ(smooth_l1(0.0, 0.1), 0.0);
  EXPECT_DOUBLE_EQ(smooth_l1(0.05, 0.1), 0.5 * 0.0025 / 0.1);
  EXPECT_DOUBLE_EQ(smooth_l1(-1.0, 0.1), 0.95);
  EXPECT_NEAR(smooth_l1(0.1 - 1e-12, 0.1), smooth_l1(0.1 + 1e-12, 0.1), 1e-11);
}

TEST(RegLoss, ZeroAtExactSolution) {
  Rng rng(50);
  for (PoseSpace s : {PoseSpace::kYawOnly, PoseSpace::kYaw4DoF, PoseSpace::kQuat6DoF}) {
    const auto inst = fixture::random_instance(s, 8, rng);
    const RegReport rep = reg_loss(inst.set, inst.gt, inst.gt, SolverOptions{}, 1.0);
    EXPECT_LT(rep.step.norm(), 1e-10);
    EXPECT_LT(rep.l_pos, 1e-12);
    EXPECT_LT(rep.l_orient, 1e-12);
  }
}

TEST(RegLoss, NoiseFreeConvergedSolveTakesNoStep) {
  Rng rng(51);
  SolverOptions opts;
  opts.max_iter = 100;
  for (PoseSpace s : {PoseSpace::kYaw4DoF, PoseSpace::kQuat6DoF}) {
    const auto inst = fixture::random_instance(s, 8, rng);
    VecX d = VecX::Constant(dof(s), 0.02);
    const SolveResult res = lm_solve(inst.set, retract(inst.gt, d), opts);
    const double delta = adaptive_delta(inst.set, opts.delta_rel);
    const Pose shifted = retract(inst.gt, VecX::Constant(dof(s), 0.1));
    const RegReport rep = reg_loss(inst.set, shifted, res.pose, opts, delta);
    EXPECT_LT(rep.step.norm(), 1e-8);
    double direct = 0.0;
    if (const auto* y = std::get_if<Yaw4DoF>(&res.pose)) {
      const auto& g = std::get<Yaw4DoF>(shifted);
      direct = smooth_l1((y->t - g.t).norm(), 0.1) + 1.0 - std::cos(y->theta - g.theta);
    } else {
      const auto& yq = std::get<Quat6DoF>(res.pose);
      const auto& g = std::get<Quat6DoF>(shifted);
      const double dot = yq.q.coeffs().dot(g.q.coeffs());
      direct = smooth_l1((yq.t - g.t).norm(), 0.1) + 2.0 - 2.0 * dot * dot;
    }
    EXPECT_NEAR(rep.l_reg, direct, 1e-8);
  }
}

TEST(RegLoss, OrientationLossIsTwoAtHalfTurn) {
  Rng rng(52);
  {
    const auto inst = fixture::random_instance(PoseSpace::kYaw4DoF, 8, rng);
    auto flipped = std::get<Yaw4DoF>(inst.gt);
    flipped.theta = wrap_angle(flipped.theta + kPi);
    const RegReport rep = reg_loss(inst.set, flipped, inst.gt, SolverOptions{}, 1.0);
    EXPECT_NEAR(rep.l_orient, 2.0, 1e-12);
    EXPECT_LT(rep.l_pos, 1e-12);
  }
  {
    const auto inst = fixture::random_instance(PoseSpace::kQuat6DoF, 8, rng);
    auto flipped = std::get<Quat6DoF>(inst.gt);
    flipped.q = Eigen::Quaterniond(Eigen::AngleAxisd(kPi, Vec3(1, 2, 3).normalized())) * flipped.q;
    const RegReport rep = reg_loss(inst.set, flipped, inst.gt, SolverOptions{}, 1.0);
    EXPECT_NEAR(rep.l_orient, 2.0, 1e-12);
  }
}

TEST(RegLoss, GradientsMatchFiniteDifferences) {
  Rng rng(53);
  for (PoseSpace s : {PoseSpace::kYawOnly, PoseSpace::kYaw4DoF, PoseSpace::kQuat6DoF}) {
    for (int trial = 0; trial < 4; ++trial) {
      const auto inst = fixture::random_instance(s, 6, rng, 2.0);
      const Pose y_star = retract(inst.gt, VecX::Constant(dof(s), 0.03));
      const double delta = adaptive_delta(inst.set, trial % 2 ? 0.3 : 10.0);
      const SolverOptions opts;
      const RegReport rep = reg_loss(inst.set, inst.gt, y_star, opts, delta);
      const VecX numeric = oracle::central_diff(
          [&](const VecX& v) { return reg_loss(with_params(inst.set, v), inst.gt, y_star, opts, delta).l_reg; },
          flatten(inst.set), 1e-6);
      EXPECT_LT(oracle::rel_err(flatten(rep.grads), numeric), 1e-4)
          << "space " << static_cast<int>(s) << " trial " << trial;
    }
  }
}

TEST(WeightHead, UniformLogitsAndShiftInvariance) {
  WeightHead head{MatX::Constant(5, 2, 0.7), Vec2(std::log(3.0), 0.0)};
  const auto w = weight_head(head);
  for (const auto& wi : w) {
    EXPECT_NEAR(wi(0), 3.0 / 5, 1e-15);
    EXPECT_NEAR(wi(1), 1.0 / 5, 1e-15);
  }
  Rng rng(60);
  head.logits = MatX::Random(5, 2) * 3;
  const auto a = weight_head(head);
  head.logits.col(1).array() += 40.0;
  const auto b = weight_head(head);
  Vec2 total = Vec2::Zero();
  for (int i = 0; i < 5; ++i) {
    EXPECT_NEAR((a[i] - b[i]).norm(), 0.0, 1e-14);
    total += a[i];
  }
  EXPECT_NEAR(total(0), 3.0, 1e-13);
  EXPECT_NEAR(total(1), 1.0, 1e-13);
}

TEST(WeightHead, ExpActivation) {
  WeightHead head{MatX::Zero(3, 2), Vec2(0.5, -0.5)};
  head.logits(1, 0) = 2.0;
  const auto w = weight_head(head, Activation::kExp);
  EXPECT_NEAR(w[1](0), std::exp(2.5), 1e-12);
  EXPECT_NEAR(w[2](1), std::exp(-0.5), 1e-15);
}

TEST(WeightHead, BackwardMatchesFiniteDifferences) {
  for (Activation act : {Activation::kSoftmax, Activation::kExp}) {
    WeightHead head{MatX::Random(6, 2), Vec2(0.3, -0.2)};
    std::vector<Vec2> g(6);
    for (auto& gi : g) gi = Vec2::Random();
    auto objective = [&](const VecX& p) {
      WeightHead h{Eigen::Map<const MatX>(p.data(), 6, 2), p.tail<2>()};
      const auto w = weight_head(h, act);
      double acc = 0.0;
      for (int i = 0; i < 6; ++i) acc += g[i].dot(w[i]);
      return acc;
    };
    VecX p(14);
    p << Eigen::Map<const VecX>(head.logits.data(), 12), head.log_scale;
    const WeightHeadGrad an = weight_head_backward(head, g, act);
    VecX a(14);
    a << Eigen::Map<const VecX>(an.logits.data(), 12), an.log_scale;
    EXPECT_LT(oracle::rel_err(a, oracle::central_diff(objective, p, 1e-6)), 1e-8);
  }
}

TEST(WeightHead, ChainRuleThroughQuadratureKl) {
  auto inst = yaw_instance(70, 5, 2.0);
  const Vec3 t = std::get<YawOnly>(inst.gt).t_fixed;
  const int n = inst.set.size();
  WeightHead head{MatX::Random(n, 2) * 0.5, Vec2(std::log(0.8), std::log(1.2))};
  const double delta = 1.5;
  const int grid_n = 4096;
  auto with_head = [&](const WeightHead& h) {
    CorrespondenceSet s = inst.set;
    const auto w = weight_head(h);
    for (int i = 0; i < n; ++i) s.points[i].w2d = w[i];
    return s;
  };
  const CorrespondenceSet set0 = with_head(head);
  const McBatch qb = quadrature_batch(oracle::yaw_grid(set0, t, delta, grid_n), t);
  const auto grads = kl_gradients(set0, inst.gt, qb, delta);
  std::vector<Vec2> gw(n);
  for (int i = 0; i < n; ++i) gw[i] = grads[i].w2d;
  const WeightHeadGrad an = weight_head_backward(head, gw);
  VecX a(2 * n + 2);
  a << Eigen::Map<const VecX>(an.logits.data(), 2 * n), an.log_scale;
  VecX p(2 * n + 2);
  p << Eigen::Map<const VecX>(head.logits.data(), 2 * n), head.log_scale;
  const VecX numeric = oracle::central_diff(
      [&](const VecX& v) {
        WeightHead h{Eigen::Map<const MatX>(v.data(), n, 2), v.tail<2>()};
        return quadrature_kl(with_head(h), inst.gt, delta, grid_n);
      },
      p, 1e-6);
  EXPECT_LT(oracle::rel_err(a, numeric), 1e-3);
}

TEST(KlLoss, PredictedTermFallsAsWeightScaleGrows) {
  Rng rng(80);
  const auto base = fixture::random_instance(PoseSpace::kQuat6DoF, 8, rng, 0.0, 0.5, 1.0);
  double prev = std::numeric_limits<double>::infinity();
  for (double scale : {0.25, 0.5, 1.0, 2.0, 4.0}) {
    CorrespondenceSet set = base.set;
    for (auto& p : set.points) p.w2d *= scale;
    const LossReport rep = kl_loss(set, base.gt, LossOptions{});
    EXPECT_LT(rep.l_tgt, 1e-12);
    EXPECT_LT(rep.l_pred, prev) << "scale " << scale;
    prev = rep.l_pred;
  }
}

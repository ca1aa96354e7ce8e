#include "probpnp/epro_loss.hpp"

#include <unsupported/Eigen/AutoDiff>

#include <cmath>

#include "probpnp/detail/point_terms.hpp"
#include "probpnp/kernels.hpp"

namespace probpnp {

namespace {

using Ad = Eigen::AutoDiffScalar<VecX>;
using Ad7 = Eigen::AutoDiffScalar<Eigen::Matrix<double, 7, 1>>;

template <typename S>
S smooth_l1_sq(const S& sq, double beta) {
  using std::sqrt;
  if (sq < S(beta * beta)) return S(0.5 / beta) * sq;
  return sqrt(sq) - S(0.5 * beta);
}

struct PoseLossParts {
  Ad pos;
  Ad orient;
};

// Position and orientation loss of retract(y_star, dy) against y_gt. The
// quaternion update is the first-order left increment, renormalized.
PoseLossParts pose_loss(const Pose& y_star, const Pose& y_gt, const Eigen::Matrix<Ad, Eigen::Dynamic, 1>& dy,
                        double beta) {
  PoseLossParts out{Ad(0.0), Ad(0.0)};
  auto position = [&](const Vec3& ts, const Vec3& tg) {
    Ad sq(0.0);
    for (int k = 0; k < 3; ++k) {
      const Ad d = Ad(ts(k) - tg(k)) + dy(k);
      sq += d * d;
    }
    return smooth_l1_sq(sq, beta);
  };
  if (const auto* ys = std::get_if<YawOnly>(&y_star)) {
    out.orient = Ad(1.0) - cos(Ad(ys->theta - std::get<YawOnly>(y_gt).theta) + dy(0));
  } else if (const auto* ys = std::get_if<Yaw4DoF>(&y_star)) {
    const auto& yg = std::get<Yaw4DoF>(y_gt);
    out.pos = position(ys->t, yg.t);
    out.orient = Ad(1.0) - cos(Ad(ys->theta - yg.theta) + dy(3));
  } else {
    const auto& qs = std::get<Quat6DoF>(y_star);
    const auto& qg = std::get<Quat6DoF>(y_gt);
    out.pos = position(qs.t, qg.t);
    const double w = qs.q.w();
    const Vec3 v(qs.q.x(), qs.q.y(), qs.q.z());
    const Vec4 lg = quat_to_vec(qg.q);
    // l = l* + 0.5 (0, omega) * l*
    Eigen::Matrix<Ad, 4, 1> l;
    const Ad ox = dy(3), oy = dy(4), oz = dy(5);
    l(0) = Ad(w) - Ad(0.5) * (ox * v.x() + oy * v.y() + oz * v.z());
    l(1) = Ad(v.x()) + Ad(0.5) * (ox * w + (oy * v.z() - oz * v.y()));
    l(2) = Ad(v.y()) + Ad(0.5) * (oy * w + (oz * v.x() - ox * v.z()));
    l(3) = Ad(v.z()) + Ad(0.5) * (oz * w + (ox * v.y() - oy * v.x()));
    Ad norm_sq(0.0);
    Ad dot(0.0);
    for (int k = 0; k < 4; ++k) {
      norm_sq += l(k) * l(k);
      dot += l(k) * lg(k);
    }
    out.orient = Ad(2.0) - Ad(2.0) * dot * dot / norm_sq;
  }
  return out;
}

}  // namespace

double target_cost(const CorrespondenceSet& set, const Pose& y_gt, double delta) {
  const RobustCost rc = robust_cost(set, y_gt, delta);
  if (rc.num_invalid > 0) throw Error(ErrorCode::kBehindCamera, "target pose puts a weighted point behind the camera");
  return rc.cost;
}

std::vector<CorrespondenceGrad> kl_gradients(const CorrespondenceSet& set, const Pose& y_gt, const McBatch& batch,
                                             double delta) {
  const std::vector<double> w = normalized_weights(batch);
  std::vector<CorrespondenceGrad> grads = kernels::weighted_correspondence_grads(set, batch.poses, w, delta);
  for (int i = 0; i < set.size(); ++i) {
    CorrespondenceGrad g = jac_correspondence(y_gt, set.points[i], set.camera, delta);
    grads[i] *= -1.0;
    grads[i] += g;
  }
  return grads;
}

LossReport kl_loss(const CorrespondenceSet& set, const Pose& y_gt, const LossOptions& opts) {
  validate(set, space_of(y_gt));
  validate(y_gt);
  LossReport rep;
  rep.delta = opts.delta ? *opts.delta : adaptive_delta(set, opts.solver.delta_rel);
  if (!(rep.delta > 0.0)) throw Error(ErrorCode::kDegenerateSet, "Huber threshold is zero");
  rep.l_tgt = target_cost(set, y_gt, rep.delta);

  Rng rng(opts.mc.seed);
  rep.solve = solve_guarded(set, y_gt, opts.solver, rng);
  rep.batch = amis(set, init_proposal(rep.solve), opts.mc, rep.delta, rng);
  rep.l_pred = rep.batch.l_pred;
  rep.l_kl = rep.l_tgt + rep.l_pred;
  rep.grads = kl_gradients(set, y_gt, rep.batch, rep.delta);
  for (const auto& g : rep.grads) {
    if (!g.x3d.allFinite() || !g.x2d.allFinite() || !g.w2d.allFinite()) {
      throw Error(ErrorCode::kNonFiniteGradient, "KL gradient is not finite");
    }
  }
  return rep;
}

WeightGradSplit grad_weights(const CorrespondenceSet& set, const Pose& y_gt, const McBatch& batch, double delta) {
  const std::vector<double> w = normalized_weights(batch);
  const int n = set.size();
  WeightGradSplit out;
  out.uncertainty.assign(n, Vec2::Zero());
  out.discrimination.assign(n, Vec2::Zero());
  out.total.assign(n, Vec2::Zero());
  for (int i = 0; i < n; ++i) {
    const Correspondence& c = set.points[i];
    const Residual gt = residual(y_gt, c, set.camera);
    out.uncertainty[i] =
        -huber_derivative(gt.f.squaredNorm(), delta) * c.w2d.cwiseProduct(gt.r.cwiseAbs2());
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (w[j] == 0.0) continue;
      const auto res = try_residual(batch.poses[j], c, set.camera);
      if (!res) continue;
      out.discrimination[i] +=
          (w[j] * huber_derivative(res->f.squaredNorm(), delta)) * c.w2d.cwiseProduct(res->r.cwiseAbs2());
    }
    out.total[i] = -(out.uncertainty[i] + out.discrimination[i]);
  }
  return out;
}

double smooth_l1(double d, double beta) {
  d = std::abs(d);
  return d < beta ? 0.5 * d * d / beta : d - 0.5 * beta;
}

RegReport reg_loss(const CorrespondenceSet& set, const Pose& y_gt, const Pose& y_star, const SolverOptions& opts,
                   double delta, double beta) {
  if (space_of(y_gt) != space_of(y_star)) throw Error(ErrorCode::kInvalidArgument, "pose spaces differ");
  if (!(beta > 0.0)) throw Error(ErrorCode::kInvalidArgument, "smooth L1 needs beta > 0");
  const int d = dof(space_of(y_star));
  const NormalEquations ne = normal_equations(set, y_star, delta);
  if (ne.num_invalid == set.size()) throw Error(ErrorCode::kAllPointsInvalid, "every point is behind the camera");
  MatX A = ne.H;
  A.diagonal().array() += opts.eps;
  const Eigen::LDLT<MatX> ldlt(A);
  if (ldlt.info() != Eigen::Success) throw Error(ErrorCode::kSingularSystem, "damped normal matrix is singular");
  RegReport rep;
  rep.step = -ldlt.solve(ne.g);
  if (!rep.step.allFinite()) throw Error(ErrorCode::kSingularSystem, "Gauss-Newton step is not finite");

  Eigen::Matrix<Ad, Eigen::Dynamic, 1> dy(d);
  for (int k = 0; k < d; ++k) dy(k) = Ad(rep.step(k), d, k);
  const PoseLossParts parts = pose_loss(y_star, y_gt, dy, beta);
  rep.l_pos = parts.pos.value();
  rep.l_orient = parts.orient.value();
  rep.l_reg = rep.l_pos + rep.l_orient;
  VecX u = VecX::Zero(d);
  const Ad total = parts.pos + parts.orient;
  if (total.derivatives().size() == d) u = total.derivatives();

  // dL/dX_i = -d/dX_i [ z^T (g_i + A_i step) ] with z = A^-1 u held fixed.
  const VecX z = ldlt.solve(u);
  const detail::PoseFrame frame = detail::make_frame(y_star);
  rep.grads.assign(set.size(), CorrespondenceGrad{});
  detail::PointTerms<Ad7> terms;
  for (int i = 0; i < set.size(); ++i) {
    const Correspondence& c = set.points[i];
    detail::V3<Ad7> x3d;
    detail::V2<Ad7> x2d;
    detail::V2<Ad7> w2d;
    for (int k = 0; k < 3; ++k) x3d(k) = Ad7(c.x3d(k), 7, k);
    for (int k = 0; k < 2; ++k) x2d(k) = Ad7(c.x2d(k), 7, 3 + k);
    for (int k = 0; k < 2; ++k) w2d(k) = Ad7(c.w2d(k), 7, 5 + k);
    if (!detail::point_terms<Ad7>(frame, set.camera, x3d, x2d, w2d, true, terms)) continue;
    const Ad7 s = detail::huber_weight<Ad7>(terms.f.squaredNorm(), delta);
    Ad7 jz[2];
    Ad7 lin[2];
    for (int r = 0; r < 2; ++r) {
      jz[r] = Ad7(0.0);
      lin[r] = terms.f(r);
      for (int k = 0; k < d; ++k) {
        jz[r] += terms.J(r, k) * z(k);
        lin[r] += terms.J(r, k) * rep.step(k);
      }
    }
    const Ad7 scalar = s * (jz[0] * lin[0] + jz[1] * lin[1]);
    const auto& der = scalar.derivatives();
    rep.grads[i].x3d = -der.segment<3>(0);
    rep.grads[i].x2d = -der.segment<2>(3);
    rep.grads[i].w2d = -der.segment<2>(5);
  }
  return rep;
}

std::vector<Vec2> weight_head(const WeightHead& head, Activation act) {
  const int n = static_cast<int>(head.logits.rows());
  if (head.logits.cols() != 2) throw Error(ErrorCode::kInvalidArgument, "weight head logits must be N x 2");
  std::vector<Vec2> w(n);
  for (int c = 0; c < 2; ++c) {
    const double scale = std::exp(head.log_scale(c));
    if (act == Activation::kExp) {
      for (int i = 0; i < n; ++i) w[i](c) = scale * std::exp(head.logits(i, c));
      continue;
    }
    const double m = head.logits.col(c).maxCoeff();
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += std::exp(head.logits(i, c) - m);
    for (int i = 0; i < n; ++i) w[i](c) = scale * std::exp(head.logits(i, c) - m) / total;
  }
  return w;
}

WeightHeadGrad weight_head_backward(const WeightHead& head, std::span<const Vec2> grad_w, Activation act) {
  const int n = static_cast<int>(head.logits.rows());
  if (static_cast<int>(grad_w.size()) != n) throw Error(ErrorCode::kInvalidArgument, "gradient count mismatch");
  const std::vector<Vec2> w = weight_head(head, act);
  WeightHeadGrad out;
  out.logits = MatX::Zero(n, 2);
  for (int c = 0; c < 2; ++c) {
    double gw = 0.0;  // sum_i g_ic w_ic
    for (int i = 0; i < n; ++i) gw += grad_w[i](c) * w[i](c);
    out.log_scale(c) = gw;
    if (act == Activation::kExp) {
      for (int i = 0; i < n; ++i) out.logits(i, c) = grad_w[i](c) * w[i](c);
    } else {
      const double scale = std::exp(head.log_scale(c));
      for (int i = 0; i < n; ++i) out.logits(i, c) = w[i](c) * grad_w[i](c) - w[i](c) * gw / scale;
    }
  }
  return out;
}

}  // namespace probpnp

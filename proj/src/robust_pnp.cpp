#include "probpnp/robust_pnp.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "probpnp/detail/point_terms.hpp"

namespace probpnp {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kMinLmDiagonal = 1e-6;
constexpr double kMaxLmDiagonal = 1e32;
constexpr double kMaxLambda = 1e32;
constexpr double kMinRelativeDecrease = 1e-3;
constexpr double kFunctionTolerance = 1e-12;

bool has_weight(const Correspondence& c) { return c.w2d.x() != 0.0 || c.w2d.y() != 0.0; }

int count_weighted(const CorrespondenceSet& set) {
  return static_cast<int>(std::count_if(set.points.begin(), set.points.end(), has_weight));
}

// Translation that puts the weighted 3D centroid on the ray through the
// weighted 2D centroid, at a depth matching the 3D and 2D spreads.
Vec3 center_translation(const CorrespondenceSet& set, const Mat3& R) {
  double total = 0.0;
  Vec2 c2 = Vec2::Zero();
  Vec3 c3 = Vec3::Zero();
  for (const auto& c : set.points) {
    const double m = c.w2d.lpNorm<1>();
    total += m;
    c2 += m * c.x2d;
    c3 += m * c.x3d;
  }
  c2 /= total;
  c3 /= total;
  double s2 = 0.0;
  double s3 = 0.0;
  const Camera& cam = set.camera;
  for (const auto& c : set.points) {
    const double m = c.w2d.lpNorm<1>();
    const Vec2 d((c.x2d.x() - c2.x()) / cam.fx, (c.x2d.y() - c2.y()) / cam.fy);
    s2 += m * d.squaredNorm();
    s3 += m * (c.x3d - c3).squaredNorm();
  }
  s2 = std::sqrt(s2 / total);
  s3 = std::sqrt(s3 / total);
  // A sphere of rms radius s3 projects to an rms image radius ~ sqrt(2/3) s3 / z.
  double depth = s2 > 0.0 ? std::sqrt(2.0 / 3.0) * s3 / s2 : 1.0;
  depth = std::clamp(depth, std::max(2.0 * s3, 1e-3), 1e6);
  const Vec3 ray((c2.x() - cam.cx) / cam.fx, (c2.y() - cam.cy) / cam.fy, 1.0);
  return depth * ray - R * c3;
}

Pose random_seed(const CorrespondenceSet& set, const Pose& like, Rng& rng) {
  std::uniform_real_distribution<double> yaw(-std::numbers::pi, std::numbers::pi);
  switch (space_of(like)) {
    case PoseSpace::kYawOnly:
      return YawOnly{yaw(rng), std::get<YawOnly>(like).t_fixed};
    case PoseSpace::kYaw4DoF: {
      const double theta = yaw(rng);
      return Yaw4DoF{center_translation(set, yaw_rotation(theta)), theta};
    }
    case PoseSpace::kQuat6DoF: {
      std::normal_distribution<double> normal;
      Vec4 v;
      do {
        for (int i = 0; i < 4; ++i) v(i) = normal(rng);
      } while (v.norm() < 1e-12);
      const Eigen::Quaterniond q = vec_to_quat(v.normalized());
      return Quat6DoF{center_translation(set, q.toRotationMatrix()), q};
    }
  }
  return like;
}

struct LmOutcome {
  Pose pose;
  NormalEquations ne;
  bool converged = false;
  int iterations = 0;
  std::vector<double> cost_trace;
  double first_step_norm = 0.0;
};

LmOutcome lm_core(const CorrespondenceSet& set, const Pose& init, const SolverOptions& opts, double delta) {
  LmOutcome out{init, normal_equations(set, init, delta)};
  const int counted = count_weighted(set);
  if (out.ne.num_invalid >= counted) {
    throw Error(ErrorCode::kAllPointsInvalid, "every weighted point is behind the camera");
  }
  out.cost_trace.push_back(out.ne.cost);
  double lambda = opts.lambda_init;
  double reject_factor = opts.tr_grow;
  const int d = dof(space_of(init));

  for (int iter = 0; iter < opts.max_iter; ++iter) {
    out.iterations = iter + 1;
    const NormalEquations& ne = out.ne;
    if (ne.g.lpNorm<Eigen::Infinity>() == 0.0) {
      out.converged = true;
      break;
    }
    MatX A = ne.H;
    A.diagonal() += lambda * ne.H.diagonal().cwiseMax(kMinLmDiagonal).cwiseMin(kMaxLmDiagonal);
    Eigen::LDLT<MatX> ldlt(A);
    VecX step(d);
    bool ok = ldlt.info() == Eigen::Success && ldlt.isPositive();
    if (ok) {
      step = -ldlt.solve(ne.g);
      ok = step.allFinite();
    }
    if (!ok) {
      lambda *= reject_factor;
      reject_factor *= 2.0;
      if (lambda > kMaxLambda) throw Error(ErrorCode::kSingularSystem, "LM system singular after damping");
      continue;
    }
    if (iter == 0) out.first_step_norm = step.norm();
    if (step.norm() < opts.step_tol) {
      out.converged = true;
      break;
    }

    const Pose candidate = retract(out.pose, step);
    NormalEquations cne = normal_equations(set, candidate, delta);
    const double model = -(ne.g.dot(step) + 0.5 * step.dot(ne.H * step));
    const double actual = ne.cost - cne.cost;

    // Validity first (fewer behind-camera points wins), then cost.
    bool accept = false;
    double ratio = 1.0;
    if (cne.num_invalid < ne.num_invalid) {
      accept = true;
    } else if (cne.num_invalid == ne.num_invalid && actual > 0.0 && model > 0.0) {
      ratio = actual / model;
      accept = ratio > kMinRelativeDecrease;
    }

    if (accept) {
      const bool tiny = cne.num_invalid == ne.num_invalid && actual <= kFunctionTolerance * ne.cost;
      out.pose = candidate;
      out.ne = std::move(cne);
      out.cost_trace.push_back(out.ne.cost);
      const double c = 2.0 * ratio - 1.0;
      lambda *= std::max(1.0 / opts.tr_shrink, 1.0 - c * c * c);
      reject_factor = opts.tr_grow;
      if (tiny) {
        out.converged = true;
        break;
      }
    } else {
      lambda *= reject_factor;
      reject_factor *= 2.0;
      if (lambda > kMaxLambda) throw Error(ErrorCode::kSingularSystem, "LM damping exceeded its ceiling");
    }
  }
  return out;
}

MatX invert_damped(const MatX& H, double eps) {
  MatX A = H;
  A.diagonal().array() += eps;
  Eigen::LDLT<MatX> ldlt(A);
  MatX cov = ldlt.solve(MatX::Identity(H.rows(), H.cols()));
  return 0.5 * (cov + cov.transpose());
}

SolveResult finish(const CorrespondenceSet& set, LmOutcome&& out, const SolverOptions& opts) {
  SolveResult res{out.pose};
  res.covariance = invert_damped(out.ne.H, opts.eps);
  res.cost = out.ne.cost;
  res.converged = out.converged;
  res.iterations = out.iterations;
  res.num_invalid = out.ne.num_invalid;
  res.cost_trace = std::move(out.cost_trace);
  res.first_step_norm = out.first_step_norm;
  (void)set;
  return res;
}

}  // namespace

void validate(const SolverOptions& opts) {
  if (!(opts.eps > 0.0) || opts.max_iter < 1 || opts.num_subsets < 1 || opts.subset_size < 3 ||
      !(opts.delta_rel > 0.0) || !(opts.lambda_init > 0.0) || !(opts.tr_grow > 1.0) || !(opts.tr_shrink > 1.0) ||
      opts.init_iters < 1) {
    throw Error(ErrorCode::kInvalidArgument, "invalid solver options");
  }
}

double huber(double s, double delta) { return detail::huber_rho(s, delta); }

double huber_derivative(double s, double delta) { return detail::huber_weight(s, delta); }

double adaptive_delta(const CorrespondenceSet& set, double delta_rel) {
  const int n = set.size();
  if (n < 2) throw Error(ErrorCode::kInvalidArgument, "adaptive threshold needs at least two points");
  Vec2 w_mean = Vec2::Zero();
  Vec2 x_mean = Vec2::Zero();
  for (const auto& c : set.points) {
    w_mean += c.w2d;
    x_mean += c.x2d;
  }
  w_mean /= n;
  x_mean /= n;
  double spread = 0.0;
  for (const auto& c : set.points) spread += (c.x2d - x_mean).squaredNorm();
  spread = std::sqrt(spread / (n - 1));
  const double delta = delta_rel * 0.5 * w_mean.lpNorm<1>() * spread;
  if (!(delta > 0.0) || !std::isfinite(delta)) {
    throw Error(ErrorCode::kDegenerateSet, "zero Huber threshold: all weights zero or no 2D spread");
  }
  return delta;
}

RobustCost robust_cost(const CorrespondenceSet& set, const Pose& pose, double delta) {
  const detail::PoseFrame frame = detail::make_frame(pose);
  RobustCost out;
  detail::PointTerms<double> terms;
  for (const auto& c : set.points) {
    if (!detail::point_terms<double>(frame, set.camera, c.x3d, c.x2d, c.w2d, false, terms)) {
      if (has_weight(c)) ++out.num_invalid;
      continue;
    }
    out.cost += 0.5 * huber(terms.f.squaredNorm(), delta);
  }
  return out;
}

double log_likelihood(const CorrespondenceSet& set, const Pose& pose, double delta) {
  const RobustCost rc = robust_cost(set, pose, delta);
  return rc.num_invalid > 0 ? kNegInf : -rc.cost;
}

LinearSystem build_system(const CorrespondenceSet& set, const Pose& pose, double delta) {
  const int n = set.size();
  const int d = dof(space_of(pose));
  const detail::PoseFrame frame = detail::make_frame(pose);
  LinearSystem sys;
  sys.F = VecX::Zero(2 * n);
  sys.J = MatX::Zero(2 * n, d);
  sys.valid.assign(n, true);
  detail::PointTerms<double> terms;
  for (int i = 0; i < n; ++i) {
    const auto& c = set.points[i];
    if (!detail::point_terms<double>(frame, set.camera, c.x3d, c.x2d, c.w2d, true, terms)) {
      sys.valid[i] = false;
      if (has_weight(c)) ++sys.num_invalid;
      continue;
    }
    const double s = terms.f.squaredNorm();
    const double scale = std::sqrt(huber_derivative(s, delta));
    sys.F.segment<2>(2 * i) = scale * terms.f;
    sys.J.middleRows<2>(2 * i) = scale * terms.J;
    sys.cost += 0.5 * huber(s, delta);
  }
  if (sys.num_invalid > 0 && sys.num_invalid >= count_weighted(set)) {
    throw Error(ErrorCode::kAllPointsInvalid, "every weighted point is behind the camera");
  }
  return sys;
}

NormalEquations normal_equations(const CorrespondenceSet& set, const Pose& pose, double delta) {
  const int d = dof(space_of(pose));
  const detail::PoseFrame frame = detail::make_frame(pose);
  NormalEquations ne{MatX::Zero(d, d), VecX::Zero(d)};
  detail::PointTerms<double> terms;
  for (const auto& c : set.points) {
    if (!detail::point_terms<double>(frame, set.camera, c.x3d, c.x2d, c.w2d, true, terms)) {
      if (has_weight(c)) ++ne.num_invalid;
      continue;
    }
    const double s = terms.f.squaredNorm();
    const double rho_prime = huber_derivative(s, delta);
    ne.H.noalias() += rho_prime * terms.J.transpose() * terms.J;
    ne.g.noalias() += rho_prime * terms.J.transpose() * terms.f;
    ne.cost += 0.5 * huber(s, delta);
  }
  return ne;
}

SolveResult lm_solve(const CorrespondenceSet& set, const Pose& init, const SolverOptions& opts, double delta) {
  validate(opts);
  validate(set, space_of(init));
  validate(init);
  return finish(set, lm_core(set, init, opts, delta), opts);
}

SolveResult lm_solve(const CorrespondenceSet& set, const Pose& init, const SolverOptions& opts) {
  return lm_solve(set, init, opts, adaptive_delta(set, opts.delta_rel));
}

SolveResult gn_solve(const CorrespondenceSet& set, const Pose& init, const SolverOptions& opts) {
  validate(opts);
  validate(set, space_of(init));
  validate(init);
  const double delta = adaptive_delta(set, opts.delta_rel);
  const int counted = count_weighted(set);
  LmOutcome out{init, normal_equations(set, init, delta)};
  out.cost_trace.push_back(out.ne.cost);
  for (int iter = 0; iter < opts.max_iter; ++iter) {
    if (out.ne.num_invalid >= counted) {
      throw Error(ErrorCode::kAllPointsInvalid, "every weighted point is behind the camera");
    }
    out.iterations = iter + 1;
    MatX A = out.ne.H;
    A.diagonal().array() += opts.eps;
    Eigen::LDLT<MatX> ldlt(A);
    const VecX step = -ldlt.solve(out.ne.g);
    if (ldlt.info() != Eigen::Success || !step.allFinite()) {
      throw Error(ErrorCode::kSingularSystem, "Gauss-Newton system is singular");
    }
    if (iter == 0) out.first_step_norm = step.norm();
    if (step.norm() < opts.step_tol) {
      out.converged = true;
      break;
    }
    out.pose = retract(out.pose, step);
    out.ne = normal_equations(set, out.pose, delta);
    out.cost_trace.push_back(out.ne.cost);
  }
  if (out.ne.num_invalid >= counted) throw Error(ErrorCode::kAllPointsInvalid, "every weighted point is behind the camera");
  return finish(set, std::move(out), opts);
}

MatX covariance(const CorrespondenceSet& set, const Pose& pose_star, const SolverOptions& opts) {
  return invert_damped(normal_equations(set, pose_star, adaptive_delta(set, opts.delta_rel)).H, opts.eps);
}

std::vector<int> sample_subset(std::span<const double> mass, int count, Rng& rng) {
  std::vector<double> remaining(mass.begin(), mass.end());
  std::vector<int> picked;
  picked.reserve(count);
  for (int k = 0; k < count; ++k) {
    double total = 0.0;
    for (double m : remaining) total += m;
    if (!(total > 0.0)) throw Error(ErrorCode::kDegenerateSet, "not enough weighted points for a subset");
    double u = std::uniform_real_distribution<double>(0.0, total)(rng);
    int chosen = -1;
    for (int i = 0; i < static_cast<int>(remaining.size()); ++i) {
      if (remaining[i] <= 0.0) continue;
      chosen = i;
      if (u < remaining[i]) break;
      u -= remaining[i];
    }
    picked.push_back(chosen);
    remaining[chosen] = 0.0;
  }
  return picked;
}

Pose random_sample_init(const CorrespondenceSet& set, const Pose& like, const SolverOptions& opts, Rng& rng) {
  validate(opts);
  const PoseSpace space = space_of(like);
  validate(set, space);
  const int n = set.size();
  const int floor = std::max(3, min_points(space));
  int subset = std::min(opts.subset_size, n - 1);
  if (subset < floor) subset = std::min(floor, n);
  std::vector<double> mass(n);
  for (int i = 0; i < n; ++i) mass[i] = set.points[i].w2d.lpNorm<1>();
  if (std::count_if(mass.begin(), mass.end(), [](double m) { return m > 0.0; }) < subset) {
    throw Error(ErrorCode::kDegenerateSet, "fewer weighted points than the subset size");
  }

  const double delta = adaptive_delta(set, opts.delta_rel);
  SolverOptions sub_opts = opts;
  sub_opts.max_iter = opts.init_iters;

  CorrespondenceSet sub;
  sub.camera = set.camera;
  sub.points.resize(subset);
  double best = kNegInf;
  std::optional<Pose> best_pose;
  for (int m = 0; m < opts.num_subsets; ++m) {
    const std::vector<int> idx = sample_subset(mass, subset, rng);
    for (int k = 0; k < subset; ++k) sub.points[k] = set.points[idx[k]];
    const Pose seed = random_seed(set, like, rng);
    Pose hypothesis = seed;
    try {
      hypothesis = lm_core(sub, seed, sub_opts, delta).pose;
    } catch (const Error&) {
      continue;
    }
    const double ll = log_likelihood(set, hypothesis, delta);
    if (ll > best) {
      best = ll;
      best_pose = hypothesis;
    }
  }
  if (!best_pose) throw Error(ErrorCode::kNoValidHypothesis, "every hypothesis puts a point behind the camera");
  return *best_pose;
}

SolveResult solve(const CorrespondenceSet& set, const Pose& like, const SolverOptions& opts, Rng& rng) {
  const Pose init = random_sample_init(set, like, opts, rng);
  return lm_solve(set, init, opts);
}

SolveResult solve_guarded(const CorrespondenceSet& set, const Pose& y_gt, const SolverOptions& opts, Rng& rng) {
  validate(y_gt);
  const double delta = adaptive_delta(set, opts.delta_rel);
  Pose init = y_gt;
  try {
    const Pose hypothesis = random_sample_init(set, y_gt, opts, rng);
    if (log_likelihood(set, hypothesis, delta) > log_likelihood(set, y_gt, delta)) init = hypothesis;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kNoValidHypothesis) throw;
  }
  return lm_solve(set, init, opts, delta);
}

}  // namespace probpnp

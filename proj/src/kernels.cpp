#include "probpnp/kernels.hpp"

#include <omp.h>

#include <cstdlib>
#include <exception>
#include <string>

namespace probpnp::kernels {

namespace {

// Runs body(i) for i in [0, n). Exceptions are captured and the first one
// (lowest index) is rethrown after the loop.
template <typename Body>
void for_each_index(std::int64_t n, Exec exec, Body&& body) {
  if (exec == Exec::kSerial || n < 2) {
    for (std::int64_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  bool failed = false;
#pragma omp parallel for schedule(static) reduction(|| : failed)
  for (std::int64_t i = 0; i < n; ++i) {
    try {
      body(i);
    } catch (...) {
      errors[i] = std::current_exception();
      failed = true;
    }
  }
  if (!failed) return;
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

int num_threads() { return omp_get_max_threads(); }

int configure_threads_from_env(const char* env_var) {
  if (const char* value = std::getenv(env_var)) {
    char* end = nullptr;
    const long n = std::strtol(value, &end, 10);
    if (end != value && *end == '\0' && n >= 1 && n <= 4096) omp_set_num_threads(static_cast<int>(n));
  }
  return omp_get_max_threads();
}

std::vector<double> log_likelihoods(const CorrespondenceSet& set, std::span<const Pose> poses, double delta,
                                    Exec exec) {
  std::vector<double> out(poses.size());
  for_each_index(static_cast<std::int64_t>(poses.size()), exec,
                 [&](std::int64_t j) { out[j] = log_likelihood(set, poses[j], delta); });
  return out;
}

std::vector<double> proposal_log_pdfs(const Proposal& q, std::span<const Pose> poses, Exec exec) {
  std::vector<double> out(poses.size());
  for_each_index(static_cast<std::int64_t>(poses.size()), exec,
                 [&](std::int64_t j) { out[j] = q.log_pdf(poses[j]); });
  return out;
}

std::vector<CorrespondenceGrad> weighted_correspondence_grads(const CorrespondenceSet& set,
                                                              std::span<const Pose> poses,
                                                              std::span<const double> weights, double delta,
                                                              Exec exec) {
  if (weights.size() != poses.size()) throw Error(ErrorCode::kInvalidArgument, "pose and weight counts differ");
  // Rotations are shared across points, so compute them once.
  std::vector<Mat3> R(poses.size());
  std::vector<Vec3> t(poses.size());
  for (std::size_t j = 0; j < poses.size(); ++j) {
    if (weights[j] == 0.0) continue;
    R[j] = rotation(poses[j]);
    t[j] = translation(poses[j]);
  }
  const Camera& cam = set.camera;
  std::vector<CorrespondenceGrad> out(set.points.size());
  for_each_index(static_cast<std::int64_t>(set.points.size()), exec, [&](std::int64_t i) {
    const Correspondence& c = set.points[i];
    CorrespondenceGrad acc;
    for (std::size_t j = 0; j < poses.size(); ++j) {
      if (weights[j] == 0.0) continue;
      const Vec3 p = R[j] * c.x3d + t[j];
      if (!(p.z() > kMinDepth)) continue;
      const double inv_z = 1.0 / p.z();
      const Vec2 r(cam.fx * p.x() * inv_z + cam.cx - c.x2d.x(), cam.fy * p.y() * inv_z + cam.cy - c.x2d.y());
      const Vec2 f = c.w2d.cwiseProduct(r);
      const Vec2 g_f = (weights[j] * huber_derivative(f.squaredNorm(), delta)) * f;
      const Vec2 g_proj = g_f.cwiseProduct(c.w2d);
      const Vec3 g_p(cam.fx * inv_z * g_proj.x(), cam.fy * inv_z * g_proj.y(),
                     -(cam.fx * p.x() * g_proj.x() + cam.fy * p.y() * g_proj.y()) * inv_z * inv_z);
      acc.w2d += g_f.cwiseProduct(r);
      acc.x2d -= g_f.cwiseProduct(c.w2d);
      acc.x3d += R[j].transpose() * g_p;
    }
    out[i] = acc;
  });
  return out;
}

std::vector<SolveResult> solve_many(std::span<const CorrespondenceSet> sets, std::span<const Pose> likes,
                                    const SolverOptions& opts, std::span<const std::uint64_t> seeds, Exec exec) {
  if (likes.size() != sets.size() || seeds.size() != sets.size()) {
    throw Error(ErrorCode::kInvalidArgument, "solve_many inputs have different lengths");
  }
  std::vector<SolveResult> out(sets.size());
  for_each_index(static_cast<std::int64_t>(sets.size()), exec, [&](std::int64_t k) {
    Rng rng(seeds[k]);
    out[k] = solve(sets[k], likes[k], opts, rng);
  });
  return out;
}

}  // namespace probpnp::kernels

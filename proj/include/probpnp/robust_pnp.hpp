#pragma once

#include <random>
#include <span>
#include <vector>

#include "probpnp/geometry.hpp"

namespace probpnp {

using Rng = std::mt19937_64;

struct SolverOptions {
  double delta_rel = 1.0;    // relative Huber threshold
  double eps = 1e-5;         // damping floor for GN steps and covariance
  int max_iter = 10;         // LM iterations (accepted or rejected)
  double lambda_init = 1e-4;
  double tr_grow = 2.0;      // damping growth on a rejected step, doubles on repeats
  double tr_shrink = 3.0;    // largest damping decrease on an accepted step
  int num_subsets = 64;      // random-sampling hypotheses
  int subset_size = 4;
  int init_iters = 3;        // LM iterations per hypothesis
  double step_tol = 1e-10;
};

void validate(const SolverOptions& opts);

struct SolveResult {
  Pose pose;
  MatX covariance;  // d x d, tangent coordinates of `pose`
  double cost = 0.0;  // 0.5 * sum rho(|f|^2) over valid points
  bool converged = false;
  int iterations = 0;
  int num_invalid = 0;                // behind-camera points at the final pose
  std::vector<double> cost_trace;     // initial cost, then cost after every accepted step
  double first_step_norm = 0.0;
};

/// Huber kernel on a squared error.
double huber(double s, double delta);
/// rho'(s), the IRLS rescaling factor.
double huber_derivative(double s, double delta);

/// Per-object Huber threshold from weight magnitude and 2D spread.
double adaptive_delta(const CorrespondenceSet& set, double delta_rel);

/// Robust cost 0.5 * sum rho(|f_i|^2); behind-camera points are skipped and counted.
struct RobustCost {
  double cost = 0.0;
  int num_invalid = 0;
};
RobustCost robust_cost(const CorrespondenceSet& set, const Pose& pose, double delta);

/// Stacked, IRLS-rescaled residual and Jacobian.
struct LinearSystem {
  VecX F;  // 2N
  MatX J;  // 2N x d
  std::vector<bool> valid;
  int num_invalid = 0;
  double cost = 0.0;
};
LinearSystem build_system(const CorrespondenceSet& set, const Pose& pose, double delta);

/// J~^T J~, J~^T F~ and the cost, accumulated without stacking.
struct NormalEquations {
  MatX H;
  VecX g;
  double cost = 0.0;
  int num_invalid = 0;
};
NormalEquations normal_equations(const CorrespondenceSet& set, const Pose& pose, double delta);

/// Robustified Levenberg-Marquardt from `init`. The Huber threshold is
/// computed once from the set and held fixed.
SolveResult lm_solve(const CorrespondenceSet& set, const Pose& init, const SolverOptions& opts);
/// Same, with an explicit threshold (used on subsets of a larger set).
SolveResult lm_solve(const CorrespondenceSet& set, const Pose& init, const SolverOptions& opts, double delta);

/// Damped Gauss-Newton, every step accepted.
SolveResult gn_solve(const CorrespondenceSet& set, const Pose& init, const SolverOptions& opts);

/// (J~^T J~ + eps I)^-1 at the given pose.
MatX covariance(const CorrespondenceSet& set, const Pose& pose_star, const SolverOptions& opts);

/// log p(X | y) = -0.5 sum rho(|f_i|^2); -inf if a weighted point is behind the camera.
double log_likelihood(const CorrespondenceSet& set, const Pose& pose, double delta);

/// Draws `count` distinct indices with probability proportional to |w_i|_1.
std::vector<int> sample_subset(std::span<const double> mass, int count, Rng& rng);

/// Random-sampling initializer. `like` supplies the pose space and, for
/// yaw-only problems, the fixed translation.
Pose random_sample_init(const CorrespondenceSet& set, const Pose& like, const SolverOptions& opts, Rng& rng);

/// random_sample_init followed by lm_solve, with covariance.
SolveResult solve(const CorrespondenceSet& set, const Pose& like, const SolverOptions& opts, Rng& rng);

/// Training-mode solve: starts from whichever of the ground truth and the
/// random-sampling hypothesis has the higher likelihood.
SolveResult solve_guarded(const CorrespondenceSet& set, const Pose& y_gt, const SolverOptions& opts, Rng& rng);

}  // namespace probpnp

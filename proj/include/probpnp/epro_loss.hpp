#pragma once

#include <optional>
#include <span>
#include <vector>

#include "probpnp/amis.hpp"
#include "probpnp/geometry.hpp"
#include "probpnp/robust_pnp.hpp"

namespace probpnp {

struct LossOptions {
  McConfig mc;
  SolverOptions solver;
  /// Huber threshold override. When empty it is computed from the set. The
  /// threshold is treated as a constant when differentiating.
  std::optional<double> delta;
};

struct LossReport {
  double l_tgt = 0.0;
  double l_pred = 0.0;
  double l_kl = 0.0;  // l_tgt + l_pred
  std::vector<CorrespondenceGrad> grads;
  double delta = 0.0;
  SolveResult solve;
  McBatch batch;
};

/// Sum of 0.5 rho(|f_i|^2) at the target pose. Throws kBehindCamera if a
/// weighted point is behind the camera there.
double target_cost(const CorrespondenceSet& set, const Pose& y_gt, double delta);

/// d l_tgt / dX - E_batch[d c / dX], per point.
std::vector<CorrespondenceGrad> kl_gradients(const CorrespondenceSet& set, const Pose& y_gt, const McBatch& batch,
                                             double delta);

/// Guarded solve, AMIS from its proposal, then values and gradients from the
/// same batch.
LossReport kl_loss(const CorrespondenceSet& set, const Pose& y_gt, const LossOptions& opts);

/// Weight gradient split into the term pulling weights down where the target
/// pose fits badly and the term pushing them up where the posterior spreads.
struct WeightGradSplit {
  std::vector<Vec2> uncertainty;     // -rho'(gt) w o r(gt)^2
  std::vector<Vec2> discrimination;  // E[rho' w o r^2]
  std::vector<Vec2> total;           // dL/dw = -(uncertainty + discrimination)
};
WeightGradSplit grad_weights(const CorrespondenceSet& set, const Pose& y_gt, const McBatch& batch, double delta);

/// Smooth L1 on a distance: 0.5 d^2 / beta below beta, d - 0.5 beta above.
double smooth_l1(double d, double beta);

struct RegReport {
  double l_reg = 0.0;
  double l_pos = 0.0;
  double l_orient = 0.0;
  VecX step;  // one damped Gauss-Newton step from y_star
  std::vector<CorrespondenceGrad> grads;
};

/// Loss of the pose reached by one damped Gauss-Newton step from y_star
/// (held constant), with gradients through the step only.
RegReport reg_loss(const CorrespondenceSet& set, const Pose& y_gt, const Pose& y_star, const SolverOptions& opts,
                   double delta, double beta = 0.1);

/// Two-channel weights from per-point logits and a per-channel log scale.
struct WeightHead {
  MatX logits;  // N x 2
  Vec2 log_scale = Vec2::Zero();
};

enum class Activation { kSoftmax, kExp };

/// kSoftmax: w_ic = exp(s_c) softmax_i(logits_.c)_i. kExp: w_ic = exp(s_c + logits_ic).
std::vector<Vec2> weight_head(const WeightHead& head, Activation act = Activation::kSoftmax);

struct WeightHeadGrad {
  MatX logits;
  Vec2 log_scale = Vec2::Zero();
};
WeightHeadGrad weight_head_backward(const WeightHead& head, std::span<const Vec2> grad_w,
                                    Activation act = Activation::kSoftmax);

}  // namespace probpnp

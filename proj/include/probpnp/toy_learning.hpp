#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "probpnp/amis.hpp"
#include "probpnp/epro_loss.hpp"
#include "probpnp/geometry.hpp"
#include "probpnp/robust_pnp.hpp"

namespace probpnp::toy {

/// Ranges for ground-truth poses. Orientation is uniform in the pose space.
struct PoseSampler {
  double depth_lo = 3.5;
  double depth_hi = 4.5;
  double lateral = 0.3;  // |t_x|, |t_y| bound in metres
};

struct SceneSpec {
  std::vector<Vec3> shape;  // true model points, hidden from the learner
  int n_train = 64;
  int n_val = 32;
  PoseSpace space = PoseSpace::kQuat6DoF;
  PoseSampler poses;
  double pixel_noise_sigma = 0.5;
  Camera camera{500.0, 500.0, 320.0, 240.0};
  int symmetry = 1;  // k-fold symmetry about the model Y axis (1 or 4)
};

void validate(const SceneSpec& spec);

/// n points uniform in an axis-aligned cube of the given edge, centred at 0.
std::vector<Vec3> random_shape(int n, double edge, Rng& rng);
/// Default scene: 8 points in a 0.5 m cube, 64 train and 32 validation views.
SceneSpec default_scene_spec(Rng& rng);

struct View {
  std::vector<Vec2> x2d;
  Pose gt;
};

struct Scene {
  std::vector<View> train;
  std::vector<View> val;
  std::vector<Vec3> truth;
  Camera camera;
  PoseSpace space = PoseSpace::kQuat6DoF;
  int symmetry = 1;
  double mean_depth = 4.0;
};

/// Noisy projections of the shape under sampled poses. With symmetry 4 the
/// shape is replaced by the 90 degree yaw orbit of its first n/4 points.
Scene generate_scene(const SceneSpec& spec, Rng& rng);

struct LearnerParams {
  std::vector<Vec3> x3d;
  WeightHead head;
  Activation activation = Activation::kSoftmax;
};

enum class LossMode { kMonteCarlo, kReprojectionOnly, kMonteCarloReg };

struct TrainConfig {
  int steps = 400;
  double lr = 1e-3;            // x3d step size
  double weight_lr = 0.03;     // weight-head step size
  double momentum = 0.9;
  double lr_final = 0.1;       // cosine decay to lr_final * lr at the last step
  double clip_x3d = 10.0;      // global-norm clip per parameter group, 0 disables
  double clip_head = 10.0;
  int batch_size = 8;
  McConfig mc;
  SolverOptions solver;
  LossMode mode = LossMode::kMonteCarlo;
  double reg_weight = 0.1;
  Activation activation = Activation::kSoftmax;
  double init_spread = 0.01;   // std of the initial x3d, metres
  double init_weight = 0.1;    // initial per-point weight
  int eval_every = 50;         // validation interval in steps; the last step is always evaluated
};

void validate(const TrainConfig& cfg);

struct TraceRow {
  int step = 0;
  double l_tgt = 0.0;   // minibatch means
  double l_pred = 0.0;
  double l_kl = 0.0;
  double l_reg = 0.0;
  int failed_views = 0;  // views skipped after a solver or sampler error
  double val_rot_deg = -1.0;  // median validation errors, -1 when not evaluated
  double val_trans = -1.0;
  double val_add = -1.0;
};

struct TrainResult {
  LearnerParams params;
  std::vector<TraceRow> trace;
  bool aborted = false;
  int abort_step = -1;
  std::string abort_reason;
};

LearnerParams init_params(int n_points, const TrainConfig& cfg, Rng& rng);

/// Correspondence set of one view under the learned parameters.
CorrespondenceSet make_set(const LearnerParams& params, const Camera& camera, const View& view);

/// Momentum SGD over minibatches of training views. A non-finite gradient
/// stops training and sets `aborted`.
TrainResult train(const Scene& scene, const TrainConfig& cfg, Rng& rng);

struct EvalSummary {
  double median_rot_deg = 0.0;
  double mean_rot_deg = 0.0;
  double median_trans = 0.0;
  double mean_trans = 0.0;
  double median_add = 0.0;  // mean model-point distance, metres
  int failures = 0;  // solver errors, counted as 180 degrees and infinite translation
  int count = 0;
};

/// Rotation error in degrees, reduced modulo the k-fold yaw symmetry.
double rotation_error_deg(const Pose& est, const Pose& gt, int symmetry);
double translation_error(const Pose& est, const Pose& gt);
/// Mean distance between the model points placed by est and by gt, minimized
/// over the k-fold yaw symmetry.
double add_error(const Pose& est, const Pose& gt, std::span<const Vec3> model, int symmetry);

/// Solves each view with random-sampling init and LM.
EvalSummary evaluate(const LearnerParams& params, const Scene& scene, std::span<const View> views,
                     const SolverOptions& opts, std::uint64_t seed);

/// RMS distance of the points to their centroid.
double spread(std::span<const Vec3> pts);
/// Coordinate collapse: learned spread below 10% of the true spread.
bool is_degenerate(std::span<const Vec3> learned, std::span<const Vec3> truth);

/// Exponential moving average with alpha = 2 / (window + 1).
std::vector<double> ema(std::span<const double> x, int window);

/// Trend of a noisy loss trace, judged on its EMA sampled at the end of each
/// tenth of the run. The tolerance is a multiple of the EMA's own noise level,
/// estimated from first differences of the raw trace.
struct LossTrend {
  std::vector<double> checkpoints;  // EMA at the end of each tenth
  double sigma_ema = 0.0;
  double max_rise = 0.0;      // largest checkpoint rise above an earlier one, final 80%
  double net_decrease = 0.0;  // EMA at 20% minus EMA at the end
  bool non_increasing = false;  // max_rise <= tol_sigmas * sigma_ema
  bool decreasing = false;      // net_decrease > tol_sigmas * sigma_ema
};
LossTrend loss_trend(std::span<const double> loss, int window = 50, double tol_sigmas = 3.0);

struct YawMode {
  double yaw = 0.0;  // bin centre
  double mass = 0.0;
};

struct ModesReport {
  std::vector<double> histogram;  // normalized mass per bin on [-pi, pi)
  std::vector<YawMode> modes;     // by decreasing mass
  double l_pred = 0.0;
};

std::vector<double> yaw_histogram(std::span<const double> yaw, std::span<const double> weights, int bins);
/// Local maxima of the circularly smoothed histogram; each mode carries the
/// mass of its descending basin. Modes below min_mass are dropped.
std::vector<YawMode> yaw_modes(std::span<const double> histogram, double min_mass = 0.05);

/// AMIS posterior over a yaw-capable pose space, binned over yaw.
ModesReport posterior_modes_report(const CorrespondenceSet& set, const Pose& like, const McConfig& cfg,
                                   const SolverOptions& opts, int bins = 24);

}  // namespace probpnp::toy

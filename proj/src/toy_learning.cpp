#include "probpnp/toy_learning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "probpnp/distributions.hpp"

namespace probpnp::toy {

namespace {

constexpr double kPi = std::numbers::pi;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

// Exact quarter turn about Y: (x, y, z) -> (z, y, -x).
Vec3 quarter_turn(const Vec3& p) { return Vec3(p.z(), p.y(), -p.x()); }

Pose sample_pose(const SceneSpec& spec, Rng& rng) {
  const Vec3 t(uniform(rng, -spec.poses.lateral, spec.poses.lateral),
               uniform(rng, -spec.poses.lateral, spec.poses.lateral),
               uniform(rng, spec.poses.depth_lo, spec.poses.depth_hi));
  const double yaw = uniform(rng, -kPi, kPi);
  switch (spec.space) {
    case PoseSpace::kYawOnly:
      return YawOnly{yaw, t};
    case PoseSpace::kYaw4DoF:
      return Yaw4DoF{t, yaw};
    case PoseSpace::kQuat6DoF: {
      std::normal_distribution<double> n01;
      Vec4 v(n01(rng), n01(rng), n01(rng), n01(rng));
      v.normalize();
      if (v(0) < 0.0) v = -v;
      return Quat6DoF{t, vec_to_quat(v)};
    }
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown pose space");
}

std::vector<View> make_views(const SceneSpec& spec, const std::vector<Vec3>& shape, int count, Rng& rng) {
  std::normal_distribution<double> noise(0.0, spec.pixel_noise_sigma);
  std::vector<View> views;
  views.reserve(count);
  for (int v = 0; v < count; ++v) {
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      const Pose gt = sample_pose(spec, rng);
      View view{{}, gt};
      ok = true;
      for (const Vec3& p : shape) {
        const auto uv = try_project(spec.camera, transform(gt, p), 0.1);
        if (!uv) {
          ok = false;
          break;
        }
        view.x2d.push_back(*uv);
      }
      if (!ok) continue;
      if (spec.pixel_noise_sigma > 0.0) {
        for (auto& uv : view.x2d) uv += Vec2(noise(rng), noise(rng));
      }
      views.push_back(std::move(view));
    }
    if (!ok) throw Error(ErrorCode::kBehindCamera, "could not sample a pose with every point in front of the camera");
  }
  return views;
}

struct Momentum {
  std::vector<Vec3> x3d;
  MatX logits;
  Vec2 log_scale = Vec2::Zero();
};

bool all_finite(const std::vector<Vec3>& gx, const WeightHeadGrad& gh) {
  for (const auto& g : gx) {
    if (!g.allFinite()) return false;
  }
  return gh.logits.allFinite() && gh.log_scale.allFinite();
}

// Scale that brings the group's global gradient norm down to `limit`.
double clip_factor(const std::vector<Vec3>& g, double limit) {
  double sq = 0.0;
  for (const auto& v : g) sq += v.squaredNorm();
  const double norm = std::sqrt(sq);
  return limit > 0.0 && norm > limit ? limit / norm : 1.0;
}

double clip_factor(const WeightHeadGrad& g, double limit) {
  const double norm = std::sqrt(g.logits.squaredNorm() + g.log_scale.squaredNorm());
  return limit > 0.0 && norm > limit ? limit / norm : 1.0;
}

double median(std::vector<double> x) {
  if (x.empty()) return 0.0;
  const std::size_t m = x.size() / 2;
  std::nth_element(x.begin(), x.begin() + m, x.end());
  if (x.size() % 2 == 1) return x[m];
  const double hi = x[m];
  return 0.5 * (hi + *std::max_element(x.begin(), x.begin() + m));
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

void validate(const SceneSpec& spec) {
  validate(spec.camera);
  if (spec.n_train < 1 || spec.n_val < 0) throw Error(ErrorCode::kInvalidArgument, "n_train must be >= 1");
  if (!(spec.pixel_noise_sigma >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "pixel noise must be >= 0");
  if (!(spec.poses.depth_lo > 0.0) || spec.poses.depth_hi < spec.poses.depth_lo || spec.poses.lateral < 0.0) {
    throw Error(ErrorCode::kInvalidArgument, "invalid pose sampler ranges");
  }
  if (spec.symmetry != 1 && spec.symmetry != 4) throw Error(ErrorCode::kInvalidArgument, "symmetry must be 1 or 4");
  if (spec.symmetry == 4 && (spec.shape.size() % 4 != 0 || spec.space == PoseSpace::kQuat6DoF)) {
    throw Error(ErrorCode::kInvalidArgument, "4-fold symmetry needs a multiple of 4 points and a yaw pose space");
  }
  if (static_cast<int>(spec.shape.size()) < min_points(spec.space)) {
    throw Error(ErrorCode::kInvalidArgument, "too few shape points for the pose space");
  }
  for (const auto& p : spec.shape) {
    if (!p.allFinite()) throw Error(ErrorCode::kInvalidArgument, "shape point is not finite");
  }
}

std::vector<Vec3> random_shape(int n, double edge, Rng& rng) {
  std::vector<Vec3> pts(n);
  for (auto& p : pts) {
    for (int k = 0; k < 3; ++k) p(k) = uniform(rng, -0.5 * edge, 0.5 * edge);
  }
  return pts;
}

SceneSpec default_scene_spec(Rng& rng) {
  SceneSpec spec;
  spec.shape = random_shape(8, 0.5, rng);
  return spec;
}

Scene generate_scene(const SceneSpec& spec, Rng& rng) {
  validate(spec);
  Scene scene;
  scene.camera = spec.camera;
  scene.space = spec.space;
  scene.symmetry = spec.symmetry;
  scene.mean_depth = 0.5 * (spec.poses.depth_lo + spec.poses.depth_hi);
  if (spec.symmetry == 4) {
    const std::size_t base = spec.shape.size() / 4;
    for (int k = 0; k < 4; ++k) {
      for (std::size_t i = 0; i < base; ++i) {
        Vec3 p = spec.shape[i];
        for (int r = 0; r < k; ++r) p = quarter_turn(p);
        scene.truth.push_back(p);
      }
    }
  } else {
    scene.truth = spec.shape;
  }
  scene.train = make_views(spec, scene.truth, spec.n_train, rng);
  scene.val = make_views(spec, scene.truth, spec.n_val, rng);
  return scene;
}

void validate(const TrainConfig& cfg) {
  if (cfg.steps < 1) throw Error(ErrorCode::kInvalidArgument, "steps must be >= 1");
  if (!(cfg.lr > 0.0) || !(cfg.weight_lr > 0.0)) throw Error(ErrorCode::kInvalidArgument, "learning rates must be > 0");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw Error(ErrorCode::kInvalidArgument, "momentum must be in [0, 1)");
  if (cfg.batch_size < 1) throw Error(ErrorCode::kInvalidArgument, "batch_size must be >= 1");
  if (!(cfg.reg_weight >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "reg_weight must be >= 0");
  if (!(cfg.init_spread > 0.0) || !(cfg.init_weight > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "init_spread and init_weight must be > 0");
  }
  if (!(cfg.lr_final > 0.0 && cfg.lr_final <= 1.0)) throw Error(ErrorCode::kInvalidArgument, "lr_final must be in (0, 1]");
  if (!(cfg.clip_x3d >= 0.0) || !(cfg.clip_head >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "clip limits must be >= 0");
  if (cfg.eval_every < 1) throw Error(ErrorCode::kInvalidArgument, "eval_every must be >= 1");
  validate(cfg.mc);
  validate(cfg.solver);
}

LearnerParams init_params(int n_points, const TrainConfig& cfg, Rng& rng) {
  std::normal_distribution<double> n01;
  LearnerParams p;
  p.activation = cfg.activation;
  p.x3d.resize(n_points);
  for (auto& x : p.x3d) x = cfg.init_spread * Vec3(n01(rng), n01(rng), n01(rng));
  p.head.logits = MatX::Zero(n_points, 2);
  // Softmax spreads exp(log_scale) over the points; exp gives it to each.
  const double s = std::log(cfg.init_weight) + (cfg.activation == Activation::kSoftmax ? std::log(n_points) : 0.0);
  p.head.log_scale = Vec2::Constant(s);
  return p;
}

CorrespondenceSet make_set(const LearnerParams& params, const Camera& camera, const View& view) {
  const std::vector<Vec2> w = weight_head(params.head, params.activation);
  CorrespondenceSet set;
  set.camera = camera;
  set.points.resize(params.x3d.size());
  for (std::size_t i = 0; i < params.x3d.size(); ++i) set.points[i] = Correspondence{params.x3d[i], view.x2d[i], w[i]};
  return set;
}

TrainResult train(const Scene& scene, const TrainConfig& cfg, Rng& rng) {
  validate(cfg);
  const int n = static_cast<int>(scene.truth.size());
  TrainResult out;
  out.params = init_params(n, cfg, rng);
  LearnerParams& params = out.params;
  Momentum mom{std::vector<Vec3>(n, Vec3::Zero()), MatX::Zero(n, 2), Vec2::Zero()};

  std::vector<int> order(scene.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const int batch = std::min<int>(cfg.batch_size, static_cast<int>(order.size()));

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<CorrespondenceGrad> acc(n);
    TraceRow row;
    row.step = step;
    int used = 0;
    for (int b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const View& view = scene.train[order[cursor++]];
      const CorrespondenceSet set = make_set(params, scene.camera, view);
      try {
        std::vector<CorrespondenceGrad> g;
        if (cfg.mode == LossMode::kReprojectionOnly) {
          const double delta = adaptive_delta(set, cfg.solver.delta_rel);
          row.l_tgt += target_cost(set, view.gt, delta);
          g.resize(n);
          for (int i = 0; i < n; ++i) g[i] = jac_correspondence(view.gt, set.points[i], set.camera, delta);
        } else {
          LossOptions lo{cfg.mc, cfg.solver, std::nullopt};
          lo.mc.seed = mix_seed(cfg.mc.seed, static_cast<std::uint64_t>(step) * 1024 + b);
          const LossReport rep = kl_loss(set, view.gt, lo);
          row.l_tgt += rep.l_tgt;
          row.l_pred += rep.l_pred;
          g = rep.grads;
          if (cfg.mode == LossMode::kMonteCarloReg && cfg.reg_weight > 0.0) {
            const RegReport reg = reg_loss(set, view.gt, rep.solve.pose, cfg.solver, rep.delta);
            row.l_reg += reg.l_reg;
            for (int i = 0; i < n; ++i) {
              CorrespondenceGrad r = reg.grads[i];
              r *= cfg.reg_weight;
              g[i] += r;
            }
          }
        }
        for (int i = 0; i < n; ++i) acc[i] += g[i];
        ++used;
      } catch (const Error& e) {
        if (e.code() == ErrorCode::kNonFiniteGradient) {
          out.aborted = true;
          out.abort_step = step;
          out.abort_reason = e.what();
          return out;
        }
        ++row.failed_views;
      }
    }
    if (used > 0) {
      row.l_tgt /= used;
      row.l_pred /= used;
      row.l_reg /= used;
    }
    row.l_kl = row.l_tgt + row.l_pred;

    std::vector<Vec3> gx(n);
    std::vector<Vec2> gw(n);
    for (int i = 0; i < n; ++i) {
      const double inv = used > 0 ? 1.0 / used : 0.0;
      gx[i] = acc[i].x3d * inv;
      gw[i] = acc[i].w2d * inv;
    }
    const WeightHeadGrad gh = weight_head_backward(params.head, gw, params.activation);
    if (!all_finite(gx, gh) || !std::isfinite(row.l_kl)) {
      out.aborted = true;
      out.abort_step = step;
      out.abort_reason = "non-finite gradient or loss";
      out.trace.push_back(row);
      return out;
    }
    const double decay =
        cfg.lr_final + (1.0 - cfg.lr_final) * 0.5 * (1.0 + std::cos(kPi * step / std::max(1, cfg.steps - 1)));
    const double cx = clip_factor(gx, cfg.clip_x3d);
    const double ch = clip_factor(gh, cfg.clip_head);
    const double lr = cfg.lr * decay * cx;
    const double wlr = cfg.weight_lr * decay * ch;
    for (int i = 0; i < n; ++i) {
      mom.x3d[i] = cfg.momentum * mom.x3d[i] - lr * gx[i];
      params.x3d[i] += mom.x3d[i];
    }
    mom.logits = cfg.momentum * mom.logits - wlr * gh.logits;
    mom.log_scale = cfg.momentum * mom.log_scale - wlr * gh.log_scale;
    params.head.logits += mom.logits;
    params.head.log_scale += mom.log_scale;

    if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
      const EvalSummary ev = evaluate(params, scene, scene.val, cfg.solver, mix_seed(cfg.mc.seed, 0xE7A1 + step));
      row.val_rot_deg = ev.median_rot_deg;
      row.val_trans = ev.median_trans;
      row.val_add = ev.median_add;
    }
    out.trace.push_back(row);
  }
  return out;
}

double rotation_error_deg(const Pose& est, const Pose& gt, int symmetry) {
  if (space_of(est) != space_of(gt)) throw Error(ErrorCode::kInvalidArgument, "pose spaces differ");
  if (symmetry < 1) throw Error(ErrorCode::kInvalidArgument, "symmetry must be >= 1");
  const Mat3 re = rotation(est);
  const Mat3 rg = rotation(gt);
  double best = kPi;
  for (int k = 0; k < symmetry; ++k) {
    // Symmetry acts in the model frame: R_gt R_y(2 pi k / symmetry).
    const Mat3 d = re.transpose() * rg * yaw_rotation(2.0 * kPi * k / symmetry);
    const double c = std::clamp(0.5 * (d.trace() - 1.0), -1.0, 1.0);
    best = std::min(best, std::acos(c));
  }
  return best * 180.0 / kPi;
}

double translation_error(const Pose& est, const Pose& gt) { return (translation(est) - translation(gt)).norm(); }

double add_error(const Pose& est, const Pose& gt, std::span<const Vec3> model, int symmetry) {
  if (model.empty()) throw Error(ErrorCode::kInvalidArgument, "empty model");
  const Mat3 re = rotation(est);
  const Vec3 te = translation(est);
  const Mat3 rg = rotation(gt);
  const Vec3 tg = translation(gt);
  double best = std::numeric_limits<double>::infinity();
  for (int k = 0; k < symmetry; ++k) {
    const Mat3 rs = rg * yaw_rotation(2.0 * kPi * k / symmetry);
    double acc = 0.0;
    for (const Vec3& x : model) acc += ((re * x + te) - (rs * x + tg)).norm();
    best = std::min(best, acc / model.size());
  }
  return best;
}

EvalSummary evaluate(const LearnerParams& params, const Scene& scene, std::span<const View> views,
                     const SolverOptions& opts, std::uint64_t seed) {
  EvalSummary s;
  s.count = static_cast<int>(views.size());
  std::vector<double> rot;
  std::vector<double> trans;
  std::vector<double> add;
  Rng rng(seed);
  for (const View& view : views) {
    double r = 180.0;
    double t = std::numeric_limits<double>::infinity();
    double a = t;
    try {
      const CorrespondenceSet set = make_set(params, scene.camera, view);
      const SolveResult res = solve(set, view.gt, opts, rng);
      r = rotation_error_deg(res.pose, view.gt, scene.symmetry);
      t = translation_error(res.pose, view.gt);
      a = add_error(res.pose, view.gt, scene.truth, scene.symmetry);
    } catch (const Error&) {
      ++s.failures;
    }
    if (!std::isfinite(r) || !std::isfinite(t) || !std::isfinite(a)) {
      r = 180.0;
      t = std::numeric_limits<double>::infinity();
      a = t;
    }
    rot.push_back(r);
    trans.push_back(t);
    add.push_back(a);
  }
  if (rot.empty()) return s;
  s.median_rot_deg = median(rot);
  s.median_trans = median(trans);
  s.median_add = median(add);
  s.mean_rot_deg = std::accumulate(rot.begin(), rot.end(), 0.0) / rot.size();
  s.mean_trans = std::accumulate(trans.begin(), trans.end(), 0.0) / trans.size();
  return s;
}

double spread(std::span<const Vec3> pts) {
  if (pts.empty()) return 0.0;
  Vec3 c = Vec3::Zero();
  for (const auto& p : pts) c += p;
  c /= static_cast<double>(pts.size());
  double acc = 0.0;
  for (const auto& p : pts) acc += (p - c).squaredNorm();
  return std::sqrt(acc / pts.size());
}

bool is_degenerate(std::span<const Vec3> learned, std::span<const Vec3> truth) {
  return spread(learned) < 0.1 * spread(truth);
}

std::vector<double> ema(std::span<const double> x, int window) {
  if (window < 1) throw Error(ErrorCode::kInvalidArgument, "window must be >= 1");
  const double a = 2.0 / (window + 1.0);
  std::vector<double> out(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) out[j] = j == 0 ? x[0] : a * x[j] + (1.0 - a) * out[j - 1];
  return out;
}

LossTrend loss_trend(std::span<const double> loss, int window, double tol_sigmas) {
  const int n = static_cast<int>(loss.size());
  if (n < 20) throw Error(ErrorCode::kInvalidArgument, "loss trend needs at least 20 steps");
  const std::vector<double> e = ema(loss, window);
  LossTrend t;
  for (int d = 1; d <= 10; ++d) t.checkpoints.push_back(e[n * d / 10 - 1]);
  // White-noise estimate of the per-step scatter, then its EMA variance.
  const int start = n / 5;
  double ss = 0.0;
  for (int j = start + 1; j < n; ++j) ss += (loss[j] - loss[j - 1]) * (loss[j] - loss[j - 1]);
  const double sigma_step = std::sqrt(ss / (2.0 * (n - start - 1)));
  const double a = 2.0 / (window + 1.0);
  t.sigma_ema = sigma_step * std::sqrt(a / (2.0 - a));
  double lowest = t.checkpoints[1];
  for (int d = 2; d < 10; ++d) {
    t.max_rise = std::max(t.max_rise, t.checkpoints[d] - lowest);
    lowest = std::min(lowest, t.checkpoints[d]);
  }
  t.net_decrease = t.checkpoints[1] - t.checkpoints[9];
  t.non_increasing = t.max_rise <= tol_sigmas * t.sigma_ema;
  t.decreasing = t.net_decrease > tol_sigmas * t.sigma_ema;
  return t;
}

std::vector<double> yaw_histogram(std::span<const double> yaw, std::span<const double> weights, int bins) {
  if (bins < 3) throw Error(ErrorCode::kInvalidArgument, "need at least 3 bins");
  if (yaw.size() != weights.size()) throw Error(ErrorCode::kInvalidArgument, "yaw and weight counts differ");
  std::vector<double> h(bins, 0.0);
  double total = 0.0;
  for (std::size_t j = 0; j < yaw.size(); ++j) {
    const int b = std::clamp(static_cast<int>((wrap_angle(yaw[j]) + kPi) / (2.0 * kPi) * bins), 0, bins - 1);
    h[b] += weights[j];
    total += weights[j];
  }
  if (total > 0.0) {
    for (auto& v : h) v /= total;
  }
  return h;
}

std::vector<YawMode> yaw_modes(std::span<const double> histogram, double min_mass) {
  const int nb = static_cast<int>(histogram.size());
  if (nb < 3) throw Error(ErrorCode::kInvalidArgument, "need at least 3 bins");
  auto at = [&](const std::vector<double>& v, int b) { return v[(b % nb + nb) % nb]; };
  const std::vector<double> h(histogram.begin(), histogram.end());
  std::vector<double> s(nb);
  for (int b = 0; b < nb; ++b) s[b] = 0.25 * at(h, b - 1) + 0.5 * h[b] + 0.25 * at(h, b + 1);
  auto is_max = [&](int b) { return s[b] > at(s, b - 1) && s[b] >= at(s, b + 1); };

  std::vector<double> mass(nb, 0.0);
  for (int b = 0; b < nb; ++b) {
    int k = b;
    for (int guard = 0; guard < nb && !is_max(k); ++guard) {
      const int l = (k + nb - 1) % nb;
      const int r = (k + 1) % nb;
      k = s[r] >= s[l] ? r : l;
    }
    if (is_max(k)) mass[k] += h[b];
  }
  std::vector<YawMode> out;
  for (int b = 0; b < nb; ++b) {
    if (is_max(b) && mass[b] >= min_mass) out.push_back({-kPi + (b + 0.5) * 2.0 * kPi / nb, mass[b]});
  }
  std::sort(out.begin(), out.end(), [](const YawMode& a, const YawMode& b) { return a.mass > b.mass; });
  return out;
}

ModesReport posterior_modes_report(const CorrespondenceSet& set, const Pose& like, const McConfig& cfg,
                                   const SolverOptions& opts, int bins) {
  const PoseSpace space = space_of(like);
  if (space == PoseSpace::kQuat6DoF) throw Error(ErrorCode::kInvalidArgument, "modes report needs a yaw pose space");
  validate(set, space);
  const double delta = adaptive_delta(set, opts.delta_rel);
  if (!(delta > 0.0)) throw Error(ErrorCode::kDegenerateSet, "Huber threshold is zero");
  Rng rng(cfg.seed);
  const SolveResult res = solve(set, like, opts, rng);
  const McBatch batch = amis(set, init_proposal(res), cfg, delta, rng);
  const std::vector<double> w = normalized_weights(batch);
  std::vector<double> yaw(batch.size());
  for (std::size_t j = 0; j < batch.size(); ++j) {
    yaw[j] = space == PoseSpace::kYawOnly ? std::get<YawOnly>(batch.poses[j]).theta
                                          : std::get<Yaw4DoF>(batch.poses[j]).theta;
  }
  ModesReport rep;
  rep.histogram = yaw_histogram(yaw, w, bins);
  rep.modes = yaw_modes(rep.histogram);
  rep.l_pred = batch.l_pred;
  return rep;
}

}  // namespace probpnp::toy

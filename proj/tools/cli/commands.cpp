#include "commands.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <ostream>

#include "io.hpp"
#include "probpnp/kernels.hpp"
#include "svg.hpp"

namespace probpnp::cli {

namespace {

namespace fs = std::filesystem;

struct Common {
  std::uint64_t seed = 0;
  std::string out;
  std::string config;
  int samples = 0;
};

void write_text(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError(path + ": cannot open for writing");
  f << text;
  if (!f) throw InputError(path + ": write failed");
}

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

void emit(const Json& j, const Common& c, std::ostream& out) {
  const std::string text = dump(j);
  out << text;
  if (!c.out.empty()) write_text(c.out, text);
}

struct Loaded {
  Scene scene;
  SolverOptions solver;
  McConfig mc;
};

Loaded load(const std::string& path, const Common& c) {
  Loaded l{read_scene(path), {}, {}};
  l.solver = l.scene.solver;
  l.mc = l.scene.mc;
  if (!c.config.empty()) apply_config_file(c.config, l.solver, l.mc);
  if (c.samples != 0) {
    if (c.samples < 2) throw InputError("--samples: must be >= 2");
    l.mc.K_prime = c.samples;
  }
  l.mc.seed = c.seed;
  validate(l.scene.set, l.scene.space);
  return l;
}

const Pose& require_gt(const Scene& s) {
  if (!s.gt) throw InputError(s.path + ": /gt: missing required field (this command needs the ground-truth pose)");
  return *s.gt;
}

Json solve_json(const SolveResult& r, double delta) {
  Json j = header("solve_result");
  j["pose"] = pose_to_json(r.pose);
  j["covariance"] = matrix_to_json(r.covariance);
  j["cost"] = r.cost;
  j["converged"] = r.converged;
  j["iterations"] = r.iterations;
  j["num_invalid"] = r.num_invalid;
  j["delta"] = delta;
  return j;
}

Pose read_init(const std::string& path, const Scene& scene) {
  try {
    const Json j = read_json_file(path);
    ObjectReader r(j, "");
    check_header(r, "solve_result");
    return pose_from_json(r.at("pose"), "/pose", scene.space, scene.t_fixed);
  } catch (const InputError& e) {
    throw InputError(path + ": " + e.what());
  }
}

double yaw_of(const Pose& pose) {
  if (const auto* p = std::get_if<YawOnly>(&pose)) return p->theta;
  return std::get<Yaw4DoF>(pose).theta;
}

int cmd_solve(const std::string& scene_path, const std::string& init_path, const Common& c, std::ostream& out) {
  const Loaded l = load(scene_path, c);
  std::optional<Pose> init = l.scene.init;
  if (!init_path.empty()) init = read_init(init_path, l.scene);
  Rng rng(c.seed);
  const SolveResult r =
      init ? lm_solve(l.scene.set, *init, l.solver) : solve(l.scene.set, l.scene.like(), l.solver, rng);
  emit(solve_json(r, adaptive_delta(l.scene.set, l.solver.delta_rel)), c, out);
  return r.converged ? kOk : kNumericalFailure;
}

int cmd_sample(const std::string& scene_path, const Common& c, std::ostream& out) {
  const Loaded l = load(scene_path, c);
  const double delta = adaptive_delta(l.scene.set, l.solver.delta_rel);
  Rng rng(c.seed);
  const SolveResult sr = solve(l.scene.set, l.scene.like(), l.solver, rng);
  const McBatch batch = amis(l.scene.set, sr, l.mc, delta);

  Json summary{{"l_pred", batch.l_pred},
               {"T", batch.T},
               {"K_prime", batch.K_prime},
               {"rows", batch.size()},
               {"num_fallbacks", batch.num_fallbacks},
               {"delta", delta},
               {"solve_pose", pose_to_json(sr.pose)}};
  if (l.scene.space != PoseSpace::kQuat6DoF) {
    std::vector<double> yaw(batch.size());
    for (std::size_t j = 0; j < batch.size(); ++j) yaw[j] = yaw_of(batch.poses[j]);
    const auto hist = toy::yaw_histogram(yaw, normalized_weights(batch), 24);
    Json modes = Json::array();
    for (const auto& m : toy::yaw_modes(hist)) modes.push_back(Json{{"yaw_rad", m.yaw}, {"mass", m.mass}});
    summary["yaw_modes"] = modes;
    summary["num_yaw_modes"] = modes.size();
  }

  if (!c.out.empty()) {
    Json head = header("samples");
    head["pose_space"] = space_name(l.scene.space);
    head["seed"] = c.seed;
    std::string text = head.dump() + "\n";
    for (std::size_t j = 0; j < batch.size(); ++j) {
      const Json row{{"round", static_cast<int>(j) / batch.K_prime},
                     {"pose", pose_to_json(batch.poses[j])},
                     {"log_p", batch.log_p[j]},
                     {"log_q", batch.log_q[j]},
                     {"log_weight", batch.log_v[j]}};
      text += row.dump() + "\n";
    }
    text += Json{{"summary", summary}}.dump() + "\n";
    write_text(c.out, text);
  }
  Json doc = header("sample_summary");
  doc["summary"] = summary;
  out << dump(doc);
  return kOk;
}

Json grad_json(const CorrespondenceGrad& g) {
  return Json{{"x3d", {g.x3d(0), g.x3d(1), g.x3d(2)}}, {"x2d", {g.x2d(0), g.x2d(1)}}, {"w2d", {g.w2d(0), g.w2d(1)}}};
}

int cmd_loss(const std::string& scene_path, const Common& c, std::ostream& out) {
  const Loaded l = load(scene_path, c);
  const Pose& gt = require_gt(l.scene);
  LossOptions lo;
  lo.mc = l.mc;
  lo.solver = l.solver;
  const LossReport rep = kl_loss(l.scene.set, gt, lo);
  const WeightGradSplit split = grad_weights(l.scene.set, gt, rep.batch, rep.delta);
  const RegReport reg = reg_loss(l.scene.set, gt, rep.solve.pose, l.solver, rep.delta, l.scene.beta);

  Json points = Json::array();
  for (int i = 0; i < l.scene.set.size(); ++i) {
    Json p = grad_json(rep.grads[i]);
    p["w2d_uncertainty"] = {split.uncertainty[i](0), split.uncertainty[i](1)};
    p["w2d_discrimination"] = {split.discrimination[i](0), split.discrimination[i](1)};
    p["reg"] = grad_json(reg.grads[i]);
    points.push_back(p);
  }
  Json j = header("loss_report");
  j["l_tgt"] = rep.l_tgt;
  j["l_pred"] = rep.l_pred;
  j["l_kl"] = rep.l_kl;
  j["delta"] = rep.delta;
  j["solve_pose"] = pose_to_json(rep.solve.pose);
  j["reg"] = Json{{"l_reg", reg.l_reg}, {"l_pos", reg.l_pos}, {"l_orient", reg.l_orient}, {"beta_m", l.scene.beta}};
  j["grads"] = points;
  emit(j, c, out);
  return kOk;
}

/// Parameters of a set as one flat vector: per point x3d, x2d, w2d.
VecX flatten(const CorrespondenceSet& set) {
  VecX v(7 * set.size());
  for (int i = 0; i < set.size(); ++i) {
    const auto& p = set.points[i];
    v.segment<3>(7 * i) = p.x3d;
    v.segment<2>(7 * i + 3) = p.x2d;
    v.segment<2>(7 * i + 5) = p.w2d;
  }
  return v;
}

CorrespondenceSet unflatten(const CorrespondenceSet& like, const VecX& v) {
  CorrespondenceSet set = like;
  for (int i = 0; i < set.size(); ++i) {
    set.points[i] = {v.segment<3>(7 * i), v.segment<2>(7 * i + 3), v.segment<2>(7 * i + 5)};
  }
  return set;
}

VecX flatten(const std::vector<CorrespondenceGrad>& g) {
  VecX v(7 * g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    v.segment<3>(7 * i) = g[i].x3d;
    v.segment<2>(7 * i + 3) = g[i].x2d;
    v.segment<2>(7 * i + 5) = g[i].w2d;
  }
  return v;
}

int cmd_gradcheck(const std::string& scene_path, const Common& c, std::ostream& out) {
  constexpr int kNodes = 16384;
  constexpr double kTol = 1e-3;
  const Loaded l = load(scene_path, c);
  const Pose& gt = require_gt(l.scene);
  const CorrespondenceSet& set = l.scene.set;
  const double delta = adaptive_delta(set, l.solver.delta_rel);

  std::function<double(const CorrespondenceSet&)> value;
  VecX analytic;
  Pose eval_pose = gt;
  YawOnly like;
  std::string path;
  if (l.scene.space == PoseSpace::kYawOnly) {
    // KL loss with the posterior integral done by quadrature.
    like = std::get<YawOnly>(l.scene.like());
    path = "kl_quadrature";
    value = [&](const CorrespondenceSet& s) {
      return target_cost(s, gt, delta) + yaw_quadrature(s, like, kNodes, delta).l_pred;
    };
    analytic = flatten(kl_gradients(set, gt, yaw_quadrature(set, like, kNodes, delta), delta));
  } else {
    // Robust cost at a seeded offset from the target pose, so residuals are
    // not all zero on consistent scenes.
    path = "robust_cost";
    Rng rng(c.seed);
    std::normal_distribution<double> n01;
    VecX step(dof(l.scene.space));
    for (int k = 0; k < step.size(); ++k) step(k) = 0.02 * n01(rng);
    eval_pose = retract(gt, step);
    value = [&](const CorrespondenceSet& s) { return target_cost(s, eval_pose, delta); };
    std::vector<CorrespondenceGrad> g;
    for (const auto& p : set.points) g.push_back(jac_correspondence(eval_pose, p, set.camera, delta));
    analytic = flatten(g);
  }
  const VecX x = flatten(set);
  VecX numeric(x.size());
  for (int k = 0; k < x.size(); ++k) {
    const double h = 1e-6 * std::max(1.0, std::abs(x(k)));
    VecX a = x, b = x;
    a(k) += h;
    b(k) -= h;
    numeric(k) = (value(unflatten(set, a)) - value(unflatten(set, b))) / (2.0 * h);
  }
  // Entries far below the gradient scale are compared against that scale.
  const double floor = 1e-6 * std::max(analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff());
  double max_rel = 0.0;
  int worst = 0;
  for (int k = 0; k < x.size(); ++k) {
    const double denom = std::max({std::abs(analytic(k)), std::abs(numeric(k)), floor, 1e-300});
    const double rel = std::abs(analytic(k) - numeric(k)) / denom;
    if (rel > max_rel) {
      max_rel = rel;
      worst = k;
    }
  }
  static const char* const kNames[7] = {"x3d/0", "x3d/1", "x3d/2", "x2d/0", "x2d/1", "w2d/0", "w2d/1"};
  Json j = header("gradcheck");
  j["path"] = path;
  j["eval_pose"] = pose_to_json(eval_pose);
  j["num_parameters"] = x.size();
  j["max_rel_error"] = max_rel;
  j["worst_parameter"] = "points/" + std::to_string(worst / 7) + "/" + kNames[worst % 7];
  j["tolerance"] = kTol;
  j["pass"] = max_rel < kTol;
  emit(j, c, out);
  return max_rel < kTol ? kOk : kNumericalFailure;
}

Json eval_json(const toy::TrainResult& r, const toy::Scene& scene) {
  const toy::TraceRow& last = r.trace.back();
  const double tol_trans = 0.02 * scene.mean_depth;
  return Json{
      {"median_rot_deg", last.val_rot_deg},
      {"median_trans_m", last.val_trans},
      {"median_add_m", last.val_add},
      {"trans_tolerance_m", tol_trans},
      {"converged", !r.aborted && last.val_rot_deg >= 0.0 && last.val_rot_deg < 2.0 && last.val_trans < tol_trans},
      {"degenerate", toy::is_degenerate(r.params.x3d, scene.truth)},
      {"spread_learned_m", toy::spread(r.params.x3d)},
      {"spread_truth_m", toy::spread(scene.truth)},
      {"aborted", r.aborted}};
}

int cmd_toytrain(const Common& c, std::ostream& out, std::ostream& err) {
  if (c.config.empty()) throw InputError("toytrain: --config is required");
  ToyConfig cfg = read_toy_config(c.config);
  const std::string dir = c.out.empty() ? "toytrain_out" : c.out;

  Rng rng(c.seed);
  cfg.scene.shape = toy::random_shape(cfg.n_points, cfg.edge, rng);
  const toy::Scene scene = toy::generate_scene(cfg.scene, rng);
  cfg.train.mc.seed = c.seed;
  Rng baseline_rng = rng;
  const toy::TrainResult r = toy::train(scene, cfg.train, rng);

  write_text(dir + "/trace.json", dump(trace_to_json(r.trace)));
  write_text(dir + "/params.json", dump(params_to_json(r.params)));
  if (r.aborted) {
    Json d = header("abort_dump");
    d["abort_step"] = r.abort_step;
    d["reason"] = r.abort_reason;
    d["params"] = params_to_json(r.params);
    const std::size_t tail = std::min<std::size_t>(r.trace.size(), 10);
    d["last_rows"] = trace_to_json({r.trace.end() - static_cast<std::ptrdiff_t>(tail), r.trace.end()})["rows"];
    const std::string dump_path = dir + "/abort_dump.json";
    write_text(dump_path, dump(d));
    err << "training aborted at step " << r.abort_step << ": " << r.abort_reason << "\n"
        << "diagnostic dump: " << dump_path << "\n";
    return kTrainingAbort;
  }

  Json s = header("toytrain_summary");
  s["seed"] = c.seed;
  s["loss_mode"] = loss_mode_name(cfg.train.mode);
  s["steps"] = cfg.train.steps;
  s["mean_depth_m"] = scene.mean_depth;
  s["final"] = eval_json(r, scene);
  if (cfg.baseline) {
    toy::TrainConfig bc = cfg.train;
    bc.mode = *cfg.baseline;
    const toy::TrainResult b = toy::train(scene, bc, baseline_rng);
    Json bj = eval_json(b, scene);
    bj["loss_mode"] = loss_mode_name(bc.mode);
    s["baseline"] = bj;
    const double ref = b.trace.back().val_add;
    s["error_ratio"] =
        ref > 0.0 && !b.aborted ? r.trace.back().val_add / ref : std::numeric_limits<double>::quiet_NaN();
  }
  write_text(dir + "/summary.json", dump(s));
  out << dump(s);
  return kOk;
}

int cmd_plot(const std::string& trace_path, const Common& c, std::ostream& out) {
  const auto rows = read_trace(trace_path);
  if (rows.empty()) throw InputError(trace_path + ": /rows: trace has no rows");
  const std::string dir = c.out.empty() ? "." : c.out;
  Series kl{"l_kl", {}, {}}, tgt{"l_tgt", {}, {}}, pred{"l_pred", {}, {}};
  Series rot{"median rot (deg)", {}, {}}, add{"median ADD (cm)", {}, {}};
  for (const auto& r : rows) {
    kl.x.push_back(r.step);
    kl.y.push_back(r.l_kl);
    tgt.x.push_back(r.step);
    tgt.y.push_back(r.l_tgt);
    pred.x.push_back(r.step);
    pred.y.push_back(r.l_pred);
    if (r.val_rot_deg >= 0.0) {
      rot.x.push_back(r.step);
      rot.y.push_back(r.val_rot_deg);
      add.x.push_back(r.step);
      add.y.push_back(100.0 * r.val_add);
    }
  }
  const std::string loss_file = dir + "/loss.svg";
  const std::string error_file = dir + "/error.svg";
  write_text(loss_file, line_plot("Training loss", "step", "loss (nats)", {kl, tgt, pred}));
  write_text(error_file, line_plot("Validation pose error", "step", "error", {rot, add}));
  Json j = header("plot_outputs");
  j["files"] = {loss_file, error_file};
  out << dump(j);
  return kOk;
}

void add_common(CLI::App* cmd, Common& c, bool samples, bool config) {
  cmd->add_option("--seed", c.seed, "random seed");
  cmd->add_option("--out", c.out, "output file or directory");
  if (config) cmd->add_option("--config", c.config, "configuration file");
  if (samples) cmd->add_option("--samples", c.samples, "samples per AMIS round (K')");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  kernels::configure_threads_from_env("PROBPNP_NUM_THREADS");
  CLI::App app{"Probabilistic PnP: solve, sample, losses, gradient checks and toy training"};
  app.require_subcommand(1);
  Common c;
  std::string scene_path, init_path, trace_path;

  auto* solve_cmd = app.add_subcommand("solve", "robust LM pose with covariance");
  solve_cmd->add_option("scene", scene_path, "scene file")->required();
  solve_cmd->add_option("--init", init_path, "start LM from the pose in a solve_result file");
  add_common(solve_cmd, c, false, true);

  auto* sample_cmd = app.add_subcommand("sample", "AMIS posterior samples");
  sample_cmd->add_option("scene", scene_path, "scene file")->required();
  add_common(sample_cmd, c, true, true);

  auto* loss_cmd = app.add_subcommand("loss", "Monte Carlo KL loss and gradients");
  loss_cmd->add_option("scene", scene_path, "scene file with gt")->required();
  add_common(loss_cmd, c, true, true);

  auto* grad_cmd = app.add_subcommand("gradcheck", "analytic vs finite-difference gradients");
  grad_cmd->add_option("scene", scene_path, "scene file with gt")->required();
  add_common(grad_cmd, c, false, true);

  auto* train_cmd = app.add_subcommand("toytrain", "learn a toy model from scratch");
  add_common(train_cmd, c, false, true);

  auto* plot_cmd = app.add_subcommand("plot", "SVG loss and error curves from a trace");
  plot_cmd->add_option("trace", trace_path, "trace file")->required();
  add_common(plot_cmd, c, false, false);

  try {
    std::vector<std::string> rest(args.begin() + (args.empty() ? 0 : 1), args.end());
    std::reverse(rest.begin(), rest.end());
    app.parse(rest);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kInputError;
  }

  try {
    if (*solve_cmd) return cmd_solve(scene_path, init_path, c, out);
    if (*sample_cmd) return cmd_sample(scene_path, c, out);
    if (*loss_cmd) return cmd_loss(scene_path, c, out);
    if (*grad_cmd) return cmd_gradcheck(scene_path, c, out);
    if (*train_cmd) return cmd_toytrain(c, out, err);
    if (*plot_cmd) return cmd_plot(trace_path, c, out);
  } catch (const InputError& e) {
    err << "input error: " << e.what() << "\n";
    return kInputError;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    if (e.code() == ErrorCode::kInvalidArgument) return kInputError;
    if (e.code() == ErrorCode::kNonFiniteGradient) return kTrainingAbort;
    return kNumericalFailure;
  } catch (const fs::filesystem_error& e) {
    err << "input error: " << e.what() << "\n";
    return kInputError;
  }
  return kInputError;
}

}  // namespace probpnp::cli

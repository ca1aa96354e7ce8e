#include "io.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace probpnp::cli {

void fail(const std::string& path, const std::string& message) {
  throw InputError((path.empty() ? std::string("/") : path) + ": " + message);
}

ObjectReader::ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
  if (!j_.is_object()) fail(path_, "expected an object");
}

bool ObjectReader::has(const std::string& key) const {
  seen_.insert(key);
  return j_.contains(key) && !j_.at(key).is_null();
}

std::string ObjectReader::child_path(const std::string& key) const { return path_ + "/" + key; }

const Json& ObjectReader::at(const std::string& key) {
  seen_.insert(key);
  if (!j_.contains(key)) fail(child_path(key), "missing required field");
  return j_.at(key);
}

double ObjectReader::number(const std::string& key) {
  const Json& v = at(key);
  if (!v.is_number()) fail(child_path(key), "expected a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) fail(child_path(key), "expected a finite number");
  return x;
}

double ObjectReader::number_or(const std::string& key, double fallback) { return has(key) ? number(key) : fallback; }

int ObjectReader::integer(const std::string& key) {
  const Json& v = at(key);
  if (!v.is_number_integer()) fail(child_path(key), "expected an integer");
  return v.get<int>();
}

int ObjectReader::integer_or(const std::string& key, int fallback) { return has(key) ? integer(key) : fallback; }

bool ObjectReader::boolean_or(const std::string& key, bool fallback) {
  if (!has(key)) return fallback;
  const Json& v = at(key);
  if (!v.is_boolean()) fail(child_path(key), "expected true or false");
  return v.get<bool>();
}

std::string ObjectReader::string(const std::string& key) {
  const Json& v = at(key);
  if (!v.is_string()) fail(child_path(key), "expected a string");
  return v.get<std::string>();
}

std::string ObjectReader::string_or(const std::string& key, const std::string& fallback) {
  return has(key) ? string(key) : fallback;
}

namespace {

template <int N>
Eigen::Matrix<double, N, 1> fixed_vector(const Json& v, const std::string& path) {
  if (!v.is_array() || v.size() != N) fail(path, "expected an array of " + std::to_string(N) + " numbers");
  Eigen::Matrix<double, N, 1> out;
  for (int k = 0; k < N; ++k) {
    if (!v[k].is_number()) fail(path + "/" + std::to_string(k), "expected a number");
    out(k) = v[k].get<double>();
    if (!std::isfinite(out(k))) fail(path + "/" + std::to_string(k), "expected a finite number");
  }
  return out;
}

Json vec_to_json(const VecX& v) {
  Json a = Json::array();
  for (int k = 0; k < v.size(); ++k) a.push_back(v(k));
  return a;
}

}  // namespace

Vec2 ObjectReader::vec2(const std::string& key) { return fixed_vector<2>(at(key), child_path(key)); }
Vec3 ObjectReader::vec3(const std::string& key) { return fixed_vector<3>(at(key), child_path(key)); }
Vec4 ObjectReader::vec4(const std::string& key) { return fixed_vector<4>(at(key), child_path(key)); }

ObjectReader ObjectReader::object(const std::string& key) { return ObjectReader(at(key), child_path(key)); }

void ObjectReader::finish() const {
  for (const auto& [key, value] : j_.items()) {
    if (!seen_.contains(key)) fail(child_path(key), "unknown field");
  }
}

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open file");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    // The parser message carries the line and column.
    throw InputError(e.what());
  }
}

namespace {

/// Runs a reader, prefixing input errors with the file name.
template <class F>
auto in_file(const std::string& path, F&& read) {
  try {
    return read(read_json_file(path));
  } catch (const InputError& e) {
    throw InputError(path + ": " + e.what());
  }
}

}  // namespace

void check_header(ObjectReader& r, const std::string& kind) {
  const int version = r.integer("format_version");
  if (version != kFormatVersion) {
    fail(r.child_path("format_version"),
         "unsupported version " + std::to_string(version) + ", expected " + std::to_string(kFormatVersion));
  }
  const std::string k = r.string("kind");
  if (k != kind) fail(r.child_path("kind"), "expected \"" + kind + "\", got \"" + k + "\"");
}

Json header(const std::string& kind) { return Json{{"format_version", kFormatVersion}, {"kind", kind}}; }

std::string space_name(PoseSpace space) {
  switch (space) {
    case PoseSpace::kYawOnly:
      return "yaw_only";
    case PoseSpace::kYaw4DoF:
      return "yaw_4dof";
    case PoseSpace::kQuat6DoF:
      return "quat_6dof";
  }
  return "";
}

PoseSpace parse_space(const std::string& name, const std::string& path) {
  if (name == "yaw_only") return PoseSpace::kYawOnly;
  if (name == "yaw_4dof") return PoseSpace::kYaw4DoF;
  if (name == "quat_6dof") return PoseSpace::kQuat6DoF;
  fail(path, "unknown pose space \"" + name + "\" (expected yaw_only, yaw_4dof or quat_6dof)");
}

Json pose_to_json(const Pose& pose) {
  Json j;
  j["space"] = space_name(space_of(pose));
  if (const auto* p = std::get_if<YawOnly>(&pose)) {
    j["theta_rad"] = p->theta;
    j["t_m"] = vec_to_json(p->t_fixed);
  } else if (const auto* p = std::get_if<Yaw4DoF>(&pose)) {
    j["t_m"] = vec_to_json(p->t);
    j["theta_rad"] = p->theta;
  } else {
    const auto& q = std::get<Quat6DoF>(pose);
    j["t_m"] = vec_to_json(q.t);
    j["q_wxyz"] = vec_to_json(quat_to_vec(q.q));
  }
  return j;
}

Pose pose_from_json(const Json& j, const std::string& path, PoseSpace space, const Vec3& t_fixed) {
  ObjectReader r(j, path);
  if (r.has("space")) {
    const PoseSpace s = parse_space(r.string("space"), r.child_path("space"));
    if (s != space) fail(r.child_path("space"), "pose space does not match the scene (" + space_name(space) + ")");
  }
  Pose pose;
  switch (space) {
    case PoseSpace::kYawOnly:
      pose = YawOnly{r.number("theta_rad"), r.has("t_m") ? r.vec3("t_m") : t_fixed};
      break;
    case PoseSpace::kYaw4DoF:
      pose = Yaw4DoF{r.vec3("t_m"), r.number("theta_rad")};
      break;
    case PoseSpace::kQuat6DoF: {
      const Vec4 q = r.vec4("q_wxyz");
      if (std::abs(q.norm() - 1.0) > 1e-6) fail(r.child_path("q_wxyz"), "quaternion must have unit norm");
      pose = Quat6DoF{r.vec3("t_m"), vec_to_quat(q.normalized())};
      break;
    }
  }
  r.finish();
  return pose;
}

Json matrix_to_json(const MatX& m) {
  Json rows = Json::array();
  for (int i = 0; i < m.rows(); ++i) rows.push_back(vec_to_json(m.row(i).transpose()));
  return rows;
}

Pose Scene::like() const {
  switch (space) {
    case PoseSpace::kYawOnly:
      return YawOnly{0.0, t_fixed};
    case PoseSpace::kYaw4DoF:
      return Yaw4DoF{};
    case PoseSpace::kQuat6DoF:
      return Quat6DoF{};
  }
  return Quat6DoF{};
}

namespace {

Camera read_camera(ObjectReader r) {
  Camera c{r.number("fx_px"), r.number("fy_px"), r.number("cx_px"), r.number("cy_px")};
  r.finish();
  if (!(c.fx > 0.0) || !(c.fy > 0.0)) fail(r.child_path("fx_px"), "focal lengths must be > 0");
  return c;
}

Json camera_to_json(const Camera& c) {
  return Json{{"fx_px", c.fx}, {"fy_px", c.fy}, {"cx_px", c.cx}, {"cy_px", c.cy}};
}

}  // namespace

void read_solver_options(ObjectReader r, SolverOptions& o) {
  o.delta_rel = r.number_or("delta_rel", o.delta_rel);
  o.eps = r.number_or("eps", o.eps);
  o.max_iter = r.integer_or("max_iter", o.max_iter);
  o.lambda_init = r.number_or("lambda_init", o.lambda_init);
  o.tr_grow = r.number_or("tr_grow", o.tr_grow);
  o.tr_shrink = r.number_or("tr_shrink", o.tr_shrink);
  o.num_subsets = r.integer_or("num_subsets", o.num_subsets);
  o.subset_size = r.integer_or("subset_size", o.subset_size);
  o.init_iters = r.integer_or("init_iters", o.init_iters);
  o.step_tol = r.number_or("step_tol", o.step_tol);
  r.finish();
  try {
    validate(o);
  } catch (const Error& e) {
    fail(r.path(), e.what());
  }
}

void read_mc_config(ObjectReader r, McConfig& cfg) {
  cfg.T = r.integer_or("T", cfg.T);
  cfg.K_prime = r.integer_or("K_prime", cfg.K_prime);
  r.finish();
  try {
    validate(cfg);
  } catch (const Error& e) {
    fail(r.path(), e.what());
  }
}

Json solver_options_to_json(const SolverOptions& o) {
  return Json{{"delta_rel", o.delta_rel},     {"eps", o.eps},
              {"max_iter", o.max_iter},       {"lambda_init", o.lambda_init},
              {"tr_grow", o.tr_grow},         {"tr_shrink", o.tr_shrink},
              {"num_subsets", o.num_subsets}, {"subset_size", o.subset_size},
              {"init_iters", o.init_iters},   {"step_tol", o.step_tol}};
}

Json mc_config_to_json(const McConfig& cfg) { return Json{{"T", cfg.T}, {"K_prime", cfg.K_prime}}; }

void apply_config_file(const std::string& path, SolverOptions& opts, McConfig& mc) {
  in_file(path, [&](const Json& j) {
    ObjectReader r(j, "");
    check_header(r, "solver_config");
    if (r.has("solver")) read_solver_options(r.object("solver"), opts);
    if (r.has("mc")) read_mc_config(r.object("mc"), mc);
    r.finish();
    return 0;
  });
}

Scene read_scene(const std::string& path) {
  return in_file(path, [&](const Json& j) {
    Scene s;
    s.path = path;
    ObjectReader r(j, "");
    check_header(r, "scene");
    r.string_or("description", "");
    s.set.camera = read_camera(r.object("camera"));
    s.space = parse_space(r.string("pose_space"), r.child_path("pose_space"));
    if (s.space == PoseSpace::kYawOnly) {
      s.t_fixed = r.vec3("t_fixed_m");
    } else if (r.has("t_fixed_m")) {
      fail(r.child_path("t_fixed_m"), "only yaw_only scenes have a fixed translation");
    }
    const Json& pts = r.at("points");
    if (!pts.is_array()) fail(r.child_path("points"), "expected an array");
    for (std::size_t i = 0; i < pts.size(); ++i) {
      ObjectReader p(pts[i], r.child_path("points") + "/" + std::to_string(i));
      Correspondence c{p.vec3("x3d_m"), p.vec2("x2d_px"), p.vec2("w2d")};
      if (c.w2d.minCoeff() < 0.0) fail(p.child_path("w2d"), "weights must be >= 0");
      p.finish();
      s.set.points.push_back(c);
    }
    if (s.set.size() < min_points(s.space)) {
      fail(r.child_path("points"),
           "a " + space_name(s.space) + " scene needs at least " + std::to_string(min_points(s.space)) + " points");
    }
    if (r.has("gt")) s.gt = pose_from_json(r.at("gt"), r.child_path("gt"), s.space, s.t_fixed);
    if (r.has("init")) s.init = pose_from_json(r.at("init"), r.child_path("init"), s.space, s.t_fixed);
    if (r.has("solver")) read_solver_options(r.object("solver"), s.solver);
    if (r.has("mc")) read_mc_config(r.object("mc"), s.mc);
    s.beta = r.number_or("reg_beta_m", s.beta);
    if (!(s.beta > 0.0)) fail(r.child_path("reg_beta_m"), "must be > 0");
    r.finish();
    return s;
  });
}

Json scene_to_json(const Scene& s) {
  Json j = header("scene");
  j["camera"] = camera_to_json(s.set.camera);
  j["pose_space"] = space_name(s.space);
  if (s.space == PoseSpace::kYawOnly) j["t_fixed_m"] = vec_to_json(s.t_fixed);
  Json pts = Json::array();
  for (const auto& c : s.set.points) {
    pts.push_back(Json{{"x3d_m", vec_to_json(c.x3d)}, {"x2d_px", vec_to_json(c.x2d)}, {"w2d", vec_to_json(c.w2d)}});
  }
  j["points"] = pts;
  if (s.gt) j["gt"] = pose_to_json(*s.gt);
  if (s.init) j["init"] = pose_to_json(*s.init);
  j["solver"] = solver_options_to_json(s.solver);
  j["mc"] = mc_config_to_json(s.mc);
  j["reg_beta_m"] = s.beta;
  return j;
}

std::string loss_mode_name(toy::LossMode mode) {
  switch (mode) {
    case toy::LossMode::kMonteCarlo:
      return "monte_carlo";
    case toy::LossMode::kReprojectionOnly:
      return "reprojection_only";
    case toy::LossMode::kMonteCarloReg:
      return "monte_carlo+reg";
  }
  return "";
}

namespace {

toy::LossMode parse_loss_mode(const std::string& name, const std::string& path) {
  if (name == "monte_carlo") return toy::LossMode::kMonteCarlo;
  if (name == "reprojection_only") return toy::LossMode::kReprojectionOnly;
  if (name == "monte_carlo+reg") return toy::LossMode::kMonteCarloReg;
  fail(path, "unknown loss mode \"" + name + "\" (expected monte_carlo, reprojection_only or monte_carlo+reg)");
}

Activation parse_activation(const std::string& name, const std::string& path) {
  if (name == "softmax") return Activation::kSoftmax;
  if (name == "exp") return Activation::kExp;
  fail(path, "unknown activation \"" + name + "\" (expected softmax or exp)");
}

}  // namespace

ToyConfig read_toy_config(const std::string& path) {
  return in_file(path, [&](const Json& j) {
    ToyConfig c;
    ObjectReader r(j, "");
    check_header(r, "toy_config");
    r.string_or("description", "");
    if (r.has("scene")) {
      ObjectReader s = r.object("scene");
      c.n_points = s.integer_or("n_points", c.n_points);
      c.edge = s.number_or("edge_m", c.edge);
      c.scene.n_train = s.integer_or("n_train", c.scene.n_train);
      c.scene.n_val = s.integer_or("n_val", c.scene.n_val);
      if (s.has("pose_space")) c.scene.space = parse_space(s.string("pose_space"), s.child_path("pose_space"));
      c.scene.pixel_noise_sigma = s.number_or("pixel_noise_px", c.scene.pixel_noise_sigma);
      c.scene.symmetry = s.integer_or("symmetry", c.scene.symmetry);
      if (s.has("depth_m")) {
        const Vec2 d = s.vec2("depth_m");
        c.scene.poses.depth_lo = d(0);
        c.scene.poses.depth_hi = d(1);
      }
      c.scene.poses.lateral = s.number_or("lateral_m", c.scene.poses.lateral);
      if (s.has("camera")) c.scene.camera = read_camera(s.object("camera"));
      s.finish();
      if (c.n_points < 4) fail(s.child_path("n_points"), "must be >= 4");
      if (!(c.edge > 0.0)) fail(s.child_path("edge_m"), "must be > 0");
    }
    if (r.has("train")) {
      ObjectReader t = r.object("train");
      auto& g = c.train;
      g.steps = t.integer_or("steps", g.steps);
      g.lr = t.number_or("lr", g.lr);
      g.weight_lr = t.number_or("weight_lr", g.weight_lr);
      g.momentum = t.number_or("momentum", g.momentum);
      g.lr_final = t.number_or("lr_final", g.lr_final);
      g.clip_x3d = t.number_or("clip_x3d", g.clip_x3d);
      g.clip_head = t.number_or("clip_head", g.clip_head);
      g.batch_size = t.integer_or("batch_size", g.batch_size);
      if (t.has("loss_mode")) g.mode = parse_loss_mode(t.string("loss_mode"), t.child_path("loss_mode"));
      g.reg_weight = t.number_or("reg_weight", g.reg_weight);
      if (t.has("activation")) g.activation = parse_activation(t.string("activation"), t.child_path("activation"));
      g.init_spread = t.number_or("init_spread_m", g.init_spread);
      g.init_weight = t.number_or("init_weight", g.init_weight);
      g.eval_every = t.integer_or("eval_every", g.eval_every);
      if (t.has("baseline_mode"))
        c.baseline = parse_loss_mode(t.string("baseline_mode"), t.child_path("baseline_mode"));
      t.finish();
    }
    if (r.has("mc")) read_mc_config(r.object("mc"), c.train.mc);
    if (r.has("solver")) read_solver_options(r.object("solver"), c.train.solver);
    r.finish();
    try {
      toy::validate(c.train);
      toy::SceneSpec probe = c.scene;
      probe.shape.assign(c.n_points, Vec3::Zero());
      toy::validate(probe);
    } catch (const Error& e) {
      fail("", e.what());
    }
    return c;
  });
}

Json trace_to_json(const std::vector<toy::TraceRow>& trace) {
  Json rows = Json::array();
  for (const auto& t : trace) {
    Json row{{"step", t.step}, {"l_tgt", t.l_tgt}, {"l_pred", t.l_pred},
             {"l_kl", t.l_kl}, {"l_reg", t.l_reg}, {"failed_views", t.failed_views}};
    const bool evaluated = t.val_rot_deg >= 0.0;
    row["val_rot_deg"] = evaluated ? Json(t.val_rot_deg) : Json(nullptr);
    row["val_trans_m"] = evaluated ? Json(t.val_trans) : Json(nullptr);
    row["val_add_m"] = evaluated ? Json(t.val_add) : Json(nullptr);
    rows.push_back(row);
  }
  Json j = header("trace");
  j["rows"] = rows;
  return j;
}

std::vector<toy::TraceRow> read_trace(const std::string& path) {
  return in_file(path, [&](const Json& j) {
    ObjectReader r(j, "");
    check_header(r, "trace");
    const Json& rows = r.at("rows");
    if (!rows.is_array()) fail("/rows", "expected an array");
    r.finish();
    std::vector<toy::TraceRow> out;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      ObjectReader row(rows[i], "/rows/" + std::to_string(i));
      toy::TraceRow t;
      t.step = row.integer("step");
      t.l_tgt = row.number_or("l_tgt", 0.0);
      t.l_pred = row.number_or("l_pred", 0.0);
      t.l_kl = row.number("l_kl");
      t.l_reg = row.number_or("l_reg", 0.0);
      t.failed_views = row.integer_or("failed_views", 0);
      t.val_rot_deg = row.number_or("val_rot_deg", -1.0);
      t.val_trans = row.number_or("val_trans_m", -1.0);
      t.val_add = row.number_or("val_add_m", -1.0);
      row.finish();
      out.push_back(t);
    }
    return out;
  });
}

Json params_to_json(const toy::LearnerParams& p) {
  Json x = Json::array();
  for (const auto& v : p.x3d) x.push_back(vec_to_json(v));
  Json j = header("learner_params");
  j["x3d_m"] = x;
  j["logits"] = matrix_to_json(p.head.logits);
  j["log_scale"] = vec_to_json(p.head.log_scale);
  j["activation"] = p.activation == Activation::kSoftmax ? "softmax" : "exp";
  return j;
}

}  // namespace probpnp::cli

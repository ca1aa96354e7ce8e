#pragma once

// JSON documents read and written by the command-line tool. Every document
// carries "format_version" and "kind"; unknown fields are rejected with the
// JSON pointer of the offending value.

#include <json.hpp>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "probpnp/amis.hpp"
#include "probpnp/epro_loss.hpp"
#include "probpnp/geometry.hpp"
#include "probpnp/robust_pnp.hpp"
#include "probpnp/toy_learning.hpp"

namespace probpnp::cli {

using Json = nlohmann::json;

inline constexpr int kFormatVersion = 1;

/// Malformed or invalid input; maps to exit code 1.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Typed access to one JSON object that remembers which keys were read.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path);

  /// True when the key is present and not null. Marks the key as read.
  bool has(const std::string& key) const;
  const Json& at(const std::string& key);
  double number(const std::string& key);
  double number_or(const std::string& key, double fallback);
  int integer(const std::string& key);
  int integer_or(const std::string& key, int fallback);
  bool boolean_or(const std::string& key, bool fallback);
  std::string string(const std::string& key);
  std::string string_or(const std::string& key, const std::string& fallback);
  Vec2 vec2(const std::string& key);
  Vec3 vec3(const std::string& key);
  Vec4 vec4(const std::string& key);
  ObjectReader object(const std::string& key);
  std::string child_path(const std::string& key) const;
  const std::string& path() const { return path_; }
  /// Throws on any key that was never read.
  void finish() const;

 private:
  const Json& j_;
  std::string path_;
  mutable std::set<std::string> seen_;
};

[[noreturn]] void fail(const std::string& path, const std::string& message);

Json read_json_file(const std::string& path);
/// Checks format_version and kind.
void check_header(ObjectReader& r, const std::string& kind);
Json header(const std::string& kind);

std::string space_name(PoseSpace space);
PoseSpace parse_space(const std::string& name, const std::string& path);

Json pose_to_json(const Pose& pose);
/// A pose of the given space. Yaw-only poses fall back to `t_fixed` when the
/// document omits it.
Pose pose_from_json(const Json& j, const std::string& path, PoseSpace space, const Vec3& t_fixed);

Json matrix_to_json(const MatX& m);

struct Scene {
  CorrespondenceSet set;
  PoseSpace space = PoseSpace::kQuat6DoF;
  Vec3 t_fixed = Vec3::Zero();
  std::optional<Pose> gt;
  std::optional<Pose> init;
  SolverOptions solver;
  McConfig mc;
  double beta = 0.1;  // reg-loss smooth L1 threshold, metres
  std::string path;

  /// Pose template for the solvers: the space and the fixed translation.
  Pose like() const;
};

Scene read_scene(const std::string& path);
Json scene_to_json(const Scene& scene);

/// Overrides from a "solver_config" document or a scene's "solver"/"mc" blocks.
void read_solver_options(ObjectReader r, SolverOptions& opts);
void read_mc_config(ObjectReader r, McConfig& cfg);
void apply_config_file(const std::string& path, SolverOptions& opts, McConfig& mc);
Json solver_options_to_json(const SolverOptions& opts);
Json mc_config_to_json(const McConfig& cfg);

struct ToyConfig {
  toy::SceneSpec scene;  // shape filled in from n_points / edge and the seed
  int n_points = 8;
  double edge = 0.5;
  toy::TrainConfig train;
  std::optional<toy::LossMode> baseline;  // optional paired run for an error ratio
};

ToyConfig read_toy_config(const std::string& path);
std::string loss_mode_name(toy::LossMode mode);

Json trace_to_json(const std::vector<toy::TraceRow>& trace);
std::vector<toy::TraceRow> read_trace(const std::string& path);
Json params_to_json(const toy::LearnerParams& params);

}  // namespace probpnp::cli

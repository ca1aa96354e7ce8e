#pragma once

#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "probpnp/geometry.hpp"
#include "probpnp/robust_pnp.hpp"

namespace probpnp {

/// Multivariate t over translation.
struct MvtParams {
  Vec3 mu = Vec3::Zero();
  Mat3 sigma = Mat3::Identity();
  double nu = 3.0;
};

/// Von Mises mixed with a uniform component over yaw.
struct VmuParams {
  double mu = 0.0;
  double kappa = 0.0;
  double alpha = 0.25;
};

/// Angular central Gaussian on unit quaternions (w, x, y, z). The density
/// is unchanged by scaling lambda, so fits fix trace(lambda) = 4.
struct AcgParams {
  Mat4 lambda = Mat4::Identity();
};

inline constexpr double kKappaCap = 1e6;
inline constexpr double kDefaultAcgDispersion = 1e-3;

/// log I0(x), switching to the large-argument expansion where I0 overflows.
double log_bessel_i0(double x);

class MvtDensity {
 public:
  explicit MvtDensity(const MvtParams& params);
  double log_pdf(const Vec3& t) const;
  Vec3 sample(Rng& rng) const;
  const MvtParams& params() const { return params_; }

 private:
  MvtParams params_;
  Mat3 chol_;      // lower factor of sigma
  double log_norm_;
};

class VmuDensity {
 public:
  explicit VmuDensity(const VmuParams& params);
  double log_pdf(double theta) const;
  double sample(Rng& rng) const;
  /// One draw from a chosen mixture component.
  double sample_component(Rng& rng, bool uniform) const;
  const VmuParams& params() const { return params_; }

 private:
  VmuParams params_;
  double log_i0_;
};

class AcgDensity {
 public:
  explicit AcgDensity(const AcgParams& params);
  double log_pdf(const Vec4& l) const;
  Vec4 sample(Rng& rng) const;
  const AcgParams& params() const { return params_; }

 private:
  AcgParams params_;
  Mat4 chol_;
  Mat4 inverse_;
  double log_norm_;
};

double mvt_pdf(const MvtParams& p, const Vec3& t);
std::vector<Vec3> mvt_sample(const MvtParams& p, Rng& rng, int k);
/// Weighted mean and (biased) weighted covariance, plus `ridge` on the
/// diagonal. Throws kRankDeficientFit when the result is not positive
/// definite or there are fewer than 4 effective samples and ridge is 0.
MvtParams mvt_fit(std::span<const Vec3> samples, std::span<const double> weights, double nu = 3.0,
                  double ridge = 0.0);

double vmu_pdf(const VmuParams& p, double theta);
std::vector<double> vmu_sample(const VmuParams& p, Rng& rng, int k);
/// Weighted circular mean, then kappa = kappa_hat / 3 with the
/// r(2 - r^2) / (1 - r^2) approximation; alpha is carried over.
VmuParams vmu_fit(std::span<const double> samples, std::span<const double> weights, double alpha = 0.25);

double acg_pdf(const AcgParams& p, const Vec4& l);
std::vector<Vec4> acg_sample(const AcgParams& p, Rng& rng, int k);

struct AcgFitInfo {
  int iterations = 0;
  double stationarity = 0.0;  // Frobenius norm of F(L) - L at the returned estimate
};
/// Fixed-point weighted MLE (trace normalized to 4 each iterate), then
/// lambda + alpha_disp |lambda|^(1/4) I.
AcgParams acg_fit(std::span<const Vec4> samples, std::span<const double> weights,
                  double alpha_disp = kDefaultAcgDispersion, AcgFitInfo* info = nullptr);

/// Product of an optional position density and an orientation density.
/// Yaw-only proposals have no position part and carry the fixed translation.
class Proposal {
 public:
  using Orientation = std::variant<VmuDensity, AcgDensity>;

  Proposal(PoseSpace space, std::optional<MvtDensity> position, Orientation orientation,
           Vec3 t_fixed = Vec3::Zero());

  PoseSpace space() const { return space_; }
  const std::optional<MvtDensity>& position() const { return position_; }
  const Orientation& orientation() const { return orientation_; }
  const Vec3& t_fixed() const { return t_fixed_; }

  double log_pdf(const Pose& pose) const;
  Pose sample(Rng& rng) const;

 private:
  PoseSpace space_;
  std::optional<MvtDensity> position_;
  Orientation orientation_;
  Vec3 t_fixed_;
};

/// Maps a quaternion increment to left-tangent coordinates at q:
/// omega = 2 vec(dq * conj(q)).
Eigen::Matrix<double, 3, 4> quat_tangent_map(const Eigen::Quaterniond& q);

/// Initial proposal from a solve: location at the solution, concentration
/// from the covariance.
Proposal init_proposal(const SolveResult& result, double alpha = 0.25,
                       double acg_dispersion = kDefaultAcgDispersion);

double proposal_logpdf(const Proposal& q, const Pose& pose);
/// k draws from q. A von Mises + uniform orientation uses exactly
/// round(alpha k) uniform draws at randomly permuted positions, so each draw
/// still has marginal law q.
std::vector<Pose> proposal_sample(const Proposal& q, Rng& rng, int k);

}  // namespace probpnp

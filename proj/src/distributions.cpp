#include "probpnp/distributions.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace probpnp {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kLogTwoPi = 1.8378770664093454836;
// Above this the Best-Fisher envelope loses precision; a wrapped normal
// with variance 1/kappa is used instead.
constexpr double kWrappedNormalKappa = 1e5;
constexpr int kAcgMaxIter = 100;
constexpr double kAcgTol = 1e-8;

double log_add_exp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(std::min(a, b) - m));
}

struct NormalizedWeights {
  std::vector<double> w;
  double ess = 0.0;
};

NormalizedWeights normalize(std::span<const double> weights, std::size_t expected) {
  if (weights.size() != expected) throw Error(ErrorCode::kInvalidArgument, "sample and weight counts differ");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw Error(ErrorCode::kInvalidArgument, "weights must be finite and >= 0");
    total += w;
  }
  if (!(total > 0.0)) throw Error(ErrorCode::kAllWeightsZero, "fit weights sum to zero");
  NormalizedWeights out;
  out.w.resize(weights.size());
  double sq = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out.w[i] = weights[i] / total;
    sq += out.w[i] * out.w[i];
  }
  out.ess = 1.0 / sq;
  return out;
}

Mat4 acg_map(std::span<const Vec4> samples, const std::vector<double>& w, const Mat4& lambda) {
  const Mat4 inv = lambda.inverse();
  Mat4 out = Mat4::Zero();
  for (std::size_t j = 0; j < samples.size(); ++j) {
    if (w[j] == 0.0) continue;
    const Vec4& l = samples[j];
    out.noalias() += (w[j] / l.dot(inv * l)) * (l * l.transpose());
  }
  return 4.0 * out;
}

}  // namespace

double log_bessel_i0(double x) {
  x = std::abs(x);
  if (x < 500.0) return std::log(std::cyl_bessel_i(0.0, x));
  // I0(x) ~ e^x / sqrt(2 pi x) * (1 + 1/(8x) + 9/(128x^2) + 75/(1024x^3) + 3675/(32768x^4))
  const double y = 1.0 / x;
  const double series = 1.0 + y * (0.125 + y * (9.0 / 128.0 + y * (75.0 / 1024.0 + y * (3675.0 / 32768.0))));
  return x - 0.5 * std::log(2.0 * kPi * x) + std::log(series);
}

// ---------------------------------------------------------------------------
// Multivariate t

MvtDensity::MvtDensity(const MvtParams& params) : params_(params) {
  if (!(params.nu > 1.0)) throw Error(ErrorCode::kInvalidArgument, "multivariate t needs nu > 1");
  Eigen::LLT<Mat3> llt(0.5 * (params.sigma + params.sigma.transpose()));
  if (llt.info() != Eigen::Success || !params.sigma.allFinite() || !params.mu.allFinite()) {
    throw Error(ErrorCode::kRankDeficientFit, "multivariate t scale is not positive definite");
  }
  chol_ = llt.matrixL();
  const double nu = params.nu;
  log_norm_ = std::lgamma(0.5 * (nu + 3.0)) - std::lgamma(0.5 * nu) - 1.5 * std::log(nu * kPi) -
              chol_.diagonal().array().log().sum();
}

double MvtDensity::log_pdf(const Vec3& t) const {
  const Vec3 z = chol_.triangularView<Eigen::Lower>().solve(t - params_.mu);
  return log_norm_ - 0.5 * (params_.nu + 3.0) * std::log1p(z.squaredNorm() / params_.nu);
}

Vec3 MvtDensity::sample(Rng& rng) const {
  std::normal_distribution<double> normal;
  std::chi_squared_distribution<double> chi2(params_.nu);
  const Vec3 z(normal(rng), normal(rng), normal(rng));
  const double u = chi2(rng);
  return params_.mu + std::sqrt(params_.nu / u) * (chol_ * z);
}

double mvt_pdf(const MvtParams& p, const Vec3& t) { return std::exp(MvtDensity(p).log_pdf(t)); }

std::vector<Vec3> mvt_sample(const MvtParams& p, Rng& rng, int k) {
  const MvtDensity dens(p);
  std::vector<Vec3> out(k);
  for (auto& s : out) s = dens.sample(rng);
  return out;
}

MvtParams mvt_fit(std::span<const Vec3> samples, std::span<const double> weights, double nu, double ridge) {
  const NormalizedWeights nw = normalize(weights, samples.size());
  if (ridge <= 0.0 && nw.ess < 4.0) {
    throw Error(ErrorCode::kRankDeficientFit, "fewer than 4 effective samples for a 3D scale fit");
  }
  Vec3 mean = Vec3::Zero();
  for (std::size_t j = 0; j < samples.size(); ++j) mean += nw.w[j] * samples[j];
  Mat3 cov = Mat3::Zero();
  for (std::size_t j = 0; j < samples.size(); ++j) {
    const Vec3 d = samples[j] - mean;
    cov.noalias() += nw.w[j] * (d * d.transpose());
  }
  cov = 0.5 * (cov + cov.transpose());
  cov.diagonal().array() += ridge;
  const Eigen::SelfAdjointEigenSolver<Mat3> eig(cov, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 1e-12 * hi) || !(hi > 0.0)) {
    throw Error(ErrorCode::kRankDeficientFit, "weighted covariance is singular");
  }
  return MvtParams{mean, cov, nu};
}

// ---------------------------------------------------------------------------
// Von Mises + uniform

VmuDensity::VmuDensity(const VmuParams& params) : params_(params) {
  if (!(params.kappa >= 0.0) || !(params.alpha >= 0.0 && params.alpha <= 1.0) || !std::isfinite(params.mu)) {
    throw Error(ErrorCode::kInvalidArgument, "von Mises mixture needs kappa >= 0 and alpha in [0, 1]");
  }
  log_i0_ = log_bessel_i0(params.kappa);
}

double VmuDensity::log_pdf(double theta) const {
  const double vm = std::log1p(-params_.alpha) + params_.kappa * std::cos(theta - params_.mu) - log_i0_;
  const double uni = std::log(params_.alpha);
  return log_add_exp(vm, uni) - kLogTwoPi;
}

double VmuDensity::sample(Rng& rng) const {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  return sample_component(rng, params_.alpha > 0.0 && unit(rng) < params_.alpha);
}

double VmuDensity::sample_component(Rng& rng, bool uniform) const {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (uniform) return wrap_angle(-kPi + 2.0 * kPi * unit(rng));
  const double kappa = params_.kappa;
  if (kappa < 1e-8) return wrap_angle(-kPi + 2.0 * kPi * unit(rng));
  if (kappa > kWrappedNormalKappa) {
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(kappa));
    return wrap_angle(params_.mu + normal(rng));
  }
  // Best & Fisher (1979) rejection sampler.
  const double tau = 1.0 + std::sqrt(1.0 + 4.0 * kappa * kappa);
  const double rho = (tau - std::sqrt(2.0 * tau)) / (2.0 * kappa);
  const double r = (1.0 + rho * rho) / (2.0 * rho);
  double f = 0.0;
  while (true) {
    const double u1 = unit(rng);
    const double u2 = unit(rng);
    const double z = std::cos(kPi * u1);
    f = (1.0 + r * z) / (r + z);
    const double c = kappa * (r - f);
    if (c * (2.0 - c) - u2 > 0.0 || std::log(c / u2) + 1.0 - c >= 0.0) break;
  }
  const double sign = unit(rng) < 0.5 ? -1.0 : 1.0;
  return wrap_angle(params_.mu + sign * std::acos(std::clamp(f, -1.0, 1.0)));
}

double vmu_pdf(const VmuParams& p, double theta) { return std::exp(VmuDensity(p).log_pdf(theta)); }

std::vector<double> vmu_sample(const VmuParams& p, Rng& rng, int k) {
  const VmuDensity dens(p);
  std::vector<double> out(k);
  for (auto& s : out) s = dens.sample(rng);
  return out;
}

VmuParams vmu_fit(std::span<const double> samples, std::span<const double> weights, double alpha) {
  const NormalizedWeights nw = normalize(weights, samples.size());
  double s = 0.0;
  double c = 0.0;
  for (std::size_t j = 0; j < samples.size(); ++j) {
    s += nw.w[j] * std::sin(samples[j]);
    c += nw.w[j] * std::cos(samples[j]);
  }
  const double r = std::min(std::hypot(s, c), 1.0);
  double kappa_hat = kKappaCap;
  if (r < 1.0) kappa_hat = std::min(kKappaCap, r * (2.0 - r * r) / (1.0 - r * r));
  return VmuParams{std::atan2(s, c), kappa_hat / 3.0, alpha};
}

// ---------------------------------------------------------------------------
// Angular central Gaussian

AcgDensity::AcgDensity(const AcgParams& params) : params_(params) {
  const Mat4 sym = 0.5 * (params.lambda + params.lambda.transpose());
  Eigen::LLT<Mat4> llt(sym);
  if (llt.info() != Eigen::Success || !sym.allFinite()) {
    throw Error(ErrorCode::kInvalidArgument, "ACG matrix is not positive definite");
  }
  chol_ = llt.matrixL();
  inverse_ = llt.solve(Mat4::Identity());
  log_norm_ = -std::log(2.0 * kPi * kPi) - chol_.diagonal().array().log().sum();
}

double AcgDensity::log_pdf(const Vec4& l) const { return log_norm_ - 2.0 * std::log(l.dot(inverse_ * l)); }

Vec4 AcgDensity::sample(Rng& rng) const {
  std::normal_distribution<double> normal;
  Vec4 x;
  do {
    const Vec4 z(normal(rng), normal(rng), normal(rng), normal(rng));
    x = chol_ * z;
  } while (x.norm() < 1e-300);
  return x.normalized();
}

double acg_pdf(const AcgParams& p, const Vec4& l) { return std::exp(AcgDensity(p).log_pdf(l)); }

std::vector<Vec4> acg_sample(const AcgParams& p, Rng& rng, int k) {
  const AcgDensity dens(p);
  std::vector<Vec4> out(k);
  for (auto& s : out) s = dens.sample(rng);
  return out;
}

AcgParams acg_fit(std::span<const Vec4> samples, std::span<const double> weights, double alpha_disp,
                  AcgFitInfo* info) {
  const NormalizedWeights nw = normalize(weights, samples.size());
  if (nw.ess < 5.0) throw Error(ErrorCode::kFitDiverged, "fewer than 5 effective samples for an ACG fit");

  Mat4 lambda = Mat4::Identity();
  double change = std::numeric_limits<double>::infinity();
  int iter = 0;
  for (; iter < kAcgMaxIter && change >= kAcgTol; ++iter) {
    Mat4 next = acg_map(samples, nw.w, lambda);
    next = 0.5 * (next + next.transpose());
    next *= 4.0 / next.trace();
    if (!next.allFinite()) throw Error(ErrorCode::kFitDiverged, "ACG fixed-point iterate is not finite");
    change = (next - lambda).norm();
    lambda = next;
  }
  if (change > 1e-3) throw Error(ErrorCode::kFitDiverged, "ACG fixed-point iteration did not contract");
  Eigen::LLT<Mat4> llt(lambda);
  if (llt.info() != Eigen::Success) throw Error(ErrorCode::kFitDiverged, "ACG estimate is not positive definite");
  if (info) {
    info->iterations = iter;
    info->stationarity = (acg_map(samples, nw.w, lambda) - lambda).norm();
  }
  const double det = lambda.determinant();
  lambda.diagonal().array() += alpha_disp * std::pow(det, 0.25);
  return AcgParams{lambda};
}

// ---------------------------------------------------------------------------
// Proposal

Proposal::Proposal(PoseSpace space, std::optional<MvtDensity> position, Orientation orientation, Vec3 t_fixed)
    : space_(space), position_(std::move(position)), orientation_(std::move(orientation)), t_fixed_(t_fixed) {
  const bool needs_position = space != PoseSpace::kYawOnly;
  const bool acg = std::holds_alternative<AcgDensity>(orientation_);
  if (needs_position != position_.has_value() || acg != (space == PoseSpace::kQuat6DoF)) {
    throw Error(ErrorCode::kInvalidArgument, "proposal components do not match the pose space");
  }
}

double Proposal::log_pdf(const Pose& pose) const {
  if (space_of(pose) != space_) throw Error(ErrorCode::kInvalidArgument, "pose space does not match proposal");
  return std::visit(
      [&](const auto& p) -> double {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, YawOnly>) {
          return std::get<VmuDensity>(orientation_).log_pdf(p.theta);
        } else if constexpr (std::is_same_v<T, Yaw4DoF>) {
          return position_->log_pdf(p.t) + std::get<VmuDensity>(orientation_).log_pdf(p.theta);
        } else {
          return position_->log_pdf(p.t) + std::get<AcgDensity>(orientation_).log_pdf(quat_to_vec(p.q));
        }
      },
      pose);
}

Pose Proposal::sample(Rng& rng) const {
  switch (space_) {
    case PoseSpace::kYawOnly:
      return YawOnly{std::get<VmuDensity>(orientation_).sample(rng), t_fixed_};
    case PoseSpace::kYaw4DoF: {
      const Vec3 t = position_->sample(rng);
      return Yaw4DoF{t, std::get<VmuDensity>(orientation_).sample(rng)};
    }
    case PoseSpace::kQuat6DoF: {
      const Vec3 t = position_->sample(rng);
      return Quat6DoF{t, vec_to_quat(std::get<AcgDensity>(orientation_).sample(rng))};
    }
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown pose space");
}

Eigen::Matrix<double, 3, 4> quat_tangent_map(const Eigen::Quaterniond& q) {
  const Vec3 v(q.x(), q.y(), q.z());
  Mat3 skew;
  skew << 0.0, -v.z(), v.y(),  //
      v.z(), 0.0, -v.x(),      //
      -v.y(), v.x(), 0.0;
  Eigen::Matrix<double, 3, 4> J;
  J.col(0) = -v;
  J.rightCols<3>() = q.w() * Mat3::Identity() + skew;
  return 2.0 * J;
}

Proposal init_proposal(const SolveResult& result, double alpha, double acg_dispersion) {
  const MatX& cov = result.covariance;
  const PoseSpace space = space_of(result.pose);
  if (cov.rows() != dof(space) || cov.cols() != dof(space)) {
    throw Error(ErrorCode::kInvalidArgument, "solve covariance does not match the pose space");
  }
  auto kappa_from = [](double var) { return var > 0.0 ? std::min(kKappaCap, 1.0 / (3.0 * var)) : kKappaCap; };
  switch (space) {
    case PoseSpace::kYawOnly: {
      const auto& p = std::get<YawOnly>(result.pose);
      return Proposal(space, std::nullopt, VmuDensity(VmuParams{p.theta, kappa_from(cov(0, 0)), alpha}), p.t_fixed);
    }
    case PoseSpace::kYaw4DoF: {
      const auto& p = std::get<Yaw4DoF>(result.pose);
      MvtDensity position(MvtParams{p.t, cov.topLeftCorner<3, 3>(), 3.0});
      return Proposal(space, std::move(position), VmuDensity(VmuParams{p.theta, kappa_from(cov(3, 3)), alpha}));
    }
    case PoseSpace::kQuat6DoF: {
      const auto& p = std::get<Quat6DoF>(result.pose);
      MvtDensity position(MvtParams{p.t, cov.topLeftCorner<3, 3>(), 3.0});
      const Mat3 rot_cov = cov.bottomRightCorner<3, 3>();
      const Mat3 rot_info = rot_cov.ldlt().solve(Mat3::Identity());
      const Eigen::Matrix<double, 3, 4> Jq = quat_tangent_map(p.q);
      const Mat4 info = Jq.transpose() * rot_info * Jq;
      Mat4 lambda_hat = (info + Mat4::Identity()).inverse();
      lambda_hat = 0.5 * (lambda_hat + lambda_hat.transpose());
      Mat4 lambda = lambda_hat;
      lambda.diagonal().array() += acg_dispersion * std::pow(lambda_hat.determinant(), 0.25);
      return Proposal(space, std::move(position), AcgDensity(AcgParams{lambda}));
    }
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown pose space");
}

double proposal_logpdf(const Proposal& q, const Pose& pose) { return q.log_pdf(pose); }

std::vector<Pose> proposal_sample(const Proposal& q, Rng& rng, int k) {
  std::vector<Pose> out;
  out.reserve(k);
  const auto* vmu = std::get_if<VmuDensity>(&q.orientation());
  if (!vmu || k <= 0) {
    for (int j = 0; j < k; ++j) out.push_back(q.sample(rng));
    return out;
  }
  const auto num_uniform = static_cast<std::size_t>(std::llround(vmu->params().alpha * k));
  std::vector<char> uniform(static_cast<std::size_t>(k), 0);
  std::fill_n(uniform.begin(), std::min(num_uniform, uniform.size()), 1);
  std::shuffle(uniform.begin(), uniform.end(), rng);
  for (int j = 0; j < k; ++j) {
    if (q.space() == PoseSpace::kYawOnly) {
      out.push_back(YawOnly{vmu->sample_component(rng, uniform[j]), q.t_fixed()});
    } else {
      const Vec3 t = q.position()->sample(rng);
      out.push_back(Yaw4DoF{t, vmu->sample_component(rng, uniform[j])});
    }
  }
  return out;
}

}  // namespace probpnp

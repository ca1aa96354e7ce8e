#include "probpnp/amis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "probpnp/kernels.hpp"

namespace probpnp {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void finish(McBatch& batch) {
  const double total = logsumexp(batch.log_v);
  if (total == kNegInf) {
    throw Error(ErrorCode::kAllWeightsZero, "every sample has zero likelihood under the correspondence set");
  }
  batch.l_pred = total - std::log(static_cast<double>(batch.log_v.size()));
}

}  // namespace

void validate(const McConfig& cfg) {
  if (cfg.T < 1) throw Error(ErrorCode::kInvalidArgument, "AMIS needs T >= 1");
  if (cfg.K_prime < 2) throw Error(ErrorCode::kInvalidArgument, "AMIS needs K_prime >= 2");
}

double logsumexp(std::span<const double> x) {
  double m = kNegInf;
  for (double v : x) m = std::max(m, v);
  if (m == kNegInf) return kNegInf;
  if (m == std::numeric_limits<double>::infinity()) return m;
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

std::vector<double> normalized_weights(const McBatch& batch) {
  const double total = logsumexp(batch.log_v);
  if (total == kNegInf || batch.log_v.empty()) {
    throw Error(ErrorCode::kAllWeightsZero, "batch has no sample with positive weight");
  }
  std::vector<double> w(batch.log_v.size());
  for (std::size_t j = 0; j < w.size(); ++j) w[j] = std::exp(batch.log_v[j] - total);
  return w;
}

McBatch vanilla_is(const CorrespondenceSet& set, const Proposal& q, int K, double delta, Rng& rng) {
  if (K < 1) throw Error(ErrorCode::kInvalidArgument, "importance sampling needs K >= 1");
  McBatch batch;
  batch.T = 1;
  batch.K_prime = K;
  batch.poses = proposal_sample(q, rng, K);
  batch.log_p = kernels::log_likelihoods(set, batch.poses, delta);
  batch.log_q = kernels::proposal_log_pdfs(q, batch.poses);
  batch.log_v.resize(K);
  for (int j = 0; j < K; ++j) batch.log_v[j] = batch.log_p[j] == kNegInf ? kNegInf : batch.log_p[j] - batch.log_q[j];
  batch.proposals.push_back(q);
  finish(batch);
  return batch;
}

McBatch yaw_quadrature(const CorrespondenceSet& set, const YawOnly& like, int nodes, double delta) {
  if (nodes < 2) throw Error(ErrorCode::kInvalidArgument, "yaw quadrature needs at least 2 nodes");
  McBatch batch;
  batch.T = 1;
  batch.K_prime = nodes;
  batch.poses.reserve(nodes);
  for (int k = 0; k < nodes; ++k) {
    batch.poses.push_back(YawOnly{-std::numbers::pi + 2.0 * std::numbers::pi * k / nodes, like.t_fixed});
  }
  batch.log_p = kernels::log_likelihoods(set, batch.poses, delta);
  batch.log_q.assign(nodes, -std::log(2.0 * std::numbers::pi));
  batch.log_v.resize(nodes);
  for (int k = 0; k < nodes; ++k) batch.log_v[k] = batch.log_p[k] == kNegInf ? kNegInf : batch.log_p[k] - batch.log_q[k];
  finish(batch);
  return batch;
}

Proposal refit_proposal(const Proposal& previous, std::span<const Pose> poses, std::span<const double> weights) {
  try {
    std::vector<double> w;
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < poses.size(); ++j) {
      if (weights[j] > 0.0) {
        w.push_back(weights[j]);
        idx.push_back(j);
      }
    }
    std::optional<MvtDensity> position;
    if (previous.position()) {
      std::vector<Vec3> t(idx.size());
      for (std::size_t k = 0; k < idx.size(); ++k) t[k] = translation(poses[idx[k]]);
      position.emplace(mvt_fit(t, w, previous.position()->params().nu));
    }
    if (const auto* vmu = std::get_if<VmuDensity>(&previous.orientation())) {
      std::vector<double> theta(idx.size());
      for (std::size_t k = 0; k < idx.size(); ++k) {
        const Pose& p = poses[idx[k]];
        theta[k] = std::holds_alternative<YawOnly>(p) ? std::get<YawOnly>(p).theta : std::get<Yaw4DoF>(p).theta;
      }
      VmuParams fitted = vmu_fit(theta, w, vmu->params().alpha);
      return Proposal(previous.space(), std::move(position), VmuDensity(fitted), previous.t_fixed());
    }
    std::vector<Vec4> l(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) l[k] = quat_to_vec(std::get<Quat6DoF>(poses[idx[k]]).q);
    return Proposal(previous.space(), std::move(position), AcgDensity(acg_fit(l, w)), previous.t_fixed());
  } catch (const Error& e) {
    throw Error(ErrorCode::kProposalCollapse, std::string("proposal refit failed: ") + e.what());
  }
}

McBatch amis(const CorrespondenceSet& set, const Proposal& initial, const McConfig& cfg, double delta, Rng& rng) {
  validate(cfg);
  const std::size_t kp = static_cast<std::size_t>(cfg.K_prime);
  const std::size_t total = kp * static_cast<std::size_t>(cfg.T);

  McBatch batch;
  batch.T = cfg.T;
  batch.K_prime = cfg.K_prime;
  batch.poses.reserve(total);
  batch.log_p.reserve(total);
  batch.proposals.reserve(cfg.T);
  // log_qm[m][j]: log density of proposal m at sample j, filled lazily.
  std::vector<std::vector<double>> log_qm;

  batch.proposals.push_back(initial);
  for (int t = 0; t < cfg.T; ++t) {
    const Proposal& q = batch.proposals.back();
    std::vector<Pose> fresh = proposal_sample(q, rng, cfg.K_prime);
    const std::vector<double> lp = kernels::log_likelihoods(set, fresh, delta);
    batch.poses.insert(batch.poses.end(), fresh.begin(), fresh.end());
    batch.log_p.insert(batch.log_p.end(), lp.begin(), lp.end());

    // Earlier proposals evaluated at the new samples.
    for (int m = 0; m < t; ++m) {
      const auto extra = kernels::proposal_log_pdfs(batch.proposals[m], fresh);
      log_qm[m].insert(log_qm[m].end(), extra.begin(), extra.end());
    }
    // The newest proposal evaluated at every sample so far.
    log_qm.push_back(kernels::proposal_log_pdfs(q, batch.poses));

    const std::size_t n = batch.poses.size();
    batch.log_q.assign(n, 0.0);
    batch.log_v.assign(n, kNegInf);
    std::vector<double> terms(t + 1);
    for (std::size_t j = 0; j < n; ++j) {
      for (int m = 0; m <= t; ++m) terms[m] = log_qm[m][j];
      batch.log_q[j] = logsumexp(terms) - std::log(static_cast<double>(t + 1));
      if (batch.log_p[j] != kNegInf) batch.log_v[j] = batch.log_p[j] - batch.log_q[j];
    }

    if (t + 1 < cfg.T) {
      const double norm = logsumexp(batch.log_v);
      std::vector<double> w(n, 0.0);
      if (norm != kNegInf) {
        for (std::size_t j = 0; j < n; ++j) w[j] = std::exp(batch.log_v[j] - norm);
      }
      try {
        if (norm == kNegInf) throw Error(ErrorCode::kProposalCollapse, "no sample has positive weight");
        batch.proposals.push_back(refit_proposal(q, batch.poses, w));
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kProposalCollapse) throw;
        batch.proposals.push_back(q);
        ++batch.num_fallbacks;
      }
    }
  }
  finish(batch);
  return batch;
}

McBatch amis(const CorrespondenceSet& set, const SolveResult& solve, const McConfig& cfg, double delta) {
  Rng rng(cfg.seed);
  return amis(set, init_proposal(solve), cfg, delta, rng);
}

VecX expectation(const McBatch& batch, const std::function<VecX(const Pose&)>& g) {
  const std::vector<double> w = normalized_weights(batch);
  VecX acc;
  for (std::size_t j = 0; j < w.size(); ++j) {
    if (w[j] == 0.0) continue;
    const VecX v = g(batch.poses[j]);
    if (acc.size() == 0) acc = VecX::Zero(v.size());
    acc += w[j] * v;
  }
  return acc;
}

double mc_score(const McBatch& batch, const Pose& pose_star, double a, double b) {
  if (std::holds_alternative<YawOnly>(pose_star)) {
    throw Error(ErrorCode::kInvalidArgument, "the score needs a pose space with free translation");
  }
  const std::vector<double> w = normalized_weights(batch);
  const Vec3 ts = translation(pose_star);
  double acc = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j) {
    if (w[j] == 0.0) continue;
    double score = b;
    if (a != 0.0) {
      const Vec3 tj = translation(batch.poses[j]);
      const double e = std::hypot(ts.x() - tj.x(), ts.z() - tj.z());
      score = -a * std::log(e) + b;  // e = 0 gives +inf for a > 0, clamped below
    }
    acc += w[j] * std::clamp(score, 0.0, 1.0);
  }
  return acc;
}

}  // namespace probpnp

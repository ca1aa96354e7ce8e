#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "probpnp/distributions.hpp"
#include "probpnp/robust_pnp.hpp"

namespace probpnp {

struct McConfig {
  int T = 4;          // adaptation rounds
  int K_prime = 128;  // samples per round
  std::uint64_t seed = 0;
};

void validate(const McConfig& cfg);

/// Weighted pose samples. log_v = log_p - log_q, where log_q is the
/// deterministic-mixture density over all proposals (for AMIS) or the
/// single proposal density (for vanilla IS).
struct McBatch {
  std::vector<Pose> poses;
  std::vector<double> log_p;
  std::vector<double> log_q;
  std::vector<double> log_v;
  std::vector<Proposal> proposals;
  double l_pred = 0.0;
  int T = 0;
  int K_prime = 0;
  int num_fallbacks = 0;  // rounds that reused the previous proposal after a failed refit

  std::size_t size() const { return poses.size(); }
};

double logsumexp(std::span<const double> x);

/// Self-normalized weights exp(log_v - logsumexp(log_v)).
/// Throws kAllWeightsZero when every log_v is -inf.
std::vector<double> normalized_weights(const McBatch& batch);

/// Plain importance sampling with K draws from q.
McBatch vanilla_is(const CorrespondenceSet& set, const Proposal& q, int K, double delta, Rng& rng);

/// Periodic trapezoid rule over yaw as a batch: `nodes` equispaced angles on
/// [-pi, pi) with log_q = -log(2 pi), so l_pred is the quadrature value.
McBatch yaw_quadrature(const CorrespondenceSet& set, const YawOnly& like, int nodes, double delta);

/// Adaptive importance sampling starting from `initial`.
McBatch amis(const CorrespondenceSet& set, const Proposal& initial, const McConfig& cfg, double delta, Rng& rng);
/// Starts from init_proposal(solve) with an RNG seeded by cfg.seed.
McBatch amis(const CorrespondenceSet& set, const SolveResult& solve, const McConfig& cfg, double delta);

/// Refits a proposal of the same family from weighted samples. Throws
/// kProposalCollapse if any component fit fails.
Proposal refit_proposal(const Proposal& previous, std::span<const Pose> poses, std::span<const double> weights);

/// Self-normalized expectation of g over the batch.
VecX expectation(const McBatch& batch, const std::function<VecX(const Pose&)>& g);

/// Position-error score clamp(-a log e + b, 0, 1) with e the ground-plane
/// (XZ) distance to pose_star, averaged under the batch weights.
double mc_score(const McBatch& batch, const Pose& pose_star, double a, double b);

}  // namespace probpnp

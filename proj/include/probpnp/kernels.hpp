#pragma once

// Batch kernels with an OpenMP path and a serial reference. Both paths
// produce bit-identical results: every output element is reduced in a fixed
// order by a single thread.

#include <cstdint>
#include <span>
#include <vector>

#include "probpnp/distributions.hpp"
#include "probpnp/geometry.hpp"
#include "probpnp/robust_pnp.hpp"

namespace probpnp::kernels {

enum class Exec { kSerial, kParallel };

/// Thread count used by the parallel path.
int num_threads();
/// Reads the thread count from `env_var` if set; returns the count in effect.
int configure_threads_from_env(const char* env_var = "PROBPNP_NUM_THREADS");

/// log p(X | y_j) for every pose.
std::vector<double> log_likelihoods(const CorrespondenceSet& set, std::span<const Pose> poses, double delta,
                                    Exec exec = Exec::kParallel);

/// log q(y_j) for every pose.
std::vector<double> proposal_log_pdfs(const Proposal& q, std::span<const Pose> poses, Exec exec = Exec::kParallel);

/// Per point i: sum_j weight_j * d c_i(y_j) / d X_i. Samples with zero
/// weight and points behind the camera contribute nothing.
std::vector<CorrespondenceGrad> weighted_correspondence_grads(const CorrespondenceSet& set,
                                                              std::span<const Pose> poses,
                                                              std::span<const double> weights, double delta,
                                                              Exec exec = Exec::kParallel);

/// Independent solves, problem k seeded with seeds[k].
std::vector<SolveResult> solve_many(std::span<const CorrespondenceSet> sets, std::span<const Pose> likes,
                                    const SolverOptions& opts, std::span<const std::uint64_t> seeds,
                                    Exec exec = Exec::kParallel);

}  // namespace probpnp::kernels

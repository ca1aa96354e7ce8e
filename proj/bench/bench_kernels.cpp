#include <benchmark/benchmark.h>

#include <random>

#include "probpnp/amis.hpp"
#include "probpnp/kernels.hpp"

using namespace probpnp;

namespace {

CorrespondenceSet make_set(int n, Rng& rng) {
  std::uniform_real_distribution<double> u(-0.25, 0.25);
  CorrespondenceSet set;
  set.camera = Camera{500.0, 500.0, 320.0, 240.0};
  const Quat6DoF pose{Vec3(0.1, -0.1, 4.0), Eigen::Quaterniond(Eigen::AngleAxisd(0.4, Vec3(1, 2, 3).normalized()))};
  for (int i = 0; i < n; ++i) {
    Correspondence c;
    c.x3d = Vec3(u(rng), u(rng), u(rng));
    c.x2d = project(set.camera, transform(pose, c.x3d));
    c.w2d = Vec2(1.0, 1.0);
    set.points.push_back(c);
  }
  return set;
}

struct Fixture {
  CorrespondenceSet set;
  std::vector<Pose> poses;
  std::vector<double> weights;
  Proposal q;
  double delta;

  explicit Fixture(int samples)
      : q(PoseSpace::kQuat6DoF, MvtDensity(MvtParams{Vec3(0.1, -0.1, 4.0), 1e-3 * Mat3::Identity(), 3.0}),
          AcgDensity(AcgParams{Mat4::Identity()})) {
    Rng rng(1);
    set = make_set(64, rng);
    poses = proposal_sample(q, rng, samples);
    weights.assign(samples, 1.0 / samples);
    delta = adaptive_delta(set, 1.0);
  }
};

kernels::Exec exec_of(const benchmark::State& state) {
  return state.range(1) == 0 ? kernels::Exec::kSerial : kernels::Exec::kParallel;
}

void BM_LogLikelihoods(benchmark::State& state) {
  const Fixture f(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(kernels::log_likelihoods(f.set, f.poses, f.delta, exec_of(state)));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_ProposalLogPdfs(benchmark::State& state) {
  const Fixture f(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(kernels::proposal_log_pdfs(f.q, f.poses, exec_of(state)));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_WeightedGrads(benchmark::State& state) {
  const Fixture f(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        kernels::weighted_correspondence_grads(f.set, f.poses, f.weights, f.delta, exec_of(state)));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_SolveMany(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(2);
  std::vector<CorrespondenceSet> sets;
  std::vector<Pose> likes(n, Quat6DoF{});
  std::vector<std::uint64_t> seeds;
  for (int k = 0; k < n; ++k) {
    sets.push_back(make_set(8, rng));
    seeds.push_back(k);
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(kernels::solve_many(sets, likes, SolverOptions{}, seeds, exec_of(state)));
  }
  state.SetItemsProcessed(state.iterations() * n);
}

// Second argument: 0 serial reference, 1 OpenMP.
BENCHMARK(BM_LogLikelihoods)->ArgsProduct({{512, 4096}, {0, 1}});
BENCHMARK(BM_ProposalLogPdfs)->ArgsProduct({{512, 4096}, {0, 1}});
BENCHMARK(BM_WeightedGrads)->ArgsProduct({{512, 4096}, {0, 1}});
BENCHMARK(BM_SolveMany)->ArgsProduct({{16}, {0, 1}});

}  // namespace

int main(int argc, char** argv) {
  kernels::configure_threads_from_env("PROBPNP_NUM_THREADS");
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}

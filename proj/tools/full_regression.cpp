// Long-running regression against the reference full-schedule results.
// Deliberately not registered with ctest: the two presets train for 20000
// iterations each and take hours on a plain CPU. Prints [OK]/[MISS] per
// target and exits nonzero when any target is missed.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "uqmd/pipeline.hpp"

using namespace uqmd;
namespace fs = std::filesystem;

namespace {

#ifndef UQMD_SOURCE_DIR
#define UQMD_SOURCE_DIR "."
#endif

struct Target {
  std::string label;
  double want, tol, got;
};

int check_targets(const std::vector<Target>& targets) {
  int missed = 0;
  for (const auto& t : targets) {
    bool ok = std::abs(t.got - t.want) <= t.tol;
    std::printf("[%s] %s: %.4f vs %.4f +- %.4f\n", ok ? "OK" : "MISS", t.label.c_str(),
                t.got, t.want, t.tol);
    missed += ok ? 0 : 1;
  }
  return missed;
}

// Preset dataset paths are relative to the repository root.
void anchor_dataset(pipe::RunConfig& cfg) {
  fs::path root(UQMD_SOURCE_DIR);
  if (!cfg.dataset.csv.empty() && fs::path(cfg.dataset.csv).is_relative())
    cfg.dataset.csv = (root / cfg.dataset.csv).string();
  if (!cfg.dataset.meta.empty() && fs::path(cfg.dataset.meta).is_relative())
    cfg.dataset.meta = (root / cfg.dataset.meta).string();
}

int run_treloar(std::uint64_t seed, const std::string& out, int threads) {
  pipe::RunConfig cfg = pipe::preset_config("treloar");
  anchor_dataset(cfg);
  cfg.seed = seed;
  cfg.threads = threads;
  cfg.out_dir = out + "/treloar";
  std::printf("treloar: %d + %d iterations, out %s\n", cfg.distill.n_iters,
              cfg.refine.n_iters, cfg.out_dir.c_str());
  auto t0 = std::chrono::steady_clock::now();
  pipe::DiscoveryRun run = pipe::run_discovery(cfg);
  double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("treloar: finished in %.0f s\n", sec);

  if (!run.metrics.refine || !run.metrics.gp) {
    std::printf("[MISS] treloar: run produced no refined metrics\n");
    return 1;
  }
  return check_targets({
      {"treloar refined R2", 0.996, 0.01, run.metrics.refine->r2_total},
      {"treloar refined RMSE", 0.097, 0.03, run.metrics.refine->rmse_total},
      {"treloar refined EC", 0.9434, 0.05, run.metrics.refine->ec_total},
      {"treloar gp EC", 0.9245, 0.03, run.metrics.gp->ec_total},
  });
}

int run_cardiac(std::uint64_t seed, const std::string& out, int threads) {
  pipe::RunConfig cfg = pipe::preset_config("cardiac-synthetic");
  cfg.seed = seed;
  cfg.threads = threads;
  cfg.out_dir = out + "/cardiac-synthetic";
  std::printf("cardiac-synthetic: %d + %d iterations, out %s\n", cfg.distill.n_iters,
              cfg.refine.n_iters, cfg.out_dir.c_str());
  auto t0 = std::chrono::steady_clock::now();
  pipe::DiscoveryRun run = pipe::run_discovery(cfg);
  double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("cardiac-synthetic: finished in %.0f s\n", sec);

  if (!run.metrics.refine) {
    std::printf("[MISS] cardiac-synthetic: run produced no refined metrics\n");
    return 1;
  }
  return check_targets({
      {"cardiac refined R2", 0.996, 0.01, run.metrics.refine->r2_total},
      {"cardiac refined RMSE", 0.081, 0.03, run.metrics.refine->rmse_total},
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Full-schedule regression runs; expect hours per preset on a CPU"};
  std::string preset = "all";
  std::string out = "runs/regression";
  std::uint64_t seed = 42;
  int threads = 1;
  app.add_option("--preset", preset, "treloar, cardiac-synthetic or all")
      ->check(CLI::IsMember({"treloar", "cardiac-synthetic", "all"}));
  app.add_option("--seed", seed, "root random seed");
  app.add_option("--out", out, "output directory for the run artifacts");
  app.add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  int missed = 0;
  try {
    if (preset == "treloar" || preset == "all") missed += run_treloar(seed, out, threads);
    if (preset == "cardiac-synthetic" || preset == "all")
      missed += run_cardiac(seed, out, threads);
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return 1;
  }
  return missed == 0 ? 0 : 1;
}

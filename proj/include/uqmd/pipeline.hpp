#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nlohmann/json.hpp"
#include "uqmd/common.hpp"
#include "uqmd/dataset.hpp"
#include "uqmd/distill.hpp"
#include "uqmd/flow.hpp"
#include "uqmd/gp.hpp"
#include "uqmd/mechanics.hpp"
#include "uqmd/sobol.hpp"

namespace uqmd::pipe {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Central 95% factor on a Gaussian: Phi^-1(0.975).
inline constexpr double kZ95 = 1.959964;

struct SyntheticTest {
  std::string id;
  mech::Protocol protocol = mech::Protocol::UT;
  std::optional<mech::BtRatio> ratio;
  std::vector<double> controls;
};

/// Dataset generated on the fly from named generator parameters. Noise
/// defaults to the run's error model.
struct SyntheticSpec {
  std::map<std::string, double> generator;
  std::vector<SyntheticTest> tests;
  std::optional<data::ErrorModel> noise;
};

struct DatasetSpec {
  std::string csv, meta;
  std::optional<SyntheticSpec> synthetic;
};

struct LibrarySpec {
  std::string kind = "isotropic_mr_ogden";  // or "anisotropic_cann", "terms"
  int degree = 3;
  std::vector<double> ogden_exponents{-5, -4, -3, -1, 1, 3, 4, 5};
  std::vector<mech::TermSpec> terms;  // kind == "terms"

  mech::ModelLibrary build() const;
};

struct GpStageConfig {
  int iters = 200;
  double lr = 0.2;
  double init_length = 0.5;
  double shrink = 1.0;
};

struct MetricsConfig {
  int interval_samples = 8192;
  int min_interval_samples = 1000;
  int plot_samples = 20;
  int parameter_samples = 2048;
};

/// Refinement re-runs distillation on the reduced library; unset fields
/// inherit the distill stage's schedule.
struct RefineStageConfig {
  int n_iters = 10000;
  std::optional<double> flow_lr;
  std::optional<double> flow_lr_decay;
};

struct RunConfig {
  std::string preset;
  DatasetSpec dataset;
  LibrarySpec library;
  data::ErrorModel noise{0.01, 0.05};
  GpStageConfig gp;
  int grid_points = 64;
  distill::DistillConfig distill;
  RefineStageConfig refine;
  sobol::SobolConfig sobol;
  MetricsConfig metrics;
  std::uint64_t seed = 42;
  std::string out_dir;
  int threads = 1;
};

/// Paper-default configurations. Known names: "treloar",
/// "cardiac-synthetic", "cardiac-experimental", plus the reduced-size
/// "desk-isotropic" and "desk-calibration" used by the acceptance runs.
RunConfig preset_config(const std::string& name);

/// Strict schema: unknown keys, wrong types, and out-of-range values are
/// ConfigErrors. `base` supplies defaults for omitted keys.
RunConfig config_from_json(const nlohmann::json& j, const RunConfig& base = RunConfig{});
RunConfig config_from_file(const std::string& path, const RunConfig& base = RunConfig{});
nlohmann::json config_to_json(const RunConfig& cfg);
std::string config_hash(const RunConfig& cfg);

nlohmann::json library_to_json(const mech::ModelLibrary& lib);
mech::ModelLibrary library_from_json(const nlohmann::json& j);

/// Metrics of one stacked-function stage against the measured data.
struct FunctionMetrics {
  std::string test_id, component_id;
  double r2 = 0.0, rmse = 0.0, ec = 0.0;
  int n_points = 0;
};

struct StageMetrics {
  std::vector<FunctionMetrics> functions;
  double r2_total = 0.0, rmse_total = 0.0, ec_total = 0.0;
};

struct RunMetrics {
  std::optional<StageMetrics> gp, distill, refine;
};

nlohmann::json metrics_to_json(const RunMetrics& m);

/// Mean and centered-interval curves per grid block, in block order.
struct FunctionCurve {
  VectorXd mean, lower, upper;
};

/// R2/RMSE of the interpolated means against the data; EC of the
/// interpolated intervals. Totals pool R2/RMSE over all points and average
/// the coverage per test then across tests.
StageMetrics metrics_from_curves(const std::vector<FunctionCurve>& curves,
                                 const data::Dataset& ds, const data::FunctionGrid& grid);

/// Gaussian curves: mean +- z95 * sd per grid point.
StageMetrics gp_stage_metrics(const gp::MultiGp& posterior, const data::Dataset& ds,
                              const data::FunctionGrid& grid);

/// Percentile curves: 2.5/97.5 quantiles of the stacked samples per point.
StageMetrics model_stage_metrics(const MatrixXd& samples, const data::Dataset& ds,
                                 const data::FunctionGrid& grid, int min_samples = 1000);

struct DiscoveryRun {
  RunConfig config;
  data::Dataset dataset;
  data::FunctionGrid grid;
  std::optional<gp::MultiGp> posterior;
  std::optional<flow::FlowModel> flow;
  std::optional<sobol::SobolReport> report;
  std::optional<sobol::ReducedModel> reduced;
  std::optional<flow::FlowModel> flow_refined;
  RunMetrics metrics;
  bool distill_diverged = false, refine_diverged = false;
};

/// All four steps: GP fit, distillation, sensitivity reduction, refinement;
/// artifacts and metrics land in cfg.out_dir.
DiscoveryRun run_discovery(const RunConfig& cfg);

/// Calibration keeps the full library: GP fit and distillation only.
DiscoveryRun run_calibration(const RunConfig& cfg);

/// Executes one stage ("gp", "distill", "sobol", "refine") against an
/// existing run directory, loading upstream artifacts; "all" runs
/// everything from scratch.
void execute_stage(const RunConfig& cfg, const std::string& stage);

/// Recomputes metrics from the artifacts in a run directory and rewrites
/// metrics.json there.
RunMetrics metrics_for_run(const std::string& run_dir);

/// Writes per-function curve CSVs, parameter-sample tables, and the
/// sensitivity curves into <run_dir>/plots.
void export_plots(const std::string& run_dir);

}  // namespace uqmd::pipe

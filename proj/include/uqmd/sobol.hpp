#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "uqmd/common.hpp"
#include "uqmd/dataset.hpp"
#include "uqmd/distill.hpp"
#include "uqmd/flow.hpp"
#include "uqmd/mechanics.hpp"

namespace uqmd::sobol {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Base sample pair for the pick-freeze scheme. The i-th cross matrix is A
/// with column i replaced from B.
struct SaltelliDesign {
  MatrixXd A;  // n_base x d
  MatrixXd B;  // n_base x d
};

SaltelliDesign saltelli_design(const VectorXd& lo, const VectorXd& hi, int n_base, Rng& rng);

/// Full evaluation matrix [A; B; A_B^(0); ...; A_B^(d-1)], n_base*(d+2) rows.
MatrixXd saltelli_samples(const VectorXd& lo, const VectorXd& hi, int n_base,
                          std::uint64_t seed);

/// Jansen total-effect estimator: mean((f_A - f_AB_i)^2)/2 over the pooled
/// sample variance of [f_A; f_B]. Column i of fab holds f(A_B^(i)).
/// A vanishing pooled variance marks the output degenerate and reports 0.
VectorXd total_order_index(const VectorXd& fa, const VectorXd& fb, const MatrixXd& fab,
                           bool* degenerate = nullptr);

/// Scalar-function convenience wrapper around the estimator.
VectorXd total_indices_of(const std::function<double(const VectorXd&)>& f, const VectorXd& lo,
                          const VectorXd& hi, int n_base, std::uint64_t seed,
                          bool* degenerate = nullptr);

struct SobolConfig {
  int n_base = 4096;
  int bounds_samples = 8192;
  double threshold = 1e-4;
  int threads = 1;
};

struct SobolReport {
  MatrixXd total;                     // n_stacked x n_kappa, raw estimates
  VectorXd averaged;                  // per-parameter, test-then-point mean
  VectorXd variance;                  // pooled output variance per point
  VectorXd lo, hi;                    // sampling bounds
  std::vector<int> degenerate_points; // stacked rows with vanishing variance
  std::vector<int> kept, removed;     // parameter indices at `threshold`
  int n_base = 0;
  double threshold = 0.0;
};

/// Total-order indices of every stacked stress observation w.r.t. every
/// parameter, sampled uniformly inside the per-parameter [min, max] box
/// estimated from the flow. Averaging weights every test equally and every
/// (component, grid point) equally within a test.
SobolReport deformation_resolved_indices(const flow::FlowModel& model,
                                         const distill::ForwardMap& fmap,
                                         const data::FunctionGrid& grid,
                                         const SobolConfig& cfg, std::uint64_t seed);

/// Average of the per-point indices per the report convention, exposed so
/// exports and checks can reproduce it from the stored tensor.
VectorXd average_indices(const MatrixXd& total, const data::FunctionGrid& grid);

struct ReducedModel {
  mech::ModelLibrary library;
  std::vector<int> keep_terms;  // original term indices, in order
  std::vector<int> kappa_map;   // old parameter index -> new index, -1 if dropped
};

/// Drops every term whose outer coefficient averages below the threshold.
/// An inner exponent rides along with its coefficient: kept terms keep it,
/// dropped terms lose it. Negative averages count as zero.
ReducedModel reduce_library(const mech::ModelLibrary& lib, const SobolReport& report,
                            double threshold);

/// Exports clip indices to [-0.05, 1.05]; the in-memory report stays raw.
void write_report_json(const SobolReport& report, const std::vector<std::string>& names,
                       const std::string& path, bool include_tensor = false);
void write_averaged_csv(const SobolReport& report, const std::vector<std::string>& names,
                        const std::string& path);
void write_curves_csv(const SobolReport& report, const data::FunctionGrid& grid,
                      const data::Dataset& ds, const std::vector<std::string>& names,
                      const std::string& path);

}  // namespace uqmd::sobol

#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "uqmd/common.hpp"
#include "uqmd/dataset.hpp"

namespace uqmd::gp {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Affine map of each input dimension to [0,1] over its training range.
/// Constant dimensions map to 0.5.
struct NormMap {
  VectorXd lo, hi;
  static NormMap fit(const MatrixXd& X);
  MatrixXd apply(const MatrixXd& X) const;
};

/// ARD squared-exponential kernel; rows of A and B are points.
struct ArdSeKernel {
  double sigma2 = 1.0;
  VectorXd length;
  MatrixXd gram(const MatrixXd& A, const MatrixXd& B) const;
};

/// Cholesky with an escalating diagonal jitter: 0, then 1e-8 * scale rising
/// tenfold to 1e-4 * scale. Throws NumericalError past the ladder.
struct RobustChol {
  MatrixXd L;
  double jitter = 0.0;
};
RobustChol robust_cholesky(const MatrixXd& A, double scale);

struct FitConfig {
  int iters = 200;
  double lr = 0.2;
  double init_length = 0.5;
  double shrink = 1.0;  // lengthscale factor applied after the fit
  data::ErrorModel noise;
  int threads = 1;
};

/// Fitted posterior state for one stress component. Training rows pool every
/// test observing the component; inputs are stored normalized.
struct GpModel {
  std::string component_id;
  NormMap norm;
  MatrixXd X;
  VectorXd y;
  VectorXd noise_var;  // plug-in variance from the measured stresses
  double sigma2 = 1.0;
  VectorXd length;      // after shrink, used by the posterior
  VectorXd length_raw;  // best-likelihood values before shrink
  double lml_init = 0.0;
  double lml_best = 0.0;
  double fit_jitter = 0.0;
  MatrixXd L;      // lower Cholesky factor of K + noise
  VectorXd alpha;  // (K + noise)^{-1} y

  /// Posterior mean and covariance at normalized query rows.
  void predict(const MatrixXd& Xq, VectorXd& mean, MatrixXd& cov) const;
};

/// Log marginal likelihood and gradient in (log sigma, log lengths); grad
/// may be null. The jitter actually used is reported when requested.
double lml_value_grad(const MatrixXd& X, const VectorXd& y, const VectorXd& noise_var,
                      double log_sigma, const VectorXd& log_length, VectorXd* grad,
                      double* jitter_used = nullptr);

GpModel fit_gp(const data::ComponentTrainingSet& ts, const FitConfig& cfg);

/// Conditions a model at fixed hyperparameters, skipping the likelihood
/// fit. length is the post-shrink value; length_raw is stored equal to it.
GpModel condition_gp(const data::ComponentTrainingSet& ts, const data::ErrorModel& noise,
                     double sigma2, const VectorXd& length);

/// Posterior over one (test, component) block of the evaluation grid.
struct PosteriorBlock {
  int t = 0, q = 0;
  int offset = 0;
  VectorXd mean;
  MatrixXd cov;
  MatrixXd chol;  // of cov plus sampling jitter
  double jitter = 0.0;

  int size() const { return static_cast<int>(mean.size()); }
};

/// One GP per component, one posterior block per (test, component). Stacked
/// draws treat blocks as independent.
struct MultiGp {
  std::vector<GpModel> models;
  std::vector<PosteriorBlock> blocks;
  int total = 0;

  const GpModel& model_for(const std::string& component_id) const;
  VectorXd mean_stacked() const;
  VectorXd sd_stacked() const;
  MatrixXd sample_stacked(int count, Rng& rng) const;
};

MultiGp fit_multi_gp(const data::Dataset& ds, const data::FunctionGrid& grid,
                     const FitConfig& cfg);

/// Builds the per-block posteriors for already-fitted component models.
MultiGp condition_multi_gp(const data::Dataset& ds, const data::FunctionGrid& grid,
                           std::vector<GpModel> models, int threads = 1);

}  // namespace uqmd::gp

#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "uqmd/common.hpp"
#include "uqmd/diffnum.hpp"

namespace uqmd::flow {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct FlowConfig {
  int n_transforms = 16;
  int hidden_layers = 1;
  int width_multiplier = 4;  // hidden width = multiplier * n_kappa
  double clamp_lo = -30.0;
  double clamp_hi = 30.0;
};

/// Inverse autoregressive flow over positive material parameters. Sampling
/// runs latent -> kappa in one pass per sub-transform; each sub-transform is
/// z -> l + sigmoid(s) (.) z from one masked autoregressive network, with the
/// row order reversed between consecutive sub-transforms. A final clamped
/// exponential maps to kappa > 0. Densities invert the chain sequentially.
class FlowModel {
 public:
  FlowModel() = default;
  FlowModel(int n_kappa, const FlowConfig& cfg, Rng& init_rng);

  int n_kappa() const { return n_kappa_; }
  const FlowConfig& config() const { return cfg_; }
  std::vector<ad::Made>& transforms() { return mades_; }
  const std::vector<ad::Made>& transforms() const { return mades_; }

  /// Latent columns to parameter columns.
  MatrixXd transform(const MatrixXd& U) const;
  MatrixXd sample(int count, Rng& rng) const;
  /// Parameter columns back to latent columns.
  MatrixXd inverse(const MatrixXd& K) const;
  /// Log density per column; -inf for non-positive parameters.
  VectorXd log_density(const MatrixXd& K) const;

  struct TapeRefs {
    std::vector<ad::Made::TapeRefs> mades;
  };
  TapeRefs register_params(ad::Tape& tape) const;
  /// Differentiable latent -> kappa map for training.
  ad::Var transform_on_tape(ad::Tape& tape, const TapeRefs& refs, ad::Var u) const;

  std::vector<MatrixXd*> parameters();
  std::vector<MatrixXd> gradients(const ad::Tape& tape, const TapeRefs& refs) const;

  std::string to_json() const;
  static FlowModel from_json(const std::string& text);

  /// Saturation events of the final exponential, cumulative.
  std::uint64_t clamp_events() const { return clamp_events_; }

 private:
  int n_kappa_ = 0;
  FlowConfig cfg_;
  std::vector<ad::Made> mades_;
  mutable std::uint64_t clamp_events_ = 0;
};

}  // namespace uqmd::flow

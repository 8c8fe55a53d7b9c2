#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "uqmd/common.hpp"
#include "uqmd/dataset.hpp"
#include "uqmd/diffnum.hpp"
#include "uqmd/flow.hpp"
#include "uqmd/gp.hpp"
#include "uqmd/mechanics.hpp"

namespace uqmd::distill {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Maps parameter vectors to stacked stress functions over the evaluation
/// grid. Every term's observation enters through a precomputed unit-stress
/// table; exponential terms add a per-point scalar exp(w * g) factor whose
/// argument table is precomputed as well, zeroed past the overflow clamp.
class ForwardMap {
 public:
  ForwardMap(const mech::ModelLibrary& lib, const data::FunctionGrid& grid,
             const mech::Frame& frame = mech::Frame{});

  int n_stacked() const { return n_s_; }
  int n_kappa() const { return lib_.n_kappa; }
  const mech::ModelLibrary& library() const { return lib_; }

  /// Parameter columns (n_kappa x B) to stress columns (n_s x B).
  MatrixXd evaluate(const MatrixXd& K) const;
  /// Adjoint: given upstream gradients G (n_s x B), returns d<G, P>/d kappa
  /// per column (n_kappa x B).
  MatrixXd backprop(const MatrixXd& K, const MatrixXd& G) const;

  const MatrixXd& unit_stress_table() const { return gamma_; }

 private:
  mech::ModelLibrary lib_;
  int n_s_ = 0;
  MatrixXd gamma_;  // n_s x n_terms, unit-coefficient observed stress
  MatrixXd gtab_;   // n_s x n_terms, exp argument g per point (exp terms)
  std::vector<int> coeff_idx_, inner_idx_;
};

struct HistoryRow {
  int iteration = 0;
  double L_W = 0.0;      // transport term, mean critic gap
  double L_L = 0.0;      // critic objective with the penalty folded in
  double penalty = 0.0;  // gradient penalty at the interpolants
  double lr = 0.0;       // flow learning rate in effect
  double wall_time = 0.0;
};

void write_history_csv(const std::vector<HistoryRow>& rows, const std::string& path);

struct DistillConfig {
  flow::FlowConfig flow_cfg;
  int critic_hidden_layers = 3;
  int critic_width_multiplier = 2;  // hidden width = multiplier * n_s
  int n_iters = 10000;              // flow updates
  int n_critic = 10;                // critic updates per flow update
  int batch = 32;
  double critic_lr = 1e-4;
  double flow_lr = 5e-4;
  double flow_lr_decay = 0.9999;
  double lambda = 10.0;  // gradient penalty weight
  double divergence_threshold = 1e8;
  int checkpoint_every = 0;      // 0 disables periodic checkpoints
  std::string checkpoint_dir;    // used when checkpoint_every > 0
  std::string history_path;      // CSV written at the end when non-empty
};

struct DistillResult {
  flow::FlowModel model;
  int iterations = 0;
  bool diverged = false;
  std::vector<HistoryRow> history;
  std::uint64_t clamp_events = 0;
};

/// Adversarial distillation of the stacked GP posterior into the flow:
/// alternates n_critic critic updates (fresh GP and flow batches each) with
/// one flow update seeded through the forward map's adjoint. Divergence
/// (non-finite or astronomically large losses) rolls back to the last good
/// iterate and stops early.
DistillResult distill_flow(const gp::MultiGp& posterior, const ForwardMap& fmap,
                           const DistillConfig& cfg, std::uint64_t seed);

}  // namespace uqmd::distill

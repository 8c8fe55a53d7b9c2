#include "uqmd/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

namespace uqmd::distill {

namespace {

constexpr double kExpClamp = 30.0;

double bracket_of_base(mech::BaseInvariant b, const mech::Invariants& iv) {
  using BI = mech::BaseInvariant;
  switch (b) {
    case BI::I1: return iv.I1 - 3.0;
    case BI::I2: return iv.I2 - 3.0;
    case BI::I4f: return std::max(iv.I4f, 1.0) - 1.0;
    case BI::I4s: return std::max(iv.I4s, 1.0) - 1.0;
    case BI::I4n: return std::max(iv.I4n, 1.0) - 1.0;
    case BI::I8fs: return iv.I8fs;
    case BI::I8fn: return iv.I8fn;
    case BI::I8sn: return iv.I8sn;
  }
  throw InvalidInputError("bad base invariant");
}

}  // namespace

ForwardMap::ForwardMap(const mech::ModelLibrary& lib, const data::FunctionGrid& grid,
                       const mech::Frame& frame)
    : lib_(lib), n_s_(grid.total) {
  const int n_terms = static_cast<int>(lib.terms.size());
  if (n_terms == 0) throw ConfigError("ForwardMap: empty library");
  gamma_ = MatrixXd::Zero(n_s_, n_terms);
  gtab_ = MatrixXd::Zero(n_s_, n_terms);
  coeff_idx_.resize(n_terms);
  inner_idx_.assign(n_terms, -1);

  // One single-term library per term with a unit coefficient; exponential
  // heads contribute through the plain power with the same base and
  // exponent, the exp factor is applied separately at evaluation time.
  std::vector<mech::ModelLibrary> unit;
  unit.reserve(n_terms);
  for (int j = 0; j < n_terms; ++j) {
    mech::TermSpec t = lib.terms[j];
    coeff_idx_[j] = t.coeff_index;
    if (t.form == mech::TermForm::ExpPower) {
      inner_idx_[j] = t.inner_index;
      t.form = mech::TermForm::Power;
    }
    unit.push_back(mech::make_library_from_terms({t}));
  }

  const VectorXd one = VectorXd::Ones(1);
  for (const auto& block : grid.blocks) {
    mech::PressureRule rule = mech::pressure_rule_for(block.protocol);
    for (int r = 0; r < block.size(); ++r) {
      int s = block.offset + r;
      const mech::Matrix3& F = block.F[static_cast<std::size_t>(r)];
      mech::Invariants iv = mech::invariants_of(F, frame);
      for (int j = 0; j < n_terms; ++j) {
        mech::Matrix3 stress =
            block.component.measure == mech::StressMeasure::FirstPk
                ? mech::stress_first_pk(unit[static_cast<std::size_t>(j)], one, F, rule, frame)
                : mech::stress_cauchy(unit[static_cast<std::size_t>(j)], one, F, rule, frame);
        gamma_(s, j) = stress(block.component.i, block.component.j);
        if (inner_idx_[j] >= 0) {
          const auto& term = lib.terms[static_cast<std::size_t>(j)];
          double g = bracket_of_base(term.base, iv);
          double gp = 1.0;
          for (int e = 0; e < term.expo; ++e) gp *= g;
          gtab_(s, j) = gp;
        }
      }
    }
  }
}

MatrixXd ForwardMap::evaluate(const MatrixXd& K) const {
  if (K.rows() != lib_.n_kappa) throw DimensionError("ForwardMap: kappa rows mismatch");
  const int B = static_cast<int>(K.cols());
  MatrixXd P = MatrixXd::Zero(n_s_, B);
  for (std::size_t j = 0; j < coeff_idx_.size(); ++j) {
    int jj = static_cast<int>(j);
    if (inner_idx_[j] < 0) {
      P.noalias() += gamma_.col(jj) * K.row(coeff_idx_[j]);
    } else {
      // c * w * exp(w g) per point, zero past the overflow clamp
      Eigen::ArrayXXd A = (gtab_.col(jj) * K.row(inner_idx_[j])).array();
      Eigen::ArrayXXd E = (A < kExpClamp).select(A.exp(), 0.0);
      Eigen::RowVectorXd cw =
          K.row(coeff_idx_[j]).cwiseProduct(K.row(inner_idx_[j]));
      P.array() += (gamma_.col(jj) * cw).array() * E;
    }
  }
  return P;
}

MatrixXd ForwardMap::backprop(const MatrixXd& K, const MatrixXd& G) const {
  if (K.rows() != lib_.n_kappa) throw DimensionError("ForwardMap: kappa rows mismatch");
  if (G.rows() != n_s_ || G.cols() != K.cols())
    throw DimensionError("ForwardMap: upstream gradient shape mismatch");
  MatrixXd out = MatrixXd::Zero(K.rows(), K.cols());
  for (std::size_t j = 0; j < coeff_idx_.size(); ++j) {
    int jj = static_cast<int>(j);
    if (inner_idx_[j] < 0) {
      out.row(coeff_idx_[j]) += gamma_.col(jj).transpose() * G;
    } else {
      Eigen::ArrayXXd A = (gtab_.col(jj) * K.row(inner_idx_[j])).array();
      Eigen::ArrayXXd E = (A < kExpClamp).select(A.exp(), 0.0);
      // T = G .* gamma_j .* exp table; dc = w sum_s T, dw = c sum_s T (1 + A)
      Eigen::ArrayXXd T = G.array() * (gamma_.col(jj).replicate(1, K.cols())).array() * E;
      Eigen::RowVectorXd colsum = T.colwise().sum().matrix();
      Eigen::RowVectorXd colsum_a = (T * (1.0 + A)).colwise().sum().matrix();
      out.row(coeff_idx_[j]) += K.row(inner_idx_[j]).cwiseProduct(colsum);
      out.row(inner_idx_[j]) += K.row(coeff_idx_[j]).cwiseProduct(colsum_a);
    }
  }
  return out;
}

void write_history_csv(const std::vector<HistoryRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw StageError("distill", "cannot write history csv '" + path + "'");
  out << "iteration,L_W,L_L,penalty,lr,wall_time\n";
  out.precision(17);
  for (const auto& r : rows)
    out << r.iteration << ',' << r.L_W << ',' << r.L_L << ',' << r.penalty << ',' << r.lr
        << ',' << r.wall_time << '\n';
}

namespace {

MatrixXd standard_normal(int rows, int cols, Rng& rng) {
  MatrixXd M(rows, cols);
  for (int c = 0; c < cols; ++c)
    for (int r = 0; r < rows; ++r) M(r, c) = rng.normal();
  return M;
}

struct CriticStepOut {
  double w_term = 0.0;
  double penalty = 0.0;
};

CriticStepOut critic_step(ad::DenseNetwork& critic, ad::AdamW& opt, const MatrixXd& Y,
                          const MatrixXd& Fm, const MatrixXd& Xhat, double lambda) {
  critic.power_iterate(1);
  ad::Tape tape;
  auto refs = critic.register_params(tape);
  auto f_real = critic.forward_on_tape(tape, refs, tape.constant(Y));
  auto f_fake = critic.forward_on_tape(tape, refs, tape.constant(Fm));
  auto f_hat = critic.forward_on_tape(tape, refs, tape.constant(Xhat));
  ad::Var G = critic.input_gradient_on_tape(tape, refs, f_hat);
  ad::Var s = tape.colsum(tape.hadamard(G, G));
  ad::Var nrm = tape.apply(ad::Act::Sqrt, tape.add_const(s, 1e-24));
  ad::Var pen = tape.mean(tape.apply(ad::Act::Square, tape.add_const(nrm, -1.0)));
  // Minimized objective: -(E f(real) - E f(fake)) + lambda penalty.
  ad::Var loss = tape.add(tape.sub(tape.mean(f_fake.out), tape.mean(f_real.out)),
                          tape.scale(pen, lambda));
  tape.backward(loss);
  opt.step(critic.gradients(tape, refs));
  CriticStepOut out;
  out.w_term = tape.value(f_real.out).mean() - tape.value(f_fake.out).mean();
  out.penalty = tape.value(pen)(0, 0);
  return out;
}

}  // namespace

DistillResult distill_flow(const gp::MultiGp& posterior, const ForwardMap& fmap,
                           const DistillConfig& cfg, std::uint64_t seed) {
  if (cfg.n_iters < 1) throw ConfigError("distill: n_iters must be positive");
  if (cfg.batch < 2) throw ConfigError("distill: batch must be at least 2");
  if (posterior.total != fmap.n_stacked())
    throw DimensionError("distill: posterior grid and forward map disagree");

  const int n_kappa = fmap.n_kappa();
  const int n_s = fmap.n_stacked();
  const int B = cfg.batch;

  Rng flow_rng(derive_seed(seed, "flow-init"));
  Rng critic_rng(derive_seed(seed, "critic-init"));
  Rng rng(derive_seed(seed, "distill-train"));

  flow::FlowModel model(n_kappa, cfg.flow_cfg, flow_rng);
  std::vector<int> hidden(static_cast<std::size_t>(cfg.critic_hidden_layers),
                          cfg.critic_width_multiplier * n_s);
  ad::DenseNetwork critic(n_s, hidden, ad::Act::Softplus, true, critic_rng);

  ad::AdamW::Config ccfg;
  ccfg.lr = cfg.critic_lr;
  ad::AdamW critic_opt(critic.parameters(), ccfg);

  ad::RmsProp::Config fcfg;
  fcfg.lr = cfg.flow_lr;
  fcfg.decay = cfg.flow_lr_decay;
  ad::RmsProp flow_opt(model.parameters(), fcfg);

  const bool checkpoints = cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty();
  if (checkpoints) std::filesystem::create_directories(cfg.checkpoint_dir);

  DistillResult result;
  result.history.reserve(static_cast<std::size_t>(cfg.n_iters));
  flow::FlowModel last_good = model;

  auto t0 = std::chrono::steady_clock::now();
  for (int iter = 0; iter < cfg.n_iters; ++iter) {
    CriticStepOut last{};
    for (int c = 0; c < cfg.n_critic; ++c) {
      MatrixXd Y = posterior.sample_stacked(B, rng);
      MatrixXd U = standard_normal(n_kappa, B, rng);
      MatrixXd Fm = fmap.evaluate(model.transform(U));
      MatrixXd Xhat(n_s, B);
      for (int b = 0; b < B; ++b) {
        double a = rng.uniform();
        Xhat.col(b) = a * Y.col(b) + (1.0 - a) * Fm.col(b);
      }
      last = critic_step(critic, critic_opt, Y, Fm, Xhat, cfg.lambda);
    }

    // Flow update: push the critic's input gradient through the forward
    // map's adjoint and seed it at the parameter node.
    double flow_lr = flow_opt.current_lr();
    {
      MatrixXd U = standard_normal(n_kappa, B, rng);
      ad::Tape tape;
      auto refs = model.register_params(tape);
      ad::Var kv = model.transform_on_tape(tape, refs, tape.constant(U));
      const MatrixXd& K = tape.value(kv);
      MatrixXd Fm = fmap.evaluate(K);
      MatrixXd Gc = critic.input_gradient(Fm);
      MatrixXd seed_k = fmap.backprop(K, Gc) * (-1.0 / static_cast<double>(B));
      tape.backward(kv, seed_k);
      flow_opt.step(model.gradients(tape, refs));
    }

    HistoryRow row;
    row.iteration = iter;
    row.L_W = last.w_term;
    row.L_L = last.w_term + cfg.lambda * last.penalty;
    row.penalty = last.penalty;
    row.lr = flow_lr;
    row.wall_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(row);
    result.iterations = iter + 1;

    bool finite = std::isfinite(row.L_W) && std::isfinite(row.L_L) && std::isfinite(row.penalty);
    if (!finite || std::abs(row.L_W) > cfg.divergence_threshold ||
        std::abs(row.L_L) > cfg.divergence_threshold) {
      result.diverged = true;
      model = last_good;
      break;
    }
    last_good = model;

    if (checkpoints && ((iter + 1) % cfg.checkpoint_every == 0 || iter + 1 == cfg.n_iters)) {
      char name[32];
      std::snprintf(name, sizeof(name), "flow_%06d.json", iter + 1);
      std::ofstream out(std::filesystem::path(cfg.checkpoint_dir) / name);
      out << model.to_json();
    }
  }

  result.clamp_events = model.clamp_events();
  result.model = std::move(model);
  if (!cfg.history_path.empty()) write_history_csv(result.history, cfg.history_path);
  return result;
}

}  // namespace uqmd::distill

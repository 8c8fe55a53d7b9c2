#include "uqmd/gp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "uqmd/diffnum.hpp"

namespace uqmd::gp {

namespace {
constexpr double kLog2Pi = 1.8378770664093453;
}

NormMap NormMap::fit(const MatrixXd& X) {
  if (X.rows() < 1) throw InvalidInputError("NormMap: empty input");
  NormMap m;
  m.lo = X.colwise().minCoeff();
  m.hi = X.colwise().maxCoeff();
  return m;
}

MatrixXd NormMap::apply(const MatrixXd& X) const {
  if (X.cols() != lo.size()) throw DimensionError("NormMap: dimension mismatch");
  MatrixXd out(X.rows(), X.cols());
  for (int j = 0; j < X.cols(); ++j) {
    double span = hi(j) - lo(j);
    if (span <= 1e-12 * std::max(1.0, std::abs(hi(j)))) {
      out.col(j).setConstant(0.5);
    } else {
      out.col(j) = ((X.col(j).array() - lo(j)) / span).matrix();
    }
  }
  return out;
}

MatrixXd ArdSeKernel::gram(const MatrixXd& A, const MatrixXd& B) const {
  if (A.cols() != B.cols() || A.cols() != length.size())
    throw DimensionError("kernel: input dimension mismatch");
  MatrixXd K = MatrixXd::Zero(A.rows(), B.rows());
  for (int d = 0; d < A.cols(); ++d) {
    double inv2 = 1.0 / (length(d) * length(d));
    for (int i = 0; i < A.rows(); ++i)
      for (int j = 0; j < B.rows(); ++j) {
        double diff = A(i, d) - B(j, d);
        K(i, j) += diff * diff * inv2;
      }
  }
  return (sigma2 * (-0.5 * K.array()).exp()).matrix();
}

RobustChol robust_cholesky(const MatrixXd& A, double scale) {
  if (A.rows() != A.cols()) throw DimensionError("robust_cholesky: square matrix required");
  const double ladder[] = {0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4};
  for (double step : ladder) {
    double jitter = step * scale;
    MatrixXd M = A;
    if (jitter > 0.0) M.diagonal().array() += jitter;
    Eigen::LLT<MatrixXd> llt(M);
    if (llt.info() == Eigen::Success) return {MatrixXd(llt.matrixL()), jitter};
  }
  throw NumericalError("Cholesky failed even with maximal jitter");
}

double lml_value_grad(const MatrixXd& X, const VectorXd& y, const VectorXd& noise_var,
                      double log_sigma, const VectorXd& log_length, VectorXd* grad,
                      double* jitter_used) {
  const int n = static_cast<int>(X.rows());
  const int d = static_cast<int>(X.cols());
  if (y.size() != n || noise_var.size() != n || log_length.size() != d)
    throw DimensionError("lml: inconsistent shapes");

  ArdSeKernel kern;
  kern.sigma2 = std::exp(2.0 * log_sigma);
  kern.length = log_length.array().exp().matrix();
  MatrixXd K = kern.gram(X, X);

  MatrixXd Kt = K;
  Kt.diagonal() += noise_var;
  RobustChol ch = robust_cholesky(Kt, kern.sigma2);
  if (jitter_used) *jitter_used = ch.jitter;

  VectorXd alpha = ch.L.triangularView<Eigen::Lower>().solve(y);
  double logdet = ch.L.diagonal().array().log().sum();
  double lml = -0.5 * alpha.squaredNorm() - logdet - 0.5 * n * kLog2Pi;
  alpha = ch.L.transpose().triangularView<Eigen::Upper>().solve(alpha);

  if (grad) {
    // d LML / d theta = 0.5 tr((alpha alpha^T - K~^{-1}) dK/d theta)
    MatrixXd Kinv = ch.L.triangularView<Eigen::Lower>().solve(MatrixXd::Identity(n, n));
    Kinv = ch.L.transpose().triangularView<Eigen::Upper>().solve(Kinv);
    MatrixXd W = alpha * alpha.transpose() - Kinv;

    grad->resize(d + 1);
    (*grad)(0) = W.cwiseProduct(K).sum();  // dK/d log sigma = 2K
    for (int k = 0; k < d; ++k) {
      double inv2 = 1.0 / (kern.length(k) * kern.length(k));
      double acc = 0.0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          double diff = X(i, k) - X(j, k);
          acc += W(i, j) * K(i, j) * diff * diff * inv2;
        }
      (*grad)(k + 1) = 0.5 * acc;
    }
  }
  return lml;
}

GpModel condition_gp(const data::ComponentTrainingSet& ts, const data::ErrorModel& noise,
                     double sigma2, const VectorXd& length) {
  if (ts.X.rows() < 2)
    throw InvalidInputError("condition_gp: need at least two training points");
  if (length.size() != ts.X.cols())
    throw DimensionError("condition_gp: length scale count does not match the inputs");
  GpModel m;
  m.component_id = ts.component_id;
  m.norm = NormMap::fit(ts.X);
  m.X = m.norm.apply(ts.X);
  m.y = ts.y;
  m.noise_var.resize(ts.y.size());
  for (int i = 0; i < ts.y.size(); ++i) {
    double sd = noise.std_at(ts.y(i));
    m.noise_var(i) = sd * sd;
  }
  m.sigma2 = sigma2;
  m.length = length;
  m.length_raw = length;

  ArdSeKernel kern{m.sigma2, m.length};
  MatrixXd Kt = kern.gram(m.X, m.X);
  Kt.diagonal() += m.noise_var;
  RobustChol ch = robust_cholesky(Kt, m.sigma2);
  m.L = ch.L;
  m.fit_jitter = ch.jitter;
  m.alpha = m.L.triangularView<Eigen::Lower>().solve(m.y);
  m.alpha = m.L.transpose().triangularView<Eigen::Upper>().solve(m.alpha);
  return m;
}

GpModel fit_gp(const data::ComponentTrainingSet& ts, const FitConfig& cfg) {
  if (ts.X.rows() < 2) throw InvalidInputError("fit_gp: need at least two training points");
  GpModel m;
  m.component_id = ts.component_id;
  m.norm = NormMap::fit(ts.X);
  m.X = m.norm.apply(ts.X);
  m.y = ts.y;
  m.noise_var.resize(ts.y.size());
  for (int i = 0; i < ts.y.size(); ++i) {
    double sd = cfg.noise.std_at(ts.y(i));
    m.noise_var(i) = sd * sd;
  }

  const int d = static_cast<int>(m.X.cols());
  double ystd = std::sqrt((m.y.array() - m.y.mean()).square().mean());
  ystd = std::max(ystd, 1e-8);

  MatrixXd theta(d + 1, 1);
  theta(0, 0) = std::log(ystd);
  for (int k = 0; k < d; ++k) theta(k + 1, 0) = std::log(cfg.init_length);

  ad::AdamW::Config ocfg;
  ocfg.lr = cfg.lr;
  ocfg.weight_decay = 0.0;
  ad::AdamW opt({&theta}, ocfg);

  MatrixXd best = theta;
  double best_lml = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < cfg.iters; ++it) {
    VectorXd g;
    double lml = lml_value_grad(m.X, m.y, m.noise_var, theta(0, 0),
                                theta.col(0).tail(d), &g);
    if (it == 0) m.lml_init = lml;
    if (lml > best_lml) {
      best_lml = lml;
      best = theta;
    }
    MatrixXd gm(d + 1, 1);
    gm.col(0) = -g;  // ascend the likelihood
    opt.step({gm});
  }
  double lml_init = m.lml_init, lml_best = best_lml;
  double sigma2 = std::exp(2.0 * best(0, 0));
  VectorXd length_raw = best.col(0).tail(d).array().exp().matrix();

  m = condition_gp(ts, cfg.noise, sigma2, cfg.shrink * length_raw);
  m.length_raw = length_raw;
  m.lml_init = lml_init;
  m.lml_best = lml_best;
  return m;
}

void GpModel::predict(const MatrixXd& Xq, VectorXd& mean, MatrixXd& cov) const {
  ArdSeKernel kern{sigma2, length};
  MatrixXd Ks = kern.gram(X, Xq);
  mean = Ks.transpose() * alpha;
  MatrixXd V = L.triangularView<Eigen::Lower>().solve(Ks);
  cov = kern.gram(Xq, Xq) - V.transpose() * V;
}

const GpModel& MultiGp::model_for(const std::string& component_id) const {
  for (const auto& m : models)
    if (m.component_id == component_id) return m;
  throw InvalidInputError("no GP for component '" + component_id + "'");
}

VectorXd MultiGp::mean_stacked() const {
  VectorXd out(total);
  for (const auto& b : blocks) out.segment(b.offset, b.size()) = b.mean;
  return out;
}

VectorXd MultiGp::sd_stacked() const {
  VectorXd out(total);
  for (const auto& b : blocks)
    out.segment(b.offset, b.size()) = b.cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  return out;
}

MatrixXd MultiGp::sample_stacked(int count, Rng& rng) const {
  if (count < 1) throw InvalidInputError("sample_stacked: count must be positive");
  MatrixXd S(total, count);
  for (int s = 0; s < count; ++s) {
    for (const auto& b : blocks) {
      VectorXd eps(b.size());
      for (int i = 0; i < b.size(); ++i) eps(i) = rng.normal();
      S.col(s).segment(b.offset, b.size()) = b.mean + b.chol * eps;
    }
  }
  return S;
}

MultiGp fit_multi_gp(const data::Dataset& ds, const data::FunctionGrid& grid,
                     const FitConfig& cfg) {
  auto ids = ds.component_ids();
  std::vector<GpModel> models(ids.size());
  parallel_for(ids.size(), cfg.threads, [&](std::size_t i) {
    models[i] = fit_gp(data::component_training_set(ds, ids[i]), cfg);
  });
  return condition_multi_gp(ds, grid, std::move(models), cfg.threads);
}

MultiGp condition_multi_gp(const data::Dataset& ds, const data::FunctionGrid& grid,
                           std::vector<GpModel> models, int threads) {
  (void)ds;
  MultiGp mg;
  mg.models = std::move(models);
  mg.total = grid.total;
  mg.blocks.resize(grid.blocks.size());
  parallel_for(grid.blocks.size(), threads, [&](std::size_t i) {
    const auto& gb = grid.blocks[i];
    const GpModel& model = mg.model_for(gb.component.id);
    PosteriorBlock pb;
    pb.t = gb.t;
    pb.q = gb.q;
    pb.offset = gb.offset;
    model.predict(model.norm.apply(gb.gp_inputs), pb.mean, pb.cov);
    RobustChol ch = robust_cholesky(pb.cov, model.sigma2);
    pb.chol = ch.L;
    pb.jitter = ch.jitter;
    mg.blocks[i] = std::move(pb);
  });
  return mg;
}

}  // namespace uqmd::gp

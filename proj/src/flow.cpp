#include "uqmd/flow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "json.hpp"

namespace uqmd::flow {

namespace {
constexpr double kLog2Pi = 1.8378770664093453;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

FlowModel::FlowModel(int n_kappa, const FlowConfig& cfg, Rng& init_rng)
    : n_kappa_(n_kappa), cfg_(cfg) {
  if (n_kappa < 1) throw ConfigError("FlowModel: need at least one parameter");
  if (cfg.n_transforms < 1) throw ConfigError("FlowModel: need at least one sub-transform");
  if (!(cfg.clamp_hi > cfg.clamp_lo)) throw ConfigError("FlowModel: bad clamp interval");
  for (int k = 0; k < cfg.n_transforms; ++k)
    mades_.emplace_back(n_kappa, cfg.hidden_layers, cfg.width_multiplier * n_kappa, init_rng);
}

MatrixXd FlowModel::transform(const MatrixXd& U) const {
  if (U.rows() != n_kappa_) throw DimensionError("FlowModel: latent rows != n_kappa");
  MatrixXd z = U;
  for (std::size_t k = 0; k < mades_.size(); ++k) {
    if (k > 0) z = z.colwise().reverse().eval();
    auto [l, s] = mades_[k].forward(z);
    z = l + s.unaryExpr([](double t) { return sigmoid(t); }).cwiseProduct(z);
  }
  MatrixXd kappa(z.rows(), z.cols());
  std::uint64_t events = 0;
  for (int c = 0; c < z.cols(); ++c)
    for (int r = 0; r < z.rows(); ++r) {
      double v = z(r, c);
      if (v < cfg_.clamp_lo || v > cfg_.clamp_hi) ++events;
      kappa(r, c) = std::exp(std::clamp(v, cfg_.clamp_lo, cfg_.clamp_hi));
    }
  clamp_events_ += events;
  return kappa;
}

MatrixXd FlowModel::sample(int count, Rng& rng) const {
  if (count < 1) throw InvalidInputError("FlowModel: sample count must be positive");
  MatrixXd U(n_kappa_, count);
  for (int c = 0; c < count; ++c)
    for (int r = 0; r < n_kappa_; ++r) U(r, c) = rng.normal();
  return transform(U);
}

namespace {

/// Solves z_out = l(z_in) + sigmoid(s(z_in)) (.) z_in row by row; the
/// autoregressive masks make row i of (l, s) depend on rows < i only.
/// Accumulates log sigmoid(s) per column when requested.
MatrixXd invert_one(const ad::Made& made, const MatrixXd& Zout, VectorXd* log_sc) {
  MatrixXd Zin = MatrixXd::Zero(Zout.rows(), Zout.cols());
  for (int i = 0; i < Zout.rows(); ++i) {
    auto [l, s] = made.forward(Zin);
    for (int c = 0; c < Zout.cols(); ++c) {
      double sc = sigmoid(s(i, c));
      Zin(i, c) = (Zout(i, c) - l(i, c)) / sc;
      if (log_sc) (*log_sc)(c) += std::log(sc);
    }
  }
  return Zin;
}

}  // namespace

MatrixXd FlowModel::inverse(const MatrixXd& K) const {
  if (K.rows() != n_kappa_) throw DimensionError("FlowModel: parameter rows != n_kappa");
  if ((K.array() <= 0.0).any())
    throw InvalidInputError("FlowModel: inverse needs positive parameters");
  MatrixXd z = K.array().log().matrix();
  for (int k = static_cast<int>(mades_.size()) - 1; k >= 0; --k) {
    z = invert_one(mades_[static_cast<std::size_t>(k)], z, nullptr);
    if (k > 0) z = z.colwise().reverse().eval();
  }
  return z;
}

VectorXd FlowModel::log_density(const MatrixXd& K) const {
  if (K.rows() != n_kappa_) throw DimensionError("FlowModel: parameter rows != n_kappa");
  const int B = static_cast<int>(K.cols());
  VectorXd out(B);

  // Columns with non-positive entries have no preimage.
  std::vector<int> live;
  for (int c = 0; c < B; ++c) {
    if ((K.col(c).array() > 0.0).all()) {
      live.push_back(c);
    } else {
      out(c) = -std::numeric_limits<double>::infinity();
    }
  }
  if (live.empty()) return out;

  MatrixXd Kl(n_kappa_, static_cast<int>(live.size()));
  for (std::size_t i = 0; i < live.size(); ++i) Kl.col(static_cast<int>(i)) = K.col(live[i]);

  MatrixXd z = Kl.array().log().matrix();
  VectorXd logdet = z.colwise().sum().transpose();  // exp layer: d kappa / d z = kappa
  VectorXd log_sc = VectorXd::Zero(Kl.cols());
  for (int k = static_cast<int>(mades_.size()) - 1; k >= 0; --k) {
    z = invert_one(mades_[static_cast<std::size_t>(k)], z, &log_sc);
    if (k > 0) z = z.colwise().reverse().eval();
  }
  for (std::size_t i = 0; i < live.size(); ++i) {
    int c = static_cast<int>(i);
    double log_pu = -0.5 * z.col(c).squaredNorm() - 0.5 * n_kappa_ * kLog2Pi;
    out(live[i]) = log_pu - log_sc(c) - logdet(c);
  }
  return out;
}

FlowModel::TapeRefs FlowModel::register_params(ad::Tape& tape) const {
  TapeRefs refs;
  for (const auto& m : mades_) refs.mades.push_back(m.register_params(tape));
  return refs;
}

ad::Var FlowModel::transform_on_tape(ad::Tape& tape, const TapeRefs& refs, ad::Var u) const {
  ad::Var z = u;
  for (std::size_t k = 0; k < mades_.size(); ++k) {
    if (k > 0) z = tape.reverse_rows(z);
    auto [l, s] = mades_[k].forward_on_tape(tape, refs.mades[k], z);
    z = tape.add(l, tape.hadamard(tape.apply(ad::Act::Sigmoid, s), z));
  }
  return tape.clamped_exp(z, cfg_.clamp_lo, cfg_.clamp_hi, &clamp_events_);
}

std::vector<MatrixXd*> FlowModel::parameters() {
  std::vector<MatrixXd*> out;
  for (auto& m : mades_) {
    auto p = m.parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

std::vector<MatrixXd> FlowModel::gradients(const ad::Tape& tape, const TapeRefs& refs) const {
  std::vector<MatrixXd> out;
  for (std::size_t k = 0; k < mades_.size(); ++k) {
    auto g = mades_[k].gradients(tape, refs.mades[k]);
    out.insert(out.end(), g.begin(), g.end());
  }
  return out;
}

std::string FlowModel::to_json() const {
  nlohmann::json j;
  j["n_kappa"] = n_kappa_;
  j["n_transforms"] = cfg_.n_transforms;
  j["hidden_layers"] = cfg_.hidden_layers;
  j["width_multiplier"] = cfg_.width_multiplier;
  j["clamp_lo"] = cfg_.clamp_lo;
  j["clamp_hi"] = cfg_.clamp_hi;
  std::map<std::string, MatrixXd> tensors;
  for (std::size_t k = 0; k < mades_.size(); ++k) {
    const auto& layers = mades_[k].layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      std::string base = "made" + std::to_string(k) + ".layer" + std::to_string(l);
      tensors[base + ".W"] = layers[l].W;
      tensors[base + ".b"] = layers[l].b;
    }
  }
  j["tensors"] = nlohmann::json::parse(ad::tensors_to_json(tensors));
  return j.dump();
}

FlowModel FlowModel::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("flow checkpoint: ") + e.what());
  }
  FlowConfig cfg;
  int n_kappa = 0;
  try {
    n_kappa = j.at("n_kappa").get<int>();
    cfg.n_transforms = j.at("n_transforms").get<int>();
    cfg.hidden_layers = j.at("hidden_layers").get<int>();
    cfg.width_multiplier = j.at("width_multiplier").get<int>();
    cfg.clamp_lo = j.at("clamp_lo").get<double>();
    cfg.clamp_hi = j.at("clamp_hi").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("flow checkpoint fields: ") + e.what());
  }
  Rng scratch(0);
  FlowModel m(n_kappa, cfg, scratch);
  auto tensors = ad::tensors_from_json(j.at("tensors").dump());
  for (std::size_t k = 0; k < m.mades_.size(); ++k) {
    auto& layers = m.mades_[k].layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      std::string base = "made" + std::to_string(k) + ".layer" + std::to_string(l);
      auto wit = tensors.find(base + ".W");
      auto bit = tensors.find(base + ".b");
      if (wit == tensors.end() || bit == tensors.end())
        throw ParseError("flow checkpoint missing tensor " + base);
      if (wit->second.rows() != layers[l].W.rows() || wit->second.cols() != layers[l].W.cols())
        throw ParseError("flow checkpoint tensor shape mismatch at " + base);
      layers[l].W = wit->second;
      layers[l].b = bit->second;
    }
  }
  return m;
}

}  // namespace uqmd::flow

#include "uqmd/sobol.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "nlohmann/json.hpp"

namespace uqmd::sobol {

namespace {

void check_bounds(const VectorXd& lo, const VectorXd& hi) {
  if (lo.size() != hi.size())
    throw DimensionError("sampling bounds lo/hi differ in length");
  for (int i = 0; i < lo.size(); ++i) {
    if (!std::isfinite(lo(i)) || !std::isfinite(hi(i)))
      throw InvalidInputError("non-finite sampling bound in dimension " + std::to_string(i));
    if (!(lo(i) < hi(i)))
      throw InvalidInputError("degenerate sampling bounds in dimension " + std::to_string(i));
  }
}

struct PooledStats {
  double variance = 0.0;
  bool degenerate = false;
};

// Sample variance of [fa; fb]. Near-zero spread (relative to the mean) is
// estimator noise on a constant output, not signal.
PooledStats pooled_stats(const VectorXd& fa, const VectorXd& fb) {
  const double n = static_cast<double>(fa.size() + fb.size());
  double mean = (fa.sum() + fb.sum()) / n;
  double ss = (fa.array() - mean).square().sum() + (fb.array() - mean).square().sum();
  PooledStats st;
  st.variance = ss / (n - 1.0);
  st.degenerate = st.variance <= 1e-20 * (1.0 + mean * mean);
  return st;
}

double clip_for_report(double v) { return std::clamp(v, -0.05, 1.05); }

// Keep flags per parameter: a coefficient survives on its own (clipped at
// zero) score; an inner exponent survives with its coefficient.
std::vector<char> survivor_flags(const mech::ModelLibrary& lib, const VectorXd& averaged,
                                 double threshold) {
  std::vector<char> keep(static_cast<std::size_t>(lib.n_kappa), 0);
  for (const auto& term : lib.terms) {
    if (std::max(averaged(term.coeff_index), 0.0) >= threshold) {
      keep[static_cast<std::size_t>(term.coeff_index)] = 1;
      if (term.inner_index >= 0) keep[static_cast<std::size_t>(term.inner_index)] = 1;
    }
  }
  return keep;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out.good()) throw StageError("sobol", "cannot write " + path);
  out << std::setprecision(17);
  return out;
}

}  // namespace

SaltelliDesign saltelli_design(const VectorXd& lo, const VectorXd& hi, int n_base, Rng& rng) {
  check_bounds(lo, hi);
  if (n_base < 2) throw ConfigError("Saltelli base sample count must be at least 2");
  const int d = static_cast<int>(lo.size());
  SaltelliDesign design;
  design.A.resize(n_base, d);
  design.B.resize(n_base, d);
  for (int r = 0; r < n_base; ++r)
    for (int c = 0; c < d; ++c) design.A(r, c) = rng.uniform(lo(c), hi(c));
  for (int r = 0; r < n_base; ++r)
    for (int c = 0; c < d; ++c) design.B(r, c) = rng.uniform(lo(c), hi(c));
  return design;
}

MatrixXd saltelli_samples(const VectorXd& lo, const VectorXd& hi, int n_base,
                          std::uint64_t seed) {
  Rng rng(seed);
  SaltelliDesign design = saltelli_design(lo, hi, n_base, rng);
  const int d = static_cast<int>(lo.size());
  MatrixXd out(static_cast<long>(n_base) * (d + 2), d);
  out.topRows(n_base) = design.A;
  out.middleRows(n_base, n_base) = design.B;
  for (int i = 0; i < d; ++i) {
    MatrixXd ab = design.A;
    ab.col(i) = design.B.col(i);
    out.middleRows(static_cast<long>(n_base) * (i + 2), n_base) = ab;
  }
  return out;
}

VectorXd total_order_index(const VectorXd& fa, const VectorXd& fb, const MatrixXd& fab,
                           bool* degenerate) {
  if (fa.size() != fb.size() || fa.size() != fab.rows())
    throw DimensionError("Saltelli output vectors differ in length");
  if (fa.size() < 2) throw DimensionError("need at least 2 Saltelli outputs");
  PooledStats st = pooled_stats(fa, fb);
  if (degenerate) *degenerate = st.degenerate;
  VectorXd s_t = VectorXd::Zero(fab.cols());
  if (st.degenerate) return s_t;
  const double n = static_cast<double>(fa.size());
  for (int i = 0; i < fab.cols(); ++i)
    s_t(i) = (fa - fab.col(i)).squaredNorm() / (2.0 * n) / st.variance;
  return s_t;
}

VectorXd total_indices_of(const std::function<double(const VectorXd&)>& f, const VectorXd& lo,
                          const VectorXd& hi, int n_base, std::uint64_t seed,
                          bool* degenerate) {
  Rng rng(seed);
  SaltelliDesign design = saltelli_design(lo, hi, n_base, rng);
  const int d = static_cast<int>(lo.size());
  VectorXd fa(n_base), fb(n_base);
  for (int r = 0; r < n_base; ++r) {
    fa(r) = f(design.A.row(r).transpose());
    fb(r) = f(design.B.row(r).transpose());
  }
  MatrixXd fab(n_base, d);
  VectorXd x(d);
  for (int i = 0; i < d; ++i)
    for (int r = 0; r < n_base; ++r) {
      x = design.A.row(r).transpose();
      x(i) = design.B(r, i);
      fab(r, i) = f(x);
    }
  return total_order_index(fa, fb, fab, degenerate);
}

VectorXd average_indices(const MatrixXd& total, const data::FunctionGrid& grid) {
  if (total.rows() != grid.total)
    throw DimensionError("index tensor does not match the grid length");
  int n_t = 0;
  for (const auto& b : grid.blocks) n_t = std::max(n_t, b.t + 1);
  VectorXd acc = VectorXd::Zero(total.cols());
  for (int t = 0; t < n_t; ++t) {
    VectorXd sum = VectorXd::Zero(total.cols());
    int rows = 0;
    for (const auto& b : grid.blocks) {
      if (b.t != t) continue;
      sum += total.middleRows(b.offset, b.size()).colwise().sum().transpose();
      rows += b.size();
    }
    acc += sum / static_cast<double>(rows);
  }
  return acc / static_cast<double>(n_t);
}

SobolReport deformation_resolved_indices(const flow::FlowModel& model,
                                         const distill::ForwardMap& fmap,
                                         const data::FunctionGrid& grid,
                                         const SobolConfig& cfg, std::uint64_t seed) {
  if (grid.total != fmap.n_stacked())
    throw DimensionError("grid does not match the forward map");
  if (cfg.bounds_samples < 2) throw ConfigError("need at least 2 bounds samples");

  SobolReport rep;
  rep.n_base = cfg.n_base;
  rep.threshold = cfg.threshold;

  Rng bounds_rng(derive_seed(seed, "sobol-bounds"));
  MatrixXd K = model.sample(cfg.bounds_samples, bounds_rng);
  rep.lo = K.rowwise().minCoeff();
  rep.hi = K.rowwise().maxCoeff();

  Rng design_rng(derive_seed(seed, "sobol-saltelli"));
  SaltelliDesign design = saltelli_design(rep.lo, rep.hi, cfg.n_base, design_rng);

  const int n_s = fmap.n_stacked();
  const int d = fmap.n_kappa();
  const double n = static_cast<double>(cfg.n_base);
  MatrixXd fa = fmap.evaluate(design.A.transpose());
  MatrixXd fb = fmap.evaluate(design.B.transpose());

  rep.variance.resize(n_s);
  std::vector<char> degenerate(static_cast<std::size_t>(n_s), 0);
  for (int s = 0; s < n_s; ++s) {
    PooledStats st = pooled_stats(fa.row(s).transpose(), fb.row(s).transpose());
    rep.variance(s) = st.variance;
    degenerate[static_cast<std::size_t>(s)] = st.degenerate ? 1 : 0;
    if (st.degenerate) rep.degenerate_points.push_back(s);
  }

  rep.total.setZero(n_s, d);
  parallel_for(static_cast<std::size_t>(d), cfg.threads, [&](std::size_t i) {
    MatrixXd ab = design.A;
    ab.col(static_cast<long>(i)) = design.B.col(static_cast<long>(i));
    MatrixXd fab = fmap.evaluate(ab.transpose());
    for (int s = 0; s < n_s; ++s) {
      if (degenerate[static_cast<std::size_t>(s)]) continue;
      double num = (fa.row(s) - fab.row(s)).squaredNorm() / (2.0 * n);
      rep.total(s, static_cast<long>(i)) = num / rep.variance(s);
    }
  });

  rep.averaged = average_indices(rep.total, grid);
  std::vector<char> keep = survivor_flags(fmap.library(), rep.averaged, cfg.threshold);
  for (int i = 0; i < d; ++i)
    (keep[static_cast<std::size_t>(i)] ? rep.kept : rep.removed).push_back(i);
  return rep;
}

ReducedModel reduce_library(const mech::ModelLibrary& lib, const SobolReport& report,
                            double threshold) {
  if (!(threshold > 0.0)) throw ConfigError("sensitivity threshold must be positive");
  if (report.averaged.size() != lib.n_kappa)
    throw DimensionError("report does not match the library parameter count");

  ReducedModel out;
  for (int ti = 0; ti < static_cast<int>(lib.terms.size()); ++ti) {
    const auto& term = lib.terms[static_cast<std::size_t>(ti)];
    if (std::max(report.averaged(term.coeff_index), 0.0) >= threshold)
      out.keep_terms.push_back(ti);
  }
  if (out.keep_terms.empty())
    throw ConfigError("sensitivity threshold " + std::to_string(threshold) +
                      " removes every model term; lower it");

  out.library = lib.reduced(out.keep_terms);
  out.kappa_map.assign(static_cast<std::size_t>(lib.n_kappa), -1);
  for (std::size_t j = 0; j < out.keep_terms.size(); ++j) {
    const auto& old_term = lib.terms[static_cast<std::size_t>(out.keep_terms[j])];
    const auto& new_term = out.library.terms[j];
    out.kappa_map[static_cast<std::size_t>(old_term.coeff_index)] = new_term.coeff_index;
    if (old_term.inner_index >= 0)
      out.kappa_map[static_cast<std::size_t>(old_term.inner_index)] = new_term.inner_index;
  }
  return out;
}

void write_report_json(const SobolReport& report, const std::vector<std::string>& names,
                       const std::string& path, bool include_tensor) {
  nlohmann::json j;
  j["n_base"] = report.n_base;
  j["threshold"] = report.threshold;
  j["kept"] = report.kept;
  j["removed"] = report.removed;
  j["degenerate_points"] = report.degenerate_points;
  nlohmann::json params = nlohmann::json::array();
  for (int i = 0; i < report.averaged.size(); ++i) {
    nlohmann::json p;
    p["index"] = i;
    p["name"] = i < static_cast<int>(names.size()) ? names[static_cast<std::size_t>(i)] : "";
    p["S_T_avg"] = clip_for_report(report.averaged(i));
    p["lo"] = report.lo(i);
    p["hi"] = report.hi(i);
    params.push_back(std::move(p));
  }
  j["parameters"] = std::move(params);
  if (include_tensor) {
    nlohmann::json rows = nlohmann::json::array();
    for (int s = 0; s < report.total.rows(); ++s) {
      nlohmann::json row = nlohmann::json::array();
      for (int i = 0; i < report.total.cols(); ++i)
        row.push_back(clip_for_report(report.total(s, i)));
      rows.push_back(std::move(row));
    }
    j["total"] = std::move(rows);
  }
  std::ofstream out = open_out(path);
  out << j.dump(2) << "\n";
}

void write_averaged_csv(const SobolReport& report, const std::vector<std::string>& names,
                        const std::string& path) {
  std::ofstream out = open_out(path);
  out << "parameter,S_T_avg,kept\n";
  std::vector<char> keep(static_cast<std::size_t>(report.averaged.size()), 0);
  for (int i : report.kept) keep[static_cast<std::size_t>(i)] = 1;
  for (int i = 0; i < report.averaged.size(); ++i)
    out << names[static_cast<std::size_t>(i)] << "," << clip_for_report(report.averaged(i))
        << "," << int(keep[static_cast<std::size_t>(i)]) << "\n";
}

void write_curves_csv(const SobolReport& report, const data::FunctionGrid& grid,
                      const data::Dataset& ds, const std::vector<std::string>& names,
                      const std::string& path) {
  (void)ds;
  if (report.total.rows() != grid.total)
    throw DimensionError("index tensor does not match the grid length");
  std::ofstream out = open_out(path);
  out << "test_id,component_id,control";
  for (const auto& n : names) out << "," << n;
  out << "\n";
  for (const auto& b : grid.blocks)
    for (int r = 0; r < b.size(); ++r) {
      out << b.test_id << "," << b.component.id << "," << b.controls[static_cast<std::size_t>(r)];
      for (int i = 0; i < report.total.cols(); ++i)
        out << "," << clip_for_report(report.total(b.offset + r, i));
      out << "\n";
    }
}

}  // namespace uqmd::sobol

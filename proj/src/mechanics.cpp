#include "uqmd/mechanics.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <map>

namespace uqmd::mech {

namespace {

constexpr double kExpClamp = 30.0;

double ipow(double x, int n) {
  double r = 1.0;
  for (int i = 0; i < n; ++i) r *= x;
  return r;
}

bool is_diagonal(const Matrix3& F) {
  double off = 0.0, scale = std::max(1.0, F.cwiseAbs().maxCoeff());
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (i != j) off = std::max(off, std::abs(F(i, j)));
  return off <= 1e-12 * scale;
}

int axis_index(char a) {
  switch (a) {
    case 'f': return 0;
    case 's': return 1;
    case 'n': return 2;
    default: throw InvalidInputError(std::string("unknown material axis '") + a + "'");
  }
}

/// bracket(base) value and its F-gradient. I4 brackets are corrected:
/// below unit stretch both the value and the gradient vanish.
struct Bracket {
  double value = 0.0;
  Matrix3 grad = Matrix3::Zero();
};

Bracket bracket_of(BaseInvariant b, const Matrix3& F, const Invariants& inv, const Frame& fr,
                   bool with_grad) {
  Bracket out;
  Matrix3 C = F.transpose() * F;
  switch (b) {
    case BaseInvariant::I1:
      out.value = inv.I1 - 3.0;
      if (with_grad) out.grad = 2.0 * F;
      break;
    case BaseInvariant::I2:
      out.value = inv.I2 - 3.0;
      if (with_grad) out.grad = 2.0 * (inv.I1 * F - F * C);
      break;
    case BaseInvariant::I4f:
    case BaseInvariant::I4s:
    case BaseInvariant::I4n: {
      const Vector3& x = b == BaseInvariant::I4f ? fr.f0
                       : b == BaseInvariant::I4s ? fr.s0
                                                 : fr.n0;
      double i4 = b == BaseInvariant::I4f ? inv.I4f
                : b == BaseInvariant::I4s ? inv.I4s
                                          : inv.I4n;
      out.value = std::max(i4, 1.0) - 1.0;
      if (with_grad && i4 > 1.0) out.grad = 2.0 * F * (x * x.transpose());
      break;
    }
    case BaseInvariant::I8fs:
    case BaseInvariant::I8fn:
    case BaseInvariant::I8sn: {
      const Vector3& x = b == BaseInvariant::I8sn ? fr.s0 : fr.f0;
      const Vector3& y = b == BaseInvariant::I8fs ? fr.s0 : fr.n0;
      out.value = b == BaseInvariant::I8fs ? inv.I8fs
                : b == BaseInvariant::I8fn ? inv.I8fn
                                           : inv.I8sn;
      if (with_grad) out.grad = F * (x * y.transpose() + y * x.transpose());
      break;
    }
  }
  return out;
}

void check_kappa(const ModelLibrary& lib, const Eigen::VectorXd& kappa) {
  if (kappa.size() != lib.n_kappa)
    throw DimensionError("kappa has " + std::to_string(kappa.size()) + " entries, library needs " +
                         std::to_string(lib.n_kappa));
}

}  // namespace

Protocol protocol_from_string(const std::string& s) {
  static const std::map<std::string, Protocol> table = {
      {"UT", Protocol::UT},       {"EBT", Protocol::EBT},     {"PS", Protocol::PS},
      {"SS_fs", Protocol::SS_fs}, {"SS_sf", Protocol::SS_sf}, {"SS_fn", Protocol::SS_fn},
      {"SS_nf", Protocol::SS_nf}, {"SS_sn", Protocol::SS_sn}, {"SS_ns", Protocol::SS_ns},
      {"BT", Protocol::BT}};
  auto it = table.find(s);
  if (it == table.end()) throw InvalidInputError("unknown protocol '" + s + "'");
  return it->second;
}

std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::UT: return "UT";
    case Protocol::EBT: return "EBT";
    case Protocol::PS: return "PS";
    case Protocol::SS_fs: return "SS_fs";
    case Protocol::SS_sf: return "SS_sf";
    case Protocol::SS_fn: return "SS_fn";
    case Protocol::SS_nf: return "SS_nf";
    case Protocol::SS_sn: return "SS_sn";
    case Protocol::SS_ns: return "SS_ns";
    case Protocol::BT: return "BT";
  }
  throw InvalidInputError("bad protocol enum");
}

bool is_simple_shear(Protocol p) {
  switch (p) {
    case Protocol::SS_fs:
    case Protocol::SS_sf:
    case Protocol::SS_fn:
    case Protocol::SS_nf:
    case Protocol::SS_sn:
    case Protocol::SS_ns: return true;
    default: return false;
  }
}

Matrix3 protocol_deformation(Protocol p, double control, const std::optional<BtRatio>& ratio) {
  Matrix3 F = Matrix3::Identity();
  if (is_simple_shear(p)) {
    if (control < 0.0 || control > 0.5)
      throw InvalidInputError("simple shear control outside [0, 0.5]");
    // SS_ab shears along a with gradient in b: F_ab = gamma.
    std::string name = to_string(p);
    int a = axis_index(name[3]), b = axis_index(name[4]);
    F(a, b) = control;
    return F;
  }
  if (control <= 0.0) throw InvalidInputError("stretch control must be positive");
  switch (p) {
    case Protocol::UT: {
      double t = 1.0 / std::sqrt(control);
      F.diagonal() << control, t, t;
      break;
    }
    case Protocol::EBT:
      F.diagonal() << control, control, 1.0 / (control * control);
      break;
    case Protocol::PS:
      F.diagonal() << control, 1.0, 1.0 / control;
      break;
    case Protocol::BT: {
      if (!ratio) throw InvalidInputError("BT protocol needs a stretch ratio");
      double lf = 1.0 + ratio->lf * (control - 1.0);
      double ln = 1.0 + ratio->ln * (control - 1.0);
      if (lf <= 0.0 || ln <= 0.0) throw InvalidInputError("BT stretches must stay positive");
      F.diagonal() << lf, 1.0 / (lf * ln), ln;
      break;
    }
    default: throw InvalidInputError("bad protocol enum");
  }
  return F;
}

Invariants invariants_of(const Matrix3& F, const Frame& frame) {
  Invariants inv;
  Matrix3 C = F.transpose() * F;
  inv.I1 = C.trace();
  inv.I2 = 0.5 * (inv.I1 * inv.I1 - (C * C).trace());
  inv.I4f = frame.f0.dot(C * frame.f0);
  inv.I4s = frame.s0.dot(C * frame.s0);
  inv.I4n = frame.n0.dot(C * frame.n0);
  inv.I8fs = frame.f0.dot(C * frame.s0);
  inv.I8fn = frame.f0.dot(C * frame.n0);
  inv.I8sn = frame.s0.dot(C * frame.n0);
  if (is_diagonal(F)) {
    Vector3 s = F.diagonal().cwiseAbs();
    std::sort(s.data(), s.data() + 3, std::greater<double>());
    inv.stretches = s;
  } else {
    Eigen::JacobiSVD<Matrix3> svd(F);
    inv.stretches = svd.singularValues();
  }
  return inv;
}

BaseInvariant base_invariant_from_string(const std::string& s) {
  static const std::map<std::string, BaseInvariant> table = {
      {"I1", BaseInvariant::I1},     {"I2", BaseInvariant::I2},
      {"I4f", BaseInvariant::I4f},   {"I4s", BaseInvariant::I4s},
      {"I4n", BaseInvariant::I4n},   {"I8fs", BaseInvariant::I8fs},
      {"I8fn", BaseInvariant::I8fn}, {"I8sn", BaseInvariant::I8sn}};
  auto it = table.find(s);
  if (it == table.end()) throw InvalidInputError("unknown invariant '" + s + "'");
  return it->second;
}

std::string to_string(BaseInvariant b) {
  switch (b) {
    case BaseInvariant::I1: return "I1";
    case BaseInvariant::I2: return "I2";
    case BaseInvariant::I4f: return "I4f";
    case BaseInvariant::I4s: return "I4s";
    case BaseInvariant::I4n: return "I4n";
    case BaseInvariant::I8fs: return "I8fs";
    case BaseInvariant::I8fn: return "I8fn";
    case BaseInvariant::I8sn: return "I8sn";
  }
  throw InvalidInputError("bad invariant enum");
}

void ModelLibrary::finalize() {
  n_coeff = static_cast<int>(terms.size());
  int inner = 0;
  for (int t = 0; t < n_coeff; ++t) {
    terms[t].coeff_index = t;
    if (terms[t].form == TermForm::ExpPower) {
      terms[t].inner_index = n_coeff + inner;
      ++inner;
    } else {
      terms[t].inner_index = -1;
    }
  }
  n_kappa = n_coeff + inner;
}

ModelLibrary make_library_from_terms(std::vector<TermSpec> terms) {
  ModelLibrary lib;
  lib.terms = std::move(terms);
  lib.finalize();
  return lib;
}

ModelLibrary ModelLibrary::isotropic_mr_ogden(int degree, std::vector<double> ogden_exponents) {
  if (degree < 1) throw ConfigError("Mooney-Rivlin degree must be >= 1");
  std::vector<TermSpec> terms;
  for (int d = 1; d <= degree; ++d) {
    for (int m = 0; m <= d; ++m) {
      TermSpec t;
      t.form = TermForm::MrPower;
      t.m = m;
      t.k = d - m;
      t.id = "c(" + std::to_string(t.m) + "," + std::to_string(t.k) + ")";
      terms.push_back(t);
    }
  }
  for (double a : ogden_exponents) {
    if (std::abs(a) < 1e-12) throw ConfigError("Ogden exponent 0 is degenerate");
    TermSpec t;
    t.form = TermForm::OgdenSum;
    t.alpha = a;
    double rounded = std::round(a);
    t.id = std::abs(a - rounded) < 1e-9 ? "c(" + std::to_string(static_cast<long long>(rounded)) + ")"
                                        : "c(" + std::to_string(a) + ")";
    terms.push_back(t);
  }
  return make_library_from_terms(std::move(terms));
}

ModelLibrary ModelLibrary::anisotropic_cann() {
  struct Slot {
    BaseInvariant base;
    int expo;
  };
  // Plain/exponential head pairs in network order; the skipped coefficient
  // numbers belong to first-power heads of the squared-bracket invariants,
  // which the ansatz omits.
  const Slot slots[] = {{BaseInvariant::I1, 1},   {BaseInvariant::I1, 2},
                        {BaseInvariant::I2, 1},   {BaseInvariant::I2, 2},
                        {BaseInvariant::I4f, 2},  {BaseInvariant::I4s, 2},
                        {BaseInvariant::I4n, 2},  {BaseInvariant::I8fs, 2},
                        {BaseInvariant::I8fn, 2}, {BaseInvariant::I8sn, 2}};
  const int numbers[] = {1, 3, 5, 7, 11, 15, 19, 23, 27, 31};
  std::vector<TermSpec> terms;
  for (int s = 0; s < 10; ++s) {
    TermSpec plain;
    plain.form = TermForm::Power;
    plain.base = slots[s].base;
    plain.expo = slots[s].expo;
    plain.id = "c(2," + std::to_string(numbers[s]) + ")";
    terms.push_back(plain);
    TermSpec ex;
    ex.form = TermForm::ExpPower;
    ex.base = slots[s].base;
    ex.expo = slots[s].expo;
    ex.id = "c(2," + std::to_string(numbers[s] + 1) + ")";
    ex.inner_id = "w(1," + std::to_string(numbers[s] + 1) + ")";
    terms.push_back(ex);
  }
  return make_library_from_terms(std::move(terms));
}

ModelLibrary ModelLibrary::reduced(const std::vector<int>& keep_terms) const {
  std::vector<TermSpec> kept;
  for (int idx : keep_terms) {
    if (idx < 0 || idx >= static_cast<int>(terms.size()))
      throw InvalidInputError("reduced: term index out of range");
    kept.push_back(terms[idx]);
  }
  if (kept.empty()) throw ConfigError("reduced: no terms kept");
  return make_library_from_terms(std::move(kept));
}

std::vector<std::string> ModelLibrary::kappa_names() const {
  std::vector<std::string> names(static_cast<std::size_t>(n_kappa));
  for (const auto& t : terms) {
    names[static_cast<std::size_t>(t.coeff_index)] = t.id;
    if (t.inner_index >= 0) names[static_cast<std::size_t>(t.inner_index)] = t.inner_id;
  }
  return names;
}

int ModelLibrary::term_index_of_coeff(int coeff_index) const {
  for (int t = 0; t < static_cast<int>(terms.size()); ++t)
    if (terms[t].coeff_index == coeff_index) return t;
  throw InvalidInputError("no term with that coefficient index");
}

double sef_value(const ModelLibrary& lib, const Eigen::VectorXd& kappa, const Matrix3& F,
                 const Frame& frame, bool* clamped) {
  check_kappa(lib, kappa);
  Invariants inv = invariants_of(F, frame);
  double W = 0.0;
  for (const auto& t : lib.terms) {
    double c = kappa[t.coeff_index];
    double phi = 0.0;
    switch (t.form) {
      case TermForm::MrPower:
        phi = ipow(inv.I1 - 3.0, t.m) * ipow(inv.I2 - 3.0, t.k);
        break;
      case TermForm::OgdenSum: {
        const Vector3& s = inv.stretches;
        if (s.minCoeff() < 1e-12) throw NumericalError("Ogden term at singular deformation");
        phi = std::pow(s[0], t.alpha) + std::pow(s[1], t.alpha) + std::pow(s[2], t.alpha) - 3.0;
        break;
      }
      case TermForm::Power: {
        Bracket b = bracket_of(t.base, F, inv, frame, false);
        phi = ipow(b.value, t.expo);
        break;
      }
      case TermForm::ExpPower: {
        Bracket b = bracket_of(t.base, F, inv, frame, false);
        double arg = kappa[t.inner_index] * ipow(b.value, t.expo);
        if (arg > kExpClamp) {
          arg = kExpClamp;
          if (clamped) *clamped = true;
        }
        phi = std::exp(arg) - 1.0;
        break;
      }
    }
    W += c * phi;
  }
  return W;
}

Matrix3 sef_gradient(const ModelLibrary& lib, const Eigen::VectorXd& kappa, const Matrix3& F,
                     const Frame& frame, bool* clamped) {
  check_kappa(lib, kappa);
  Invariants inv = invariants_of(F, frame);
  Matrix3 D = Matrix3::Zero();
  const bool diag = is_diagonal(F);
  for (const auto& t : lib.terms) {
    double c = kappa[t.coeff_index];
    switch (t.form) {
      case TermForm::MrPower: {
        double b1 = inv.I1 - 3.0, b2 = inv.I2 - 3.0;
        if (t.m > 0) {
          Bracket g = bracket_of(BaseInvariant::I1, F, inv, frame, true);
          D += c * t.m * ipow(b1, t.m - 1) * ipow(b2, t.k) * g.grad;
        }
        if (t.k > 0) {
          Bracket g = bracket_of(BaseInvariant::I2, F, inv, frame, true);
          D += c * t.k * ipow(b1, t.m) * ipow(b2, t.k - 1) * g.grad;
        }
        break;
      }
      case TermForm::OgdenSum: {
        if (!diag)
          throw UnsupportedKinematicsError(
              "Ogden stress needs a diagonal deformation gradient");
        for (int i = 0; i < 3; ++i) {
          double li = F(i, i);
          if (li <= 0.0) throw UnsupportedKinematicsError("Ogden stress needs positive stretches");
          D(i, i) += c * t.alpha * std::pow(li, t.alpha - 1.0);
        }
        break;
      }
      case TermForm::Power: {
        Bracket b = bracket_of(t.base, F, inv, frame, true);
        if (t.expo == 1)
          D += c * b.grad;
        else
          D += c * t.expo * ipow(b.value, t.expo - 1) * b.grad;
        break;
      }
      case TermForm::ExpPower: {
        Bracket b = bracket_of(t.base, F, inv, frame, true);
        double w = kappa[t.inner_index];
        double arg = w * ipow(b.value, t.expo);
        if (arg > kExpClamp) {
          // Past the clamp the energy saturates, so the stress share is zero.
          if (clamped) *clamped = true;
          break;
        }
        double outer = std::exp(arg) * w * t.expo * ipow(b.value, t.expo - 1);
        D += c * outer * b.grad;
        break;
      }
    }
  }
  return D;
}

PressureRule pressure_rule_for(Protocol p) {
  PressureRule r;
  switch (p) {
    case Protocol::UT:
    case Protocol::EBT:
    case Protocol::PS:
      r.kind = PressureRule::Kind::FirstPkZero;
      r.i = r.j = 2;
      return r;
    case Protocol::BT:
      r.kind = PressureRule::Kind::CauchyZero;
      r.i = r.j = 1;  // sheet direction is traction free
      return r;
    default: break;
  }
  // Simple shear: zero the Cauchy normal stress on the inactive axis.
  std::string name = to_string(p);
  int a = axis_index(name[3]), b = axis_index(name[4]);
  int inactive = 3 - a - b;
  r.kind = PressureRule::Kind::CauchyZero;
  r.i = r.j = inactive;
  return r;
}

namespace {

/// Shared stress assembly: D = d(sef)/dF, S = D F^T, and the pressure from
/// whichever rule applies. With J = 1, P = D - p F^{-T} and sigma = S - p I.
struct StressParts {
  Matrix3 D, FinvT, S;
  double p = 0.0;
};

StressParts stress_parts(const ModelLibrary& lib, const Eigen::VectorXd& kappa, const Matrix3& F,
                         const PressureRule& rule, const Frame& frame) {
  StressParts out;
  double det = F.determinant();
  if (std::abs(det) < 1e-12) throw NumericalError("deformation gradient is singular");
  out.D = sef_gradient(lib, kappa, F, frame);
  out.FinvT = F.inverse().transpose();
  out.S = out.D * F.transpose();
  if (rule.kind == PressureRule::Kind::FirstPkZero) {
    double denom = out.FinvT(rule.i, rule.j);
    if (std::abs(denom) < 1e-300)
      throw NumericalError("pressure rule component of F^{-T} vanishes");
    out.p = out.D(rule.i, rule.j) / denom;
  } else {
    if (rule.i != rule.j)
      throw InvalidInputError("Cauchy pressure rule must name a diagonal component");
    out.p = out.S(rule.i, rule.i);
  }
  return out;
}

}  // namespace

Matrix3 stress_first_pk(const ModelLibrary& lib, const Eigen::VectorXd& kappa, const Matrix3& F,
                        const PressureRule& rule, const Frame& frame) {
  StressParts sp = stress_parts(lib, kappa, F, rule, frame);
  return sp.D - sp.p * sp.FinvT;
}

Matrix3 stress_cauchy(const ModelLibrary& lib, const Eigen::VectorXd& kappa, const Matrix3& F,
                      const PressureRule& rule, const Frame& frame) {
  StressParts sp = stress_parts(lib, kappa, F, rule, frame);
  return sp.S - sp.p * Matrix3::Identity();
}

Component component_from_string(const std::string& id) {
  Component c;
  c.id = id;
  if (id == "P11") {
    c.measure = StressMeasure::FirstPk;
    c.i = c.j = 0;
    return c;
  }
  if (id.size() == 8 && id.rfind("sigma_", 0) == 0) {
    c.measure = StressMeasure::Cauchy;
    c.i = axis_index(id[6]);
    c.j = axis_index(id[7]);
    return c;
  }
  throw InvalidInputError("unknown stress component '" + id + "'");
}

std::vector<Component> observed_components(Protocol p) {
  switch (p) {
    case Protocol::UT:
    case Protocol::EBT:
    case Protocol::PS: return {component_from_string("P11")};
    case Protocol::BT:
      return {component_from_string("sigma_ff"), component_from_string("sigma_nn")};
    default: break;
  }
  // SS_ab observes sigma_ba.
  std::string name = to_string(p);
  return {component_from_string(std::string("sigma_") + name[4] + name[3])};
}

double observation_map(Protocol p, int q, const Matrix3& stress_tensor) {
  auto comps = observed_components(p);
  if (q < 0 || q >= static_cast<int>(comps.size()))
    throw InvalidInputError("observation index out of range for protocol " + to_string(p));
  return stress_tensor(comps[q].i, comps[q].j);
}

Eigen::VectorXd deformation_filter(const Component& c, const Matrix3& F) {
  Eigen::VectorXd out(deformation_filter_dim(c));
  if (c.measure == StressMeasure::FirstPk) {
    out << F(0, 0), F(1, 1);
    return out;
  }
  if (c.i == c.j) {
    // Normal components share the (F_ff, F_nn) plane of the biaxial tests.
    out << F(0, 0), F(2, 2);
    return out;
  }
  // sigma_ab is driven by the transposed shear entry F_ba.
  out << F(c.j, c.i);
  return out;
}

int deformation_filter_dim(const Component& c) {
  if (c.measure == StressMeasure::FirstPk) return 2;
  return c.i == c.j ? 2 : 1;
}

}  // namespace uqmd::mech

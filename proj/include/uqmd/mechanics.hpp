#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "uqmd/common.hpp"

namespace uqmd::mech {

using Matrix3 = Eigen::Matrix3d;
using Vector3 = Eigen::Vector3d;

/// Orthonormal material frame (fiber, sheet, normal). The canonical frame
/// maps f,s,n onto e1,e2,e3.
struct Frame {
  Vector3 f0{1, 0, 0};
  Vector3 s0{0, 1, 0};
  Vector3 n0{0, 0, 1};
};

/// Loading protocols. SS_ab applies F = I + gamma e_a (x) e_b and the
/// paired test observes the Cauchy component sigma_ba.
enum class Protocol { UT, EBT, PS, SS_fs, SS_sf, SS_fn, SS_nf, SS_sn, SS_ns, BT };

Protocol protocol_from_string(const std::string& s);
std::string to_string(Protocol p);
bool is_simple_shear(Protocol p);

/// Biaxial stretch ratios (lambda_f^*, lambda_n^*) scaling the control.
struct BtRatio {
  double lf = 1.0;
  double ln = 1.0;
};

/// Deformation gradient for a protocol at one control value. Isochoric by
/// construction: the dependent stretch is the reciprocal product.
Matrix3 protocol_deformation(Protocol p, double control,
                             const std::optional<BtRatio>& ratio = std::nullopt);

/// Invariants of C = F^T F plus principal stretches (singular values of F,
/// descending). I4/I8 use the frame's structural directions.
struct Invariants {
  double I1 = 0, I2 = 0;
  double I4f = 0, I4s = 0, I4n = 0;
  double I8fs = 0, I8fn = 0, I8sn = 0;
  Vector3 stretches{1, 1, 1};
};

Invariants invariants_of(const Matrix3& F, const Frame& frame = Frame{});

/// One strain-energy term. kappa holds every outer coefficient first and
/// every inner exponent parameter after them; coeff_index / inner_index
/// address into that layout.
enum class TermForm {
  MrPower,   // (I1-3)^m (I2-3)^k
  OgdenSum,  // lambda1^a + lambda2^a + lambda3^a - 3
  Power,     // bracket(base)^expo
  ExpPower,  // exp(w * bracket(base)^expo) - 1
};

/// bracket(I1) = I1-3, bracket(I2) = I2-3, bracket(I4x) = max(I4x,1)-1,
/// bracket(I8xy) = I8xy.
enum class BaseInvariant { I1, I2, I4f, I4s, I4n, I8fs, I8fn, I8sn };

BaseInvariant base_invariant_from_string(const std::string& s);
std::string to_string(BaseInvariant b);

struct TermSpec {
  std::string id;                 // outer coefficient name, e.g. "c(1,0)"
  TermForm form = TermForm::Power;
  int m = 0, k = 0;               // MrPower exponents
  double alpha = 0.0;             // OgdenSum exponent
  BaseInvariant base = BaseInvariant::I1;
  int expo = 1;                   // Power / ExpPower exponent on the bracket
  int coeff_index = -1;
  int inner_index = -1;           // >= 0 only for ExpPower
  std::string inner_id;           // e.g. "w(1,12)"
};

struct ModelLibrary {
  std::vector<TermSpec> terms;
  int n_kappa = 0;   // coefficients + inner parameters
  int n_coeff = 0;   // coefficients only; inner parameters follow

  /// Mooney-Rivlin powers with 1 <= m+k <= degree plus one Ogden term per
  /// exponent. Default exponents skip +-2, which duplicate the degree-1
  /// Mooney-Rivlin terms.
  static ModelLibrary isotropic_mr_ogden(int degree = 3,
                                         std::vector<double> ogden_exponents = {-5, -4, -3, -1,
                                                                                1, 3, 4, 5});

  /// The 20-term orthotropic network library: plain and exponential heads
  /// over {I1-3, (I1-3)^2, I2-3, (I2-3)^2, squared fourth-invariant
  /// brackets, squared eighth invariants}.
  static ModelLibrary anisotropic_cann();

  /// Subset keeping terms whose index appears in keep (order preserved);
  /// kappa indices are re-packed.
  ModelLibrary reduced(const std::vector<int>& keep_terms) const;

  std::vector<std::string> kappa_names() const;
  int term_index_of_coeff(int coeff_index) const;

 private:
  void finalize();
  friend ModelLibrary make_library_from_terms(std::vector<TermSpec> terms);
};

ModelLibrary make_library_from_terms(std::vector<TermSpec> terms);

/// Strain energy of the full ansatz at F. Ogden terms use singular-value
/// stretches, so any F is admissible for the energy itself.
/// Exp arguments are clamped at 30; a clamp sets *clamped when provided.
double sef_value(const ModelLibrary& lib, const Eigen::VectorXd& kappa, const Matrix3& F,
                 const Frame& frame = Frame{}, bool* clamped = nullptr);

/// d(sef)/dF before any pressure term. Ogden terms require diagonal F
/// (principal-direction derivatives are only implemented there); other
/// states raise UnsupportedKinematicsError.
Matrix3 sef_gradient(const ModelLibrary& lib, const Eigen::VectorXd& kappa, const Matrix3& F,
                     const Frame& frame = Frame{}, bool* clamped = nullptr);

/// Incompressibility pressure rules. FirstPkZero enforces P(i,j) = 0,
/// CauchyZero enforces sigma(i,i) = 0.
struct PressureRule {
  enum class Kind { FirstPkZero, CauchyZero } kind = Kind::FirstPkZero;
  int i = 2, j = 2;
};

/// Default rule per protocol: UT/EBT/PS zero the 33 first-PK component,
/// BT zeroes sigma_ss, simple shear zeroes sigma on the inactive axis.
PressureRule pressure_rule_for(Protocol p);

/// First Piola-Kirchhoff stress P = d(sef)/dF - p F^{-T} with p from rule.
Matrix3 stress_first_pk(const ModelLibrary& lib, const Eigen::VectorXd& kappa, const Matrix3& F,
                        const PressureRule& rule, const Frame& frame = Frame{});

/// Cauchy stress sigma = d(sef)/dF F^T - p I (J = 1) with p from rule.
Matrix3 stress_cauchy(const ModelLibrary& lib, const Eigen::VectorXd& kappa, const Matrix3& F,
                      const PressureRule& rule, const Frame& frame = Frame{});

/// Observable stress components. P11 is first-PK; the sigma_* components
/// are Cauchy in the material frame.
enum class StressMeasure { FirstPk, Cauchy };

struct Component {
  std::string id;  // "P11", "sigma_fs", ...
  StressMeasure measure = StressMeasure::FirstPk;
  int i = 0, j = 0;
};

Component component_from_string(const std::string& id);

/// Measured components per protocol, in observation order.
std::vector<Component> observed_components(Protocol p);

/// Scalar observation of a stress tensor for (protocol, component slot q).
double observation_map(Protocol p, int q, const Matrix3& stress_tensor);

/// Deformation-gradient entries feeding the GP input for one component:
/// P11 -> [F11, F22]; sigma shear -> the driving shear entry;
/// sigma_ff / sigma_nn -> [F_ff, F_nn].
Eigen::VectorXd deformation_filter(const Component& c, const Matrix3& F);

int deformation_filter_dim(const Component& c);

}  // namespace uqmd::mech

#include "uqmd/mechanics.hpp"

#include "doctest.h"
#include "oracles.hpp"

using namespace uqmd;
using namespace uqmd::mech;

TEST_CASE("protocol deformations are isochoric and have the documented shape") {
  Rng rng(11);
  for (int i = 0; i < 50; ++i) {
    auto t = oracles::random_mech_tuple(rng);
    CHECK(std::abs(t.F.determinant() - 1.0) < 1e-10);
  }

  Matrix3 ut = protocol_deformation(Protocol::UT, 2.0);
  CHECK(ut(0, 0) == doctest::Approx(2.0));
  CHECK(ut(1, 1) == doctest::Approx(1.0 / std::sqrt(2.0)));
  CHECK(ut(2, 2) == doctest::Approx(1.0 / std::sqrt(2.0)));

  Matrix3 ebt = protocol_deformation(Protocol::EBT, 1.5);
  CHECK(ebt(2, 2) == doctest::Approx(1.0 / 2.25));

  Matrix3 ps = protocol_deformation(Protocol::PS, 2.0);
  CHECK(ps(1, 1) == doctest::Approx(1.0));
  CHECK(ps(2, 2) == doctest::Approx(0.5));

  Matrix3 ss = protocol_deformation(Protocol::SS_fs, 0.5);
  CHECK(ss(0, 1) == doctest::Approx(0.5));
  CHECK(ss(0, 0) == doctest::Approx(1.0));

  // BT 1:0.5 at lambda = 1.1: lambda_f = 1.1, lambda_n = 1.05, sheet takes
  // the reciprocal product.
  Matrix3 bt = protocol_deformation(Protocol::BT, 1.1, BtRatio{1.0, 0.5});
  CHECK(bt(0, 0) == doctest::Approx(1.1));
  CHECK(bt(2, 2) == doctest::Approx(1.05));
  CHECK(bt(1, 1) == doctest::Approx(1.0 / (1.1 * 1.05)));

  CHECK_THROWS_AS(protocol_deformation(Protocol::UT, -1.0), InvalidInputError);
  CHECK_THROWS_AS(protocol_deformation(Protocol::SS_fs, 0.6), InvalidInputError);
  CHECK_THROWS_AS(protocol_deformation(Protocol::BT, 1.1), InvalidInputError);
}

TEST_CASE("invariants at reference states") {
  Invariants id = invariants_of(Matrix3::Identity());
  CHECK(id.I1 == doctest::Approx(3.0));
  CHECK(id.I2 == doctest::Approx(3.0));
  CHECK(id.I4f == doctest::Approx(1.0));
  CHECK(id.I8fs == doctest::Approx(0.0).epsilon(1e-12));

  Invariants ut = invariants_of(protocol_deformation(Protocol::UT, 2.0));
  CHECK(ut.I1 == doctest::Approx(5.0));
  CHECK(ut.I2 == doctest::Approx(4.25));
  CHECK(ut.stretches[0] == doctest::Approx(2.0));
  CHECK(ut.stretches[2] == doctest::Approx(1.0 / std::sqrt(2.0)));

  Invariants ss = invariants_of(protocol_deformation(Protocol::SS_fs, 0.5));
  CHECK(ss.I1 == doctest::Approx(3.25));
  CHECK(ss.I8fs == doctest::Approx(0.5));
  CHECK(ss.I4f == doctest::Approx(1.0));  // fiber line is unstretched
  CHECK(ss.I4s == doctest::Approx(1.25));
}

TEST_CASE("library constructors produce the documented parameter layouts") {
  ModelLibrary iso = ModelLibrary::isotropic_mr_ogden();
  CHECK(iso.terms.size() == 17);
  CHECK(iso.n_coeff == 17);
  CHECK(iso.n_kappa == 17);
  auto names = iso.kappa_names();
  CHECK(names[0] == "c(0,1)");
  CHECK(names[1] == "c(1,0)");
  CHECK(names[8] == "c(3,0)");
  CHECK(names[9] == "c(-5)");
  CHECK(names[16] == "c(5)");

  ModelLibrary cann = ModelLibrary::anisotropic_cann();
  CHECK(cann.terms.size() == 20);
  CHECK(cann.n_coeff == 20);
  CHECK(cann.n_kappa == 30);
  auto cn = cann.kappa_names();
  CHECK(cn[0] == "c(2,1)");
  CHECK(cn[1] == "c(2,2)");
  CHECK(cn[19] == "c(2,32)");
  CHECK(cn[20] == "w(1,2)");  // inner parameters follow the coefficients
  CHECK(cn[29] == "w(1,32)");

  // Reduction keeps identifiers and repacks indices.
  ModelLibrary red = cann.reduced({3, 9});
  CHECK(red.n_coeff == 2);
  CHECK(red.n_kappa == 4);
  auto rn = red.kappa_names();
  CHECK(rn[0] == "c(2,4)");
  CHECK(rn[1] == "c(2,12)");
  CHECK(rn[2] == "w(1,4)");
  CHECK(rn[3] == "w(1,12)");
}

TEST_CASE("strain energy vanishes at the identity for any parameters") {
  Rng rng(7);
  for (const auto& lib : {ModelLibrary::isotropic_mr_ogden(), ModelLibrary::anisotropic_cann()}) {
    Eigen::VectorXd kappa(lib.n_kappa);
    for (int i = 0; i < lib.n_kappa; ++i) kappa[i] = rng.uniform(0.0, 2.0);
    CHECK(sef_value(lib, kappa, Matrix3::Identity()) == doctest::Approx(0.0).epsilon(1e-14));
    Matrix3 P = stress_first_pk(lib, kappa, Matrix3::Identity(), pressure_rule_for(Protocol::UT));
    CHECK(P.cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("two-term Mooney-Rivlin under equibiaxial tension matches the closed form") {
  // W = c10 (I1-3) + c01 (I2-3), lambda = 1.5:
  // P11 = 2 (lambda - lambda^-5)(c10 + c01 lambda^2) = 1.4367283950617284.
  ModelLibrary lib = ModelLibrary::isotropic_mr_ogden(1, {});
  CHECK(lib.n_kappa == 2);
  Eigen::VectorXd kappa(2);
  kappa[0] = 0.1;  // c(0,1)
  kappa[1] = 0.3;  // c(1,0)
  Matrix3 F = protocol_deformation(Protocol::EBT, 1.5);
  Matrix3 P = stress_first_pk(lib, kappa, F, pressure_rule_for(Protocol::EBT));
  CHECK(P(0, 0) == doctest::Approx(1.4367283950617284).epsilon(1e-10));
  CHECK(P(1, 1) == doctest::Approx(1.4367283950617284).epsilon(1e-10));
  CHECK(std::abs(P(2, 2)) < 1e-14);

  double W = sef_value(lib, kappa, F);
  CHECK(W == doctest::Approx(0.3 * 1.6975308641975307 + 0.1 * 2.951388888888889).epsilon(1e-12));
}

TEST_CASE("neo-Hooke and single Ogden uniaxial stresses match closed forms") {
  std::vector<TermSpec> nh(1);
  nh[0].form = TermForm::MrPower;
  nh[0].m = 1;
  nh[0].k = 0;
  nh[0].id = "c(1,0)";
  ModelLibrary lib = make_library_from_terms(nh);
  Eigen::VectorXd kappa(1);
  kappa[0] = 0.5;
  Matrix3 F = protocol_deformation(Protocol::UT, 2.0);
  Matrix3 P = stress_first_pk(lib, kappa, F, pressure_rule_for(Protocol::UT));
  CHECK(P(0, 0) == doctest::Approx(1.75).epsilon(1e-12));  // 2 c (lambda - lambda^-2)
  CHECK(std::abs(P(1, 1)) < 1e-14);                        // lateral faces free by symmetry

  std::vector<TermSpec> og(1);
  og[0].form = TermForm::OgdenSum;
  og[0].alpha = -1.0;
  og[0].id = "c(-1)";
  ModelLibrary olib = make_library_from_terms(og);
  Eigen::VectorXd ok(1);
  ok[0] = 0.2;
  Matrix3 Fo = protocol_deformation(Protocol::UT, 1.8);
  Matrix3 Po = stress_first_pk(olib, ok, Fo, pressure_rule_for(Protocol::UT));
  // c alpha (lambda^(a-1) - lambda^(-a/2-1))
  CHECK(Po(0, 0) == doctest::Approx(0.08734280343825759).epsilon(1e-10));
}

TEST_CASE("shear stress components do not depend on the pressure rule") {
  ModelLibrary lib = ModelLibrary::anisotropic_cann();
  Rng rng(23);
  Eigen::VectorXd kappa(lib.n_kappa);
  for (int i = 0; i < lib.n_coeff; ++i) kappa[i] = rng.uniform(0.0, 1.0);
  for (int i = lib.n_coeff; i < lib.n_kappa; ++i) kappa[i] = rng.uniform(0.1, 1.0);
  Matrix3 F = protocol_deformation(Protocol::SS_fs, 0.4);
  PressureRule rn{PressureRule::Kind::CauchyZero, 2, 2};
  PressureRule rs{PressureRule::Kind::CauchyZero, 1, 1};
  Matrix3 a = stress_cauchy(lib, kappa, F, rn);
  Matrix3 b = stress_cauchy(lib, kappa, F, rs);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (i != j) CHECK(a(i, j) == doctest::Approx(b(i, j)).epsilon(1e-13));
}

TEST_CASE("analytic stresses agree with finite differences of the energy") {
  Rng rng(2026);
  for (int trial = 0; trial < 40; ++trial) {
    auto t = oracles::random_mech_tuple(rng);
    Matrix3 fd = oracles::fd_sef_gradient(t.lib, t.kappa, t.F);
    auto ref = oracles::eliminate_pressure(fd, t.F, t.rule);
    Matrix3 P = stress_first_pk(t.lib, t.kappa, t.F, t.rule);
    Matrix3 S = stress_cauchy(t.lib, t.kappa, t.F, t.rule);
    CHECK(oracles::scaled_err(P, ref.first_pk) < 1e-5);
    CHECK(oracles::scaled_err(S, ref.cauchy) < 1e-5);
  }
}

TEST_CASE("Ogden terms reject non-diagonal deformation in the stress path only") {
  ModelLibrary lib = ModelLibrary::isotropic_mr_ogden();
  Eigen::VectorXd kappa = Eigen::VectorXd::Constant(lib.n_kappa, 0.1);
  Matrix3 F = protocol_deformation(Protocol::SS_fs, 0.3);
  CHECK_NOTHROW(sef_value(lib, kappa, F));  // singular values handle the energy
  CHECK_THROWS_AS(sef_gradient(lib, kappa, F), UnsupportedKinematicsError);
}

TEST_CASE("exponential term arguments are clamped with a diagnostic") {
  std::vector<TermSpec> ts(1);
  ts[0].form = TermForm::ExpPower;
  ts[0].base = BaseInvariant::I1;
  ts[0].expo = 1;
  ts[0].id = "c(2,2)";
  ts[0].inner_id = "w(1,2)";
  ModelLibrary lib = make_library_from_terms(ts);
  Eigen::VectorXd kappa(2);
  kappa << 1.0, 100.0;  // w large enough to push the argument past 30
  Matrix3 F = protocol_deformation(Protocol::UT, 2.0);
  bool clamped = false;
  double W = sef_value(lib, kappa, F, Frame{}, &clamped);
  CHECK(clamped);
  CHECK(std::isfinite(W));
  CHECK(W == doctest::Approx(std::exp(30.0) - 1.0));
}

TEST_CASE("observation maps and deformation filters follow the appendix tables") {
  CHECK(observed_components(Protocol::UT).size() == 1);
  CHECK(observed_components(Protocol::UT)[0].id == "P11");
  CHECK(observed_components(Protocol::SS_fs)[0].id == "sigma_sf");
  CHECK(observed_components(Protocol::SS_ns)[0].id == "sigma_sn");
  auto bt = observed_components(Protocol::BT);
  REQUIRE(bt.size() == 2);
  CHECK(bt[0].id == "sigma_ff");
  CHECK(bt[1].id == "sigma_nn");

  Matrix3 T;
  T << 1, 2, 3, 4, 5, 6, 7, 8, 9;
  CHECK(observation_map(Protocol::SS_fs, 0, T) == doctest::Approx(4.0));  // sigma_sf
  CHECK(observation_map(Protocol::BT, 1, T) == doctest::Approx(9.0));    // sigma_nn
  CHECK_THROWS_AS(observation_map(Protocol::BT, 2, T), InvalidInputError);

  Matrix3 Fut = protocol_deformation(Protocol::UT, 2.0);
  Eigen::VectorXd in = deformation_filter(component_from_string("P11"), Fut);
  REQUIRE(in.size() == 2);
  CHECK(in[0] == doctest::Approx(2.0));
  CHECK(in[1] == doctest::Approx(1.0 / std::sqrt(2.0)));

  // sigma_sf is observed where F_fs drives the shear.
  Matrix3 Fss = protocol_deformation(Protocol::SS_fs, 0.3);
  Eigen::VectorXd sin_ = deformation_filter(component_from_string("sigma_sf"), Fss);
  REQUIRE(sin_.size() == 1);
  CHECK(sin_[0] == doctest::Approx(0.3));

  Matrix3 Fbt = protocol_deformation(Protocol::BT, 1.08, BtRatio{1.0, 0.75});
  Eigen::VectorXd bin = deformation_filter(component_from_string("sigma_ff"), Fbt);
  REQUIRE(bin.size() == 2);
  CHECK(bin[0] == doctest::Approx(1.08));
  CHECK(bin[1] == doctest::Approx(1.06));
}

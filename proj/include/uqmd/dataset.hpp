#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "uqmd/common.hpp"
#include "uqmd/mechanics.hpp"

namespace uqmd::data {

/// Heteroskedastic measurement noise: std at a stress value P is
/// max(sigma_min, sigma_r * |P|).
struct ErrorModel {
  double sigma_min = 0.0;
  double sigma_r = 0.0;
  double std_at(double stress) const {
    return std::max(sigma_min, sigma_r * std::abs(stress));
  }
};

struct TestSpec {
  std::string id;
  mech::Protocol protocol = mech::Protocol::UT;
  std::optional<mech::BtRatio> ratio;           // BT only
  std::vector<mech::Component> components;      // observation order
};

/// Measurements of one test: strictly increasing controls and one stress
/// column per observed component.
struct TestData {
  TestSpec spec;
  std::vector<double> controls;
  Eigen::MatrixXd stresses;  // n_d x n_q

  int n_points() const { return static_cast<int>(controls.size()); }
  int n_components() const { return static_cast<int>(spec.components.size()); }
  mech::Matrix3 deformation_at(double control) const {
    return mech::protocol_deformation(spec.protocol, control, spec.ratio);
  }
};

struct Dataset {
  std::vector<TestData> tests;
  std::string stress_unit = "kPa";

  int n_tests() const { return static_cast<int>(tests.size()); }
  int n_functions() const;
  /// Unique component ids in first-seen order.
  std::vector<std::string> component_ids() const;
};

/// CSV columns: test_id, control, stress_<component>... with a JSON sidecar
/// describing each test (id, protocol, components, BT ratio).
Dataset load_dataset(const std::string& csv_path, const std::string& meta_path);
void save_dataset(const Dataset& ds, const std::string& csv_path, const std::string& meta_path);

/// Controls laid out per test for synthetic data generation.
struct SynthesisSpec {
  std::vector<TestSpec> tests;
  std::vector<std::vector<double>> controls;  // one vector per test
};

/// Evaluate the generator model on the spec's controls and add heteroskedastic
/// Gaussian noise. A zero noise model reproduces the clean stresses.
Dataset synthesize_dataset(const mech::ModelLibrary& lib, const Eigen::VectorXd& kappa,
                           const SynthesisSpec& spec, const ErrorModel& noise,
                           std::uint64_t seed);

/// One (test, component) block of the stacked function vector.
struct GridBlock {
  int t = 0, q = 0;
  std::string test_id;
  mech::Protocol protocol = mech::Protocol::UT;
  std::optional<mech::BtRatio> ratio;
  mech::Component component;
  std::vector<double> controls;          // n_s^t uniform over the test's data range
  std::vector<mech::Matrix3> F;          // deformation at each grid control
  Eigen::MatrixXd gp_inputs;             // n_s^t x d, deformation-filter coordinates
  int offset = 0;                        // start in the stacked vector

  int size() const { return static_cast<int>(controls.size()); }
};

/// Dense evaluation grid stacked tests-outer / components-middle /
/// grid-points-inner. Total length is n_s = sum_t n_q^t n_s^t.
struct FunctionGrid {
  std::vector<GridBlock> blocks;
  int total = 0;

  static FunctionGrid build(const Dataset& ds, int points_per_test);
  static FunctionGrid build(const Dataset& ds, const std::vector<int>& points_per_test);

  const GridBlock& block(int t, int q) const;
};

/// Training rows for one stress component: deformation-filter inputs from
/// every test observing it, measured stresses, in dataset order.
struct ComponentTrainingSet {
  std::string component_id;
  Eigen::MatrixXd X;   // n x d
  Eigen::VectorXd y;   // n
  std::vector<std::pair<int, int>> source;  // (test index, row) provenance
};

ComponentTrainingSet component_training_set(const Dataset& ds, const std::string& component_id);

}  // namespace uqmd::data

#include "uqmd/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"

using namespace uqmd;
using namespace uqmd::pipe;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("uqmd_pipeline_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int line_count(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in.good());
  int n = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++n;
  return n;
}

// One UT test with y = [1, 2, 4] and one EBT test with y = [2, 6]; both
// exactly representable by a two-point linear curve except y = 4.
data::Dataset two_function_dataset() {
  data::Dataset ds;
  data::TestData ut;
  ut.spec.id = "t1";
  ut.spec.protocol = mech::Protocol::UT;
  ut.spec.components = mech::observed_components(mech::Protocol::UT);
  ut.controls = {1.0, 1.5, 2.0};
  ut.stresses.resize(3, 1);
  ut.stresses << 1.0, 2.0, 4.0;
  ds.tests.push_back(std::move(ut));

  data::TestData ebt;
  ebt.spec.id = "t2";
  ebt.spec.protocol = mech::Protocol::EBT;
  ebt.spec.components = mech::observed_components(mech::Protocol::EBT);
  ebt.controls = {1.0, 2.0};
  ebt.stresses.resize(2, 1);
  ebt.stresses << 2.0, 6.0;
  ds.tests.push_back(std::move(ebt));
  return ds;
}

std::vector<FunctionCurve> hand_curves() {
  FunctionCurve c1;
  c1.mean = Eigen::Vector2d(1.0, 3.0);
  c1.lower = Eigen::Vector2d(0.0, 0.0);
  c1.upper = Eigen::Vector2d(1.5, 2.5);
  FunctionCurve c2;
  c2.mean = Eigen::Vector2d(2.0, 6.0);
  c2.lower = Eigen::Vector2d(0.0, 0.0);
  c2.upper = Eigen::Vector2d(10.0, 10.0);
  return {c1, c2};
}

RunConfig smoke_config(const fs::path& out) {
  RunConfig cfg;
  cfg.library.kind = "terms";
  mech::TermSpec nh;
  nh.form = mech::TermForm::MrPower;
  nh.m = 1;
  nh.k = 0;
  nh.id = "c(1,0)";
  mech::TermSpec mr;
  mr.form = mech::TermForm::MrPower;
  mr.m = 0;
  mr.k = 1;
  mr.id = "c(0,1)";
  cfg.library.terms = {nh, mr};

  SyntheticSpec syn;
  syn.generator = {{"c(1,0)", 0.4}, {"c(0,1)", 0.15}};
  const char* prots[2] = {"UT", "EBT"};
  const char* ids[2] = {"ut", "ebt"};
  for (int i = 0; i < 2; ++i) {
    SyntheticTest t;
    t.id = ids[i];
    t.protocol = mech::protocol_from_string(prots[i]);
    for (int k = 0; k < 6; ++k) t.controls.push_back(1.0 + 0.16 * k);
    syn.tests.push_back(std::move(t));
  }
  cfg.dataset.synthetic = std::move(syn);

  cfg.gp.iters = 40;
  cfg.grid_points = 6;
  cfg.distill.n_iters = 100;
  cfg.distill.n_critic = 2;
  cfg.distill.batch = 8;
  cfg.distill.flow_lr = 3e-3;
  cfg.distill.flow_lr_decay = 0.999;
  cfg.refine.n_iters = 60;
  cfg.sobol.n_base = 256;
  cfg.sobol.bounds_samples = 512;
  cfg.metrics.interval_samples = 1000;
  cfg.metrics.plot_samples = 3;
  cfg.metrics.parameter_samples = 50;
  cfg.seed = 17;
  cfg.out_dir = out.string();
  return cfg;
}

}  // namespace

TEST_CASE("presets carry the published run settings") {
  SUBCASE("treloar") {
    RunConfig cfg = preset_config("treloar");
    CHECK(cfg.dataset.csv == "data/treloar.csv");
    CHECK(cfg.library.kind == "isotropic_mr_ogden");
    CHECK(cfg.library.degree == 3);
    CHECK(cfg.library.ogden_exponents ==
          std::vector<double>{-5, -4, -3, -1, 1, 3, 4, 5});
    CHECK(cfg.library.build().n_kappa == 17);
    CHECK(cfg.noise.sigma_min == doctest::Approx(0.01));
    CHECK(cfg.noise.sigma_r == doctest::Approx(0.05));
    CHECK(cfg.gp.iters == 200);
    CHECK(cfg.gp.lr == doctest::Approx(0.2));
    CHECK(cfg.gp.shrink == doctest::Approx(0.8));
    CHECK(cfg.grid_points == 64);
    CHECK(cfg.distill.n_iters == 20000);
    CHECK(cfg.distill.n_critic == 10);
    CHECK(cfg.distill.batch == 32);
    CHECK(cfg.distill.critic_lr == doctest::Approx(1e-4));
    CHECK(cfg.distill.flow_lr == doctest::Approx(5e-4));
    CHECK(cfg.distill.flow_lr_decay == doctest::Approx(0.9999));
    CHECK(cfg.distill.lambda == doctest::Approx(10.0));
    CHECK(cfg.refine.n_iters == 10000);
    CHECK(cfg.sobol.n_base == 4096);
    CHECK(cfg.sobol.bounds_samples == 8192);
    CHECK(cfg.sobol.threshold == doctest::Approx(1e-4));
    CHECK(cfg.metrics.interval_samples == 8192);
  }

  SUBCASE("cardiac synthetic") {
    RunConfig cfg = preset_config("cardiac-synthetic");
    CHECK(cfg.library.kind == "anisotropic_cann");
    CHECK(cfg.library.build().n_kappa == 30);
    CHECK(cfg.gp.shrink == doctest::Approx(0.6));
    CHECK(cfg.distill.lambda == doctest::Approx(100.0));
    CHECK(cfg.sobol.threshold == doctest::Approx(0.01));
    REQUIRE(cfg.dataset.synthetic.has_value());
    const SyntheticSpec& syn = *cfg.dataset.synthetic;
    CHECK(syn.generator.at("c(2,7)") == doctest::Approx(5.162));
    CHECK(syn.generator.at("c(2,12)") == doctest::Approx(0.081));
    CHECK(syn.generator.at("w(1,12)") == doctest::Approx(21.151));
    CHECK(syn.generator.at("c(2,20)") == doctest::Approx(0.315));
    CHECK(syn.generator.at("w(1,20)") == doctest::Approx(4.371));
    CHECK(syn.generator.at("c(2,24)") == doctest::Approx(0.486));
    CHECK(syn.generator.at("w(1,24)") == doctest::Approx(0.508));
    REQUIRE(syn.tests.size() == 11);
    int n_shear = 0, n_bt = 0;
    for (const auto& t : syn.tests) {
      REQUIRE(t.controls.size() == 11);
      if (t.protocol == mech::Protocol::BT) {
        ++n_bt;
        CHECK(t.controls.front() == doctest::Approx(1.0));
        CHECK(t.controls.back() == doctest::Approx(1.1));
        REQUIRE(t.ratio.has_value());
      } else {
        ++n_shear;
        CHECK(t.controls.front() == doctest::Approx(0.0));
        CHECK(t.controls.back() == doctest::Approx(0.5));
      }
    }
    CHECK(n_shear == 6);
    CHECK(n_bt == 5);
    // Generator parameters must resolve against the CANN parameter names.
    mech::ModelLibrary lib = cfg.library.build();
    auto names = lib.kappa_names();
    for (const auto& [name, value] : syn.generator)
      CHECK(std::find(names.begin(), names.end(), name) != names.end());
  }

  SUBCASE("cardiac experimental expects user data") {
    RunConfig cfg = preset_config("cardiac-experimental");
    CHECK(cfg.library.kind == "anisotropic_cann");
    CHECK(!cfg.dataset.synthetic.has_value());
    CHECK(!cfg.dataset.csv.empty());
    CHECK(cfg.distill.lambda == doctest::Approx(100.0));
  }

  SUBCASE("desk presets stay small") {
    RunConfig iso = preset_config("desk-isotropic");
    CHECK(iso.grid_points == 16);
    CHECK(iso.distill.n_iters == 2000);
    CHECK(iso.refine.n_iters == 1000);
    REQUIRE(iso.dataset.synthetic.has_value());
    CHECK(iso.dataset.synthetic->generator.at("c(1,0)") == doctest::Approx(0.3));
    CHECK(iso.dataset.synthetic->generator.at("c(0,1)") == doctest::Approx(0.1));
    CHECK(iso.dataset.synthetic->tests.size() == 3);

    RunConfig cal = preset_config("desk-calibration");
    CHECK(cal.library.kind == "terms");
    CHECK(cal.library.build().n_kappa == 1);
    CHECK(cal.dataset.synthetic->generator.at("c(1,0)") == doctest::Approx(0.5));

    CHECK_THROWS_AS(preset_config("nope"), ConfigError);
  }
}

TEST_CASE("config parsing is strict and merges onto presets") {
  SUBCASE("overrides keep unrelated preset values") {
    json j = {{"distill", {{"n_iters", 5}}}, {"seed", 99}, {"out_dir", "x"}};
    RunConfig cfg = config_from_json(j, preset_config("treloar"));
    CHECK(cfg.distill.n_iters == 5);
    CHECK(cfg.distill.lambda == doctest::Approx(10.0));
    CHECK(cfg.seed == 99);
    CHECK(cfg.out_dir == "x");
    CHECK(cfg.gp.shrink == doctest::Approx(0.8));
  }

  SUBCASE("unknown keys are rejected everywhere") {
    CHECK_THROWS_AS(config_from_json(json{{"bogus", 1}}), ConfigError);
    CHECK_THROWS_AS(config_from_json(json{{"gp", {{"iters", 10}, {"typo", 1}}}}),
                    ConfigError);
    CHECK_THROWS_AS(config_from_json(json{{"distill", {{"flow", {{"depth", 2}}}}}}),
                    ConfigError);
    CHECK_THROWS_AS(config_from_json(json{{"dataset", {{"path", "x"}}}}), ConfigError);
  }

  SUBCASE("range validation") {
    CHECK_THROWS_AS(config_from_json(json{{"grid_points", 1}}), ConfigError);
    CHECK_THROWS_AS(config_from_json(json{{"gp", {{"iters", 0}}}}), ConfigError);
    CHECK_THROWS_AS(config_from_json(json{{"distill", {{"flow_lr_decay", 0.0}}}}),
                    ConfigError);
    CHECK_THROWS_AS(config_from_json(json{{"refine", {{"flow_lr", 0.0}}}}), ConfigError);
    CHECK_THROWS_AS(config_from_json(json{{"refine", {{"flow_lr_decay", 1.5}}}}),
                    ConfigError);
    CHECK_THROWS_AS(config_from_json(json{{"sobol", {{"threshold", 0.0}}}}), ConfigError);
    CHECK_THROWS_AS(config_from_json(json{{"seed", -3}}), ConfigError);
    CHECK_THROWS_AS(config_from_json(json{{"threads", 0}}), ConfigError);
    CHECK_THROWS_AS(
        config_from_json(json{{"metrics", {{"interval_samples", 10},
                                           {"min_interval_samples", 100}}}}),
        ConfigError);
  }

  SUBCASE("refine schedule inherits distill values unless overridden") {
    RunConfig base = config_from_json(json{{"distill", {{"flow_lr", 0.002}}}});
    CHECK(!base.refine.flow_lr.has_value());
    CHECK(!base.refine.flow_lr_decay.has_value());

    json j = {{"refine", {{"n_iters", 77}, {"flow_lr", 0.004}, {"flow_lr_decay", 0.99}}}};
    RunConfig cfg = config_from_json(j);
    CHECK(cfg.refine.n_iters == 77);
    CHECK(cfg.refine.flow_lr == doctest::Approx(0.004));
    CHECK(cfg.refine.flow_lr_decay == doctest::Approx(0.99));

    // Overrides survive the canonical dump and feed the hash.
    RunConfig back = config_from_json(config_to_json(cfg));
    CHECK(back.refine.flow_lr == doctest::Approx(0.004));
    CHECK(config_hash(back) == config_hash(cfg));
    CHECK(config_hash(cfg) != config_hash(base));
  }

  SUBCASE("synthetic tests accept linspace controls") {
    json j = {{"dataset",
               {{"synthetic",
                 {{"generator", {{"c(1,0)", 0.5}}},
                  {"tests", json::array({{{"id", "ut"},
                                          {"protocol", "UT"},
                                          {"controls",
                                           {{"from", 1.0}, {"to", 2.0}, {"n", 5}}}}})}}}}}};
    RunConfig cfg = config_from_json(j);
    REQUIRE(cfg.dataset.synthetic.has_value());
    const auto& c = cfg.dataset.synthetic->tests[0].controls;
    REQUIRE(c.size() == 5);
    CHECK(c[0] == doctest::Approx(1.0));
    CHECK(c[2] == doctest::Approx(1.5));
    CHECK(c[4] == doctest::Approx(2.0));

    json bad = j;
    bad["dataset"]["synthetic"]["tests"][0]["controls"] = {{"from", 1.0}, {"to", 1.0}, {"n", 5}};
    CHECK_THROWS_AS(config_from_json(bad), ConfigError);
  }

  SUBCASE("round trip preserves the hash") {
    RunConfig cfg = preset_config("cardiac-synthetic");
    cfg.seed = 123;
    cfg.out_dir = "runs/x";
    RunConfig back = config_from_json(config_to_json(cfg));
    CHECK(config_hash(back) == config_hash(cfg));
    CHECK(back.dataset.synthetic->tests.size() == 11);
    CHECK(back.distill.lambda == doctest::Approx(100.0));

    // The hash tracks content, not identity.
    cfg.distill.lambda = 99.0;
    CHECK(config_hash(cfg) != config_hash(back));
  }

  SUBCASE("config file loading") {
    fs::path dir = scratch("cfgfile");
    fs::path good = dir / "run.json";
    std::ofstream(good) << R"({"seed": 7, "grid_points": 8})";
    RunConfig cfg = config_from_file(good.string());
    CHECK(cfg.seed == 7);
    CHECK(cfg.grid_points == 8);

    fs::path bad = dir / "bad.json";
    std::ofstream(bad) << "{not json";
    CHECK_THROWS_AS(config_from_file(bad.string()), ParseError);
    CHECK_THROWS_AS(config_from_file((dir / "missing.json").string()), ConfigError);
  }
}

TEST_CASE("library serialization round trips") {
  SUBCASE("full anisotropic library") {
    mech::ModelLibrary lib = mech::ModelLibrary::anisotropic_cann();
    mech::ModelLibrary back = library_from_json(library_to_json(lib));
    CHECK(back.n_kappa == lib.n_kappa);
    CHECK(back.n_coeff == lib.n_coeff);
    CHECK(back.kappa_names() == lib.kappa_names());
    REQUIRE(back.terms.size() == lib.terms.size());
    for (std::size_t i = 0; i < lib.terms.size(); ++i) {
      CHECK(back.terms[i].id == lib.terms[i].id);
      CHECK(back.terms[i].form == lib.terms[i].form);
      CHECK(back.terms[i].base == lib.terms[i].base);
      CHECK(back.terms[i].expo == lib.terms[i].expo);
    }
  }

  SUBCASE("reduced isotropic library keeps exponents") {
    mech::ModelLibrary lib = mech::ModelLibrary::isotropic_mr_ogden();
    mech::ModelLibrary red = lib.reduced({0, 3, 11});
    mech::ModelLibrary back = library_from_json(library_to_json(red));
    CHECK(back.kappa_names() == red.kappa_names());
    VectorXd kappa = VectorXd::LinSpaced(back.n_kappa, 0.1, 0.4);
    mech::Matrix3 F = mech::protocol_deformation(mech::Protocol::UT, 1.3);
    auto rule = mech::pressure_rule_for(mech::Protocol::UT);
    CHECK(mech::stress_first_pk(back, kappa, F, rule)(0, 0) ==
          doctest::Approx(mech::stress_first_pk(red, kappa, F, rule)(0, 0)));
  }

  SUBCASE("unknown kinds and empty term lists are refused") {
    CHECK_THROWS_AS(library_from_json(json{{"kind", "mystery"}}), ConfigError);
    LibrarySpec spec;
    spec.kind = "terms";
    CHECK_THROWS_AS(spec.build(), ConfigError);
  }
}

TEST_CASE("fit metrics match hand-computed values") {
  data::Dataset ds = two_function_dataset();
  data::FunctionGrid grid = data::FunctionGrid::build(ds, 2);
  REQUIRE(grid.blocks.size() == 2);
  REQUIRE(grid.blocks[0].controls == std::vector<double>{1.0, 2.0});

  SUBCASE("per-function and pooled values") {
    StageMetrics m = metrics_from_curves(hand_curves(), ds, grid);
    REQUIRE(m.functions.size() == 2);
    // Function 1: m = [1, 2, 3] against y = [1, 2, 4].
    CHECK(m.functions[0].rmse == doctest::Approx(std::sqrt(1.0 / 3.0)));
    CHECK(m.functions[0].r2 == doctest::Approx(1.0 - 9.0 / 42.0));
    CHECK(m.functions[0].ec == doctest::Approx(2.0 / 3.0));
    CHECK(m.functions[0].n_points == 3);
    // Function 2 is matched exactly and fully covered.
    CHECK(m.functions[1].rmse == doctest::Approx(0.0));
    CHECK(m.functions[1].r2 == doctest::Approx(1.0));
    CHECK(m.functions[1].ec == doctest::Approx(1.0));
    // Pooled: sse = 1, sst about the global mean 3 is 16.
    CHECK(m.r2_total == doctest::Approx(1.0 - 1.0 / 16.0));
    CHECK(m.rmse_total == doctest::Approx(std::sqrt(1.0 / 5.0)));
    CHECK(m.ec_total == doctest::Approx(0.5 * (2.0 / 3.0 + 1.0)));
  }

  SUBCASE("constant mean at the function average gives zero r2") {
    auto curves = hand_curves();
    double ybar = (1.0 + 2.0 + 4.0) / 3.0;
    curves[0].mean = Eigen::Vector2d(ybar, ybar);
    StageMetrics m = metrics_from_curves(curves, ds, grid);
    CHECK(m.functions[0].r2 == doctest::Approx(0.0));
  }

  SUBCASE("interval edges count as covered") {
    auto curves = hand_curves();
    curves[0].lower = Eigen::Vector2d(1.0, 1.0);
    curves[0].upper = Eigen::Vector2d(1.0, 7.0);  // at x=1 the interval is the point y=1
    StageMetrics m = metrics_from_curves(curves, ds, grid);
    CHECK(m.functions[0].ec == doctest::Approx(1.0));
  }

  SUBCASE("data outside the grid range is an extrapolation error") {
    data::Dataset narrow = ds;
    narrow.tests[0].controls = {1.2, 1.5, 1.8};
    data::FunctionGrid ngrid = data::FunctionGrid::build(narrow, 2);
    CHECK_THROWS_AS(metrics_from_curves(hand_curves(), ds, ngrid), InvalidInputError);
  }

  SUBCASE("curve bookkeeping is validated") {
    auto curves = hand_curves();
    curves.pop_back();
    CHECK_THROWS_AS(metrics_from_curves(curves, ds, grid), DimensionError);
    curves = hand_curves();
    curves[0].mean.resize(5);
    CHECK_THROWS_AS(metrics_from_curves(curves, ds, grid), DimensionError);
  }

  SUBCASE("percentile metrics from constant samples reduce to the curve case") {
    auto curves = hand_curves();
    MatrixXd samples(grid.total, 1000);
    for (std::size_t f = 0; f < grid.blocks.size(); ++f) {
      const auto& b = grid.blocks[f];
      for (int r = 0; r < b.size(); ++r)
        samples.row(b.offset + r).setConstant(curves[f].mean(r));
    }
    StageMetrics m = model_stage_metrics(samples, ds, grid);
    CHECK(m.functions[0].r2 == doctest::Approx(1.0 - 9.0 / 42.0));
    // Degenerate intervals cover only exact matches.
    CHECK(m.functions[0].ec == doctest::Approx(2.0 / 3.0));
    CHECK(m.functions[1].ec == doctest::Approx(1.0));

    CHECK_THROWS_AS(model_stage_metrics(samples.leftCols(999), ds, grid), ConfigError);
    CHECK_THROWS_AS(model_stage_metrics(samples.topRows(2), ds, grid), DimensionError);
  }

  SUBCASE("percentile intervals use type-7 quantiles") {
    MatrixXd samples(grid.total, 1000);
    for (int r = 0; r < grid.total; ++r)
      for (int c = 0; c < 1000; ++c) samples(r, c) = (c + 1) * 0.01;
    StageMetrics m = model_stage_metrics(samples, ds, grid);
    (void)m;
    // Reconstruct one interval directly.
    std::vector<double> row(1000);
    for (int c = 0; c < 1000; ++c) row[static_cast<std::size_t>(c)] = (c + 1) * 0.01;
    CHECK(quantile(row, 0.025) == doctest::Approx(0.025 * 999 * 0.01 + 0.01));
  }

  SUBCASE("metrics serialize per stage") {
    RunMetrics rm;
    rm.gp = metrics_from_curves(hand_curves(), ds, grid);
    json j = metrics_to_json(rm);
    REQUIRE(j.contains("gp"));
    CHECK(!j.contains("distill"));
    CHECK(j["gp"]["functions"].size() == 2);
    CHECK(j["gp"]["functions"][0]["test_id"] == "t1");
    CHECK(j["gp"]["r2_total"].get<double>() == doctest::Approx(1.0 - 1.0 / 16.0));
  }
}

TEST_CASE("discovery run produces a complete, reproducible run directory") {
  fs::path out_a = scratch("disc_a");
  RunConfig cfg = smoke_config(out_a);
  DiscoveryRun run = run_discovery(cfg);

  SUBCASE("artifacts and in-memory results") {
    for (const char* name :
         {"config.json", "dataset.csv", "dataset.meta.json", "gp_posteriors.json",
          "flow.json", "flow_refined.json", "distill_history.csv", "refine_history.csv",
          "sobol_report.json", "sobol_averaged.csv", "sobol_curves.csv",
          "reduced_library.json", "metrics.json", "run.json"})
      CHECK_MESSAGE(fs::exists(out_a / name), name);

    CHECK(run.posterior.has_value());
    CHECK(run.flow.has_value());
    CHECK(run.report.has_value());
    CHECK(run.reduced.has_value());
    CHECK(run.flow_refined.has_value());
    REQUIRE(run.metrics.gp.has_value());
    REQUIRE(run.metrics.distill.has_value());
    REQUIRE(run.metrics.refine.has_value());
    CHECK(run.metrics.gp->functions.size() == 2);
    // Clean synthetic data from a smooth two-term model fits well.
    CHECK(run.metrics.gp->r2_total > 0.9);
    CHECK(!run.distill_diverged);
    CHECK(!run.refine_diverged);

    json manifest = json::parse(slurp(out_a / "run.json"));
    CHECK(manifest["config_hash"] == config_hash(cfg));
    CHECK(manifest["seed"] == std::to_string(cfg.seed));
    for (const char* stage : {"gp", "distill", "sobol", "refine", "metrics"})
      CHECK(manifest["stages"][stage]["completed"].get<bool>());

    json metrics = json::parse(slurp(out_a / "metrics.json"));
    CHECK(metrics.contains("gp"));
    CHECK(metrics.contains("distill"));
    CHECK(metrics.contains("refine"));
    CHECK(metrics["stress_unit"] == "kPa");
  }

  SUBCASE("same seed reproduces every byte that matters") {
    fs::path out_b = scratch("disc_b");
    RunConfig cfg_b = cfg;
    cfg_b.out_dir = out_b.string();
    run_discovery(cfg_b);
    CHECK(slurp(out_a / "metrics.json") == slurp(out_b / "metrics.json"));
    CHECK(slurp(out_a / "flow.json") == slurp(out_b / "flow.json"));
    CHECK(slurp(out_a / "flow_refined.json") == slurp(out_b / "flow_refined.json"));
    CHECK(slurp(out_a / "sobol_report.json") == slurp(out_b / "sobol_report.json"));
    CHECK(slurp(out_a / "dataset.csv") == slurp(out_b / "dataset.csv"));

    fs::path out_c = scratch("disc_c");
    RunConfig cfg_c = cfg;
    cfg_c.out_dir = out_c.string();
    cfg_c.seed = 18;
    run_discovery(cfg_c);
    CHECK(slurp(out_a / "metrics.json") != slurp(out_c / "metrics.json"));
  }

  SUBCASE("stage-by-stage execution reproduces the single-shot run") {
    fs::path out_d = scratch("disc_d");
    RunConfig cfg_d = cfg;
    cfg_d.out_dir = out_d.string();

    execute_stage(cfg_d, "gp");
    CHECK(fs::exists(out_d / "gp_posteriors.json"));
    CHECK(!fs::exists(out_d / "flow.json"));
    execute_stage(cfg_d, "distill");
    CHECK(slurp(out_d / "flow.json") == slurp(out_a / "flow.json"));
    execute_stage(cfg_d, "sobol");
    CHECK(slurp(out_d / "sobol_report.json") == slurp(out_a / "sobol_report.json"));
    CHECK(slurp(out_d / "reduced_library.json") == slurp(out_a / "reduced_library.json"));
    execute_stage(cfg_d, "refine");
    CHECK(slurp(out_d / "flow_refined.json") == slurp(out_a / "flow_refined.json"));
    CHECK(slurp(out_d / "metrics.json") == slurp(out_a / "metrics.json"));
  }

  SUBCASE("stages refuse to run without their prerequisites") {
    fs::path out_e = scratch("disc_e");
    RunConfig cfg_e = cfg;
    cfg_e.out_dir = out_e.string();
    CHECK_THROWS_AS(execute_stage(cfg_e, "distill"), StageError);
    execute_stage(cfg_e, "gp");
    CHECK_THROWS_AS(execute_stage(cfg_e, "sobol"), StageError);
    CHECK_THROWS_AS(execute_stage(cfg_e, "refine"), StageError);
    CHECK_THROWS_AS(execute_stage(cfg_e, "warp"), ConfigError);
  }

  SUBCASE("metrics command recomputes identical values") {
    std::string before = slurp(out_a / "metrics.json");
    RunMetrics rm = metrics_for_run(out_a.string());
    CHECK(rm.refine.has_value());
    CHECK(slurp(out_a / "metrics.json") == before);
    CHECK_THROWS_AS(metrics_for_run(scratch("disc_empty").string()), ConfigError);
  }

  SUBCASE("plot exports") {
    export_plots(out_a.string());
    fs::path plots = out_a / "plots";
    for (const char* name : {"gp_ut_P11.csv", "gp_ebt_P11.csv", "model_ut_P11.csv",
                             "model_ebt_P11.csv", "parameters.csv", "sobol_curves.csv"})
      CHECK_MESSAGE(fs::exists(plots / name), name);

    std::string gp_csv = slurp(plots / "gp_ut_P11.csv");
    CHECK(gp_csv.rfind("control,mean,lower,upper,sample_1,sample_2,sample_3", 0) == 0);
    CHECK(line_count(plots / "gp_ut_P11.csv") == 1 + cfg.grid_points);
    CHECK(line_count(plots / "parameters.csv") == 1 + cfg.metrics.parameter_samples);
  }
}

TEST_CASE("calibration runs skip sparsification") {
  fs::path out = scratch("cal");
  RunConfig cfg = preset_config("desk-calibration");
  cfg.out_dir = out.string();
  cfg.gp.iters = 40;
  cfg.grid_points = 6;
  cfg.distill.n_iters = 120;
  cfg.distill.n_critic = 2;
  cfg.distill.batch = 8;
  cfg.metrics.interval_samples = 1000;
  DiscoveryRun run = run_calibration(cfg);

  CHECK(run.posterior.has_value());
  CHECK(run.flow.has_value());
  CHECK(!run.report.has_value());
  CHECK(!run.flow_refined.has_value());
  CHECK(run.metrics.gp.has_value());
  CHECK(run.metrics.distill.has_value());
  CHECK(!run.metrics.refine.has_value());
  CHECK(!fs::exists(out / "sobol_report.json"));
  CHECK(!fs::exists(out / "flow_refined.json"));
  CHECK(fs::exists(out / "metrics.json"));
}

TEST_CASE("degenerate schedules and divergence are survivable") {
  SUBCASE("zero training iterations still complete") {
    fs::path out = scratch("zero");
    RunConfig cfg = smoke_config(out);
    cfg.distill.n_iters = 0;
    cfg.refine.n_iters = 0;
    DiscoveryRun run = run_discovery(cfg);
    CHECK(run.flow.has_value());
    CHECK(run.metrics.refine.has_value());
    CHECK(line_count(out / "distill_history.csv") == 1);  // header only
  }

  SUBCASE("a diverging run is recorded, not fatal") {
    fs::path out = scratch("div");
    RunConfig cfg = smoke_config(out);
    cfg.distill.n_iters = 5;
    cfg.distill.lambda = 1e300;
    DiscoveryRun run = run_calibration(cfg);
    CHECK(run.distill_diverged);
    CHECK(run.metrics.distill.has_value());
    json manifest = json::parse(slurp(out / "run.json"));
    CHECK(manifest["stages"]["distill"]["diverged"].get<bool>());
  }
}

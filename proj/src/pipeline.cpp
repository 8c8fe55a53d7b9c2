#include "uqmd/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace uqmd::pipe {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string form_to_string(mech::TermForm f) {
  switch (f) {
    case mech::TermForm::MrPower: return "mr_power";
    case mech::TermForm::OgdenSum: return "ogden";
    case mech::TermForm::Power: return "power";
    case mech::TermForm::ExpPower: return "exp_power";
  }
  throw ConfigError("unknown term form");
}

mech::TermForm form_from_string(const std::string& s) {
  if (s == "mr_power") return mech::TermForm::MrPower;
  if (s == "ogden") return mech::TermForm::OgdenSum;
  if (s == "power") return mech::TermForm::Power;
  if (s == "exp_power") return mech::TermForm::ExpPower;
  throw ConfigError("unknown term form '" + s + "'");
}

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& ctx) {
  if (!j.is_object()) throw ConfigError("'" + ctx + "' must be an object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : allowed) ok |= item.key() == k;
    if (!ok) throw ConfigError("unknown key '" + item.key() + "' in " + ctx);
  }
}

double get_num(const json& j, const char* key, const std::string& ctx) {
  const json& v = j.at(key);
  if (!v.is_number()) throw ConfigError("'" + ctx + "." + key + "' must be a number");
  return v.get<double>();
}

int get_int(const json& j, const char* key, const std::string& ctx) {
  const json& v = j.at(key);
  if (!v.is_number_integer()) throw ConfigError("'" + ctx + "." + key + "' must be an integer");
  return v.get<int>();
}

std::string get_str(const json& j, const char* key, const std::string& ctx) {
  const json& v = j.at(key);
  if (!v.is_string()) throw ConfigError("'" + ctx + "." + key + "' must be a string");
  return v.get<std::string>();
}

void require_range(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

std::vector<double> parse_controls(const json& j, const std::string& ctx) {
  if (j.is_array()) {
    std::vector<double> out;
    for (const auto& v : j) {
      if (!v.is_number()) throw ConfigError("'" + ctx + "' entries must be numbers");
      out.push_back(v.get<double>());
    }
    if (out.size() < 2) throw ConfigError("'" + ctx + "' needs at least two controls");
    return out;
  }
  check_keys(j, {"from", "to", "n"}, ctx);
  double from = get_num(j, "from", ctx), to = get_num(j, "to", ctx);
  int n = get_int(j, "n", ctx);
  require_range(n >= 2, "'" + ctx + ".n' must be at least 2");
  require_range(to > from, "'" + ctx + "' needs to > from");
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    out[static_cast<std::size_t>(i)] = from + (to - from) * i / (n - 1);
  return out;
}

json controls_to_json(const std::vector<double>& c) {
  json a = json::array();
  for (double v : c) a.push_back(v);
  return a;
}

mech::TermSpec term_from_json(const json& j) {
  check_keys(j, {"id", "form", "m", "k", "alpha", "base", "expo", "inner_id"}, "library.terms[]");
  mech::TermSpec t;
  t.id = get_str(j, "id", "term");
  t.form = form_from_string(get_str(j, "form", "term"));
  if (j.contains("m")) t.m = get_int(j, "m", "term");
  if (j.contains("k")) t.k = get_int(j, "k", "term");
  if (j.contains("alpha")) t.alpha = get_num(j, "alpha", "term");
  if (j.contains("base")) t.base = mech::base_invariant_from_string(get_str(j, "base", "term"));
  if (j.contains("expo")) t.expo = get_int(j, "expo", "term");
  if (j.contains("inner_id")) t.inner_id = get_str(j, "inner_id", "term");
  return t;
}

json term_to_json(const mech::TermSpec& t) {
  json j;
  j["id"] = t.id;
  j["form"] = form_to_string(t.form);
  switch (t.form) {
    case mech::TermForm::MrPower:
      j["m"] = t.m;
      j["k"] = t.k;
      break;
    case mech::TermForm::OgdenSum:
      j["alpha"] = t.alpha;
      break;
    case mech::TermForm::Power:
      j["base"] = mech::to_string(t.base);
      j["expo"] = t.expo;
      break;
    case mech::TermForm::ExpPower:
      j["base"] = mech::to_string(t.base);
      j["expo"] = t.expo;
      j["inner_id"] = t.inner_id;
      break;
  }
  return j;
}

LibrarySpec library_spec_from_json(const json& j) {
  check_keys(j, {"kind", "degree", "ogden_exponents", "terms"}, "library");
  LibrarySpec spec;
  spec.kind = get_str(j, "kind", "library");
  if (j.contains("degree")) spec.degree = get_int(j, "degree", "library");
  if (j.contains("ogden_exponents")) {
    spec.ogden_exponents.clear();
    for (const auto& v : j.at("ogden_exponents")) {
      if (!v.is_number()) throw ConfigError("'library.ogden_exponents' must hold numbers");
      spec.ogden_exponents.push_back(v.get<double>());
    }
  }
  if (j.contains("terms")) {
    spec.terms.clear();
    for (const auto& tj : j.at("terms")) spec.terms.push_back(term_from_json(tj));
  }
  return spec;
}

json library_spec_to_json(const LibrarySpec& spec) {
  json j;
  j["kind"] = spec.kind;
  if (spec.kind == "isotropic_mr_ogden") {
    j["degree"] = spec.degree;
    j["ogden_exponents"] = spec.ogden_exponents;
  } else if (spec.kind == "terms") {
    json terms = json::array();
    for (const auto& t : spec.terms) terms.push_back(term_to_json(t));
    j["terms"] = std::move(terms);
  }
  return j;
}

data::ErrorModel noise_from_json(const json& j, const std::string& ctx) {
  check_keys(j, {"sigma_min", "sigma_r"}, ctx);
  data::ErrorModel em;
  if (j.contains("sigma_min")) em.sigma_min = get_num(j, "sigma_min", ctx);
  if (j.contains("sigma_r")) em.sigma_r = get_num(j, "sigma_r", ctx);
  require_range(em.sigma_min >= 0.0 && em.sigma_r >= 0.0,
                "'" + ctx + "' standard deviations must be non-negative");
  return em;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string sanitize(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
  return out;
}

struct Paths {
  fs::path dir, config, dataset_csv, dataset_meta, gp, flow, flow_refined, distill_history,
      refine_history, sobol_report, sobol_avg, sobol_curves, reduced_lib, metrics, manifest,
      checkpoints, plots;
};

Paths make_paths(const std::string& out_dir) {
  Paths p;
  p.dir = out_dir;
  p.config = p.dir / "config.json";
  p.dataset_csv = p.dir / "dataset.csv";
  p.dataset_meta = p.dir / "dataset.meta.json";
  p.gp = p.dir / "gp_posteriors.json";
  p.flow = p.dir / "flow.json";
  p.flow_refined = p.dir / "flow_refined.json";
  p.distill_history = p.dir / "distill_history.csv";
  p.refine_history = p.dir / "refine_history.csv";
  p.sobol_report = p.dir / "sobol_report.json";
  p.sobol_avg = p.dir / "sobol_averaged.csv";
  p.sobol_curves = p.dir / "sobol_curves.csv";
  p.reduced_lib = p.dir / "reduced_library.json";
  p.metrics = p.dir / "metrics.json";
  p.manifest = p.dir / "run.json";
  p.checkpoints = p.dir / "checkpoints";
  p.plots = p.dir / "plots";
  return p;
}

void write_text(const fs::path& path, const std::string& text, const char* stage) {
  std::ofstream out(path);
  if (!out.good()) throw StageError(stage, "cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path, const char* stage) {
  std::ifstream in(path);
  if (!in.good()) throw StageError(stage, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path, const char* stage) {
  json j = json::parse(read_text(path, stage), nullptr, false);
  if (j.is_discarded()) throw ParseError("malformed JSON in " + path.string());
  return j;
}

VectorXd generator_kappa(const mech::ModelLibrary& lib,
                         const std::map<std::string, double>& gen) {
  auto names = lib.kappa_names();
  VectorXd kappa = VectorXd::Zero(lib.n_kappa);
  for (const auto& [name, value] : gen) {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end())
      throw ConfigError("generator parameter '" + name + "' is not in the library");
    kappa(static_cast<int>(it - names.begin())) = value;
  }
  return kappa;
}

// In-memory mirror of a run directory while stages execute.
struct RunState {
  RunConfig cfg;
  Paths paths;
  mech::ModelLibrary lib;
  data::Dataset ds;
  data::FunctionGrid grid;
  std::optional<gp::MultiGp> posterior;
  std::optional<flow::FlowModel> flow;
  std::optional<sobol::SobolReport> report;
  std::optional<sobol::ReducedModel> reduced;
  std::optional<flow::FlowModel> flow_refined;
  bool distill_diverged = false, refine_diverged = false;
  json manifest;
};

void save_manifest(RunState& st) {
  write_text(st.paths.manifest, st.manifest.dump(2) + "\n", "data");
}

void mark_stage(RunState& st, const std::string& stage, std::uint64_t seed, double wall,
                bool diverged = false) {
  json& s = st.manifest["stages"][stage];
  s["completed"] = true;
  s["seed"] = std::to_string(seed);
  s["wall_time"] = wall;
  if (diverged) s["diverged"] = true;
  save_manifest(st);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

json gp_to_json(const gp::MultiGp& mg) {
  json comps = json::array();
  for (const auto& m : mg.models) {
    json c;
    c["component_id"] = m.component_id;
    c["sigma2"] = m.sigma2;
    c["length"] = std::vector<double>(m.length.data(), m.length.data() + m.length.size());
    c["length_raw"] =
        std::vector<double>(m.length_raw.data(), m.length_raw.data() + m.length_raw.size());
    c["lml_init"] = m.lml_init;
    c["lml_best"] = m.lml_best;
    c["fit_jitter"] = m.fit_jitter;
    comps.push_back(std::move(c));
  }
  return json{{"components", std::move(comps)}};
}

gp::MultiGp gp_from_json(const json& j, const RunState& st) {
  std::vector<gp::GpModel> models;
  for (const auto& c : j.at("components")) {
    auto ts = data::component_training_set(st.ds, c.at("component_id").get<std::string>());
    std::vector<double> len = c.at("length").get<std::vector<double>>();
    VectorXd length = Eigen::Map<const VectorXd>(len.data(), static_cast<long>(len.size()));
    gp::GpModel m =
        gp::condition_gp(ts, st.cfg.noise, c.at("sigma2").get<double>(), length);
    std::vector<double> raw = c.at("length_raw").get<std::vector<double>>();
    m.length_raw = Eigen::Map<const VectorXd>(raw.data(), static_cast<long>(raw.size()));
    m.lml_init = c.at("lml_init").get<double>();
    m.lml_best = c.at("lml_best").get<double>();
    models.push_back(std::move(m));
  }
  return gp::condition_multi_gp(st.ds, st.grid, std::move(models), st.cfg.threads);
}

void prepare_data(RunState& st) {
  const RunConfig& cfg = st.cfg;
  if (cfg.out_dir.empty()) throw ConfigError("output directory is not set");
  fs::create_directories(st.paths.dir);

  st.lib = cfg.library.build();
  if (cfg.dataset.synthetic.has_value()) {
    const SyntheticSpec& syn = *cfg.dataset.synthetic;
    if (syn.tests.empty()) throw ConfigError("synthetic dataset has no tests");
    data::SynthesisSpec spec;
    for (const auto& t : syn.tests) {
      data::TestSpec ts;
      ts.id = t.id;
      ts.protocol = t.protocol;
      ts.ratio = t.ratio;
      ts.components = mech::observed_components(t.protocol);
      spec.tests.push_back(std::move(ts));
      spec.controls.push_back(t.controls);
    }
    VectorXd kappa = generator_kappa(st.lib, syn.generator);
    data::ErrorModel noise = syn.noise.value_or(cfg.noise);
    st.ds = data::synthesize_dataset(st.lib, kappa, spec, noise,
                                     derive_seed(cfg.seed, "synthesis"));
  } else {
    if (cfg.dataset.csv.empty() || cfg.dataset.meta.empty())
      throw ConfigError("dataset requires 'csv' and 'meta' paths or a 'synthetic' block");
    st.ds = data::load_dataset(cfg.dataset.csv, cfg.dataset.meta);
  }
  data::save_dataset(st.ds, st.paths.dataset_csv.string(), st.paths.dataset_meta.string());

  st.grid = data::FunctionGrid::build(st.ds, cfg.grid_points);

  write_text(st.paths.config, config_to_json(cfg).dump(2) + "\n", "data");
  st.manifest["config_hash"] = config_hash(cfg);
  st.manifest["seed"] = std::to_string(cfg.seed);
  st.manifest["stress_unit"] = st.ds.stress_unit;
  save_manifest(st);
}

void load_data(RunState& st) {
  if (!fs::exists(st.paths.dataset_csv) || !fs::exists(st.paths.dataset_meta))
    throw StageError("data",
                     "run directory is missing dataset artifacts; run the gp stage first");
  st.lib = st.cfg.library.build();
  st.ds = data::load_dataset(st.paths.dataset_csv.string(), st.paths.dataset_meta.string());
  st.grid = data::FunctionGrid::build(st.ds, st.cfg.grid_points);
  if (fs::exists(st.paths.manifest)) st.manifest = read_json(st.paths.manifest, "data");
}

void stage_gp(RunState& st) {
  auto t0 = std::chrono::steady_clock::now();
  gp::FitConfig fc;
  fc.iters = st.cfg.gp.iters;
  fc.lr = st.cfg.gp.lr;
  fc.init_length = st.cfg.gp.init_length;
  fc.shrink = st.cfg.gp.shrink;
  fc.noise = st.cfg.noise;
  fc.threads = st.cfg.threads;
  st.posterior = gp::fit_multi_gp(st.ds, st.grid, fc);
  write_text(st.paths.gp, gp_to_json(*st.posterior).dump(2) + "\n", "gp");
  mark_stage(st, "gp", st.cfg.seed, seconds_since(t0));
}

void need_posterior(RunState& st, const char* stage) {
  if (st.posterior.has_value()) return;
  if (!fs::exists(st.paths.gp))
    throw StageError(stage, "run directory is missing GP artifacts; run the gp stage first");
  st.posterior = gp_from_json(read_json(st.paths.gp, stage), st);
}

flow::FlowModel load_flow(const fs::path& path, const char* stage) {
  return flow::FlowModel::from_json(read_text(path, stage));
}

// Fresh flow matching what distill_flow would initialize for this seed.
flow::FlowModel untrained_flow(int n_kappa, const flow::FlowConfig& fc, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "flow-init"));
  return flow::FlowModel(n_kappa, fc, rng);
}

void run_distill_stage(RunState& st, const mech::ModelLibrary& lib, distill::DistillConfig dc,
                       const fs::path& history, const fs::path& ckpt_dir,
                       const fs::path& flow_path, const char* stage_name,
                       std::uint64_t stage_seed, std::optional<flow::FlowModel>& out,
                       bool& diverged_flag) {
  auto t0 = std::chrono::steady_clock::now();
  need_posterior(st, stage_name);
  distill::ForwardMap fmap(lib, st.grid);

  dc.history_path = history.string();
  if (dc.checkpoint_every > 0) {
    fs::create_directories(ckpt_dir);
    dc.checkpoint_dir = ckpt_dir.string();
  }

  bool diverged = false;
  if (dc.n_iters == 0) {
    out = untrained_flow(lib.n_kappa, dc.flow_cfg, stage_seed);
    distill::write_history_csv({}, dc.history_path);
  } else {
    distill::DistillResult res = distill::distill_flow(*st.posterior, fmap, dc, stage_seed);
    diverged = res.diverged;
    out = std::move(res.model);
  }
  write_text(flow_path, out->to_json() + "\n", stage_name);
  diverged_flag = diverged;
  mark_stage(st, stage_name, stage_seed, seconds_since(t0), diverged);
}

void stage_distill(RunState& st) {
  run_distill_stage(st, st.lib, st.cfg.distill, st.paths.distill_history,
                    st.paths.checkpoints / "distill", st.paths.flow, "distill",
                    derive_seed(st.cfg.seed, "distill"), st.flow, st.distill_diverged);
}

void need_flow(RunState& st, const char* stage) {
  if (st.flow.has_value()) return;
  if (!fs::exists(st.paths.flow))
    throw StageError(stage,
                     "run directory is missing the distilled flow; run the distill stage first");
  st.flow = load_flow(st.paths.flow, stage);
}

void stage_sobol(RunState& st) {
  auto t0 = std::chrono::steady_clock::now();
  need_flow(st, "sobol");
  distill::ForwardMap fmap(st.lib, st.grid);
  sobol::SobolConfig sc = st.cfg.sobol;
  sc.threads = st.cfg.threads;
  std::uint64_t seed = derive_seed(st.cfg.seed, "sobol");
  st.report = sobol::deformation_resolved_indices(*st.flow, fmap, st.grid, sc, seed);
  st.reduced = sobol::reduce_library(st.lib, *st.report, sc.threshold);

  auto names = st.lib.kappa_names();
  sobol::write_report_json(*st.report, names, st.paths.sobol_report.string(), false);
  sobol::write_averaged_csv(*st.report, names, st.paths.sobol_avg.string());
  sobol::write_curves_csv(*st.report, st.grid, st.ds, names, st.paths.sobol_curves.string());
  write_text(st.paths.reduced_lib, library_to_json(st.reduced->library).dump(2) + "\n",
             "sobol");
  mark_stage(st, "sobol", seed, seconds_since(t0));
}

void need_reduced(RunState& st, const char* stage) {
  if (st.reduced.has_value()) return;
  if (!fs::exists(st.paths.reduced_lib))
    throw StageError(stage,
                     "run directory is missing the reduced library; run the sobol stage first");
  sobol::ReducedModel red;
  red.library = library_from_json(read_json(st.paths.reduced_lib, stage));
  st.reduced = std::move(red);
}

void stage_refine(RunState& st) {
  need_reduced(st, "refine");
  distill::DistillConfig dc = st.cfg.distill;
  dc.n_iters = st.cfg.refine.n_iters;
  if (st.cfg.refine.flow_lr.has_value()) dc.flow_lr = *st.cfg.refine.flow_lr;
  if (st.cfg.refine.flow_lr_decay.has_value()) dc.flow_lr_decay = *st.cfg.refine.flow_lr_decay;
  run_distill_stage(st, st.reduced->library, dc, st.paths.refine_history,
                    st.paths.checkpoints / "refine", st.paths.flow_refined, "refine",
                    derive_seed(st.cfg.seed, "refine"), st.flow_refined, st.refine_diverged);
}

MatrixXd model_function_samples(const flow::FlowModel& fl, const mech::ModelLibrary& lib,
                                const data::FunctionGrid& grid, int count, std::uint64_t seed) {
  distill::ForwardMap fmap(lib, grid);
  Rng rng(seed);
  return fmap.evaluate(fl.sample(count, rng));
}

RunMetrics compute_run_metrics(RunState& st) {
  RunMetrics m;
  if (st.posterior.has_value())
    m.gp = gp_stage_metrics(*st.posterior, st.ds, st.grid);
  int n = st.cfg.metrics.interval_samples;
  if (st.flow.has_value()) {
    MatrixXd s = model_function_samples(*st.flow, st.lib, st.grid, n,
                                        derive_seed(st.cfg.seed, "metrics-distill"));
    m.distill = model_stage_metrics(s, st.ds, st.grid, st.cfg.metrics.min_interval_samples);
  }
  if (st.flow_refined.has_value() && st.reduced.has_value()) {
    MatrixXd s = model_function_samples(*st.flow_refined, st.reduced->library, st.grid, n,
                                        derive_seed(st.cfg.seed, "metrics-refine"));
    m.refine = model_stage_metrics(s, st.ds, st.grid, st.cfg.metrics.min_interval_samples);
  }
  return m;
}

void stage_metrics(RunState& st, RunMetrics& out) {
  auto t0 = std::chrono::steady_clock::now();
  out = compute_run_metrics(st);
  json j = metrics_to_json(out);
  j["stress_unit"] = st.ds.stress_unit;
  write_text(st.paths.metrics, j.dump(2) + "\n", "metrics");
  mark_stage(st, "metrics", st.cfg.seed, seconds_since(t0));
}

void load_available(RunState& st) {
  load_data(st);
  if (fs::exists(st.paths.gp)) need_posterior(st, "metrics");
  if (fs::exists(st.paths.flow)) need_flow(st, "metrics");
  if (fs::exists(st.paths.reduced_lib)) need_reduced(st, "metrics");
  if (fs::exists(st.paths.flow_refined))
    st.flow_refined = load_flow(st.paths.flow_refined, "metrics");
}

void write_curve_csv(const fs::path& path, const std::vector<double>& controls,
                     const FunctionCurve& curve, const MatrixXd& samples, int offset) {
  std::ofstream out(path);
  if (!out.good()) throw StageError("export", "cannot write " + path.string());
  out << std::setprecision(17) << "control,mean,lower,upper";
  for (int k = 0; k < samples.cols(); ++k) out << ",sample_" << (k + 1);
  out << "\n";
  for (std::size_t r = 0; r < controls.size(); ++r) {
    int row = offset + static_cast<int>(r);
    out << controls[r] << "," << curve.mean(static_cast<long>(r)) << ","
        << curve.lower(static_cast<long>(r)) << "," << curve.upper(static_cast<long>(r));
    for (int k = 0; k < samples.cols(); ++k) out << "," << samples(row, k);
    out << "\n";
  }
}

std::vector<FunctionCurve> gp_curves(const gp::MultiGp& posterior) {
  std::vector<FunctionCurve> curves;
  for (const auto& b : posterior.blocks) {
    FunctionCurve c;
    c.mean = b.mean;
    VectorXd sd = b.cov.diagonal().cwiseMax(0.0).cwiseSqrt();
    c.lower = b.mean - kZ95 * sd;
    c.upper = b.mean + kZ95 * sd;
    curves.push_back(std::move(c));
  }
  return curves;
}

std::vector<FunctionCurve> percentile_curves(const MatrixXd& samples,
                                             const data::FunctionGrid& grid) {
  std::vector<FunctionCurve> curves;
  for (const auto& b : grid.blocks) {
    FunctionCurve c;
    c.mean.resize(b.size());
    c.lower.resize(b.size());
    c.upper.resize(b.size());
    for (int r = 0; r < b.size(); ++r) {
      VectorXd row = samples.row(b.offset + r);  // row views are strided
      c.mean(r) = row.mean();
      std::vector<double> v(row.data(), row.data() + row.size());
      c.lower(r) = quantile(v, 0.025);
      c.upper(r) = quantile(std::move(v), 0.975);
    }
    curves.push_back(std::move(c));
  }
  return curves;
}

}  // namespace

mech::ModelLibrary LibrarySpec::build() const {
  if (kind == "isotropic_mr_ogden")
    return mech::ModelLibrary::isotropic_mr_ogden(degree, ogden_exponents);
  if (kind == "anisotropic_cann") return mech::ModelLibrary::anisotropic_cann();
  if (kind == "terms") {
    if (terms.empty()) throw ConfigError("library kind 'terms' needs a non-empty term list");
    return mech::make_library_from_terms(terms);
  }
  throw ConfigError("unknown library kind '" + kind + "'");
}

json library_to_json(const mech::ModelLibrary& lib) {
  json terms = json::array();
  for (const auto& t : lib.terms) terms.push_back(term_to_json(t));
  return json{{"kind", "terms"}, {"terms", std::move(terms)}};
}

mech::ModelLibrary library_from_json(const json& j) {
  LibrarySpec spec = library_spec_from_json(j);
  return spec.build();
}

RunConfig config_from_json(const json& j, const RunConfig& base) {
  RunConfig cfg = base;
  check_keys(j,
             {"preset", "dataset", "library", "noise", "gp", "grid_points", "distill",
              "refine", "sobol", "metrics", "seed", "out_dir", "threads"},
             "config");

  if (j.contains("preset")) cfg.preset = get_str(j, "preset", "config");
  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    check_keys(d, {"csv", "meta", "synthetic"}, "dataset");
    cfg.dataset = DatasetSpec{};
    if (d.contains("csv")) cfg.dataset.csv = get_str(d, "csv", "dataset");
    if (d.contains("meta")) cfg.dataset.meta = get_str(d, "meta", "dataset");
    if (d.contains("synthetic")) {
      const json& s = d.at("synthetic");
      check_keys(s, {"generator", "tests", "noise"}, "dataset.synthetic");
      SyntheticSpec syn;
      if (!s.contains("generator") || !s.at("generator").is_object())
        throw ConfigError("'dataset.synthetic.generator' must be an object");
      for (const auto& item : s.at("generator").items()) {
        if (!item.value().is_number())
          throw ConfigError("generator values must be numbers");
        syn.generator[item.key()] = item.value().get<double>();
      }
      if (!s.contains("tests") || !s.at("tests").is_array())
        throw ConfigError("'dataset.synthetic.tests' must be an array");
      for (const auto& tj : s.at("tests")) {
        check_keys(tj, {"id", "protocol", "ratio", "controls"}, "dataset.synthetic.tests[]");
        SyntheticTest t;
        t.id = get_str(tj, "id", "test");
        t.protocol = mech::protocol_from_string(get_str(tj, "protocol", "test"));
        if (tj.contains("ratio")) {
          const json& r = tj.at("ratio");
          if (!r.is_array() || r.size() != 2)
            throw ConfigError("'ratio' must be a [lambda_f, lambda_n] pair");
          t.ratio = mech::BtRatio{r[0].get<double>(), r[1].get<double>()};
        }
        t.controls = parse_controls(tj.at("controls"), "controls");
        syn.tests.push_back(std::move(t));
      }
      if (s.contains("noise")) syn.noise = noise_from_json(s.at("noise"), "synthetic.noise");
      cfg.dataset.synthetic = std::move(syn);
    }
  }
  if (j.contains("library")) cfg.library = library_spec_from_json(j.at("library"));
  if (j.contains("noise")) cfg.noise = noise_from_json(j.at("noise"), "noise");
  if (j.contains("gp")) {
    const json& g = j.at("gp");
    check_keys(g, {"iters", "lr", "init_length", "shrink"}, "gp");
    if (g.contains("iters")) cfg.gp.iters = get_int(g, "iters", "gp");
    if (g.contains("lr")) cfg.gp.lr = get_num(g, "lr", "gp");
    if (g.contains("init_length")) cfg.gp.init_length = get_num(g, "init_length", "gp");
    if (g.contains("shrink")) cfg.gp.shrink = get_num(g, "shrink", "gp");
    require_range(cfg.gp.iters >= 1, "'gp.iters' must be positive");
    require_range(cfg.gp.lr > 0 && cfg.gp.init_length > 0 && cfg.gp.shrink > 0,
                  "'gp' rates and lengths must be positive");
  }
  if (j.contains("grid_points")) {
    cfg.grid_points = get_int(j, "grid_points", "config");
    require_range(cfg.grid_points >= 2, "'grid_points' must be at least 2");
  }
  if (j.contains("distill")) {
    const json& d = j.at("distill");
    check_keys(d,
               {"n_iters", "n_critic", "batch", "critic_lr", "flow_lr", "flow_lr_decay",
                "lambda", "checkpoint_every", "flow", "critic"},
               "distill");
    auto& dc = cfg.distill;
    if (d.contains("n_iters")) dc.n_iters = get_int(d, "n_iters", "distill");
    if (d.contains("n_critic")) dc.n_critic = get_int(d, "n_critic", "distill");
    if (d.contains("batch")) dc.batch = get_int(d, "batch", "distill");
    if (d.contains("critic_lr")) dc.critic_lr = get_num(d, "critic_lr", "distill");
    if (d.contains("flow_lr")) dc.flow_lr = get_num(d, "flow_lr", "distill");
    if (d.contains("flow_lr_decay")) dc.flow_lr_decay = get_num(d, "flow_lr_decay", "distill");
    if (d.contains("lambda")) dc.lambda = get_num(d, "lambda", "distill");
    if (d.contains("checkpoint_every"))
      dc.checkpoint_every = get_int(d, "checkpoint_every", "distill");
    if (d.contains("flow")) {
      const json& f = d.at("flow");
      check_keys(f, {"n_transforms", "hidden_layers", "width_multiplier"}, "distill.flow");
      if (f.contains("n_transforms"))
        dc.flow_cfg.n_transforms = get_int(f, "n_transforms", "flow");
      if (f.contains("hidden_layers"))
        dc.flow_cfg.hidden_layers = get_int(f, "hidden_layers", "flow");
      if (f.contains("width_multiplier"))
        dc.flow_cfg.width_multiplier = get_int(f, "width_multiplier", "flow");
      require_range(dc.flow_cfg.n_transforms >= 1 && dc.flow_cfg.hidden_layers >= 1 &&
                        dc.flow_cfg.width_multiplier >= 1,
                    "'distill.flow' sizes must be positive");
    }
    if (d.contains("critic")) {
      const json& c = d.at("critic");
      check_keys(c, {"hidden_layers", "width_multiplier"}, "distill.critic");
      if (c.contains("hidden_layers"))
        dc.critic_hidden_layers = get_int(c, "hidden_layers", "critic");
      if (c.contains("width_multiplier"))
        dc.critic_width_multiplier = get_int(c, "width_multiplier", "critic");
      require_range(dc.critic_hidden_layers >= 1 && dc.critic_width_multiplier >= 1,
                    "'distill.critic' sizes must be positive");
    }
    require_range(dc.n_iters >= 0, "'distill.n_iters' must be non-negative");
    require_range(dc.n_critic >= 1 && dc.batch >= 2, "'distill' schedule too small");
    require_range(dc.critic_lr > 0 && dc.flow_lr > 0, "'distill' learning rates must be positive");
    require_range(dc.flow_lr_decay > 0 && dc.flow_lr_decay <= 1,
                  "'distill.flow_lr_decay' must lie in (0, 1]");
    require_range(dc.lambda >= 0, "'distill.lambda' must be non-negative");
    require_range(dc.checkpoint_every >= 0, "'distill.checkpoint_every' must be non-negative");
  }
  if (j.contains("refine")) {
    const json& r = j.at("refine");
    check_keys(r, {"n_iters", "flow_lr", "flow_lr_decay"}, "refine");
    if (r.contains("n_iters")) cfg.refine.n_iters = get_int(r, "n_iters", "refine");
    if (r.contains("flow_lr")) cfg.refine.flow_lr = get_num(r, "flow_lr", "refine");
    if (r.contains("flow_lr_decay"))
      cfg.refine.flow_lr_decay = get_num(r, "flow_lr_decay", "refine");
    require_range(cfg.refine.n_iters >= 0, "'refine.n_iters' must be non-negative");
    require_range(!cfg.refine.flow_lr.has_value() || *cfg.refine.flow_lr > 0,
                  "'refine.flow_lr' must be positive");
    require_range(!cfg.refine.flow_lr_decay.has_value() ||
                      (*cfg.refine.flow_lr_decay > 0 && *cfg.refine.flow_lr_decay <= 1),
                  "'refine.flow_lr_decay' must lie in (0, 1]");
  }
  if (j.contains("sobol")) {
    const json& s = j.at("sobol");
    check_keys(s, {"n_base", "bounds_samples", "threshold"}, "sobol");
    if (s.contains("n_base")) cfg.sobol.n_base = get_int(s, "n_base", "sobol");
    if (s.contains("bounds_samples"))
      cfg.sobol.bounds_samples = get_int(s, "bounds_samples", "sobol");
    if (s.contains("threshold")) cfg.sobol.threshold = get_num(s, "threshold", "sobol");
    require_range(cfg.sobol.n_base >= 2 && cfg.sobol.bounds_samples >= 2,
                  "'sobol' sample counts must be at least 2");
    require_range(cfg.sobol.threshold > 0, "'sobol.threshold' must be positive");
  }
  if (j.contains("metrics")) {
    const json& m = j.at("metrics");
    check_keys(m,
               {"interval_samples", "min_interval_samples", "plot_samples",
                "parameter_samples"},
               "metrics");
    if (m.contains("interval_samples"))
      cfg.metrics.interval_samples = get_int(m, "interval_samples", "metrics");
    if (m.contains("min_interval_samples"))
      cfg.metrics.min_interval_samples = get_int(m, "min_interval_samples", "metrics");
    if (m.contains("plot_samples"))
      cfg.metrics.plot_samples = get_int(m, "plot_samples", "metrics");
    if (m.contains("parameter_samples"))
      cfg.metrics.parameter_samples = get_int(m, "parameter_samples", "metrics");
    require_range(cfg.metrics.min_interval_samples >= 1 && cfg.metrics.plot_samples >= 1 &&
                      cfg.metrics.parameter_samples >= 1,
                  "'metrics' sample counts must be positive");
  }
  require_range(cfg.metrics.interval_samples >= cfg.metrics.min_interval_samples,
                "'metrics.interval_samples' must be at least the configured minimum");
  if (j.contains("seed")) {
    const json& s = j.at("seed");
    if (!s.is_number_integer() || (!s.is_number_unsigned() && s.get<long long>() < 0))
      throw ConfigError("'seed' must be a non-negative integer");
    cfg.seed = s.get<std::uint64_t>();
  }
  if (j.contains("out_dir")) cfg.out_dir = get_str(j, "out_dir", "config");
  if (j.contains("threads")) {
    cfg.threads = get_int(j, "threads", "config");
    require_range(cfg.threads >= 1, "'threads' must be positive");
  }
  return cfg;
}

RunConfig config_from_file(const std::string& path, const RunConfig& base) {
  std::ifstream in(path);
  if (!in.good()) throw ConfigError("cannot read config file " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ParseError("malformed JSON in " + path);
  return config_from_json(j, base);
}

json config_to_json(const RunConfig& cfg) {
  json j;
  j["preset"] = cfg.preset;
  json d = json::object();
  if (!cfg.dataset.csv.empty()) d["csv"] = cfg.dataset.csv;
  if (!cfg.dataset.meta.empty()) d["meta"] = cfg.dataset.meta;
  if (cfg.dataset.synthetic.has_value()) {
    const SyntheticSpec& syn = *cfg.dataset.synthetic;
    json s;
    s["generator"] = syn.generator;
    json tests = json::array();
    for (const auto& t : syn.tests) {
      json tj;
      tj["id"] = t.id;
      tj["protocol"] = mech::to_string(t.protocol);
      if (t.ratio.has_value()) tj["ratio"] = {t.ratio->lf, t.ratio->ln};
      tj["controls"] = controls_to_json(t.controls);
      tests.push_back(std::move(tj));
    }
    s["tests"] = std::move(tests);
    if (syn.noise.has_value())
      s["noise"] = {{"sigma_min", syn.noise->sigma_min}, {"sigma_r", syn.noise->sigma_r}};
    d["synthetic"] = std::move(s);
  }
  j["dataset"] = std::move(d);
  j["library"] = library_spec_to_json(cfg.library);
  j["noise"] = {{"sigma_min", cfg.noise.sigma_min}, {"sigma_r", cfg.noise.sigma_r}};
  j["gp"] = {{"iters", cfg.gp.iters},
             {"lr", cfg.gp.lr},
             {"init_length", cfg.gp.init_length},
             {"shrink", cfg.gp.shrink}};
  j["grid_points"] = cfg.grid_points;
  j["distill"] = {
      {"n_iters", cfg.distill.n_iters},
      {"n_critic", cfg.distill.n_critic},
      {"batch", cfg.distill.batch},
      {"critic_lr", cfg.distill.critic_lr},
      {"flow_lr", cfg.distill.flow_lr},
      {"flow_lr_decay", cfg.distill.flow_lr_decay},
      {"lambda", cfg.distill.lambda},
      {"checkpoint_every", cfg.distill.checkpoint_every},
      {"flow",
       {{"n_transforms", cfg.distill.flow_cfg.n_transforms},
        {"hidden_layers", cfg.distill.flow_cfg.hidden_layers},
        {"width_multiplier", cfg.distill.flow_cfg.width_multiplier}}},
      {"critic",
       {{"hidden_layers", cfg.distill.critic_hidden_layers},
        {"width_multiplier", cfg.distill.critic_width_multiplier}}}};
  j["refine"] = {{"n_iters", cfg.refine.n_iters}};
  if (cfg.refine.flow_lr.has_value()) j["refine"]["flow_lr"] = *cfg.refine.flow_lr;
  if (cfg.refine.flow_lr_decay.has_value())
    j["refine"]["flow_lr_decay"] = *cfg.refine.flow_lr_decay;
  j["sobol"] = {{"n_base", cfg.sobol.n_base},
                {"bounds_samples", cfg.sobol.bounds_samples},
                {"threshold", cfg.sobol.threshold}};
  j["metrics"] = {{"interval_samples", cfg.metrics.interval_samples},
                  {"min_interval_samples", cfg.metrics.min_interval_samples},
                  {"plot_samples", cfg.metrics.plot_samples},
                  {"parameter_samples", cfg.metrics.parameter_samples}};
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  j["threads"] = cfg.threads;
  return j;
}

std::string config_hash(const RunConfig& cfg) {
  return hex64(fnv1a64(config_to_json(cfg).dump()));
}

RunConfig preset_config(const std::string& name) {
  RunConfig cfg;
  cfg.preset = name;

  auto cardiac_tests = [] {
    std::vector<SyntheticTest> tests;
    const char* shear[6] = {"SS_fs", "SS_fn", "SS_sf", "SS_sn", "SS_nf", "SS_ns"};
    for (const char* p : shear) {
      SyntheticTest t;
      t.protocol = mech::protocol_from_string(p);
      t.id = std::string("ss_") + (p + 3);
      for (int i = 0; i <= 10; ++i) t.controls.push_back(0.05 * i);
      // Controls must increase strictly; the undeformed first point is
      // kept, matching the measured range gamma in [0, 0.5].
      t.controls.front() = 0.0;
      tests.push_back(std::move(t));
    }
    const double ratios[5][2] = {{1, 1}, {1, 0.75}, {0.75, 1}, {1, 0.5}, {0.5, 1}};
    const char* names[5] = {"bt_1_1", "bt_1_075", "bt_075_1", "bt_1_05", "bt_05_1"};
    for (int r = 0; r < 5; ++r) {
      SyntheticTest t;
      t.protocol = mech::Protocol::BT;
      t.id = names[r];
      t.ratio = mech::BtRatio{ratios[r][0], ratios[r][1]};
      for (int i = 0; i <= 10; ++i) t.controls.push_back(1.0 + 0.01 * i);
      tests.push_back(std::move(t));
    }
    return tests;
  };

  if (name == "treloar") {
    cfg.dataset.csv = "data/treloar.csv";
    cfg.dataset.meta = "data/treloar.meta.json";
    cfg.library.kind = "isotropic_mr_ogden";
    cfg.gp.shrink = 0.8;
    cfg.distill.n_iters = 20000;
    cfg.distill.lambda = 10.0;
    cfg.refine.n_iters = 10000;
    cfg.sobol.threshold = 1e-4;
    cfg.out_dir = "runs/treloar";
    return cfg;
  }
  if (name == "cardiac-synthetic" || name == "cardiac-experimental") {
    cfg.library.kind = "anisotropic_cann";
    cfg.gp.shrink = 0.6;
    cfg.distill.n_iters = 20000;
    cfg.distill.lambda = 100.0;
    cfg.refine.n_iters = 10000;
    cfg.sobol.threshold = 0.01;
    if (name == "cardiac-synthetic") {
      SyntheticSpec syn;
      syn.generator = {{"c(2,7)", 5.162},  {"c(2,12)", 0.081}, {"w(1,12)", 21.151},
                       {"c(2,20)", 0.315}, {"w(1,20)", 4.371}, {"c(2,24)", 0.486},
                       {"w(1,24)", 0.508}};
      syn.tests = cardiac_tests();
      cfg.dataset.synthetic = std::move(syn);
      cfg.out_dir = "runs/cardiac-synthetic";
    } else {
      cfg.dataset.csv = "data/cardiac.csv";
      cfg.dataset.meta = "data/cardiac.meta.json";
      cfg.out_dir = "runs/cardiac-experimental";
    }
    return cfg;
  }
  if (name == "desk-isotropic") {
    SyntheticSpec syn;
    syn.generator = {{"c(1,0)", 0.3}, {"c(0,1)", 0.1}};
    const char* prots[3] = {"UT", "EBT", "PS"};
    const char* ids[3] = {"ut", "ebt", "ps"};
    for (int i = 0; i < 3; ++i) {
      SyntheticTest t;
      t.id = ids[i];
      t.protocol = mech::protocol_from_string(prots[i]);
      for (int k = 0; k < 12; ++k) t.controls.push_back(1.0 + k / 11.0);
      syn.tests.push_back(std::move(t));
    }
    cfg.dataset.synthetic = std::move(syn);
    cfg.library.kind = "isotropic_mr_ogden";
    // Short-schedule settings: the wider bands need a softened length-scale
    // shrink, and the minimax needs a faster critic and a flow rate that
    // freezes once the sample spread matches the posterior.
    cfg.gp.shrink = 0.4;
    cfg.grid_points = 16;
    cfg.distill.n_iters = 2000;
    cfg.distill.batch = 64;
    cfg.distill.critic_lr = 2e-3;
    cfg.distill.flow_lr = 2e-3;
    cfg.distill.flow_lr_decay = 0.998;
    cfg.distill.lambda = 10.0;
    cfg.distill.flow_cfg.n_transforms = 8;
    cfg.refine.n_iters = 1000;
    cfg.sobol.threshold = 1e-4;
    cfg.out_dir = "runs/desk-isotropic";
    return cfg;
  }
  if (name == "desk-calibration") {
    SyntheticSpec syn;
    syn.generator = {{"c(1,0)", 0.5}};
    SyntheticTest t;
    t.id = "ut";
    t.protocol = mech::Protocol::UT;
    for (int k = 0; k < 15; ++k) t.controls.push_back(1.0 + 0.9 * k / 14.0);
    syn.tests.push_back(std::move(t));
    cfg.dataset.synthetic = std::move(syn);
    cfg.library.kind = "terms";
    mech::TermSpec nh;
    nh.form = mech::TermForm::MrPower;
    nh.m = 1;
    nh.k = 0;
    nh.id = "c(1,0)";
    cfg.library.terms = {nh};
    cfg.gp.shrink = 0.8;
    cfg.grid_points = 16;
    cfg.distill.n_iters = 1500;
    cfg.distill.critic_lr = 3e-4;
    cfg.distill.flow_lr = 5e-3;
    cfg.distill.flow_lr_decay = 0.999;
    cfg.distill.lambda = 10.0;
    cfg.out_dir = "runs/desk-calibration";
    return cfg;
  }
  throw ConfigError("unknown preset '" + name + "'");
}

json metrics_to_json(const RunMetrics& m) {
  auto stage = [](const StageMetrics& s) {
    json fns = json::array();
    for (const auto& f : s.functions)
      fns.push_back(json{{"test_id", f.test_id},
                         {"component_id", f.component_id},
                         {"r2", f.r2},
                         {"rmse", f.rmse},
                         {"ec", f.ec},
                         {"n_points", f.n_points}});
    return json{{"functions", std::move(fns)},
                {"r2_total", s.r2_total},
                {"rmse_total", s.rmse_total},
                {"ec_total", s.ec_total}};
  };
  json j;
  if (m.gp.has_value()) j["gp"] = stage(*m.gp);
  if (m.distill.has_value()) j["distill"] = stage(*m.distill);
  if (m.refine.has_value()) j["refine"] = stage(*m.refine);
  return j;
}

StageMetrics metrics_from_curves(const std::vector<FunctionCurve>& curves,
                                 const data::Dataset& ds, const data::FunctionGrid& grid) {
  if (curves.size() != grid.blocks.size())
    throw DimensionError("one curve per grid block is required");

  StageMetrics out;
  double pooled_sse = 0.0, pooled_n = 0.0, pooled_sum = 0.0, pooled_sumsq = 0.0;
  int n_tests = 0;
  for (const auto& b : grid.blocks) n_tests = std::max(n_tests, b.t + 1);
  std::vector<double> test_cover(static_cast<std::size_t>(n_tests), 0.0);
  std::vector<double> test_count(static_cast<std::size_t>(n_tests), 0.0);

  for (std::size_t f = 0; f < grid.blocks.size(); ++f) {
    const auto& b = grid.blocks[f];
    const auto& curve = curves[f];
    if (curve.mean.size() != b.size())
      throw DimensionError("curve length does not match its grid block");
    const data::TestData& td = ds.tests[static_cast<std::size_t>(b.t)];
    VectorXd y = td.stresses.col(b.q);
    const int n = td.n_points();

    auto grid_x = std::span<const double>(b.controls);
    double sse = 0.0, covered = 0.0;
    VectorXd m(n);
    for (int d = 0; d < n; ++d) {
      double x = td.controls[static_cast<std::size_t>(d)];
      m(d) = lerp_at(grid_x, {curve.mean.data(), static_cast<std::size_t>(b.size())}, x);
      double lo = lerp_at(grid_x, {curve.lower.data(), static_cast<std::size_t>(b.size())}, x);
      double hi = lerp_at(grid_x, {curve.upper.data(), static_cast<std::size_t>(b.size())}, x);
      double r = y(d) - m(d);
      sse += r * r;
      covered += (y(d) >= lo && y(d) <= hi) ? 1.0 : 0.0;
    }
    double ybar = y.mean();
    double sst = (y.array() - ybar).square().sum();

    FunctionMetrics fm;
    fm.test_id = b.test_id;
    fm.component_id = b.component.id;
    fm.n_points = n;
    fm.rmse = std::sqrt(sse / n);
    fm.r2 = 1.0 - sse / sst;
    fm.ec = covered / n;
    out.functions.push_back(std::move(fm));

    pooled_sse += sse;
    pooled_n += n;
    pooled_sum += y.sum();
    pooled_sumsq += y.squaredNorm();
    test_cover[static_cast<std::size_t>(b.t)] += covered;
    test_count[static_cast<std::size_t>(b.t)] += n;
  }

  double gmean = pooled_sum / pooled_n;
  double pooled_sst = pooled_sumsq - pooled_n * gmean * gmean;
  out.r2_total = 1.0 - pooled_sse / pooled_sst;
  out.rmse_total = std::sqrt(pooled_sse / pooled_n);
  double ec = 0.0;
  for (int t = 0; t < n_tests; ++t)
    ec += test_cover[static_cast<std::size_t>(t)] / test_count[static_cast<std::size_t>(t)];
  out.ec_total = ec / n_tests;
  return out;
}

StageMetrics gp_stage_metrics(const gp::MultiGp& posterior, const data::Dataset& ds,
                              const data::FunctionGrid& grid) {
  if (posterior.total != grid.total)
    throw DimensionError("posterior does not match the grid");
  return metrics_from_curves(gp_curves(posterior), ds, grid);
}

StageMetrics model_stage_metrics(const MatrixXd& samples, const data::Dataset& ds,
                                 const data::FunctionGrid& grid, int min_samples) {
  if (samples.rows() != grid.total)
    throw DimensionError("samples do not match the grid length");
  if (samples.cols() < min_samples)
    throw ConfigError("percentile intervals need at least " + std::to_string(min_samples) +
                      " samples");
  return metrics_from_curves(percentile_curves(samples, grid), ds, grid);
}

DiscoveryRun run_discovery(const RunConfig& cfg) {
  RunState st;
  st.cfg = cfg;
  st.paths = make_paths(cfg.out_dir);
  prepare_data(st);
  stage_gp(st);
  stage_distill(st);
  stage_sobol(st);
  stage_refine(st);

  DiscoveryRun run;
  stage_metrics(st, run.metrics);
  run.config = std::move(st.cfg);
  run.dataset = std::move(st.ds);
  run.grid = std::move(st.grid);
  run.posterior = std::move(st.posterior);
  run.flow = std::move(st.flow);
  run.report = std::move(st.report);
  run.reduced = std::move(st.reduced);
  run.flow_refined = std::move(st.flow_refined);
  run.distill_diverged = st.distill_diverged;
  run.refine_diverged = st.refine_diverged;
  return run;
}

DiscoveryRun run_calibration(const RunConfig& cfg) {
  RunState st;
  st.cfg = cfg;
  st.paths = make_paths(cfg.out_dir);
  prepare_data(st);
  stage_gp(st);
  stage_distill(st);

  DiscoveryRun run;
  stage_metrics(st, run.metrics);
  run.config = std::move(st.cfg);
  run.dataset = std::move(st.ds);
  run.grid = std::move(st.grid);
  run.posterior = std::move(st.posterior);
  run.flow = std::move(st.flow);
  run.distill_diverged = st.distill_diverged;
  return run;
}

void execute_stage(const RunConfig& cfg, const std::string& stage) {
  if (stage == "all") {
    run_discovery(cfg);
    return;
  }
  RunState st;
  st.cfg = cfg;
  st.paths = make_paths(cfg.out_dir);
  RunMetrics metrics;
  if (stage == "gp") {
    prepare_data(st);
    stage_gp(st);
  } else if (stage == "distill") {
    load_data(st);
    stage_distill(st);
  } else if (stage == "sobol") {
    load_data(st);
    need_flow(st, "sobol");
    stage_sobol(st);
  } else if (stage == "refine") {
    load_data(st);
    stage_refine(st);
  } else {
    throw ConfigError("unknown stage '" + stage + "'");
  }
  if (fs::exists(st.paths.flow)) need_flow(st, "metrics");
  if (fs::exists(st.paths.flow_refined) && !st.flow_refined.has_value()) {
    need_reduced(st, "metrics");
    st.flow_refined = load_flow(st.paths.flow_refined, "metrics");
  }
  if (fs::exists(st.paths.gp)) need_posterior(st, "metrics");
  stage_metrics(st, metrics);
}

RunMetrics metrics_for_run(const std::string& run_dir) {
  Paths paths = make_paths(run_dir);
  if (!fs::exists(paths.config))
    throw ConfigError("no config.json in run directory " + run_dir);
  RunState st;
  st.cfg = config_from_file(paths.config.string());
  st.cfg.out_dir = run_dir;
  st.paths = paths;
  load_available(st);
  RunMetrics metrics;
  stage_metrics(st, metrics);
  return metrics;
}

void export_plots(const std::string& run_dir) {
  Paths paths = make_paths(run_dir);
  if (!fs::exists(paths.config))
    throw ConfigError("no config.json in run directory " + run_dir);
  RunState st;
  st.cfg = config_from_file(paths.config.string());
  st.cfg.out_dir = run_dir;
  st.paths = paths;
  load_available(st);
  if (!st.posterior.has_value() && !st.flow.has_value())
    throw StageError("export", "run directory has no stage artifacts to plot");
  fs::create_directories(paths.plots);

  const int k = st.cfg.metrics.plot_samples;
  if (st.posterior.has_value()) {
    std::vector<FunctionCurve> curves = gp_curves(*st.posterior);
    Rng rng(derive_seed(st.cfg.seed, "plots-gp"));
    MatrixXd samples = st.posterior->sample_stacked(k, rng);
    for (std::size_t f = 0; f < st.grid.blocks.size(); ++f) {
      const auto& b = st.grid.blocks[f];
      fs::path p = paths.plots /
                   ("gp_" + sanitize(b.test_id) + "_" + sanitize(b.component.id) + ".csv");
      write_curve_csv(p, b.controls, curves[f], samples.middleRows(b.offset, b.size()), 0);
    }
  }

  const flow::FlowModel* final_flow = nullptr;
  const mech::ModelLibrary* final_lib = nullptr;
  if (st.flow_refined.has_value() && st.reduced.has_value()) {
    final_flow = &*st.flow_refined;
    final_lib = &st.reduced->library;
  } else if (st.flow.has_value()) {
    final_flow = &*st.flow;
    final_lib = &st.lib;
  }
  if (final_flow) {
    MatrixXd s = model_function_samples(*final_flow, *final_lib, st.grid,
                                        st.cfg.metrics.interval_samples,
                                        derive_seed(st.cfg.seed, "plots-model"));
    std::vector<FunctionCurve> curves = percentile_curves(s, st.grid);
    for (std::size_t f = 0; f < st.grid.blocks.size(); ++f) {
      const auto& b = st.grid.blocks[f];
      fs::path p = paths.plots / ("model_" + sanitize(b.test_id) + "_" +
                                  sanitize(b.component.id) + ".csv");
      write_curve_csv(p, b.controls, curves[f], s.middleRows(b.offset, b.size()).leftCols(k),
                      0);
    }

    Rng prng(derive_seed(st.cfg.seed, "plots-params"));
    MatrixXd K = final_flow->sample(st.cfg.metrics.parameter_samples, prng);
    auto names = final_lib->kappa_names();
    std::ofstream out(paths.plots / "parameters.csv");
    if (!out.good()) throw StageError("export", "cannot write parameters.csv");
    out << std::setprecision(17);
    for (std::size_t i = 0; i < names.size(); ++i) out << (i ? "," : "") << names[i];
    out << "\n";
    for (int c = 0; c < K.cols(); ++c) {
      for (int r = 0; r < K.rows(); ++r) out << (r ? "," : "") << K(r, c);
      out << "\n";
    }
  }

  if (fs::exists(paths.sobol_curves))
    fs::copy_file(paths.sobol_curves, paths.plots / "sobol_curves.csv",
                  fs::copy_options::overwrite_existing);
}

}  // namespace uqmd::pipe

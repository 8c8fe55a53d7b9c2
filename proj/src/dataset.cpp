#include "uqmd/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace uqmd::data {

namespace {

using nlohmann::json;

std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, const char* what) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = b + s.size();
  auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc{} || res.ptr != e)
    throw ParseError(std::string("bad ") + what + " value '" + s + "'");
  return v;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

void validate_components(const TestSpec& spec) {
  auto expected = mech::observed_components(spec.protocol);
  if (spec.components.size() != expected.size())
    throw ParseError("test '" + spec.id + "' lists " + std::to_string(spec.components.size()) +
                     " components, protocol " + mech::to_string(spec.protocol) + " observes " +
                     std::to_string(expected.size()));
  for (std::size_t q = 0; q < expected.size(); ++q)
    if (spec.components[q].id != expected[q].id)
      throw ParseError("test '" + spec.id + "' component " + std::to_string(q) + " is '" +
                       spec.components[q].id + "', protocol observes '" + expected[q].id + "'");
}

}  // namespace

int Dataset::n_functions() const {
  int n = 0;
  for (const auto& t : tests) n += t.n_components();
  return n;
}

std::vector<std::string> Dataset::component_ids() const {
  std::vector<std::string> ids;
  for (const auto& t : tests)
    for (const auto& c : t.spec.components)
      if (std::find(ids.begin(), ids.end(), c.id) == ids.end()) ids.push_back(c.id);
  return ids;
}

Dataset load_dataset(const std::string& csv_path, const std::string& meta_path) {
  std::ifstream meta_in(meta_path);
  if (!meta_in) throw ParseError("cannot open dataset sidecar '" + meta_path + "'");
  json meta;
  try {
    meta = json::parse(meta_in);
  } catch (const json::exception& e) {
    throw ParseError("sidecar '" + meta_path + "': " + e.what());
  }

  Dataset ds;
  ds.stress_unit = meta.value("stress_unit", std::string("kPa"));
  if (!meta.contains("tests") || !meta["tests"].is_array() || meta["tests"].empty())
    throw ParseError("sidecar '" + meta_path + "' has no tests array");

  std::map<std::string, int> test_index;
  for (const auto& jt : meta["tests"]) {
    TestData td;
    td.spec.id = jt.at("id").get<std::string>();
    td.spec.protocol = mech::protocol_from_string(jt.at("protocol").get<std::string>());
    if (jt.contains("ratio")) {
      auto r = jt["ratio"];
      if (!r.is_array() || r.size() != 2) throw ParseError("ratio must be [lambda_f*, lambda_n*]");
      td.spec.ratio = mech::BtRatio{r[0].get<double>(), r[1].get<double>()};
    }
    if (td.spec.protocol == mech::Protocol::BT && !td.spec.ratio)
      throw ParseError("test '" + td.spec.id + "' uses BT without a ratio");
    if (jt.contains("components")) {
      for (const auto& c : jt["components"])
        td.spec.components.push_back(mech::component_from_string(c.get<std::string>()));
    } else {
      td.spec.components = mech::observed_components(td.spec.protocol);
    }
    validate_components(td.spec);
    if (test_index.count(td.spec.id)) throw ParseError("duplicate test id '" + td.spec.id + "'");
    test_index[td.spec.id] = static_cast<int>(ds.tests.size());
    ds.tests.push_back(std::move(td));
  }

  std::ifstream csv(csv_path);
  if (!csv) throw ParseError("cannot open dataset csv '" + csv_path + "'");
  std::string line;
  if (!std::getline(csv, line)) throw ParseError("dataset csv '" + csv_path + "' is empty");
  auto header = split_csv_line(line);
  if (header.size() < 3 || header[0] != "test_id" || header[1] != "control")
    throw ParseError("csv header must start with test_id,control,stress_...");
  std::map<std::string, int> column_of;
  for (std::size_t c = 2; c < header.size(); ++c) {
    if (header[c].rfind("stress_", 0) != 0)
      throw ParseError("csv column '" + header[c] + "' lacks the stress_ prefix");
    column_of[header[c].substr(7)] = static_cast<int>(c);
  }

  std::vector<std::vector<double>> controls(ds.tests.size());
  std::vector<std::vector<std::vector<double>>> stresses(ds.tests.size());
  int lineno = 1;
  while (std::getline(csv, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError("csv line " + std::to_string(lineno) + " has " +
                       std::to_string(cells.size()) + " cells, header has " +
                       std::to_string(header.size()));
    auto it = test_index.find(cells[0]);
    if (it == test_index.end())
      throw ParseError("csv line " + std::to_string(lineno) + " references unknown test '" +
                       cells[0] + "'");
    TestData& td = ds.tests[static_cast<std::size_t>(it->second)];
    double control = parse_double(cells[1], "control");
    auto& ctl = controls[static_cast<std::size_t>(it->second)];
    if (!ctl.empty() && control <= ctl.back())
      throw ParseError("csv line " + std::to_string(lineno) +
                       ": controls must be strictly increasing within a test");
    ctl.push_back(control);
    std::vector<double> row;
    for (const auto& comp : td.spec.components) {
      auto col = column_of.find(comp.id);
      if (col == column_of.end())
        throw ParseError("csv is missing column stress_" + comp.id + " needed by test '" +
                         td.spec.id + "'");
      const std::string& cell = cells[static_cast<std::size_t>(col->second)];
      if (cell.empty())
        throw ParseError("csv line " + std::to_string(lineno) + ": empty stress_" + comp.id);
      double v = parse_double(cell, "stress");
      if (!std::isfinite(v))
        throw ParseError("csv line " + std::to_string(lineno) + ": non-finite stress_" + comp.id);
      row.push_back(v);
    }
    stresses[static_cast<std::size_t>(it->second)].push_back(std::move(row));
  }

  for (std::size_t t = 0; t < ds.tests.size(); ++t) {
    TestData& td = ds.tests[t];
    if (controls[t].empty()) throw ParseError("test '" + td.spec.id + "' has no csv rows");
    td.controls = controls[t];
    td.stresses.resize(td.n_points(), td.n_components());
    for (int d = 0; d < td.n_points(); ++d)
      for (int q = 0; q < td.n_components(); ++q)
        td.stresses(d, q) = stresses[t][static_cast<std::size_t>(d)][static_cast<std::size_t>(q)];
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& csv_path, const std::string& meta_path) {
  json meta;
  meta["stress_unit"] = ds.stress_unit;
  meta["tests"] = json::array();
  for (const auto& t : ds.tests) {
    json jt;
    jt["id"] = t.spec.id;
    jt["protocol"] = mech::to_string(t.spec.protocol);
    if (t.spec.ratio) jt["ratio"] = {t.spec.ratio->lf, t.spec.ratio->ln};
    jt["components"] = json::array();
    for (const auto& c : t.spec.components) jt["components"].push_back(c.id);
    meta["tests"].push_back(jt);
  }
  std::ofstream meta_out(meta_path);
  if (!meta_out) throw ParseError("cannot write sidecar '" + meta_path + "'");
  meta_out << meta.dump(2) << "\n";

  auto ids = ds.component_ids();
  std::ofstream csv(csv_path);
  if (!csv) throw ParseError("cannot write csv '" + csv_path + "'");
  csv << "test_id,control";
  for (const auto& id : ids) csv << ",stress_" << id;
  csv << "\n";
  for (const auto& t : ds.tests) {
    for (int d = 0; d < t.n_points(); ++d) {
      csv << t.spec.id << "," << format_double(t.controls[static_cast<std::size_t>(d)]);
      for (const auto& id : ids) {
        csv << ",";
        for (int q = 0; q < t.n_components(); ++q)
          if (t.spec.components[static_cast<std::size_t>(q)].id == id)
            csv << format_double(t.stresses(d, q));
      }
      csv << "\n";
    }
  }
}

Dataset synthesize_dataset(const mech::ModelLibrary& lib, const Eigen::VectorXd& kappa,
                           const SynthesisSpec& spec, const ErrorModel& noise,
                           std::uint64_t seed) {
  if (spec.tests.size() != spec.controls.size())
    throw DimensionError("synthesize_dataset: one control vector per test required");
  Rng rng(seed);
  Dataset ds;
  for (std::size_t t = 0; t < spec.tests.size(); ++t) {
    TestData td;
    td.spec = spec.tests[t];
    if (td.spec.components.empty())
      td.spec.components = mech::observed_components(td.spec.protocol);
    validate_components(td.spec);
    td.controls = spec.controls[t];
    if (td.controls.empty()) throw InvalidInputError("synthesize_dataset: empty control vector");
    if (!std::is_sorted(td.controls.begin(), td.controls.end(),
                        [](double a, double b) { return a <= b; }))
      throw InvalidInputError("synthesize_dataset: controls must be strictly increasing");
    td.stresses.resize(td.n_points(), td.n_components());
    auto rule = mech::pressure_rule_for(td.spec.protocol);
    for (int d = 0; d < td.n_points(); ++d) {
      mech::Matrix3 F = td.deformation_at(td.controls[static_cast<std::size_t>(d)]);
      for (int q = 0; q < td.n_components(); ++q) {
        const auto& comp = td.spec.components[static_cast<std::size_t>(q)];
        mech::Matrix3 tensor = comp.measure == mech::StressMeasure::FirstPk
                                   ? mech::stress_first_pk(lib, kappa, F, rule)
                                   : mech::stress_cauchy(lib, kappa, F, rule);
        double clean = tensor(comp.i, comp.j);
        double sd = noise.std_at(clean);
        td.stresses(d, q) = clean + (sd > 0.0 ? sd * rng.normal() : 0.0);
      }
    }
    ds.tests.push_back(std::move(td));
  }
  return ds;
}

FunctionGrid FunctionGrid::build(const Dataset& ds, int points_per_test) {
  return build(ds, std::vector<int>(static_cast<std::size_t>(ds.n_tests()), points_per_test));
}

FunctionGrid FunctionGrid::build(const Dataset& ds, const std::vector<int>& points_per_test) {
  if (static_cast<int>(points_per_test.size()) != ds.n_tests())
    throw DimensionError("FunctionGrid: one point count per test required");
  FunctionGrid grid;
  for (int t = 0; t < ds.n_tests(); ++t) {
    const TestData& td = ds.tests[static_cast<std::size_t>(t)];
    int n = points_per_test[static_cast<std::size_t>(t)];
    if (n < 2) throw ConfigError("FunctionGrid: need at least two grid points per test");
    double lo = td.controls.front(), hi = td.controls.back();
    if (!(hi > lo)) throw ConfigError("FunctionGrid: test '" + td.spec.id + "' control range is degenerate");
    std::vector<double> controls(static_cast<std::size_t>(n));
    for (int s = 0; s < n; ++s)
      controls[static_cast<std::size_t>(s)] = lo + (hi - lo) * s / static_cast<double>(n - 1);
    std::vector<mech::Matrix3> Fs;
    Fs.reserve(controls.size());
    for (double c : controls) Fs.push_back(td.deformation_at(c));
    for (int q = 0; q < td.n_components(); ++q) {
      GridBlock b;
      b.t = t;
      b.q = q;
      b.test_id = td.spec.id;
      b.protocol = td.spec.protocol;
      b.ratio = td.spec.ratio;
      b.component = td.spec.components[static_cast<std::size_t>(q)];
      b.controls = controls;
      b.F = Fs;
      b.gp_inputs.resize(n, mech::deformation_filter_dim(b.component));
      for (int s = 0; s < n; ++s)
        b.gp_inputs.row(s) = mech::deformation_filter(b.component, Fs[static_cast<std::size_t>(s)]);
      b.offset = grid.total;
      grid.total += n;
      grid.blocks.push_back(std::move(b));
    }
  }
  return grid;
}

const GridBlock& FunctionGrid::block(int t, int q) const {
  for (const auto& b : blocks)
    if (b.t == t && b.q == q) return b;
  throw InvalidInputError("FunctionGrid: no block (" + std::to_string(t) + "," +
                          std::to_string(q) + ")");
}

ComponentTrainingSet component_training_set(const Dataset& ds, const std::string& component_id) {
  ComponentTrainingSet set;
  set.component_id = component_id;
  mech::Component comp = mech::component_from_string(component_id);
  std::vector<Eigen::VectorXd> rows;
  std::vector<double> ys;
  for (int t = 0; t < ds.n_tests(); ++t) {
    const TestData& td = ds.tests[static_cast<std::size_t>(t)];
    for (int q = 0; q < td.n_components(); ++q) {
      if (td.spec.components[static_cast<std::size_t>(q)].id != component_id) continue;
      for (int d = 0; d < td.n_points(); ++d) {
        mech::Matrix3 F = td.deformation_at(td.controls[static_cast<std::size_t>(d)]);
        rows.push_back(mech::deformation_filter(comp, F));
        ys.push_back(td.stresses(d, q));
        set.source.emplace_back(t, d);
      }
    }
  }
  if (rows.empty())
    throw InvalidInputError("no test observes component '" + component_id + "'");
  set.X.resize(static_cast<int>(rows.size()), rows.front().size());
  set.y.resize(static_cast<int>(ys.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    set.X.row(static_cast<int>(r)) = rows[r];
    set.y[static_cast<int>(r)] = ys[r];
  }
  return set;
}

}  // namespace uqmd::data

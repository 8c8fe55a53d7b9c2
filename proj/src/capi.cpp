#include "uqmd/uqmd.h"

#include <cstring>
#include <string>

#include "uqmd/pipeline.hpp"

struct uqmd_config {
  uqmd::pipe::RunConfig cfg;
};

namespace {

thread_local std::string g_last_error;

char* copy_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

// Maps the exception taxonomy onto the C status codes. Input and
// configuration problems share a code; anything unrecognized counts as a
// stage failure.
template <typename Fn>
uqmd_status guarded(Fn&& fn) {
  using namespace uqmd;
  try {
    fn();
    g_last_error.clear();
    return UQMD_OK;
  } catch (const ConfigError& e) {
    g_last_error = e.what();
    return UQMD_ERR_CONFIG;
  } catch (const InvalidInputError& e) {
    g_last_error = e.what();
    return UQMD_ERR_CONFIG;
  } catch (const DimensionError& e) {
    g_last_error = e.what();
    return UQMD_ERR_CONFIG;
  } catch (const UnsupportedKinematicsError& e) {
    g_last_error = e.what();
    return UQMD_ERR_CONFIG;
  } catch (const NumericalError& e) {
    g_last_error = e.what();
    return UQMD_ERR_NUMERIC;
  } catch (const StageError& e) {
    g_last_error = e.what();
    return UQMD_ERR_STAGE;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return UQMD_ERR_STAGE;
  }
}

uqmd_status null_argument(const char* what) {
  g_last_error = std::string(what) + " must not be null";
  return UQMD_ERR_CONFIG;
}

}  // namespace

extern "C" {

const char* uqmd_version(void) { return "0.1.0"; }

const char* uqmd_last_error(void) { return g_last_error.c_str(); }

uqmd_status uqmd_config_default(uqmd_config** out) {
  if (!out) return null_argument("out");
  return guarded([&] { *out = new uqmd_config{}; });
}

uqmd_status uqmd_config_preset(const char* name, uqmd_config** out) {
  if (!name) return null_argument("name");
  if (!out) return null_argument("out");
  return guarded([&] { *out = new uqmd_config{uqmd::pipe::preset_config(name)}; });
}

uqmd_status uqmd_config_load(uqmd_config* cfg, const char* json_text) {
  if (!cfg) return null_argument("cfg");
  if (!json_text) return null_argument("json_text");
  return guarded([&] {
    nlohmann::json j = nlohmann::json::parse(json_text, nullptr, false);
    if (j.is_discarded()) throw uqmd::ParseError("malformed JSON config");
    cfg->cfg = uqmd::pipe::config_from_json(j, cfg->cfg);
  });
}

uqmd_status uqmd_config_load_file(uqmd_config* cfg, const char* path) {
  if (!cfg) return null_argument("cfg");
  if (!path) return null_argument("path");
  return guarded([&] { cfg->cfg = uqmd::pipe::config_from_file(path, cfg->cfg); });
}

uqmd_status uqmd_config_set_seed(uqmd_config* cfg, uint64_t seed) {
  if (!cfg) return null_argument("cfg");
  cfg->cfg.seed = seed;
  return UQMD_OK;
}

uqmd_status uqmd_config_set_out_dir(uqmd_config* cfg, const char* dir) {
  if (!cfg) return null_argument("cfg");
  if (!dir) return null_argument("dir");
  cfg->cfg.out_dir = dir;
  return UQMD_OK;
}

uqmd_status uqmd_config_set_threads(uqmd_config* cfg, int threads) {
  if (!cfg) return null_argument("cfg");
  if (threads < 1) {
    g_last_error = "threads must be positive";
    return UQMD_ERR_CONFIG;
  }
  cfg->cfg.threads = threads;
  return UQMD_OK;
}

uqmd_status uqmd_config_out_dir(const uqmd_config* cfg, char** out_dir) {
  if (!cfg) return null_argument("cfg");
  if (!out_dir) return null_argument("out_dir");
  *out_dir = copy_string(cfg->cfg.out_dir);
  return UQMD_OK;
}

uqmd_status uqmd_config_to_json(const uqmd_config* cfg, char** out_text) {
  if (!cfg) return null_argument("cfg");
  if (!out_text) return null_argument("out_text");
  return guarded(
      [&] { *out_text = copy_string(uqmd::pipe::config_to_json(cfg->cfg).dump(2)); });
}

void uqmd_config_free(uqmd_config* cfg) { delete cfg; }

uqmd_status uqmd_discover(const uqmd_config* cfg, const char* stage) {
  if (!cfg) return null_argument("cfg");
  std::string which = stage ? stage : "all";
  return guarded([&] { uqmd::pipe::execute_stage(cfg->cfg, which); });
}

uqmd_status uqmd_calibrate(const uqmd_config* cfg) {
  if (!cfg) return null_argument("cfg");
  return guarded([&] { uqmd::pipe::run_calibration(cfg->cfg); });
}

uqmd_status uqmd_metrics(const char* run_dir, char** out_json) {
  if (!run_dir) return null_argument("run_dir");
  if (!out_json) return null_argument("out_json");
  return guarded([&] {
    uqmd::pipe::RunMetrics m = uqmd::pipe::metrics_for_run(run_dir);
    *out_json = copy_string(uqmd::pipe::metrics_to_json(m).dump(2));
  });
}

uqmd_status uqmd_export_plots(const char* run_dir) {
  if (!run_dir) return null_argument("run_dir");
  return guarded([&] { uqmd::pipe::export_plots(run_dir); });
}

void uqmd_string_free(char* text) { delete[] text; }

}  // extern "C"

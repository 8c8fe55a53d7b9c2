#include <cstdint>
#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "uqmd/uqmd.h"

namespace {

int report(uqmd_status rc) {
  std::fprintf(stderr, "error: %s\n", uqmd_last_error());
  return static_cast<int>(rc);
}

struct CommonFlags {
  std::string config, preset, out;
  std::uint64_t seed = 0;
  int threads = 1;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON config file, merged onto the preset");
  cmd->add_option("--preset", f.preset,
                  "treloar, cardiac-synthetic, cardiac-experimental, desk-isotropic or "
                  "desk-calibration");
  cmd->add_option("--seed", f.seed, "root random seed");
  cmd->add_option("--out", f.out, "run directory (overrides the config)");
  cmd->add_option("--threads", f.threads, "worker threads")->check(CLI::PositiveNumber);
}

// Preset first, then the config file, then single-value flags.
uqmd_status build_config(const CLI::App* cmd, const CommonFlags& f, uqmd_config** out) {
  uqmd_status rc = f.preset.empty() ? uqmd_config_default(out)
                                    : uqmd_config_preset(f.preset.c_str(), out);
  if (rc != UQMD_OK) return rc;
  if (!f.config.empty()) rc = uqmd_config_load_file(*out, f.config.c_str());
  if (rc == UQMD_OK && cmd->count("--seed")) rc = uqmd_config_set_seed(*out, f.seed);
  if (rc == UQMD_OK && !f.out.empty()) rc = uqmd_config_set_out_dir(*out, f.out.c_str());
  if (rc == UQMD_OK && cmd->count("--threads"))
    rc = uqmd_config_set_threads(*out, f.threads);
  return rc;
}

int run_pipeline(const CLI::App* cmd, const CommonFlags& f, const std::string& stage,
                 bool calibrate) {
  if (f.config.empty() && f.preset.empty()) {
    std::fprintf(stderr, "error: provide --config and/or --preset\n");
    return UQMD_ERR_CONFIG;
  }
  uqmd_config* cfg = nullptr;
  uqmd_status rc = build_config(cmd, f, &cfg);
  if (rc == UQMD_OK)
    rc = calibrate ? uqmd_calibrate(cfg) : uqmd_discover(cfg, stage.c_str());
  if (rc != UQMD_OK) {
    uqmd_config_free(cfg);
    return report(rc);
  }
  char* out_dir = nullptr;
  uqmd_config_out_dir(cfg, &out_dir);
  std::printf("%s finished: %s\n", calibrate ? "calibration" : "discovery", out_dir);
  uqmd_string_free(out_dir);
  uqmd_config_free(cfg);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Uncertainty-aware discovery of hyperelastic constitutive models"};
  app.set_version_flag("--version", uqmd_version());
  app.require_subcommand(1);

  CommonFlags flags;
  std::string stage = "all";
  std::string run_dir;

  CLI::App* discover =
      app.add_subcommand("discover", "fit, distill, sparsify and refine a model library");
  add_common(discover, flags);
  discover->add_option("--stage", stage, "gp, distill, sobol, refine or all");

  CLI::App* calibrate =
      app.add_subcommand("calibrate", "posterior fit of a fixed model form");
  add_common(calibrate, flags);

  CLI::App* metrics = app.add_subcommand("metrics", "recompute fit metrics for a run");
  metrics->add_option("--run", run_dir, "run directory")->required();

  CLI::App* plots =
      app.add_subcommand("export-plots", "write curve, parameter and sensitivity CSVs");
  plots->add_option("--run", run_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return UQMD_ERR_CONFIG;
  }

  if (discover->parsed()) return run_pipeline(discover, flags, stage, false);
  if (calibrate->parsed()) return run_pipeline(calibrate, flags, "all", true);
  if (metrics->parsed()) {
    char* text = nullptr;
    uqmd_status rc = uqmd_metrics(run_dir.c_str(), &text);
    if (rc != UQMD_OK) return report(rc);
    std::printf("%s\n", text);
    uqmd_string_free(text);
    return 0;
  }
  if (plots->parsed()) {
    uqmd_status rc = uqmd_export_plots(run_dir.c_str());
    if (rc != UQMD_OK) return report(rc);
    std::printf("plots written: %s/plots\n", run_dir.c_str());
    return 0;
  }
  return UQMD_ERR_CONFIG;
}

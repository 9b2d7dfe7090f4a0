#include "crossmil/experiment.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

namespace {

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
};

void add_common(CLI::App* sub, Common& c, bool needs_config) {
  auto* opt = sub->add_option("--config", c.config, "experiment config (JSON)");
  if (needs_config) opt->required()->check(CLI::ExistingFile);
  sub->add_option("--out", c.out, "output directory")->required();
  sub->add_option("--seed", c.seed, "master seed, overrides the config");
  sub->add_option("--threads", c.threads, "worker threads, overrides the config");
}

crossmil::ExperimentConfig load(const Common& c) {
  auto cfg = crossmil::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.threads) cfg.threads = *c.threads;
  crossmil::validate_config(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"crossmil: multiple-instance transfer learning on synthetic CT domains"};
  app.require_subcommand(1);

  Common gen, ext, run, rep;
  std::string data_dir, features_dir, report_path;

  auto* gen_cmd = app.add_subcommand("gen-data", "generate synthetic cohorts");
  add_common(gen_cmd, gen, true);

  auto* ext_cmd = app.add_subcommand("extract", "fit bin edges and extract bag features");
  add_common(ext_cmd, ext, true);
  ext_cmd->add_option("--data", data_dir, "gen-data output directory")->required();

  auto* run_cmd = app.add_subcommand("run", "run the baseline and transfer grid");
  add_common(run_cmd, run, true);
  run_cmd->add_option("--features", features_dir, "extract output directory")->required();

  auto* rep_cmd = app.add_subcommand("report", "render tables and weight series");
  add_common(rep_cmd, rep, false);
  rep_cmd->add_option("--report", report_path, "report.json from run")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen_cmd) {
      crossmil::cmd_gen_data(load(gen), gen.out);
    } else if (*ext_cmd) {
      crossmil::cmd_extract(load(ext), data_dir, ext.out);
    } else if (*run_cmd) {
      const auto r = crossmil::cmd_run(load(run), features_dir, run.out);
      for (const auto& w : r.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
    } else if (*rep_cmd) {
      crossmil::cmd_report(report_path, rep.out);
    }
  } catch (const crossmil::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const crossmil::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

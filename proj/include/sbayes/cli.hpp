#ifndef SBAYES_CLI_HPP
#define SBAYES_CLI_HPP

#include "sbayes/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace sbayes {

/// Command-line entry point: `sbayes <engine> --config <path> --out <dir> [--seed N] [--threads N]`.
/// Failures print a JSON error record to `err` and return nonzero.
inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Scalable Bayesian inference toolkit"};
  app.require_subcommand(1);
  std::string config, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  for (const auto& name : experiment_engines()) {
    CLI::App* sub = app.add_subcommand(name, "run the " + name + " engine");
    sub->add_option("--config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory (must not exist or be empty)")->required();
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--threads", threads, "worker threads");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }
  const std::string engine = app.get_subcommands().front()->get_name();
  try {
    Json doc = parse_config_json(read_text(config));
    if (!doc.is_object()) throw ConfigError("config root must be a JSON object");
    if (doc.contains("engine") && doc["engine"] != engine)
      throw ConfigError("config engine '" + doc["engine"].dump() + "' does not match subcommand '" + engine + "'");
    doc["engine"] = engine;
    if (seed) doc["seed"] = *seed;
    if (threads) doc["threads"] = *threads;
    const fs::path cp(config);
    const ExperimentConfig cfg = make_experiment_config(std::move(doc), cp.has_parent_path() ? cp.parent_path() : ".");
    run_experiment(cfg, out_dir);
    out << (fs::path(out_dir) / "report.json").string() << '\n';
    return 0;
  } catch (const std::exception& e) {
    err << error_record(e).dump() << '\n';
    return dynamic_cast<const ConfigError*>(&e) ? 2 : 1;
  }
}

}  // namespace sbayes

#endif  // SBAYES_CLI_HPP

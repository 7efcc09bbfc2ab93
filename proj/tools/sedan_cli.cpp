// sedan_cli: train, eval, ablate, export, synth.

#include "sedan/cli.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  using namespace sedan::cli;
  CLI::App app{"Cross-domain time-series forecasting with decomposition-aware adaptation"};
  app.require_subcommand(1);

  std::string config_path, variant, checkpoint, data_path, split = "test", out_path, variants;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  std::size_t length = 0;

  auto* train = app.add_subcommand("train", "fit one variant and save checkpoint, history and metrics");
  train->add_option("--config", config_path, "YAML run configuration");
  train->add_option("--set", overrides, "override, e.g. train.gamma=0.08 (repeatable)");
  train->add_option("--variant", variant, "variant name (overrides the config)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split of a target CSV");
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--data", data_path, "target-domain CSV")->required();
  eval->add_option("--split", split, "train, val or test");
  eval->add_option("--out", out_path, "report path (default: next to the checkpoint)");

  auto* ablate = app.add_subcommand("ablate", "train several variants and tabulate test metrics");
  ablate->add_option("--config", config_path, "YAML run configuration");
  ablate->add_option("--set", overrides, "override (repeatable)");
  ablate->add_option("--variants", variants, "comma-separated variant names")->required();

  auto* exp = app.add_subcommand("export", "write summarized seasonal/trend/reconstructed features as CSV");
  exp->add_option("--checkpoint", checkpoint)->required();
  exp->add_option("--data", data_path, "target-domain CSV")->required();
  exp->add_option("--split", split, "train, val or test");
  exp->add_option("--out", out_path, "output CSV")->required();

  auto* synth = app.add_subcommand("synth", "write a synthetic source/target pair");
  synth->add_option("--seed", seed)->required();
  synth->add_option("--out", out_path, "output directory")->required();
  synth->add_option("--length", length, "rows per domain (default 2000)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  return guarded(
      [&] {
        if (*train) return cmd_train(load_config(config_path, overrides, variant), std::cout);
        if (*eval) return cmd_eval(checkpoint, data_path, split, out_path, std::cout);
        if (*ablate) return cmd_ablate(load_config(config_path, overrides), split_list(variants), std::cout);
        if (*exp) return cmd_export(checkpoint, data_path, split, out_path, std::cout);
        return cmd_synth(seed, out_path, length, std::cout);
      },
      std::cerr);
}

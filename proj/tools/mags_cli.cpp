#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "mags/config.hpp"
#include "mags/error.hpp"
#include "mags/harness.hpp"

namespace {

std::optional<std::filesystem::path> data_root() {
  if (const char* env = std::getenv("MAGS_DATA_ROOT"); env && *env) return std::filesystem::path(env);
  return std::nullopt;
}

mags::ExperimentConfig load(const std::string& path, const std::string& seeds,
                            const std::string& out) {
  auto cfg = mags::load_config(path, data_root());
  if (!seeds.empty()) cfg.seeds = mags::parse_seed_list(seeds);
  if (!out.empty()) cfg.output = out;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fault-tolerant split learning over dynamic device networks"};
  app.require_subcommand(1);

  std::string config, out, seeds, checkpoints;
  std::size_t workers = 1;

  auto* train = app.add_subcommand("train", "train one checkpoint per method variant and seed");
  train->add_option("--config", config, "experiment configuration")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out, "output directory (default: config output/checkpoints)");
  train->add_option("--seeds", seeds, "seed list overriding the config, e.g. 1-4 or 1,3");
  train->add_option("--workers", workers, "parallel runs")->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("eval", "sweep fault kinds, rates and policies");
  eval->add_option("--config", config, "experiment configuration")->required()->check(CLI::ExistingFile);
  eval->add_option("--checkpoints", checkpoints, "checkpoint directory (default: config output/checkpoints)");
  eval->add_option("--out", out, "output directory (default: config output)");
  eval->add_option("--seeds", seeds, "seed list overriding the config");
  eval->add_option("--workers", workers, "parallel cells")->check(CLI::PositiveNumber);

  mags::PropsReportOptions props;
  std::string combiner = "geometric";
  bool quick = false;
  auto* props_cmd = app.add_subcommand("props", "run the property certificates");
  props_cmd->add_option("--seed", props.props.seed, "master seed");
  props_cmd->add_option("--combiner", combiner, "ensemble combiner under test")
      ->check(CLI::IsMember({"geometric", "arithmetic"}));
  props_cmd->add_flag("--quick", quick, "skip the trained-model bound");
  props_cmd->add_flag("--timings", props.show_timings, "append wall time per certificate");

  std::vector<std::string> runs;
  auto* plot = app.add_subcommand("plotdata", "tidy per-figure tables from run CSVs");
  plot->add_option("runs", runs, "runs.csv files")->check(CLI::ExistingFile);
  plot->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) {
      const auto cfg = load(config, seeds, "");
      const auto dir = out.empty() ? cfg.output / "checkpoints" : std::filesystem::path(out);
      const auto summary = mags::cmd_train(cfg, dir, workers, &std::cerr);
      fmt::print("wrote {} checkpoints to {}\n", summary.checkpoints.size(), dir.string());
    } else if (*eval) {
      const auto cfg = load(config, seeds, out);
      const auto dir = checkpoints.empty() ? cfg.output / "checkpoints"
                                           : std::filesystem::path(checkpoints);
      const auto summary = mags::cmd_eval(cfg, dir, cfg.output, workers);
      fmt::print("wrote {} rows to {}\n", summary.records.size(), summary.runs_csv.string());
    } else if (*props_cmd) {
      if (combiner == "arithmetic") props.props.combiner = mags::arithmetic_mean_combiner;
      props.props.include_trained = !quick;
      return mags::cmd_props(props, std::cout);
    } else if (*plot) {
      for (const auto& p : mags::cmd_plotdata({runs.begin(), runs.end()}, out)) {
        fmt::print("{}\n", p.string());
      }
    }
  } catch (const mags::ConfigError& e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 0;
}

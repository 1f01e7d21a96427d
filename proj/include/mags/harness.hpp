#pragma once

// Experiment driver behind the `mags` command line: training runs per
// (method variant, seed), evaluation sweeps, the certificate report and
// plot-ready tables.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mags/certificates.hpp"
#include "mags/config.hpp"
#include "mags/datasets.hpp"

namespace mags {

inline constexpr const char* kRunsSchema = "# mags-runs v1";
inline constexpr const char* kRunsColumns =
    "method,graph,fault,rate,policy,seed,accuracy,stderr,comm,empty_active,samples";
inline constexpr const char* kAggregateColumns =
    "method,graph,fault,rate,policy,seeds,mean,std,comm";
inline constexpr const char* kPlotSchema = "# mags-plot v1";

// The train pool (before the train/validation split) and the test set.
struct ExperimentData {
  Dataset train_pool;
  Dataset test;
  PartitionSpec partition;
};
ExperimentData load_experiment_data(const ExperimentConfig& cfg);

std::string checkpoint_name(const std::string& variant, std::uint64_t seed);

// Runs tasks 0..n-1 on `workers` threads; the first exception (by task
// index) is rethrown after all workers finish.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& task);

struct TrainSummary {
  std::vector<std::filesystem::path> checkpoints;
};

// One checkpoint and one learning-curve CSV per (variant, seed) in out_dir;
// wall times go to train_timings.csv.
TrainSummary cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                       std::size_t workers = 1, std::ostream* log = nullptr);

struct RunRecord {
  std::string method;
  std::string graph;
  std::string fault;
  double rate = 0.0;
  std::string policy;
  std::uint64_t seed = 0;
  double accuracy = 0.0;  // NaN when undefined (best/worst with one aggregator)
  double standard_error = 0.0;
  double comm = 0.0;
  double empty_active = 0.0;
  std::size_t samples = 0;
};

struct EvalSummary {
  std::vector<RunRecord> records;
  std::filesystem::path runs_csv;
  std::filesystem::path aggregate_csv;
};

// Sweeps methods x fault kinds x rates x policies x seeds over the
// checkpoints in ckpt_dir. Writes runs.csv, aggregate.csv and
// eval_timings.csv to out_dir; nothing is written when a checkpoint is
// missing or does not match the configuration.
EvalSummary cmd_eval(const ExperimentConfig& cfg, const std::filesystem::path& ckpt_dir,
                     const std::filesystem::path& out_dir, std::size_t workers = 1);

void write_runs_csv(std::ostream& out, const std::vector<RunRecord>& records);
std::vector<RunRecord> read_runs_csv(std::istream& in, const std::string& source_name);
// Mean and population std of accuracy over seeds per (method, graph,
// fault, rate, policy), in first-appearance order.
void write_aggregate_csv(std::ostream& out, const std::vector<RunRecord>& records);

struct PropsReportOptions {
  PropsOptions props;
  bool show_timings = false;
};
// Writes one "PASS|FAIL name: detail" line per certificate; returns the
// process exit status (0 iff every certificate passed).
int cmd_props(const PropsReportOptions& options, std::ostream& out);

// fig_<graph>_<fault>.csv per panel (method,policy,x,y,err), plus
// table_accuracy.csv and table_comm.csv. Returns the files written.
std::vector<std::filesystem::path> cmd_plotdata(const std::vector<std::filesystem::path>& runs,
                                                const std::filesystem::path& out_dir);

}  // namespace mags

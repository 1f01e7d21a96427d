#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mags/faults.hpp"
#include "mags/metrics.hpp"
#include "mags/topology.hpp"
#include "mags/training.hpp"

namespace mags {

// A method name such as "VFL", "PD-VFL", "MACL", "4-MACL-G2" or
// "CD-MACL-G4": optional dropout prefix, the aggregator layout (VFL: one
// server, K-MACL: K aggregators, MACL: every device) and an optional gossip
// suffix that only matters at evaluation time.
struct MethodSpec {
  DropoutKind dropout = DropoutKind::none;
  bool vfl = false;
  std::optional<std::size_t> aggregator_count;  // K-MACL; empty for MACL
  std::size_t gossip_rounds = 0;

  static MethodSpec parse(const std::string& name);
  std::string name() const;
  // The trained model this method evaluates (name without the -G suffix).
  std::string variant() const;
  std::size_t resolved_aggregators(std::size_t devices) const;
};

struct DatasetConfig {
  enum class Source { synthetic, idx } source = Source::synthetic;
  // synthetic
  std::size_t train_size = 8000;
  std::size_t test_size = 2000;
  std::size_t classes = 10;
  double sigma = 0.3;
  std::uint64_t seed = 7;
  // idx; relative paths resolve against the dataset root
  std::filesystem::path train_images;
  std::filesystem::path train_labels;
  std::filesystem::path test_images;
  std::filesystem::path test_labels;
  std::size_t train_limit = 0;  // 0 = all rows
  std::size_t test_limit = 0;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  std::size_t grid_side = 4;
  GraphSpec graph;
  std::uint64_t graph_seed = 0;
  AggregatorChoice aggregator_choice = AggregatorChoice::lowest;
  std::size_t server_device = 0;  // VFL aggregator
  std::vector<MethodSpec> methods;
  TrainConfig train;           // seed and dropout kind are set per run
  double dropout_rate = 0.3;   // for PD-/CD- methods
  std::vector<FaultKind> fault_kinds;
  std::vector<double> fault_rates;
  double stay_alive = 0.9;
  std::size_t burn_in = 100;
  std::vector<SelectionPolicy> policies;
  std::size_t eval_trials = 1;
  std::size_t eval_batch_size = 64;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path output = "out";

  std::size_t device_count() const { return grid_side * grid_side; }
  // Throws ConfigError on any invalid combination.
  void validate() const;
  // Training configuration of one (variant, seed) run.
  TrainConfig train_config(const MethodSpec& method, std::uint64_t seed) const;
  FaultModel fault_model(FaultKind kind, double rate) const;
  DeviceGraph graph_for(const MethodSpec& method) const;
};

// Sectioned YAML; see docs/config.md. Errors carry "<file>:<line>: ...".
// Relative dataset paths resolve against `data_root` (when given) and must
// exist.
ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::optional<std::filesystem::path>& data_root = {});
ExperimentConfig parse_config(const std::string& text, const std::string& source_name,
                              const std::optional<std::filesystem::path>& data_root = {});

// "1,2,5-8" -> {1,2,5,6,7,8}
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

}  // namespace mags

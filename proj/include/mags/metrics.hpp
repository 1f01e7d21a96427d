#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mags/datasets.hpp"
#include "mags/faults.hpp"
#include "mags/inference.hpp"
#include "mags/rng.hpp"
#include "mags/topology.hpp"

namespace mags {

enum class SelectionPolicy { active_rand, active_best, active_worst, any_rand };

inline constexpr std::array<SelectionPolicy, 4> kAllPolicies{
    SelectionPolicy::active_rand, SelectionPolicy::active_best, SelectionPolicy::active_worst,
    SelectionPolicy::any_rand};

std::string to_string(SelectionPolicy p);
SelectionPolicy parse_policy(const std::string& text);

// The random inputs of one selection: `pick` in [0,1) chooses the device
// (active_rand: floor(pick*|A|)-th active aggregator; any_rand:
// floor(pick*C)-th device) and `fallback_class` is the uniform guess used
// when no prediction can be delivered. Sharing one draw across policies
// evaluates them on common random numbers.
struct SelectionDraw {
  double pick = 0.0;
  int fallback_class = 0;

  static SelectionDraw sample(Rng& rng, std::size_t classes);
};

struct Selection {
  int predicted = 0;
  bool correct = false;
};

// predicted_class[slot] is the argmax of aggregator `slot` (-1 when it holds
// no prediction); `active` lists aggregator slots.
Selection select(SelectionPolicy policy, std::span<const int> predicted_class,
                 std::span<const std::size_t> active, std::span<const std::size_t> aggregators,
                 std::size_t device_count, int label, const SelectionDraw& draw);
Selection select(SelectionPolicy policy, std::span<const int> predicted_class,
                 std::span<const std::size_t> active, std::span<const std::size_t> aggregators,
                 std::size_t device_count, int label, std::size_t classes, Rng& rng);

// Messages of one inference. Aggregation and every gossip round count one
// message per alive directed non-self edge c -> k into each alive
// aggregator k (any alive base neighbor c, aggregator or not). The final hop
// to the entity is not counted.
struct CommCount {
  std::size_t aggregation = 0;
  std::vector<std::size_t> gossip;

  std::size_t total() const;
};

// rounds[0] is the aggregation round, rounds[g] gossip round g.
CommCount count_comm(std::span<const RealizedGraph> rounds,
                     std::span<const std::size_t> aggregators, std::size_t gossip_rounds);

// Accuracy of every policy on one (model, fault model, G, seed) cell. The
// test set is traversed `trials` times in batches; each batch shares one
// realized trace. All four policies see the same inference and the same
// selection draw per sample.
struct CellResult {
  std::array<double, 4> accuracy{};  // indexed like kAllPolicies
  // Standard error of each accuracy from the spread of per-batch means
  // (samples within a batch share one realization).
  std::array<double, 4> standard_error{};
  double comm_mean = 0.0;
  double empty_active_fraction = 0.0;  // share of samples with |A| = 0
  std::size_t samples = 0;

  double of(SelectionPolicy p) const { return accuracy[static_cast<std::size_t>(p)]; }
};

// Streams: faults from derive(seed, "fault/<kind>/<rate>"), selection from
// derive(seed, "select/<kind>/<rate>"); neither depends on G or the model.
CellResult evaluate_cell(const SplitModel& model, const ClientDataset& test,
                         const DeviceGraph& base, const FaultModel& faults,
                         std::size_t gossip_rounds, std::uint64_t seed,
                         std::size_t batch_size = 64, std::size_t trials = 1);

struct RiskEstimate {
  SelectionPolicy policy = SelectionPolicy::active_rand;
  double mean = 0.0;  // mean accuracy over seeds
  double std = 0.0;   // population std over seeds
  std::size_t samples = 0;  // per seed
  std::size_t seeds = 0;
  FaultModel faults;
};

RiskEstimate estimate_risk(const SplitModel& model, const ClientDataset& test,
                           const DeviceGraph& base, const FaultModel& faults,
                           SelectionPolicy policy, std::size_t gossip_rounds,
                           std::size_t trials, std::span<const std::uint64_t> seeds);

// Combines member log-probability vectors into an (unnormalized) ensemble
// log-probability vector.
using Combiner = std::function<std::vector<double>(std::span<const std::vector<double>>)>;
std::vector<double> geometric_mean_combiner(std::span<const std::vector<double>> members);
std::vector<double> arithmetic_mean_combiner(std::span<const std::vector<double>> members);

struct EnsembleDecomposition {
  double ensemble_loss = 0.0;
  double mean_member_loss = 0.0;
  double diversity = 0.0;  // (1/K) sum_k KL(ensemble || member_k)
  double log_partition = 0.0;
  std::vector<double> ensemble_log_probs;

  // |ensemble_loss - (mean_member_loss - diversity)|
  double residual() const;
};

// Members are normalized log-probability vectors; label is the true class.
EnsembleDecomposition ensemble_decomposition(std::span<const std::vector<double>> members,
                                             std::size_t label,
                                             const Combiner& combiner = geometric_mean_combiner);

struct Prop1Report {
  double rate = 0.0;
  std::size_t aggregators = 0;
  double catastrophic_weight = 0.0;  // r^K
  double clean_error = 0.0;
  double faulted_error = 0.0;
  double uniform_error = 0.0;        // 1 - 1/classes
  double bound = 0.0;                // (1-r^K) clean + r^K uniform
  double sigma = 0.0;                // Monte Carlo std of faulted_error
  bool holds = false;                // faulted_error >= bound - 3 sigma
};

// Risk is 0-1 error under Active Rand (or `policy`) with device faults.
Prop1Report prop1_certificate(const SplitModel& model, const ClientDataset& test,
                              const DeviceGraph& base, double rate, std::size_t trials,
                              std::uint64_t seed,
                              SelectionPolicy policy = SelectionPolicy::active_rand);

}  // namespace mags

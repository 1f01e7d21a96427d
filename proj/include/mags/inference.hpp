#pragma once

// Distributed inference over a (possibly faulted) device network: client
// encoders, zero-imputed concatenation at aggregators, prediction heads and
// gossip rounds that average log-probabilities between aggregators.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "mags/faults.hpp"
#include "mags/nn.hpp"
#include "mags/rng.hpp"
#include "mags/topology.hpp"

namespace mags {

struct Architecture {
  std::vector<std::size_t> encoder_dims;  // {|S_c|, ..., rep_dim}
  std::vector<std::size_t> head_dims;     // {C * rep_dim, ..., classes}
};

// Per-client-count layouts: 4 clients {196,64,16 | 64,64,10}, 16 clients
// {49,16,4 | 64,64,10}, 49 clients {16,4,2 | 98,98,10}. Other layouts get
// encoder {d, 16, 4} and head {4C, 4C, classes}.
Architecture default_architecture(std::size_t client_count, std::size_t features_per_client,
                                  std::size_t classes);

// The distributed parameters: one encoder per client (always ending in
// ReLU), one head per aggregator. heads[slot] belongs to device
// aggregators[slot].
struct SplitModel {
  std::vector<MlpParams> encoders;
  std::vector<MlpParams> heads;
  std::vector<std::size_t> aggregators;
  std::size_t classes = 0;

  std::size_t client_count() const { return encoders.size(); }
  std::size_t aggregator_count() const { return heads.size(); }
  std::size_t rep_dim() const { return encoders.front().out_dim(); }
  // Throws ConfigError when shapes are inconsistent.
  void validate() const;

  bool operator==(const SplitModel&) const = default;
};

// Encoders are drawn first (clients ascending), then heads (slots ascending).
SplitModel init_split_model(const Architecture& arch, std::size_t client_count,
                            std::vector<std::size_t> aggregators, Rng& rng);

// Per-client representation batches; nullopt for dead clients.
using Representations = std::vector<std::optional<Matrix>>;

// views[c] is a B x |S_c| batch for client c.
Representations client_encode(const SplitModel& model, std::span<const Matrix> views,
                              const RealizedGraph& realized);

// B x (C * rep_dim) head input for aggregator device k: slot c holds client
// c's representation iff c is alive and the message c -> k got through,
// otherwise zeros. Throws ConfigError when k is dead.
Matrix aggregate(const Representations& reps, const RealizedGraph& realized,
                 std::size_t aggregator_device, std::size_t rep_dim);

// Head forward followed by row-wise log-softmax.
Matrix aggregator_head(const SplitModel& model, std::size_t slot, const Matrix& aggregated);

// Per aggregator slot, a B x classes log-probability batch; nullopt when the
// aggregator holds no value.
struct PredictionState {
  std::vector<std::optional<Matrix>> log_probs;

  std::size_t holders() const;
};

// Every aggregator that holds a value and is alive replaces it with the
// arithmetic mean of the values of alive holding aggregators it receives
// from, itself included. Others are left untouched.
PredictionState gossip_round(const PredictionState& state, const RealizedGraph& realized,
                             std::span<const std::size_t> aggregators);

struct InferenceResult {
  PredictionState initial;          // after the heads (t = 1)
  PredictionState final_log_probs;  // after G rounds, renormalized per row
  std::vector<RealizedGraph> trace; // rounds t = 1..G+1
};

// Runs encode + aggregate + heads on trace[0] and gossip round g on
// trace[g]. trace.size() must be G + 1.
InferenceResult mags_infer(const SplitModel& model, std::span<const Matrix> views,
                           std::vector<RealizedGraph> trace, std::size_t gossip_rounds);

// Draws the trace from the fault process first.
InferenceResult mags_infer(const SplitModel& model, std::span<const Matrix> views,
                           FaultProcess& faults, std::size_t gossip_rounds);

// Renormalize each row: v - logsumexp(v).
Matrix renormalize_rows(const Matrix& log_values);

// CSV rows "t,aggregator,log_probs" for sample `row` of an inference: t = 1
// holds head outputs, t = 2..G+1 the state after each gossip round
// (unnormalized, as exchanged). Aggregators are 1-based device ids and the
// vector is ';'-joined.
void write_inference_trace(std::ostream& out, const SplitModel& model,
                           std::span<const Matrix> views, std::span<const RealizedGraph> trace,
                           std::size_t row);

}  // namespace mags

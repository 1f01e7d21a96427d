#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mags/datasets.hpp"
#include "mags/faults.hpp"
#include "mags/inference.hpp"
#include "mags/nn.hpp"
#include "mags/rng.hpp"
#include "mags/topology.hpp"

namespace mags {

enum class DropoutKind { none, party, communication };

struct DropoutSpec {
  DropoutKind kind = DropoutKind::none;
  double rate = 0.3;
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  AdamConfig adam;
  DropoutSpec dropout;
  FaultModel train_faults;            // real faults during training, default none
  std::size_t train_gossip_rounds = 0; // gossip inside the training forward; 0 = off
  std::uint64_t seed = 1;

  void validate() const;
  // Canonical one-line "key=value ..." rendering; hashed into checkpoints.
  std::string echo() const;
};

// keep[c] for each client; a dropped client is zeroed for every aggregator,
// its own head included. One uniform per client.
std::vector<std::uint8_t> apply_pd_mask(std::size_t clients, double rate, Rng& rng);

// Which client slots each aggregator's concatenation receives.
class SlotMask {
 public:
  SlotMask(std::size_t aggregators, std::size_t clients)
      : aggregators_(aggregators), clients_(clients), keep_(aggregators * clients, 1) {}

  std::size_t aggregators() const { return aggregators_; }
  std::size_t clients() const { return clients_; }
  bool keep(std::size_t slot, std::size_t client) const { return keep_[slot * clients_ + client]; }
  void set(std::size_t slot, std::size_t client, bool keep) {
    keep_[slot * clients_ + client] = keep ? 1 : 0;
  }
  std::size_t dropped() const;

 private:
  std::size_t aggregators_;
  std::size_t clients_;
  std::vector<std::uint8_t> keep_;
};

// Each (aggregator, client != aggregator device) slot dropped w.p. rate,
// one uniform per slot in (slot, client) order. Self slots always kept.
SlotMask apply_cd_mask(std::span<const std::size_t> aggregators, std::size_t clients,
                       double rate, Rng& rng);

// Slot availability implied by a realized graph, plus which heads are alive.
struct BatchRealization {
  SlotMask slots;
  std::vector<std::uint8_t> head_alive;
};
BatchRealization realization_mask(const RealizedGraph& realized,
                                  std::span<const std::size_t> aggregators);

// K x K row-stochastic matrix of `rounds` gossip rounds among alive heads
// over the realized graph (identity when rounds == 0).
Matrix gossip_mixing(const RealizedGraph& realized, std::span<const std::size_t> aggregators,
                     std::span<const std::uint8_t> head_alive, std::size_t rounds);

struct SplitObjective {
  double loss = 0.0;  // mean over the batch of the summed per-head losses
  SplitModel grads;   // same layout as the model
};

// Summed cross-entropy of every alive head, with zero imputation of masked
// slots and exact gradients through concatenation into every encoder.
// `mixing` (optional) applies gossip to head log-probabilities first.
SplitObjective split_loss_and_grad(const SplitModel& model, std::span<const Matrix> views,
                                   std::span<const int> labels, const SlotMask& slots,
                                   std::span<const std::uint8_t> head_alive,
                                   const Matrix* mixing = nullptr);

struct OptimizerStates {
  std::vector<AdamState> encoders;
  std::vector<AdamState> heads;

  static OptimizerStates for_model(const SplitModel& model, AdamConfig config);
};

struct TrainStreams {
  Rng data;
  Rng dropout;
  FaultProcess faults;

  // data = "data", dropout = "dropout", faults = "fault/train".
  static TrainStreams from_seed(std::uint64_t seed, const DeviceGraph& base,
                                const FaultModel& train_faults);
};

// Batch visiting order of one epoch: a permutation from the data stream.
std::vector<std::size_t> epoch_order(std::size_t n, Rng& data_stream);

// One pass over `data`; returns the mean batch loss.
double train_epoch(SplitModel& model, OptimizerStates& optim, const ClientDataset& data,
                   const DeviceGraph& base, const TrainConfig& cfg, TrainStreams& streams);

// Fault-free validation loss (summed over heads, averaged over samples) and
// mean per-head accuracy.
struct ValidationResult {
  double loss = 0.0;
  double accuracy = 0.0;
};
ValidationResult validate_model(const SplitModel& model, const ClientDataset& data,
                                const DeviceGraph& base, std::size_t batch_size = 256);

struct Checkpoint {
  SplitModel model;
  std::string config_echo;
  double best_val_loss = 0.0;
  std::size_t best_epoch = 0;

  bool operator==(const Checkpoint&) const = default;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

// Parameters are rounded to 32-bit floats when snapshotted so a saved and
// reloaded checkpoint is identical to the in-memory one.
Checkpoint fit(const TrainConfig& cfg, const ClientDataset& train, const ClientDataset& val,
               const DeviceGraph& base, const Architecture& arch,
               const std::function<void(const EpochRecord&)>& on_epoch = {});

// Text manifest (shapes, config echo and hash) terminated by a "data" line,
// then little-endian float32 parameters: encoders by client, then heads by
// slot, each layer weight (row-major) then bias.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void write_curve_header(std::ostream& out);
void write_curve_row(std::ostream& out, const EpochRecord& rec);

}  // namespace mags

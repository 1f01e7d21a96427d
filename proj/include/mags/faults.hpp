#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mags/rng.hpp"
#include "mags/topology.hpp"

namespace mags {

enum class FaultKind { none, device, communication, markov_communication };

std::string to_string(FaultKind kind);
FaultKind parse_fault_kind(const std::string& text);

struct FaultModel {
  FaultKind kind = FaultKind::none;
  double rate = 0.0;
  double stay_alive = 0.9;  // Markov p
  // Markov steps taken from the all-alive initial state before the first
  // inference, so evaluation starts near the stationary fault rate.
  std::size_t burn_in = 100;

  // Markov recovery probability q = (1-p)(1-r)/r; 1 when r == 0.
  double recover_probability() const;
  // Throws ConfigError when r is outside [0,1] or q is outside [0,1].
  void validate() const;
};

// One time step of the dynamic network. Directed edge state is stored as
// receives(receiver, sender): the message sender -> receiver got through.
class RealizedGraph {
 public:
  RealizedGraph() = default;
  // Fault-free realization of the base graph.
  static RealizedGraph intact(const DeviceGraph& base, std::size_t t = 0);

  std::size_t time() const { return t_; }
  std::size_t device_count() const { return c_; }

  bool device_alive(std::size_t d) const { return device_alive_[d] != 0; }
  bool receives(std::size_t receiver, std::size_t sender) const {
    return edge_alive_[receiver * c_ + sender] != 0;
  }
  // Link from device d to the external entity (only meaningful for aggregators).
  bool entity_link(std::size_t d) const { return entity_link_[d] != 0; }

  std::size_t alive_device_count() const;
  std::vector<std::size_t> alive_devices() const;

  void set_time(std::size_t t) { t_ = t; }
  void kill_device(std::size_t d);
  void cut(std::size_t receiver, std::size_t sender);
  void cut_entity_link(std::size_t d) { entity_link_[d] = 0; }

  bool operator==(const RealizedGraph&) const = default;

 private:
  std::size_t t_ = 0;
  std::size_t c_ = 0;
  std::vector<std::uint8_t> device_alive_;
  std::vector<std::uint8_t> edge_alive_;
  std::vector<std::uint8_t> entity_link_;
};

// Each device alive independently with probability 1-r; an edge survives iff
// both endpoints do. The entity never faults, so an alive aggregator keeps
// its entity link. Draw order: one uniform per device, ascending.
RealizedGraph sample_device_faults(const DeviceGraph& base, double rate, Rng& rng);

// All devices alive; every non-self directed base edge, and every
// aggregator's entity link, alive independently with probability 1-r.
// Draw order: receivers ascending, senders ascending, then entity links of
// every device ascending (devices that are not aggregators still consume a
// draw so realizations do not depend on K).
RealizedGraph sample_comm_faults(const DeviceGraph& base, double rate, Rng& rng);

// Alive/faulted state of every non-self directed base edge plus one entity
// link per device, in the sample_comm_faults draw order.
class MarkovLinkState {
 public:
  static MarkovLinkState initial(const DeviceGraph& base);

  std::size_t link_count() const { return alive_.size(); }
  std::size_t faulted_count() const;
  std::span<const std::uint8_t> alive() const { return alive_; }

  RealizedGraph realize(const DeviceGraph& base, std::size_t t = 0) const;

 private:
  friend MarkovLinkState markov_step(const MarkovLinkState&, const FaultModel&, Rng&);
  std::vector<std::uint8_t> alive_;
};

// Alive links stay alive w.p. p, faulted links recover w.p. q. One uniform
// per link. Requires model.kind == markov_communication.
MarkovLinkState markov_step(const MarkovLinkState& state, const FaultModel& model, Rng& rng);

// Positions in `aggregators` of the aggregators that are alive and whose
// entity link is alive.
std::vector<std::size_t> active_set(const RealizedGraph& realized,
                                    std::span<const std::size_t> aggregators);

// Stateful sampler producing the realized graphs for one inference (or one
// training batch): rounds t = 1..rounds. i.i.d. kinds draw once and hold the
// realization for every round; the Markov kind advances one step per round
// and carries its link state across calls.
class FaultProcess {
 public:
  FaultProcess(const DeviceGraph& base, FaultModel model, Rng rng);

  std::vector<RealizedGraph> next(std::size_t rounds);
  const FaultModel& model() const { return model_; }

 private:
  const DeviceGraph* base_;
  FaultModel model_;
  Rng rng_;
  MarkovLinkState markov_;
};

// CSV rows "t,kind,entity,alive". Devices are "d<id>", links "<src>-><dst>"
// with 1-based device ids and 0 for the entity. Only base-graph elements are
// listed.
void write_fault_trace_header(std::ostream& out);
void write_fault_trace(std::ostream& out, const DeviceGraph& base,
                       std::span<const RealizedGraph> rounds);

}  // namespace mags

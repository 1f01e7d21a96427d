#include "mags/faults.hpp"

#include <ostream>

#include <fmt/format.h>

#include "mags/error.hpp"

namespace mags {

std::string to_string(FaultKind kind) {
  switch (kind) {
    case FaultKind::none: return "none";
    case FaultKind::device: return "device";
    case FaultKind::communication: return "communication";
    case FaultKind::markov_communication: return "markov";
  }
  return "unknown";
}

FaultKind parse_fault_kind(const std::string& text) {
  if (text == "none") return FaultKind::none;
  if (text == "device") return FaultKind::device;
  if (text == "communication" || text == "comm") return FaultKind::communication;
  if (text == "markov" || text == "markov_comm") return FaultKind::markov_communication;
  throw ConfigError(fmt::format("unknown fault kind '{}'", text));
}

double FaultModel::recover_probability() const {
  if (rate == 0.0) return 1.0;
  return (1.0 - stay_alive) * (1.0 - rate) / rate;
}

void FaultModel::validate() const {
  if (!(rate >= 0.0 && rate <= 1.0)) {
    throw ConfigError(fmt::format("fault rate {} outside [0, 1]", rate));
  }
  if (kind == FaultKind::markov_communication) {
    if (!(stay_alive >= 0.0 && stay_alive <= 1.0)) {
      throw ConfigError(fmt::format("stay-alive probability {} outside [0, 1]", stay_alive));
    }
    const double q = recover_probability();
    if (!(q >= 0.0 && q <= 1.0)) {
      throw ConfigError(fmt::format(
          "Markov recovery probability q = {} outside [0, 1] (rate {}, stay-alive {})", q, rate,
          stay_alive));
    }
  }
}

RealizedGraph RealizedGraph::intact(const DeviceGraph& base, std::size_t t) {
  RealizedGraph g;
  g.t_ = t;
  g.c_ = base.device_count();
  g.device_alive_.assign(g.c_, 1);
  g.edge_alive_.assign(g.c_ * g.c_, 0);
  for (std::size_t i = 0; i < g.c_; ++i) {
    for (std::size_t j = 0; j < g.c_; ++j) g.edge_alive_[i * g.c_ + j] = base.adjacent(i, j);
  }
  g.entity_link_.assign(g.c_, 0);
  for (std::size_t a : base.aggregators()) g.entity_link_[a] = 1;
  return g;
}

std::size_t RealizedGraph::alive_device_count() const {
  std::size_t n = 0;
  for (auto a : device_alive_) n += a;
  return n;
}

std::vector<std::size_t> RealizedGraph::alive_devices() const {
  std::vector<std::size_t> out;
  for (std::size_t d = 0; d < c_; ++d) {
    if (device_alive_[d]) out.push_back(d);
  }
  return out;
}

void RealizedGraph::kill_device(std::size_t d) {
  device_alive_[d] = 0;
  for (std::size_t j = 0; j < c_; ++j) {
    edge_alive_[d * c_ + j] = 0;
    edge_alive_[j * c_ + d] = 0;
  }
  entity_link_[d] = 0;
}

void RealizedGraph::cut(std::size_t receiver, std::size_t sender) {
  if (receiver == sender) throw ConfigError("self-loops never fault");
  edge_alive_[receiver * c_ + sender] = 0;
}

RealizedGraph sample_device_faults(const DeviceGraph& base, double rate, Rng& rng) {
  RealizedGraph g = RealizedGraph::intact(base);
  for (std::size_t d = 0; d < base.device_count(); ++d) {
    if (rng.uniform() < rate) g.kill_device(d);
  }
  return g;
}

RealizedGraph sample_comm_faults(const DeviceGraph& base, double rate, Rng& rng) {
  RealizedGraph g = RealizedGraph::intact(base);
  const std::size_t c = base.device_count();
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t s = 0; s < c; ++s) {
      if (s == k || !base.adjacent(k, s)) continue;
      if (rng.uniform() < rate) g.cut(k, s);
    }
  }
  for (std::size_t d = 0; d < c; ++d) {
    const bool faulted = rng.uniform() < rate;
    if (faulted) g.cut_entity_link(d);
  }
  return g;
}

MarkovLinkState MarkovLinkState::initial(const DeviceGraph& base) {
  const std::size_t c = base.device_count();
  std::size_t links = c;  // entity links
  for (std::size_t k = 0; k < c; ++k) links += base.degree(k) - 1;
  MarkovLinkState s;
  s.alive_.assign(links, 1);
  return s;
}

std::size_t MarkovLinkState::faulted_count() const {
  std::size_t n = 0;
  for (auto a : alive_) n += a ? 0 : 1;
  return n;
}

RealizedGraph MarkovLinkState::realize(const DeviceGraph& base, std::size_t t) const {
  RealizedGraph g = RealizedGraph::intact(base, t);
  const std::size_t c = base.device_count();
  std::size_t i = 0;
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t s = 0; s < c; ++s) {
      if (s == k || !base.adjacent(k, s)) continue;
      if (!alive_[i++]) g.cut(k, s);
    }
  }
  for (std::size_t d = 0; d < c; ++d) {
    if (!alive_[i++]) g.cut_entity_link(d);
  }
  return g;
}

MarkovLinkState markov_step(const MarkovLinkState& state, const FaultModel& model, Rng& rng) {
  if (model.kind != FaultKind::markov_communication) {
    throw ConfigError("markov_step requires a markov fault model");
  }
  model.validate();
  const double p = model.rate == 0.0 ? 1.0 : model.stay_alive;
  const double q = model.recover_probability();
  MarkovLinkState next = state;
  for (auto& a : next.alive_) {
    const double u = rng.uniform();
    a = a ? (u < p) : (u < q);
  }
  return next;
}

std::vector<std::size_t> active_set(const RealizedGraph& realized,
                                    std::span<const std::size_t> aggregators) {
  std::vector<std::size_t> out;
  for (std::size_t slot = 0; slot < aggregators.size(); ++slot) {
    const std::size_t d = aggregators[slot];
    if (realized.device_alive(d) && realized.entity_link(d)) out.push_back(slot);
  }
  return out;
}

FaultProcess::FaultProcess(const DeviceGraph& base, FaultModel model, Rng rng)
    : base_(&base), model_(model), rng_(std::move(rng)) {
  model_.validate();
  if (model_.kind == FaultKind::markov_communication) {
    markov_ = MarkovLinkState::initial(base);
    for (std::size_t i = 0; i < model_.burn_in; ++i) markov_ = markov_step(markov_, model_, rng_);
  }
}

std::vector<RealizedGraph> FaultProcess::next(std::size_t rounds) {
  std::vector<RealizedGraph> out;
  out.reserve(rounds);
  if (model_.kind == FaultKind::markov_communication) {
    for (std::size_t t = 1; t <= rounds; ++t) {
      markov_ = markov_step(markov_, model_, rng_);
      out.push_back(markov_.realize(*base_, t));
    }
    return out;
  }
  RealizedGraph g;
  switch (model_.kind) {
    case FaultKind::device: g = sample_device_faults(*base_, model_.rate, rng_); break;
    case FaultKind::communication: g = sample_comm_faults(*base_, model_.rate, rng_); break;
    default: g = RealizedGraph::intact(*base_); break;
  }
  for (std::size_t t = 1; t <= rounds; ++t) {
    g.set_time(t);
    out.push_back(g);
  }
  return out;
}

void write_fault_trace_header(std::ostream& out) { out << "t,kind,entity,alive\n"; }

void write_fault_trace(std::ostream& out, const DeviceGraph& base,
                       std::span<const RealizedGraph> rounds) {
  const std::size_t c = base.device_count();
  for (const auto& g : rounds) {
    for (std::size_t d = 0; d < c; ++d) {
      out << fmt::format("{},device,d{},{}\n", g.time(), d + 1, g.device_alive(d) ? 1 : 0);
    }
    for (std::size_t k = 0; k < c; ++k) {
      for (std::size_t s = 0; s < c; ++s) {
        if (s == k || !base.adjacent(k, s)) continue;
        out << fmt::format("{},link,{}->{},{}\n", g.time(), s + 1, k + 1,
                           g.receives(k, s) ? 1 : 0);
      }
    }
    for (std::size_t a : base.aggregators()) {
      out << fmt::format("{},link,{}->0,{}\n", g.time(), a + 1, g.entity_link(a) ? 1 : 0);
    }
  }
}

}  // namespace mags

#include "mags/inference.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "mags/error.hpp"

namespace mags {

Architecture default_architecture(std::size_t client_count, std::size_t features_per_client,
                                  std::size_t classes) {
  const std::size_t d = features_per_client;
  if (client_count == 4 && d == 196) return {{196, 64, 16}, {64, 64, classes}};
  if (client_count == 16 && d == 49) return {{49, 16, 4}, {64, 64, classes}};
  if (client_count == 49 && d == 16) return {{16, 4, 2}, {98, 98, classes}};
  return {{d, 16, 4}, {4 * client_count, 4 * client_count, classes}};
}

void SplitModel::validate() const {
  if (encoders.empty()) throw ConfigError("model has no client encoders");
  if (heads.empty() || heads.size() != aggregators.size()) {
    throw ConfigError("model heads do not match aggregator list");
  }
  const std::size_t rep = encoders.front().out_dim();
  for (std::size_t c = 0; c < encoders.size(); ++c) {
    encoders[c].validate();
    if (encoders[c].out_dim() != rep) {
      throw ConfigError(fmt::format("encoder {} emits {} features, expected {}", c,
                                    encoders[c].out_dim(), rep));
    }
  }
  for (std::size_t k = 0; k < heads.size(); ++k) {
    heads[k].validate();
    if (heads[k].in_dim() != encoders.size() * rep) {
      throw ConfigError(fmt::format("head {} expects {} inputs, expected C*rep = {}", k,
                                    heads[k].in_dim(), encoders.size() * rep));
    }
    if (heads[k].out_dim() != classes) {
      throw ConfigError(fmt::format("head {} has {} outputs, expected {}", k,
                                    heads[k].out_dim(), classes));
    }
    if (aggregators[k] >= encoders.size()) {
      throw ConfigError(fmt::format("aggregator device {} out of range", aggregators[k]));
    }
  }
}

SplitModel init_split_model(const Architecture& arch, std::size_t client_count,
                            std::vector<std::size_t> aggregators, Rng& rng) {
  if (arch.head_dims.front() != client_count * arch.encoder_dims.back()) {
    throw ConfigError(fmt::format("head input {} != clients {} x rep dim {}",
                                  arch.head_dims.front(), client_count,
                                  arch.encoder_dims.back()));
  }
  SplitModel m;
  m.classes = arch.head_dims.back();
  for (std::size_t c = 0; c < client_count; ++c) {
    m.encoders.push_back(init_mlp(arch.encoder_dims, true, rng));
  }
  for (std::size_t k = 0; k < aggregators.size(); ++k) {
    m.heads.push_back(init_mlp(arch.head_dims, false, rng));
  }
  m.aggregators = std::move(aggregators);
  m.validate();
  return m;
}

Representations client_encode(const SplitModel& model, std::span<const Matrix> views,
                              const RealizedGraph& realized) {
  if (views.size() != model.client_count()) {
    throw ConfigError(fmt::format("{} client views for {} clients", views.size(),
                                  model.client_count()));
  }
  Representations reps(views.size());
  for (std::size_t c = 0; c < views.size(); ++c) {
    if (realized.device_alive(c)) reps[c] = mlp_apply(model.encoders[c], views[c]);
  }
  return reps;
}

Matrix aggregate(const Representations& reps, const RealizedGraph& realized,
                 std::size_t aggregator_device, std::size_t rep_dim) {
  if (!realized.device_alive(aggregator_device)) {
    throw ConfigError(fmt::format("aggregate: aggregator {} is dead", aggregator_device));
  }
  std::size_t batch = 0;
  for (const auto& r : reps) {
    if (r) batch = r->rows();
  }
  Matrix out(batch, reps.size() * rep_dim);
  for (std::size_t c = 0; c < reps.size(); ++c) {
    if (!reps[c] || !realized.device_alive(c) || !realized.receives(aggregator_device, c)) {
      continue;
    }
    const Matrix& z = *reps[c];
    if (z.cols() != rep_dim || z.rows() != batch) {
      throw ConfigError("aggregate: representation shape mismatch");
    }
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy(z.row(b).begin(), z.row(b).end(), out.row(b).begin() + c * rep_dim);
    }
  }
  return out;
}

Matrix aggregator_head(const SplitModel& model, std::size_t slot, const Matrix& aggregated) {
  return log_softmax_rows(mlp_apply(model.heads.at(slot), aggregated));
}

std::size_t PredictionState::holders() const {
  return static_cast<std::size_t>(
      std::count_if(log_probs.begin(), log_probs.end(), [](const auto& m) { return m.has_value(); }));
}

PredictionState gossip_round(const PredictionState& state, const RealizedGraph& realized,
                             std::span<const std::size_t> aggregators) {
  PredictionState next = state;
  const std::size_t k_count = aggregators.size();
  auto participates = [&](std::size_t slot) {
    return state.log_probs[slot].has_value() && realized.device_alive(aggregators[slot]);
  };
  for (std::size_t k = 0; k < k_count; ++k) {
    if (!participates(k)) continue;
    Matrix sum = *state.log_probs[k];
    double count = 1.0;
    for (std::size_t j = 0; j < k_count; ++j) {
      if (j == k || !participates(j) || !realized.receives(aggregators[k], aggregators[j])) {
        continue;
      }
      auto dst = sum.values();
      auto src = state.log_probs[j]->values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      count += 1.0;
    }
    if (count > 1.0) {
      const double inv = 1.0 / count;
      for (double& v : sum.values()) v *= inv;
    }
    next.log_probs[k] = std::move(sum);
  }
  return next;
}

Matrix renormalize_rows(const Matrix& log_values) { return log_softmax_rows(log_values); }

namespace {

PredictionState heads_state(const SplitModel& model, std::span<const Matrix> views,
                            const RealizedGraph& realized) {
  const Representations reps = client_encode(model, views, realized);
  PredictionState state;
  state.log_probs.resize(model.aggregator_count());
  for (std::size_t k = 0; k < model.aggregator_count(); ++k) {
    const std::size_t dev = model.aggregators[k];
    if (!realized.device_alive(dev)) continue;
    state.log_probs[k] =
        aggregator_head(model, k, aggregate(reps, realized, dev, model.rep_dim()));
  }
  return state;
}

}  // namespace

InferenceResult mags_infer(const SplitModel& model, std::span<const Matrix> views,
                           std::vector<RealizedGraph> trace, std::size_t gossip_rounds) {
  if (trace.size() != gossip_rounds + 1) {
    throw ConfigError(fmt::format("trace has {} rounds, expected G+1 = {}", trace.size(),
                                  gossip_rounds + 1));
  }
  InferenceResult result;
  result.initial = heads_state(model, views, trace.front());
  PredictionState state = result.initial;
  for (std::size_t g = 1; g <= gossip_rounds; ++g) {
    state = gossip_round(state, trace[g], model.aggregators);
  }
  const RealizedGraph& last = trace.back();
  for (std::size_t k = 0; k < state.log_probs.size(); ++k) {
    auto& lp = state.log_probs[k];
    if (!lp) continue;
    if (!last.device_alive(model.aggregators[k])) {
      lp.reset();
      continue;
    }
    if (gossip_rounds > 0) lp = renormalize_rows(*lp);
  }
  result.final_log_probs = std::move(state);
  result.trace = std::move(trace);
  return result;
}

InferenceResult mags_infer(const SplitModel& model, std::span<const Matrix> views,
                           FaultProcess& faults, std::size_t gossip_rounds) {
  return mags_infer(model, views, faults.next(gossip_rounds + 1), gossip_rounds);
}

void write_inference_trace(std::ostream& out, const SplitModel& model,
                           std::span<const Matrix> views, std::span<const RealizedGraph> trace,
                           std::size_t row) {
  if (trace.empty()) throw ConfigError("empty inference trace");
  auto emit = [&](std::size_t t, const PredictionState& s) {
    for (std::size_t k = 0; k < s.log_probs.size(); ++k) {
      if (!s.log_probs[k]) continue;
      out << fmt::format("{},{},{:.17g}\n", t, model.aggregators[k] + 1,
                         fmt::join(s.log_probs[k]->row(row), ";"));
    }
  };
  PredictionState state = heads_state(model, views, trace.front());
  emit(1, state);
  for (std::size_t g = 1; g < trace.size(); ++g) {
    state = gossip_round(state, trace[g], model.aggregators);
    emit(g + 1, state);
  }
}

}  // namespace mags

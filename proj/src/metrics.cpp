#include "mags/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

#include "mags/error.hpp"

namespace mags {

std::string to_string(SelectionPolicy p) {
  switch (p) {
    case SelectionPolicy::active_rand: return "active_rand";
    case SelectionPolicy::active_best: return "active_best";
    case SelectionPolicy::active_worst: return "active_worst";
    case SelectionPolicy::any_rand: return "any_rand";
  }
  return "unknown";
}

SelectionPolicy parse_policy(const std::string& text) {
  for (auto p : kAllPolicies) {
    if (to_string(p) == text) return p;
  }
  throw ConfigError(fmt::format("unknown selection policy '{}'", text));
}

SelectionDraw SelectionDraw::sample(Rng& rng, std::size_t classes) {
  SelectionDraw d;
  d.pick = rng.uniform();
  d.fallback_class = static_cast<int>(rng.below(classes));
  return d;
}

namespace {

std::size_t scaled_index(double pick, std::size_t n) {
  return std::min(n - 1, static_cast<std::size_t>(pick * static_cast<double>(n)));
}

Selection fallback(int label, const SelectionDraw& draw) {
  return {draw.fallback_class, draw.fallback_class == label};
}

}  // namespace

Selection select(SelectionPolicy policy, std::span<const int> predicted_class,
                 std::span<const std::size_t> active, std::span<const std::size_t> aggregators,
                 std::size_t device_count, int label, const SelectionDraw& draw) {
  switch (policy) {
    case SelectionPolicy::active_rand: {
      if (active.empty()) return fallback(label, draw);
      const int p = predicted_class[active[scaled_index(draw.pick, active.size())]];
      return {p, p == label};
    }
    case SelectionPolicy::active_best: {
      if (active.empty()) return fallback(label, draw);
      for (std::size_t k : active) {
        if (predicted_class[k] == label) return {label, true};
      }
      return {predicted_class[active.front()], false};
    }
    case SelectionPolicy::active_worst: {
      if (active.empty()) return fallback(label, draw);
      for (std::size_t k : active) {
        if (predicted_class[k] != label) return {predicted_class[k], false};
      }
      return {label, true};
    }
    case SelectionPolicy::any_rand: {
      const std::size_t device = scaled_index(draw.pick, device_count);
      for (std::size_t k : active) {
        if (aggregators[k] == device) {
          const int p = predicted_class[k];
          return {p, p == label};
        }
      }
      return fallback(label, draw);
    }
  }
  return fallback(label, draw);
}

Selection select(SelectionPolicy policy, std::span<const int> predicted_class,
                 std::span<const std::size_t> active, std::span<const std::size_t> aggregators,
                 std::size_t device_count, int label, std::size_t classes, Rng& rng) {
  return select(policy, predicted_class, active, aggregators, device_count, label,
                SelectionDraw::sample(rng, classes));
}

std::size_t CommCount::total() const {
  return std::accumulate(gossip.begin(), gossip.end(), aggregation);
}

CommCount count_comm(std::span<const RealizedGraph> rounds,
                     std::span<const std::size_t> aggregators, std::size_t gossip_rounds) {
  if (rounds.size() < gossip_rounds + 1) {
    throw ConfigError(fmt::format("count_comm: {} rounds realized, need {}", rounds.size(),
                                  gossip_rounds + 1));
  }
  auto count_round = [&](const RealizedGraph& g) {
    std::size_t n = 0;
    for (std::size_t k : aggregators) {
      if (!g.device_alive(k)) continue;
      for (std::size_t c = 0; c < g.device_count(); ++c) {
        if (c != k && g.device_alive(c) && g.receives(k, c)) ++n;
      }
    }
    return n;
  };
  CommCount cc;
  cc.aggregation = count_round(rounds[0]);
  for (std::size_t g = 1; g <= gossip_rounds; ++g) cc.gossip.push_back(count_round(rounds[g]));
  return cc;
}

CellResult evaluate_cell(const SplitModel& model, const ClientDataset& test,
                         const DeviceGraph& base, const FaultModel& faults,
                         std::size_t gossip_rounds, std::uint64_t seed, std::size_t batch_size,
                         std::size_t trials) {
  if (trials < 1) throw ConfigError("evaluate_cell: trials must be >= 1");
  if (batch_size < 1) throw ConfigError("evaluate_cell: batch size must be >= 1");
  if (test.client_count() != model.client_count()) {
    throw ConfigError("evaluate_cell: test data client count does not match model");
  }
  const std::string cell = fmt::format("{}/{:g}", to_string(faults.kind), faults.rate);
  FaultProcess process(base, faults, derive_stream(seed, "fault/" + cell));
  Rng select_rng = derive_stream(seed, "select/" + cell);

  CellResult res;
  std::array<double, 4> correct{};
  std::vector<std::array<double, 4>> batch_means;
  double comm_sum = 0.0;
  double empty = 0.0;
  std::vector<std::size_t> rows;
  std::vector<int> argmax(model.aggregator_count());
  const std::size_t n = test.size();
  for (std::size_t trial = 0; trial < trials; ++trial) {
    for (std::size_t start = 0; start < n; start += batch_size) {
      const std::size_t end = std::min(n, start + batch_size);
      rows.resize(end - start);
      std::iota(rows.begin(), rows.end(), start);
      const auto views = gather_rows(test, rows);
      const InferenceResult inf = mags_infer(model, views, process, gossip_rounds);
      const auto active = active_set(inf.trace.back(), model.aggregators);
      const double comm =
          static_cast<double>(count_comm(inf.trace, model.aggregators, gossip_rounds).total());
      std::array<double, 4> batch_correct{};
      for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t k = 0; k < argmax.size(); ++k) {
          const auto& lp = inf.final_log_probs.log_probs[k];
          if (!lp) {
            argmax[k] = -1;
            continue;
          }
          auto r = lp->row(i);
          argmax[k] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
        }
        const int label = test.labels[rows[i]];
        const SelectionDraw draw = SelectionDraw::sample(select_rng, model.classes);
        for (std::size_t p = 0; p < kAllPolicies.size(); ++p) {
          const Selection s = select(kAllPolicies[p], argmax, active, model.aggregators,
                                     model.client_count(), label, draw);
          batch_correct[p] += s.correct ? 1.0 : 0.0;
        }
      }
      const double b = static_cast<double>(rows.size());
      std::array<double, 4> mean{};
      for (std::size_t p = 0; p < 4; ++p) {
        correct[p] += batch_correct[p];
        mean[p] = batch_correct[p] / b;
      }
      batch_means.push_back(mean);
      comm_sum += comm * b;
      if (active.empty()) empty += b;
      res.samples += rows.size();
    }
  }
  const double total = static_cast<double>(res.samples);
  const double nb = static_cast<double>(batch_means.size());
  for (std::size_t p = 0; p < 4; ++p) {
    res.accuracy[p] = correct[p] / total;
    if (batch_means.size() > 1) {
      double ss = 0.0;
      for (const auto& m : batch_means) ss += (m[p] - res.accuracy[p]) * (m[p] - res.accuracy[p]);
      res.standard_error[p] = std::sqrt(ss / (nb - 1.0) / nb);
    }
  }
  res.comm_mean = comm_sum / total;
  res.empty_active_fraction = empty / total;
  return res;
}

RiskEstimate estimate_risk(const SplitModel& model, const ClientDataset& test,
                           const DeviceGraph& base, const FaultModel& faults,
                           SelectionPolicy policy, std::size_t gossip_rounds,
                           std::size_t trials, std::span<const std::uint64_t> seeds) {
  if (seeds.empty()) throw ConfigError("estimate_risk: no seeds");
  RiskEstimate est;
  est.policy = policy;
  est.faults = faults;
  est.seeds = seeds.size();
  std::vector<double> acc;
  for (std::uint64_t s : seeds) {
    const CellResult cell = evaluate_cell(model, test, base, faults, gossip_rounds, s, 64, trials);
    acc.push_back(cell.of(policy));
    est.samples = cell.samples;
  }
  est.mean = std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(acc.size());
  double ss = 0.0;
  for (double a : acc) ss += (a - est.mean) * (a - est.mean);
  est.std = std::sqrt(ss / static_cast<double>(acc.size()));
  return est;
}

std::vector<double> geometric_mean_combiner(std::span<const std::vector<double>> members) {
  std::vector<double> out(members.front().size(), 0.0);
  for (const auto& m : members) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += m[i];
  }
  for (double& v : out) v /= static_cast<double>(members.size());
  return out;
}

std::vector<double> arithmetic_mean_combiner(std::span<const std::vector<double>> members) {
  std::vector<double> out(members.front().size(), 0.0);
  for (const auto& m : members) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += std::exp(m[i]);
  }
  for (double& v : out) v = std::log(v / static_cast<double>(members.size()));
  return out;
}

double EnsembleDecomposition::residual() const {
  return std::abs(ensemble_loss - (mean_member_loss - diversity));
}

EnsembleDecomposition ensemble_decomposition(std::span<const std::vector<double>> members,
                                             std::size_t label, const Combiner& combiner) {
  if (members.empty()) throw ConfigError("ensemble_decomposition: no members");
  const std::size_t classes = members.front().size();
  if (label >= classes) throw InputError("ensemble_decomposition: label out of range");
  for (const auto& m : members) {
    if (m.size() != classes) throw ConfigError("ensemble_decomposition: ragged members");
  }
  EnsembleDecomposition d;
  const std::vector<double> combined = combiner(members);
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : combined) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : combined) z += std::exp(v - mx);
  d.log_partition = mx + std::log(z);
  d.ensemble_log_probs.resize(classes);
  for (std::size_t i = 0; i < classes; ++i) d.ensemble_log_probs[i] = combined[i] - d.log_partition;

  d.ensemble_loss = -d.ensemble_log_probs[label];
  const double inv_k = 1.0 / static_cast<double>(members.size());
  for (const auto& m : members) {
    d.mean_member_loss -= m[label] * inv_k;
    double kl = 0.0;
    for (std::size_t i = 0; i < classes; ++i) {
      const double e = d.ensemble_log_probs[i];
      kl += std::exp(e) * (e - m[i]);
    }
    d.diversity += kl * inv_k;
  }
  return d;
}

Prop1Report prop1_certificate(const SplitModel& model, const ClientDataset& test,
                              const DeviceGraph& base, double rate, std::size_t trials,
                              std::uint64_t seed, SelectionPolicy policy) {
  Prop1Report r;
  r.rate = rate;
  r.aggregators = model.aggregator_count();
  r.catastrophic_weight = std::pow(rate, static_cast<double>(r.aggregators));
  r.uniform_error = 1.0 - 1.0 / static_cast<double>(model.classes);
  const auto pi = static_cast<std::size_t>(policy);

  const CellResult clean = evaluate_cell(model, test, base, FaultModel{}, 0, seed, 64, 1);
  const CellResult faulted =
      evaluate_cell(model, test, base, FaultModel{FaultKind::device, rate}, 0, seed, 1, trials);
  r.clean_error = 1.0 - clean.accuracy[pi];
  r.faulted_error = 1.0 - faulted.accuracy[pi];
  r.bound = (1.0 - r.catastrophic_weight) * r.clean_error +
            r.catastrophic_weight * r.uniform_error;
  const double w = 1.0 - r.catastrophic_weight;
  r.sigma = std::sqrt(faulted.standard_error[pi] * faulted.standard_error[pi] +
                      w * w * clean.standard_error[pi] * clean.standard_error[pi]);
  r.holds = r.faulted_error >= r.bound - 3.0 * r.sigma;
  return r;
}

}  // namespace mags

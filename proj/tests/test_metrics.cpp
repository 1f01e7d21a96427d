#include <doctest.h>

#include <cmath>

#include "mags/certificates.hpp"
#include "mags/metrics.hpp"
#include "mags/training.hpp"
#include "oracles.hpp"

using namespace mags;

namespace {

struct Trained {
  ClientDataset test;
  DeviceGraph graph;
  Checkpoint ck;
};

// Four clients on a complete graph, four aggregators, noise-free data.
const Trained& trained() {
  static const Trained t = [] {
    const Dataset all = synth_dataset(900, 4, 2, 5, 0.0);
    std::vector<std::size_t> tr(600), te(300);
    for (std::size_t i = 0; i < 600; ++i) tr[i] = i;
    for (std::size_t i = 0; i < 300; ++i) te[i] = 600 + i;
    const PartitionSpec p = split_patches(all, 2);
    const DataSplits s = make_splits(subset(all, tr), 1);
    const auto g = build_graph({GraphKind::complete}, 4, 4);
    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.batch_size = 32;
    cfg.adam.lr = 3e-3;
    cfg.dropout = {DropoutKind::communication, 0.3};
    const Checkpoint ck = fit(cfg, make_client_dataset(s.train, p), make_client_dataset(s.validation, p), g,
                              Architecture{{196, 16, 4}, {16, 16, 4}});
    return Trained{make_client_dataset(subset(all, te), p), g, ck};
  }();
  return t;
}

std::vector<double> probs_to_log(std::vector<double> p) {
  for (double& v : p) v = std::log(v);
  return p;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("every policy is correct when all active aggregators are") {
  const std::vector<int> pred{2, 2, 2};
  const std::vector<std::size_t> active{0, 1, 2}, aggs{0, 1, 2};
  Rng rng(1);
  for (auto p : kAllPolicies) {
    for (int i = 0; i < 100; ++i) CHECK(select(p, pred, active, aggs, 3, 2, 5, rng).correct);
  }
}

TEST_CASE("oracle policies and random selection on a split pair") {
  const std::vector<int> pred{1, 0};
  const std::vector<std::size_t> active{0, 1}, aggs{0, 1};
  Rng rng(2);
  CHECK(select(SelectionPolicy::active_best, pred, active, aggs, 2, 1, 3, rng).correct);
  CHECK(!select(SelectionPolicy::active_worst, pred, active, aggs, 2, 1, 3, rng).correct);
  const int n = 100000;
  int hits = 0;
  for (int i = 0; i < n; ++i) hits += select(SelectionPolicy::active_rand, pred, active, aggs, 2, 1, 3, rng).correct;
  CHECK(oracle::within_3_sigma(static_cast<double>(hits) / n, 0.5, n));
}

TEST_CASE("empty active set falls back to a uniform guess") {
  const std::vector<int> pred{-1, -1};
  const std::vector<std::size_t> active, aggs{0, 1};
  Rng rng(3);
  const int n = 100000;
  for (auto p : kAllPolicies) {
    int hits = 0;
    for (int i = 0; i < n; ++i) hits += select(p, pred, active, aggs, 4, 3, 10, rng).correct;
    CHECK(oracle::within_3_sigma(static_cast<double>(hits) / n, 0.1, n));
  }
}

TEST_CASE("any_rand only counts active aggregator devices") {
  const std::vector<int> pred{1};
  const std::vector<std::size_t> active{0}, aggs{2};
  // pick 0.6 of 4 devices -> device 2, the aggregator.
  CHECK(select(SelectionPolicy::any_rand, pred, active, aggs, 4, 1, SelectionDraw{0.6, 0}).correct);
  // pick 0.1 -> device 0, not an aggregator: fallback class 0 is wrong.
  CHECK(!select(SelectionPolicy::any_rand, pred, active, aggs, 4, 1, SelectionDraw{0.1, 0}).correct);
}

TEST_CASE("policy names") {
  for (auto p : kAllPolicies) CHECK(parse_policy(to_string(p)) == p);
}

TEST_CASE("communication counts") {
  const auto vfl = build_graph({GraphKind::complete}, 16, 1);
  CHECK(count_comm(std::vector<RealizedGraph>{RealizedGraph::intact(vfl)}, vfl.aggregators(), 0).total() == 15);

  auto mc = [](std::size_t k, std::size_t g) {
    const auto base = build_graph({GraphKind::complete}, 16, k);
    FaultProcess faults(base, {FaultKind::communication, 0.3}, Rng(17));
    const int n = 4000;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const auto trace = faults.next(g + 1);
      const double c = static_cast<double>(count_comm(trace, base.aggregators(), g).total());
      sum += c;
      sum2 += c * c;
    }
    const double mean = sum / n;
    return std::make_pair(mean, std::sqrt((sum2 / n - mean * mean) / n));
  };
  const auto macl = mc(16, 0);
  CHECK(std::abs(macl.first - 168.0) <= 3.0 * macl.second);
  const auto g2 = mc(4, 2);
  CHECK(std::abs(g2.first - 126.0) <= 3.0 * g2.second);
}

TEST_CASE("ensemble decomposition worked example") {
  const std::vector<std::vector<double>> members{probs_to_log({0.8, 0.2}), probs_to_log({0.2, 0.8})};
  const auto d = ensemble_decomposition(members, 0);
  CHECK(std::exp(d.ensemble_log_probs[0]) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(d.mean_member_loss == doctest::Approx(0.91629).epsilon(1e-5));
  CHECK(d.diversity == doctest::Approx(0.22314).epsilon(1e-5));
  CHECK(d.ensemble_loss == doctest::Approx(0.69315).epsilon(1e-5));
  CHECK(d.log_partition == doctest::Approx(std::log(0.8)).epsilon(1e-14));
  CHECK(d.residual() < 1e-12);
}

TEST_CASE("identical members have zero diversity") {
  const std::vector<std::vector<double>> members(3, probs_to_log({0.1, 0.6, 0.3}));
  const auto d = ensemble_decomposition(members, 1);
  CHECK(std::abs(d.diversity) < 1e-15);
  CHECK(d.ensemble_loss == doctest::Approx(-std::log(0.6)).epsilon(1e-14));
}

TEST_CASE("ensemble identity suite and its arithmetic-mean mutant") {
  CHECK(ensemble_identity_certificate(1, 2000, {2, 4, 16}, 10, 1e-9).passed);
  CHECK(!ensemble_identity_certificate(1, 2000, {2, 4, 16}, 10, 1e-9, arithmetic_mean_combiner).passed);
}

TEST_CASE("conditional selection frequency is 1/K") {
  CHECK(selection_lemma_certificate(3, 200000, {0.3, 0.5}, {2, 4}).passed);
}

TEST_CASE("untrained uniform heads score chance under every policy") {
  Rng rng(4);
  const Dataset ds = synth_dataset(2000, 10, 4, 1, 0.3);
  const ClientDataset test = make_client_dataset(ds, split_patches(ds, 4));
  const auto g = build_graph({GraphKind::complete}, 16, 4);
  SplitModel m = init_split_model(default_architecture(16, 49, 10), 16, g.aggregators(), rng);
  for (auto& h : m.heads) h = zeros_like(h);
  for (auto kind : {FaultKind::none, FaultKind::communication}) {
    const CellResult c = evaluate_cell(m, test, g, {kind, 0.3}, 0, 1);
    for (auto p : kAllPolicies) {
      CAPTURE(to_string(p));
      CHECK(oracle::within_3_sigma(c.of(p), 0.1, 2000));
    }
  }
}

TEST_CASE("a perfect model scores 1 on clean data") {
  const auto& t = trained();
  const CellResult c = evaluate_cell(t.ck.model, t.test, t.graph, {}, 0, 1);
  for (auto p : kAllPolicies) CHECK(c.of(p) == 1.0);
  const std::vector<std::uint64_t> seeds{1, 2};
  const auto est = estimate_risk(t.ck.model, t.test, t.graph, {}, SelectionPolicy::active_rand, 2, 1, seeds);
  CHECK(est.mean == 1.0);
  CHECK(est.std == 0.0);
}

TEST_CASE("oracle ordering on a trained model") {
  const auto& t = trained();
  for (auto kind : {FaultKind::device, FaultKind::communication, FaultKind::markov_communication}) {
    for (double r : {0.3, 0.5}) {
      for (std::size_t g : {0u, 2u}) {
        const CellResult c = evaluate_cell(t.ck.model, t.test, t.graph, {kind, r}, g, 3);
        CHECK(c.of(SelectionPolicy::active_best) >= c.of(SelectionPolicy::active_rand));
        CHECK(c.of(SelectionPolicy::active_rand) >= c.of(SelectionPolicy::active_worst));
      }
    }
  }
}

TEST_CASE("cells are reproducible and G does not change the fault draws") {
  const auto& t = trained();
  const FaultModel f{FaultKind::device, 0.5};
  const CellResult a = evaluate_cell(t.ck.model, t.test, t.graph, f, 0, 7);
  const CellResult b = evaluate_cell(t.ck.model, t.test, t.graph, f, 0, 7);
  CHECK(a.accuracy == b.accuracy);
  // Device faults hold for all rounds, so the empty-active share is G-independent.
  const CellResult g4 = evaluate_cell(t.ck.model, t.test, t.graph, f, 4, 7);
  CHECK(a.empty_active_fraction == g4.empty_active_fraction);
}

TEST_CASE("gossip ensembling does not increase the log loss") {
  const auto& t = trained();
  const auto views = t.test.views;
  const SplitModel& m = t.ck.model;
  const auto g0 = mags_infer(m, views, {RealizedGraph::intact(t.graph)}, 0);
  const auto g3 = mags_infer(m, views, std::vector<RealizedGraph>(4, RealizedGraph::intact(t.graph)), 3);
  double member = 0.0, ensemble = 0.0;
  for (std::size_t i = 0; i < t.test.size(); ++i) {
    const auto y = static_cast<std::size_t>(t.test.labels[i]);
    for (std::size_t k = 0; k < 4; ++k) member -= (*g0.final_log_probs.log_probs[k])(i, y) / 4.0;
    ensemble -= (*g3.final_log_probs.log_probs[0])(i, y);
  }
  CHECK(ensemble <= member + 1e-12);
}

TEST_CASE("risk lower bound report") {
  const auto& t = trained();
  const auto zero = prop1_certificate(t.ck.model, t.test, t.graph, 0.0, 1, 1);
  CHECK(zero.catastrophic_weight == 0.0);
  CHECK(zero.bound == zero.clean_error);
  const auto one = prop1_certificate(t.ck.model, t.test, t.graph, 1.0, 1, 1);
  CHECK(one.bound == doctest::Approx(1.0 - 1.0 / 4.0));
  CHECK(one.faulted_error == doctest::Approx(0.75).epsilon(0.1));
  const auto mid = prop1_certificate(t.ck.model, t.test, t.graph, 0.3, 4, 1);
  CHECK(mid.catastrophic_weight == doctest::Approx(0.0081).epsilon(1e-12));
  CHECK(mid.holds);
}

}

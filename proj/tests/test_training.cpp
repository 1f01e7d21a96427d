#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "mags/error.hpp"
#include "mags/training.hpp"
#include "oracles.hpp"

using namespace mags;

namespace {

std::vector<Matrix> random_views(std::size_t clients, std::size_t batch, std::size_t d, Rng& rng) {
  std::vector<Matrix> v(clients, Matrix(batch, d));
  for (auto& m : v) {
    for (double& e : m.values()) e = rng.uniform();
  }
  return v;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("mags_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

struct SmallTask {
  ClientDataset train, val;
  DeviceGraph graph;
  Architecture arch;
};

// Synthetic images on a 2x2 client grid.
SmallTask small_task(double sigma, std::size_t n, std::size_t aggregators) {
  const Dataset ds = synth_dataset(n, 4, 2, 3, sigma);
  const DataSplits s = make_splits(ds, 1);
  const PartitionSpec p = split_patches(ds, 2);
  return {make_client_dataset(s.train, p), make_client_dataset(s.validation, p),
          build_graph({GraphKind::complete}, 4, aggregators), Architecture{{196, 16, 4}, {16, 16, 4}}};
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("party dropout masks") {
  Rng rng(1);
  for (auto k : apply_pd_mask(16, 0.0, rng)) CHECK(k == 1);
  for (auto k : apply_pd_mask(16, 1.0, rng)) CHECK(k == 0);
  const int n = 100000;
  double kept = 0.0;
  for (int i = 0; i < n; ++i) {
    for (auto k : apply_pd_mask(16, 0.3, rng)) kept += k;
  }
  CHECK(std::abs(kept / n - 11.2) <= 3.0 * std::sqrt(16 * 0.21 / n));
}

TEST_CASE("party dropout at rate one zeroes every head input") {
  Rng rng(2);
  const auto g = build_graph({GraphKind::complete}, 4, 4);
  const Architecture arch{{3, 4, 2}, {8, 5, 3}};
  const SplitModel m = init_split_model(arch, 4, g.aggregators(), rng);
  const auto views = random_views(4, 2, 3, rng);
  const std::vector<int> labels{0, 1};
  SlotMask slots(4, 4);
  const auto keep = apply_pd_mask(4, 1.0, rng);
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t c = 0; c < 4; ++c) slots.set(k, c, keep[c] != 0);
  }
  const std::vector<std::uint8_t> alive(4, 1);
  const auto obj = split_loss_and_grad(m, views, labels, slots, alive);
  // No encoder receives gradient when every slot is dropped.
  for (const auto& e : obj.grads.encoders) {
    for (const double* v : parameter_refs(e)) CHECK(*v == 0.0);
  }
}

TEST_CASE("communication dropout masks") {
  Rng rng(3);
  const auto aggs = build_graph({GraphKind::complete}, 16, 16).aggregators();
  CHECK(apply_cd_mask(aggs, 16, 0.0, rng).dropped() == 0);
  const SlotMask all = apply_cd_mask(aggs, 16, 1.0, rng);
  CHECK(all.dropped() == 240);
  for (std::size_t k = 0; k < 16; ++k) CHECK(all.keep(k, k));

  const int n = 20000;
  double dropped = 0.0;
  for (int i = 0; i < n; ++i) dropped += static_cast<double>(apply_cd_mask(aggs, 16, 0.3, rng).dropped());
  CHECK(std::abs(dropped / n - 72.0) <= 3.0 * std::sqrt(240 * 0.21 / n));
}

TEST_CASE("communication dropout at rate one isolates each head") {
  Rng rng(4);
  const auto g = build_graph({GraphKind::complete}, 3, 3);
  const Architecture arch{{2, 3, 2}, {6, 4, 3}};
  const SplitModel m = init_split_model(arch, 3, g.aggregators(), rng);
  const auto views = random_views(3, 4, 2, rng);
  const std::vector<int> labels{0, 1, 2, 1};
  const SlotMask slots = apply_cd_mask(g.aggregators(), 3, 1.0, rng);
  const std::vector<std::uint8_t> alive(3, 1);
  const auto obj = split_loss_and_grad(m, views, labels, slots, alive);
  for (std::size_t k = 0; k < 3; ++k) {
    const Matrix& w = obj.grads.heads[k].layers[0].weight;
    for (std::size_t c = 0; c < 3; ++c) {
      if (c == k) continue;
      for (std::size_t j = 0; j < 2; ++j) {
        for (double v : w.row(c * 2 + j)) CHECK(v == 0.0);
      }
    }
  }
  // Encoder c only sees head c: its gradient equals the single-head objective's.
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<std::uint8_t> only(3, 0);
    only[c] = 1;
    const auto single = split_loss_and_grad(m, views, labels, slots, only);
    const auto a = parameter_refs(obj.grads.encoders[c]);
    const auto b = parameter_refs(single.grads.encoders[c]);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i] == doctest::Approx(*b[i]).epsilon(1e-12));
  }
}

TEST_CASE("zero heads give K ln(classes) on the first batch") {
  Rng rng(5);
  const auto g = build_graph({GraphKind::complete}, 4, 3);
  SplitModel m = init_split_model({{3, 4, 2}, {8, 5, 10}}, 4, g.aggregators(), rng);
  for (auto& h : m.heads) h = zeros_like(h);
  const auto views = random_views(4, 6, 3, rng);
  const std::vector<int> labels{0, 1, 2, 3, 4, 9};
  const auto obj = split_loss_and_grad(m, views, labels, SlotMask(3, 4), std::vector<std::uint8_t>(3, 1));
  CHECK(obj.loss == doctest::Approx(3.0 * std::log(10.0)).epsilon(1e-14));
}

TEST_CASE("split gradients match finite differences") {
  Rng rng(6);
  const Architecture arch{{3, 4, 2}, {4, 5, 3}};
  const SplitModel base = init_split_model(arch, 2, {0, 1}, rng);
  const auto views = random_views(2, 4, 3, rng);
  const std::vector<int> labels{0, 2, 1, 2};
  const std::vector<std::uint8_t> alive{1, 1};

  auto check = [&](const SlotMask& slots, const Matrix* mixing) {
    SplitModel m = base;
    const auto obj = split_loss_and_grad(m, views, labels, slots, alive, mixing);
    auto loss = [&] { return split_loss_and_grad(m, views, labels, slots, alive, mixing).loss; };
    double worst = 0.0;
    auto sweep = [&](MlpParams& p, const MlpParams& g) {
      const auto refs = parameter_refs(p);
      const auto grads = parameter_refs(g);
      for (std::size_t i = 0; i < refs.size(); ++i) {
        worst = std::max(worst, oracle::relative_error(*grads[i], oracle::central_difference(loss, refs[i])));
      }
    };
    for (std::size_t c = 0; c < 2; ++c) sweep(m.encoders[c], obj.grads.encoders[c]);
    for (std::size_t k = 0; k < 2; ++k) sweep(m.heads[k], obj.grads.heads[k]);
    return worst;
  };

  CHECK(check(SlotMask(2, 2), nullptr) < 1e-6);
  SlotMask cut(2, 2);
  cut.set(1, 0, false);
  CHECK(check(cut, nullptr) < 1e-6);
  const Matrix mixing{{0.5, 0.5}, {0.25, 0.75}};
  CHECK(check(SlotMask(2, 2), &mixing) < 1e-6);
}

TEST_CASE("gossip mixing matrix") {
  const auto g = build_graph({GraphKind::complete}, 3, 3);
  const auto r = RealizedGraph::intact(g);
  const std::vector<std::uint8_t> alive{1, 1, 1};
  const Matrix id = gossip_mixing(r, g.aggregators(), alive, 0);
  CHECK(id == Matrix{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  const Matrix one = gossip_mixing(r, g.aggregators(), alive, 1);
  for (double v : one.values()) CHECK(v == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("one client, one aggregator: epoch matches a monolithic MLP run") {
  const Dataset ds = synth_dataset(200, 4, 1, 2, 0.3);
  const ClientDataset data = make_client_dataset(ds, split_patches(ds, 1));
  const auto g = build_graph({GraphKind::complete}, 1, 1);
  TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.seed = 9;
  Rng init = derive_stream(cfg.seed, "init");
  SplitModel model = init_split_model({{784, 8, 4}, {4, 6, 4}}, 1, {0}, init);

  MlpParams mono;
  mono.layers = model.encoders[0].layers;
  mono.layers.insert(mono.layers.end(), model.heads[0].layers.begin(), model.heads[0].layers.end());
  AdamState mono_state = AdamState::for_params(mono, cfg.adam);

  OptimizerStates optim = OptimizerStates::for_model(model, cfg.adam);
  TrainStreams streams = TrainStreams::from_seed(cfg.seed, g, cfg.train_faults);
  train_epoch(model, optim, data, g, cfg, streams);

  Rng data_stream = derive_stream(cfg.seed, "data");
  const auto order = permutation(data.size(), data_stream);
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t b = std::min(cfg.batch_size, order.size() - start);
    Matrix x(b, 784), y(b, 4);
    for (std::size_t i = 0; i < b; ++i) {
      const auto src = data.views[0].row(order[start + i]);
      std::copy(src.begin(), src.end(), x.row(i).begin());
      y(i, static_cast<std::size_t>(data.labels[order[start + i]])) = 1.0;
    }
    adam_update(mono, loss_and_grad(mono, x, y).grads, mono_state);
  }

  for (std::size_t l = 0; l < 2; ++l) {
    const auto& a = model.encoders[0].layers[l];
    const auto& b = mono.layers[l];
    for (std::size_t i = 0; i < a.weight.size(); ++i) {
      CHECK(a.weight.values()[i] == doctest::Approx(b.weight.values()[i]).epsilon(1e-12));
    }
    const auto& h = model.heads[0].layers[l];
    const auto& hb = mono.layers[l + 2];
    for (std::size_t i = 0; i < h.weight.size(); ++i) {
      CHECK(h.weight.values()[i] == doctest::Approx(hb.weight.values()[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("fit with zero epochs returns the initial parameters") {
  const auto t = small_task(0.3, 100, 2);
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 4;
  const Checkpoint ck = fit(cfg, t.train, t.val, t.graph, t.arch);
  Rng init = derive_stream(4, "init");
  const SplitModel m0 = init_split_model(t.arch, 4, t.graph.aggregators(), init);
  CHECK(ck.best_epoch == 0);
  const auto a = parameter_refs(ck.model.heads[1]);
  const auto b = parameter_refs(m0.heads[1]);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i] == static_cast<double>(static_cast<float>(*b[i])));
}

TEST_CASE("fit on noise-free data reaches high validation accuracy") {
  const auto t = small_task(0.0, 500, 4);
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 32;
  cfg.adam.lr = 3e-3;
  std::vector<EpochRecord> curve;
  const Checkpoint ck = fit(cfg, t.train, t.val, t.graph, t.arch,
                            [&](const EpochRecord& r) { curve.push_back(r); });
  REQUIRE(curve.size() == 20);
  CHECK(validate_model(ck.model, t.val, t.graph).accuracy > 0.99);
  CHECK(ck.best_val_loss <= curve.back().val_loss);
  // Smoothed training loss does not increase after epoch 3.
  for (std::size_t e = 3; e < 5; ++e) {
    CHECK(curve[e].train_loss <= curve[e - 1].train_loss * 1.05);
  }
}

TEST_CASE("fit is deterministic and checkpoints round trip exactly") {
  const auto t = small_task(0.3, 150, 2);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.dropout = {DropoutKind::communication, 0.3};
  cfg.seed = 12;
  const Checkpoint a = fit(cfg, t.train, t.val, t.graph, t.arch);
  const Checkpoint b = fit(cfg, t.train, t.val, t.graph, t.arch);
  CHECK(a == b);

  const auto dir = temp_dir("ckpt");
  save_checkpoint(a, dir / "a.ckpt");
  save_checkpoint(b, dir / "b.ckpt");
  CHECK(file_bytes(dir / "a.ckpt") == file_bytes(dir / "b.ckpt"));
  CHECK(load_checkpoint(dir / "a.ckpt") == a);

  const std::string bytes = file_bytes(dir / "a.ckpt");
  CHECK(bytes.rfind("MAGS-CHECKPOINT v1\nconfig ", 0) == 0);
  const auto data_at = bytes.find("\ndata\n") + 6;
  std::size_t params = 0;
  for (const auto& e : a.model.encoders) params += e.parameter_count();
  for (const auto& h : a.model.heads) params += h.parameter_count();
  CHECK(bytes.size() - data_at == 4 * params);

  std::ofstream(dir / "trunc.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  CHECK_THROWS_AS(load_checkpoint(dir / "trunc.ckpt"), ParseError);
  std::ofstream(dir / "long.ckpt", std::ios::binary) << bytes << "x";
  CHECK_THROWS_AS(load_checkpoint(dir / "long.ckpt"), ParseError);
  std::string edited = bytes;
  edited.replace(edited.find("seed=12"), 7, "seed=13");
  std::ofstream(dir / "edited.ckpt", std::ios::binary) << edited;
  CHECK_THROWS_AS(load_checkpoint(dir / "edited.ckpt"), ParseError);
}

TEST_CASE("without dropout or faults training ignores the fault stream") {
  const auto t = small_task(0.3, 100, 2);
  TrainConfig a;
  a.epochs = 1;
  TrainConfig b = a;
  b.train_faults.rate = 0.7;
  b.train_faults.stay_alive = 0.5;
  CHECK(fit(a, t.train, t.val, t.graph, t.arch).model == fit(b, t.train, t.val, t.graph, t.arch).model);
}

TEST_CASE("training with faults and gossip runs") {
  const auto t = small_task(0.3, 100, 4);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.train_faults = {FaultKind::markov_communication, 0.3};
  cfg.train_gossip_rounds = 2;
  const Checkpoint ck = fit(cfg, t.train, t.val, t.graph, t.arch);
  CHECK(std::isfinite(ck.best_val_loss));
  CHECK(ck.config_echo.find("train_gossip=2") != std::string::npos);
}

TEST_CASE("learning curve csv") {
  std::ostringstream out;
  write_curve_header(out);
  write_curve_row(out, {1, 0.5, 0.25, 0.75});
  CHECK(out.str() == "epoch,train_loss,val_loss,val_accuracy\n1,0.5,0.25,0.750000\n");
}

}

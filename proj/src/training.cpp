#include "mags/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "mags/error.hpp"

namespace mags {

namespace {

std::string dropout_name(const DropoutSpec& d) {
  switch (d.kind) {
    case DropoutKind::none: return "none";
    case DropoutKind::party: return fmt::format("PD:{:g}", d.rate);
    case DropoutKind::communication: return fmt::format("CD:{:g}", d.rate);
  }
  return "unknown";
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (!(dropout.rate >= 0.0 && dropout.rate <= 1.0)) {
    throw ConfigError(fmt::format("dropout rate {} outside [0, 1]", dropout.rate));
  }
  train_faults.validate();
}

std::string TrainConfig::echo() const {
  return fmt::format(
      "epochs={} batch={} lr={:g} beta1={:g} beta2={:g} eps={:g} dropout={} "
      "train_faults={}:{:g} train_gossip={} seed={}",
      epochs, batch_size, adam.lr, adam.beta1, adam.beta2, adam.eps, dropout_name(dropout),
      to_string(train_faults.kind), train_faults.rate, train_gossip_rounds, seed);
}

std::vector<std::uint8_t> apply_pd_mask(std::size_t clients, double rate, Rng& rng) {
  std::vector<std::uint8_t> keep(clients, 1);
  for (auto& k : keep) k = rng.uniform() < rate ? 0 : 1;
  return keep;
}

std::size_t SlotMask::dropped() const {
  return static_cast<std::size_t>(std::count(keep_.begin(), keep_.end(), std::uint8_t{0}));
}

SlotMask apply_cd_mask(std::span<const std::size_t> aggregators, std::size_t clients,
                       double rate, Rng& rng) {
  SlotMask mask(aggregators.size(), clients);
  for (std::size_t k = 0; k < aggregators.size(); ++k) {
    for (std::size_t c = 0; c < clients; ++c) {
      if (c == aggregators[k]) continue;
      if (rng.uniform() < rate) mask.set(k, c, false);
    }
  }
  return mask;
}

BatchRealization realization_mask(const RealizedGraph& realized,
                                  std::span<const std::size_t> aggregators) {
  const std::size_t c_count = realized.device_count();
  BatchRealization r{SlotMask(aggregators.size(), c_count),
                     std::vector<std::uint8_t>(aggregators.size(), 0)};
  for (std::size_t k = 0; k < aggregators.size(); ++k) {
    const std::size_t dev = aggregators[k];
    r.head_alive[k] = realized.device_alive(dev) ? 1 : 0;
    for (std::size_t c = 0; c < c_count; ++c) {
      r.slots.set(k, c, realized.device_alive(c) && realized.receives(dev, c));
    }
  }
  return r;
}

Matrix gossip_mixing(const RealizedGraph& realized, std::span<const std::size_t> aggregators,
                     std::span<const std::uint8_t> head_alive, std::size_t rounds) {
  const std::size_t k_count = aggregators.size();
  Matrix w(k_count, k_count);
  for (std::size_t k = 0; k < k_count; ++k) w(k, k) = 1.0;
  Matrix step(k_count, k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    if (!head_alive[k]) {
      step(k, k) = 1.0;
      continue;
    }
    std::vector<std::size_t> from{k};
    for (std::size_t j = 0; j < k_count; ++j) {
      if (j != k && head_alive[j] && realized.receives(aggregators[k], aggregators[j])) {
        from.push_back(j);
      }
    }
    for (std::size_t j : from) step(k, j) = 1.0 / static_cast<double>(from.size());
  }
  for (std::size_t r = 0; r < rounds; ++r) {
    Matrix next(k_count, k_count);
    for (std::size_t i = 0; i < k_count; ++i) {
      for (std::size_t m = 0; m < k_count; ++m) {
        const double s = step(i, m);
        if (s == 0.0) continue;
        for (std::size_t j = 0; j < k_count; ++j) next(i, j) += s * w(m, j);
      }
    }
    w = std::move(next);
  }
  return w;
}

SplitObjective split_loss_and_grad(const SplitModel& model, std::span<const Matrix> views,
                                   std::span<const int> labels, const SlotMask& slots,
                                   std::span<const std::uint8_t> head_alive,
                                   const Matrix* mixing) {
  const std::size_t c_count = model.client_count();
  const std::size_t k_count = model.aggregator_count();
  const std::size_t rep = model.rep_dim();
  if (views.size() != c_count) throw ConfigError("split_loss_and_grad: client view count");
  if (slots.aggregators() != k_count || slots.clients() != c_count ||
      head_alive.size() != k_count) {
    throw ConfigError("split_loss_and_grad: mask shape mismatch");
  }
  const std::size_t batch = labels.size();
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= model.classes) {
      throw InputError(fmt::format("label {} outside [0, {})", y, model.classes));
    }
  }

  // A client's encoder only runs if some alive head receives it.
  std::vector<std::uint8_t> used(c_count, 0);
  for (std::size_t k = 0; k < k_count; ++k) {
    if (!head_alive[k]) continue;
    for (std::size_t c = 0; c < c_count; ++c) used[c] |= slots.keep(k, c) ? 1 : 0;
  }
  std::vector<MlpForward> enc(c_count);
  for (std::size_t c = 0; c < c_count; ++c) {
    if (used[c]) enc[c] = mlp_forward(model.encoders[c], views[c]);
  }

  std::vector<MlpForward> heads(k_count);
  std::vector<Matrix> logp(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    if (!head_alive[k]) continue;
    Matrix z(batch, c_count * rep);
    for (std::size_t c = 0; c < c_count; ++c) {
      if (!slots.keep(k, c)) continue;
      const Matrix& r = enc[c].output;
      for (std::size_t b = 0; b < batch; ++b) {
        std::copy(r.row(b).begin(), r.row(b).end(), z.row(b).begin() + c * rep);
      }
    }
    heads[k] = mlp_forward(model.heads[k], z);
    logp[k] = log_softmax_rows(heads[k].output);
  }

  const double inv_b = batch == 0 ? 0.0 : 1.0 / static_cast<double>(batch);
  SplitObjective out;
  out.grads.aggregators = model.aggregators;
  out.grads.classes = model.classes;
  std::vector<Matrix> dlogits(k_count);

  if (mixing == nullptr) {
    for (std::size_t k = 0; k < k_count; ++k) {
      if (!head_alive[k]) continue;
      Matrix d(batch, model.classes);
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t y = static_cast<std::size_t>(labels[b]);
        out.loss -= logp[k](b, y);
        for (std::size_t j = 0; j < model.classes; ++j) {
          d(b, j) = (std::exp(logp[k](b, j)) - (j == y ? 1.0 : 0.0)) * inv_b;
        }
      }
      dlogits[k] = std::move(d);
    }
  } else {
    if (mixing->rows() != k_count || mixing->cols() != k_count) {
      throw ConfigError("split_loss_and_grad: mixing matrix shape");
    }
    std::vector<Matrix> dlogp(k_count);
    for (std::size_t k = 0; k < k_count; ++k) {
      if (head_alive[k]) dlogp[k] = Matrix(batch, model.classes);
    }
    for (std::size_t k = 0; k < k_count; ++k) {
      if (!head_alive[k]) continue;
      Matrix u(batch, model.classes);
      for (std::size_t j = 0; j < k_count; ++j) {
        const double w = (*mixing)(k, j);
        if (w == 0.0 || !head_alive[j]) continue;
        auto dst = u.values();
        auto src = logp[j].values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += w * src[i];
      }
      const Matrix out_k = log_softmax_rows(u);
      Matrix du(batch, model.classes);
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t y = static_cast<std::size_t>(labels[b]);
        out.loss -= out_k(b, y);
        for (std::size_t i = 0; i < model.classes; ++i) {
          du(b, i) = (std::exp(out_k(b, i)) - (i == y ? 1.0 : 0.0)) * inv_b;
        }
      }
      for (std::size_t j = 0; j < k_count; ++j) {
        const double w = (*mixing)(k, j);
        if (w == 0.0 || !head_alive[j]) continue;
        auto dst = dlogp[j].values();
        auto src = du.values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += w * src[i];
      }
    }
    for (std::size_t k = 0; k < k_count; ++k) {
      if (!head_alive[k]) continue;
      Matrix d = dlogp[k];
      for (std::size_t b = 0; b < batch; ++b) {
        double s = 0.0;
        for (double v : dlogp[k].row(b)) s += v;
        for (std::size_t i = 0; i < model.classes; ++i) d(b, i) -= std::exp(logp[k](b, i)) * s;
      }
      dlogits[k] = std::move(d);
    }
  }
  out.loss *= inv_b;

  std::vector<Matrix> drep(c_count);
  for (std::size_t c = 0; c < c_count; ++c) {
    if (used[c]) drep[c] = Matrix(batch, rep);
  }
  out.grads.heads.resize(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    if (!head_alive[k]) {
      out.grads.heads[k] = zeros_like(model.heads[k]);
      continue;
    }
    auto back = mlp_backward(model.heads[k], heads[k].tape, dlogits[k]);
    out.grads.heads[k] = std::move(back.grads);
    for (std::size_t c = 0; c < c_count; ++c) {
      if (!slots.keep(k, c)) continue;
      for (std::size_t b = 0; b < batch; ++b) {
        auto src = back.input_grad.row(b).subspan(c * rep, rep);
        auto dst = drep[c].row(b);
        for (std::size_t i = 0; i < rep; ++i) dst[i] += src[i];
      }
    }
  }
  out.grads.encoders.resize(c_count);
  for (std::size_t c = 0; c < c_count; ++c) {
    if (!used[c]) {
      out.grads.encoders[c] = zeros_like(model.encoders[c]);
      continue;
    }
    out.grads.encoders[c] = mlp_backward(model.encoders[c], enc[c].tape, drep[c]).grads;
  }
  return out;
}

OptimizerStates OptimizerStates::for_model(const SplitModel& model, AdamConfig config) {
  OptimizerStates s;
  for (const auto& e : model.encoders) s.encoders.push_back(AdamState::for_params(e, config));
  for (const auto& h : model.heads) s.heads.push_back(AdamState::for_params(h, config));
  return s;
}

TrainStreams TrainStreams::from_seed(std::uint64_t seed, const DeviceGraph& base,
                                     const FaultModel& train_faults) {
  return TrainStreams{derive_stream(seed, "data"), derive_stream(seed, "dropout"),
                      FaultProcess(base, train_faults, derive_stream(seed, "fault/train"))};
}

std::vector<std::size_t> epoch_order(std::size_t n, Rng& data_stream) {
  return permutation(n, data_stream);
}

double train_epoch(SplitModel& model, OptimizerStates& optim, const ClientDataset& data,
                   const DeviceGraph& /*base*/, const TrainConfig& cfg, TrainStreams& streams) {
  cfg.validate();
  const std::size_t n = data.size();
  if (n == 0) return 0.0;
  const auto order = epoch_order(n, streams.data);
  const std::size_t rounds = cfg.train_gossip_rounds + 1;
  double loss_sum = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < n; start += cfg.batch_size) {
    const std::size_t end = std::min(n, start + cfg.batch_size);
    std::span<const std::size_t> rows(order.data() + start, end - start);
    const auto views = gather_rows(data, rows);
    std::vector<int> labels;
    labels.reserve(rows.size());
    for (std::size_t r : rows) labels.push_back(data.labels[r]);

    // One realization (faults and dropout) held fixed for the whole batch.
    const auto trace = streams.faults.next(rounds);
    BatchRealization real = realization_mask(trace.front(), model.aggregators);
    if (cfg.dropout.kind == DropoutKind::party) {
      const auto keep = apply_pd_mask(model.client_count(), cfg.dropout.rate, streams.dropout);
      for (std::size_t k = 0; k < model.aggregator_count(); ++k) {
        for (std::size_t c = 0; c < model.client_count(); ++c) {
          if (!keep[c]) real.slots.set(k, c, false);
        }
      }
    } else if (cfg.dropout.kind == DropoutKind::communication) {
      const auto cd = apply_cd_mask(model.aggregators, model.client_count(), cfg.dropout.rate,
                                    streams.dropout);
      for (std::size_t k = 0; k < model.aggregator_count(); ++k) {
        for (std::size_t c = 0; c < model.client_count(); ++c) {
          if (!cd.keep(k, c)) real.slots.set(k, c, false);
        }
      }
    }
    Matrix mixing;
    const Matrix* mixing_ptr = nullptr;
    if (cfg.train_gossip_rounds > 0) {
      mixing = gossip_mixing(trace.back(), model.aggregators, real.head_alive,
                             cfg.train_gossip_rounds);
      mixing_ptr = &mixing;
    }
    auto obj = split_loss_and_grad(model, views, labels, real.slots, real.head_alive, mixing_ptr);
    for (std::size_t c = 0; c < model.client_count(); ++c) {
      adam_update(model.encoders[c], obj.grads.encoders[c], optim.encoders[c]);
    }
    for (std::size_t k = 0; k < model.aggregator_count(); ++k) {
      adam_update(model.heads[k], obj.grads.heads[k], optim.heads[k]);
    }
    loss_sum += obj.loss;
    ++batches;
  }
  return loss_sum / static_cast<double>(batches);
}

ValidationResult validate_model(const SplitModel& model, const ClientDataset& data,
                                const DeviceGraph& base, std::size_t batch_size) {
  ValidationResult res;
  const std::size_t n = data.size();
  if (n == 0) return res;
  const RealizedGraph intact = RealizedGraph::intact(base, 1);
  double loss = 0.0;
  double correct = 0.0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    rows.clear();
    for (std::size_t r = start; r < end; ++r) rows.push_back(r);
    const auto views = gather_rows(data, rows);
    const Representations reps = client_encode(model, views, intact);
    for (std::size_t k = 0; k < model.aggregator_count(); ++k) {
      const Matrix lp = aggregator_head(
          model, k, aggregate(reps, intact, model.aggregators[k], model.rep_dim()));
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto row = lp.row(i);
        const int y = data.labels[rows[i]];
        loss -= row[static_cast<std::size_t>(y)];
        const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        correct += best == y ? 1.0 : 0.0;
      }
    }
  }
  res.loss = loss / static_cast<double>(n);
  res.accuracy = correct / static_cast<double>(n * model.aggregator_count());
  return res;
}

namespace {

SplitModel round_to_float(SplitModel m) {
  auto round_mlp = [](MlpParams& p) {
    for (double* v : parameter_refs(p)) *v = static_cast<double>(static_cast<float>(*v));
  };
  for (auto& e : m.encoders) round_mlp(e);
  for (auto& h : m.heads) round_mlp(h);
  return m;
}

}  // namespace

Checkpoint fit(const TrainConfig& cfg, const ClientDataset& train, const ClientDataset& val,
               const DeviceGraph& base, const Architecture& arch,
               const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  if (val.size() == 0) throw ConfigError("fit: validation split is empty");
  if (train.client_count() != base.device_count()) {
    throw ConfigError(fmt::format("dataset has {} clients but the graph has {} devices",
                                  train.client_count(), base.device_count()));
  }
  Rng init = derive_stream(cfg.seed, "init");
  SplitModel model = init_split_model(arch, base.device_count(), base.aggregators(), init);
  OptimizerStates optim = OptimizerStates::for_model(model, cfg.adam);
  TrainStreams streams = TrainStreams::from_seed(cfg.seed, base, cfg.train_faults);

  const ValidationResult v0 = validate_model(model, val, base);
  Checkpoint best{round_to_float(model), cfg.echo(), v0.loss, 0};
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double train_loss = train_epoch(model, optim, train, base, cfg, streams);
    const ValidationResult v = validate_model(model, val, base);
    if (v.loss < best.best_val_loss) {
      best.model = round_to_float(model);
      best.best_val_loss = v.loss;
      best.best_epoch = epoch;
    }
    if (on_epoch) on_epoch({epoch, train_loss, v.loss, v.accuracy});
  }
  return best;
}

namespace {

constexpr const char* kCheckpointMagic = "MAGS-CHECKPOINT v1";

void write_mlp_header(std::ostream& out, const char* what, std::size_t index,
                      const MlpParams& p) {
  out << fmt::format("{} {} relu_output {} dims {}\n", what, index, p.relu_output ? 1 : 0,
                     fmt::join(p.dims(), " "));
}

void put_f32(std::ostream& out, double v) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  char b[4];
  std::memcpy(b, &bits, 4);
  out.write(b, 4);
}

MlpParams parse_mlp_header(const std::string& line, const char* what, std::size_t index) {
  std::istringstream ls(line);
  std::string tag, relu_key, dims_key;
  std::size_t idx = 0;
  int relu = 0;
  if (!(ls >> tag >> idx >> relu_key >> relu >> dims_key) || tag != what || idx != index ||
      relu_key != "relu_output" || dims_key != "dims") {
    throw ParseError(fmt::format("checkpoint: expected '{} {} ...', got '{}'", what, index, line));
  }
  std::vector<std::size_t> dims;
  std::size_t d = 0;
  while (ls >> d) dims.push_back(d);
  if (dims.size() < 2) throw ParseError(fmt::format("checkpoint: bad dims in '{}'", line));
  MlpParams p;
  p.relu_output = relu != 0;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    p.layers.push_back({Matrix(dims[i], dims[i + 1]), std::vector<double>(dims[i + 1])});
  }
  return p;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const SplitModel& m = ckpt.model;
  m.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError(fmt::format("cannot write checkpoint '{}'", path.string()));
  out << kCheckpointMagic << '\n';
  out << "config " << ckpt.config_echo << '\n';
  out << fmt::format("config_hash {:016x}\n", fnv1a(ckpt.config_echo));
  out << fmt::format("best_val_loss {:.17g}\n", ckpt.best_val_loss);
  out << "best_epoch " << ckpt.best_epoch << '\n';
  out << "clients " << m.client_count() << '\n';
  out << "classes " << m.classes << '\n';
  out << fmt::format("aggregators {}\n", fmt::join(m.aggregators, " "));
  for (std::size_t c = 0; c < m.encoders.size(); ++c) write_mlp_header(out, "encoder", c, m.encoders[c]);
  for (std::size_t k = 0; k < m.heads.size(); ++k) write_mlp_header(out, "head", k, m.heads[k]);
  out << "data\n";
  auto dump = [&](const MlpParams& p) {
    for (const auto& l : p.layers) {
      for (double v : l.weight.values()) put_f32(out, v);
      for (double v : l.bias) put_f32(out, v);
    }
  };
  for (const auto& e : m.encoders) dump(e);
  for (const auto& h : m.heads) dump(h);
  if (!out) throw ConfigError(fmt::format("error writing checkpoint '{}'", path.string()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(fmt::format("cannot open checkpoint '{}'", path.string()));
  auto next_line = [&](const char* expect_key) {
    std::string line;
    if (!std::getline(in, line)) {
      throw ParseError(fmt::format("checkpoint '{}' truncated before '{}'", path.string(),
                                   expect_key));
    }
    if (line.rfind(expect_key, 0) != 0) {
      throw ParseError(fmt::format("checkpoint '{}': expected '{}', got '{}'", path.string(),
                                   expect_key, line));
    }
    return line.substr(std::min(line.size(), std::strlen(expect_key) + 1));
  };
  if (!next_line(kCheckpointMagic).empty()) throw ParseError("checkpoint: bad magic line");
  Checkpoint ck;
  ck.config_echo = next_line("config");
  const std::string hash = next_line("config_hash");
  if (hash != fmt::format("{:016x}", fnv1a(ck.config_echo))) {
    throw ParseError(fmt::format("checkpoint '{}': config hash mismatch", path.string()));
  }
  ck.best_val_loss = std::stod(next_line("best_val_loss"));
  ck.best_epoch = std::stoull(next_line("best_epoch"));
  const std::size_t clients = std::stoull(next_line("clients"));
  ck.model.classes = std::stoull(next_line("classes"));
  {
    std::istringstream ls(next_line("aggregators"));
    std::size_t a = 0;
    while (ls >> a) ck.model.aggregators.push_back(a);
  }
  for (std::size_t c = 0; c < clients; ++c) {
    std::string line;
    std::getline(in, line);
    ck.model.encoders.push_back(parse_mlp_header(line, "encoder", c));
  }
  for (std::size_t k = 0; k < ck.model.aggregators.size(); ++k) {
    std::string line;
    std::getline(in, line);
    ck.model.heads.push_back(parse_mlp_header(line, "head", k));
  }
  next_line("data");
  auto fill = [&](MlpParams& p) {
    for (double* v : parameter_refs(p)) {
      char b[4];
      if (!in.read(b, 4)) {
        throw ParseError(fmt::format("checkpoint '{}': parameter data truncated", path.string()));
      }
      std::uint32_t bits = 0;
      std::memcpy(&bits, b, 4);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      *v = static_cast<double>(std::bit_cast<float>(bits));
    }
  };
  for (auto& e : ck.model.encoders) fill(e);
  for (auto& h : ck.model.heads) fill(h);
  if (in.peek() != std::ifstream::traits_type::eof()) {
    throw ParseError(fmt::format("checkpoint '{}': trailing bytes after parameters",
                                 path.string()));
  }
  ck.model.validate();
  return ck;
}

void write_curve_header(std::ostream& out) { out << "epoch,train_loss,val_loss,val_accuracy\n"; }

void write_curve_row(std::ostream& out, const EpochRecord& rec) {
  out << fmt::format("{},{:.9g},{:.9g},{:.6f}\n", rec.epoch, rec.train_loss, rec.val_loss,
                     rec.val_accuracy);
}

}  // namespace mags

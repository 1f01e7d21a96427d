#include "mags/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "mags/error.hpp"
#include "mags/inference.hpp"
#include "mags/metrics.hpp"
#include "mags/training.hpp"

namespace mags {

namespace {

std::vector<std::size_t> iota(std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> v;
  for (std::size_t i = lo; i < hi; ++i) v.push_back(i);
  return v;
}

Dataset head_rows(const Dataset& ds, std::size_t limit) {
  if (limit == 0 || limit >= ds.size()) return ds;
  const auto rows = iota(0, limit);
  return subset(ds, rows);
}

std::ofstream open_out(const std::filesystem::path& path, bool binary = false) {
  std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
  if (!out) throw ConfigError(fmt::format("cannot write '{}'", path.string()));
  return out;
}

// The distinct trained variants among the configured methods, first
// appearance order.
std::vector<MethodSpec> variants(const ExperimentConfig& cfg) {
  std::vector<MethodSpec> out;
  std::set<std::string> seen;
  for (MethodSpec m : cfg.methods) {
    m.gossip_rounds = 0;
    if (seen.insert(m.variant()).second) out.push_back(m);
  }
  return out;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  return fmt::format("{:.10g}", v);
}

double parse_double(const std::string& s) {
  if (s == "nan") return std::nan("");
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument(s);
  return v;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
  ExperimentData data;
  const auto& d = cfg.dataset;
  if (d.source == DatasetConfig::Source::synthetic) {
    const Dataset all =
        synth_dataset(d.train_size + d.test_size, d.classes, cfg.grid_side, d.seed, d.sigma);
    const auto train_rows = iota(0, d.train_size);
    const auto test_rows = iota(d.train_size, d.train_size + d.test_size);
    data.train_pool = subset(all, train_rows);
    data.test = subset(all, test_rows);
  } else {
    data.train_pool = head_rows(load_idx(d.train_images, d.train_labels), d.train_limit);
    data.test = head_rows(load_idx(d.test_images, d.test_labels), d.test_limit);
    if (data.train_pool.height != data.test.height || data.train_pool.width != data.test.width) {
      throw InputError("train and test images differ in size");
    }
    data.test.class_count = data.train_pool.class_count =
        std::max(data.train_pool.class_count, data.test.class_count);
  }
  data.partition = split_patches(data.train_pool, cfg.grid_side);
  return data;
}

std::string checkpoint_name(const std::string& variant, std::uint64_t seed) {
  return fmt::format("{}_seed{}.ckpt", variant, seed);
}

void parallel_for(std::size_t n, std::size_t workers,
                  const std::function<void(std::size_t)>& task) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        task(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

TrainSummary cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                       std::size_t workers, std::ostream* log) {
  cfg.validate();
  const ExperimentData data = load_experiment_data(cfg);
  const auto runs = variants(cfg);
  const std::size_t n = runs.size() * cfg.seeds.size();
  std::filesystem::create_directories(out_dir);

  std::vector<double> seconds(n);
  std::mutex log_mutex;
  parallel_for(n, workers, [&](std::size_t i) {
    const MethodSpec& m = runs[i / cfg.seeds.size()];
    const std::uint64_t seed = cfg.seeds[i % cfg.seeds.size()];
    const auto start = std::chrono::steady_clock::now();
    const DataSplits splits = make_splits(data.train_pool, seed);
    const ClientDataset train = make_client_dataset(splits.train, data.partition);
    const ClientDataset val = make_client_dataset(splits.validation, data.partition);
    const DeviceGraph g = cfg.graph_for(m);
    const Architecture arch = default_architecture(
        data.partition.client_count(), data.partition.features_per_client(), train.class_count);
    std::ostringstream curve;
    write_curve_header(curve);
    const Checkpoint ck = fit(cfg.train_config(m, seed), train, val, g, arch,
                              [&](const EpochRecord& r) { write_curve_row(curve, r); });
    const auto base = out_dir / checkpoint_name(m.variant(), seed);
    save_checkpoint(ck, base);
    auto curve_path = base;
    curve_path.replace_extension(".curve.csv");
    open_out(curve_path) << curve.str();
    seconds[i] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (log) {
      std::lock_guard lock(log_mutex);
      fmt::print(*log, "trained {} seed {}: best epoch {}, val loss {:.4f}\n", m.variant(), seed,
                 ck.best_epoch, ck.best_val_loss);
    }
  });

  TrainSummary summary;
  auto timings = open_out(out_dir / "train_timings.csv");
  timings << "variant,seed,seconds\n";
  for (std::size_t i = 0; i < n; ++i) {
    const MethodSpec& m = runs[i / cfg.seeds.size()];
    const std::uint64_t seed = cfg.seeds[i % cfg.seeds.size()];
    summary.checkpoints.push_back(out_dir / checkpoint_name(m.variant(), seed));
    fmt::print(timings, "{},{},{:.3f}\n", m.variant(), seed, seconds[i]);
  }
  return summary;
}

void write_runs_csv(std::ostream& out, const std::vector<RunRecord>& records) {
  out << kRunsSchema << '\n' << kRunsColumns << '\n';
  for (const auto& r : records) {
    fmt::print(out, "{},{},{},{:g},{},{},{},{},{},{},{}\n", r.method, r.graph, r.fault, r.rate,
               r.policy, r.seed, format_double(r.accuracy), format_double(r.standard_error),
               format_double(r.comm), format_double(r.empty_active), r.samples);
  }
}

std::vector<RunRecord> read_runs_csv(std::istream& in, const std::string& source_name) {
  std::string line;
  if (!std::getline(in, line) || line != kRunsSchema) {
    throw ParseError(fmt::format("{}: expected '{}' on line 1", source_name, kRunsSchema));
  }
  if (!std::getline(in, line) || line != kRunsColumns) {
    throw ParseError(fmt::format("{}:2: unexpected column header", source_name));
  }
  std::vector<RunRecord> out;
  for (std::size_t lineno = 3; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 11) {
      throw ParseError(fmt::format("{}:{}: expected 11 fields, got {}", source_name, lineno,
                                   f.size()));
    }
    try {
      RunRecord r;
      r.method = f[0];
      r.graph = f[1];
      r.fault = f[2];
      r.rate = parse_double(f[3]);
      r.policy = f[4];
      r.seed = std::stoull(f[5]);
      r.accuracy = parse_double(f[6]);
      r.standard_error = parse_double(f[7]);
      r.comm = parse_double(f[8]);
      r.empty_active = parse_double(f[9]);
      r.samples = std::stoull(f[10]);
      out.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw ParseError(fmt::format("{}:{}: malformed number", source_name, lineno));
    }
  }
  return out;
}

namespace {

struct Group {
  std::string method, graph, fault, policy;
  double rate = 0.0;
  std::vector<double> accuracy;
  std::vector<double> comm;
};

std::vector<Group> group_records(const std::vector<RunRecord>& records) {
  std::vector<Group> groups;
  std::map<std::tuple<std::string, std::string, std::string, double, std::string>, std::size_t>
      index;
  for (const auto& r : records) {
    const auto key = std::make_tuple(r.method, r.graph, r.fault, r.rate, r.policy);
    auto [it, inserted] = index.try_emplace(key, groups.size());
    if (inserted) groups.push_back({r.method, r.graph, r.fault, r.policy, r.rate, {}, {}});
    groups[it->second].accuracy.push_back(r.accuracy);
    groups[it->second].comm.push_back(r.comm);
  }
  return groups;
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(v.size()))};
}

}  // namespace

void write_aggregate_csv(std::ostream& out, const std::vector<RunRecord>& records) {
  out << kRunsSchema << '\n' << kAggregateColumns << '\n';
  for (const auto& g : group_records(records)) {
    const auto [mean, sd] = mean_std(g.accuracy);
    fmt::print(out, "{},{},{},{:g},{},{},{},{},{}\n", g.method, g.graph, g.fault, g.rate,
               g.policy, g.accuracy.size(), format_double(mean), format_double(sd),
               format_double(mean_std(g.comm).first));
  }
}

EvalSummary cmd_eval(const ExperimentConfig& cfg, const std::filesystem::path& ckpt_dir,
                     const std::filesystem::path& out_dir, std::size_t workers) {
  cfg.validate();
  const ExperimentData data = load_experiment_data(cfg);
  const ClientDataset test = make_client_dataset(data.test, data.partition);

  // Load and check every checkpoint before any output is written.
  std::map<std::pair<std::string, std::uint64_t>, Checkpoint> models;
  for (const auto& m : cfg.methods) {
    const DeviceGraph g = cfg.graph_for(m);
    for (std::uint64_t seed : cfg.seeds) {
      const auto key = std::make_pair(m.variant(), seed);
      if (models.contains(key)) continue;
      const auto path = ckpt_dir / checkpoint_name(m.variant(), seed);
      if (!std::filesystem::exists(path)) {
        throw ConfigError(fmt::format("missing checkpoint '{}'", path.string()));
      }
      Checkpoint ck = load_checkpoint(path);
      if (ck.config_echo != cfg.train_config(m, seed).echo()) {
        throw ConfigError(fmt::format("checkpoint '{}' was trained with a different configuration",
                                      path.string()));
      }
      if (ck.model.client_count() != test.client_count() || ck.model.classes != test.class_count ||
          ck.model.aggregators != g.aggregators() ||
          ck.model.encoders.front().in_dim() != data.partition.features_per_client()) {
        throw ConfigError(
            fmt::format("checkpoint '{}' does not match the configured layout", path.string()));
      }
      models.emplace(key, std::move(ck));
    }
  }

  const std::size_t per_method = cfg.fault_kinds.size() * cfg.fault_rates.size() * cfg.seeds.size();
  const std::size_t n = cfg.methods.size() * per_method;
  std::vector<CellResult> cells(n);
  std::vector<double> seconds(n);
  auto decode = [&](std::size_t i) {
    const std::size_t s = i % cfg.seeds.size();
    const std::size_t r = (i / cfg.seeds.size()) % cfg.fault_rates.size();
    const std::size_t k = (i / (cfg.seeds.size() * cfg.fault_rates.size())) % cfg.fault_kinds.size();
    const std::size_t m = i / per_method;
    return std::array<std::size_t, 4>{m, k, r, s};
  };
  parallel_for(n, workers, [&](std::size_t i) {
    const auto [m, k, r, s] = decode(i);
    const MethodSpec& method = cfg.methods[m];
    const std::uint64_t seed = cfg.seeds[s];
    const auto start = std::chrono::steady_clock::now();
    const Checkpoint& ck = models.at({method.variant(), seed});
    const DeviceGraph g = cfg.graph_for(method);
    cells[i] = evaluate_cell(ck.model, test, g, cfg.fault_model(cfg.fault_kinds[k], cfg.fault_rates[r]),
                             method.gossip_rounds, seed, cfg.eval_batch_size, cfg.eval_trials);
    seconds[i] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  });

  EvalSummary summary;
  for (std::size_t base = 0; base < n; base += cfg.seeds.size()) {
    const auto [m, k, r, s0] = decode(base);
    const MethodSpec& method = cfg.methods[m];
    const bool single = method.resolved_aggregators(cfg.device_count()) == 1;
    for (SelectionPolicy p : cfg.policies) {
      const bool undefined =
          single && (p == SelectionPolicy::active_best || p == SelectionPolicy::active_worst);
      for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
        const CellResult& c = cells[base + s];
        RunRecord rec;
        rec.method = method.name();
        rec.graph = cfg.graph.name();
        rec.fault = to_string(cfg.fault_kinds[k]);
        rec.rate = cfg.fault_rates[r];
        rec.policy = to_string(p);
        rec.seed = cfg.seeds[s];
        rec.accuracy = undefined ? std::nan("") : c.of(p);
        rec.standard_error =
            undefined ? std::nan("") : c.standard_error[static_cast<std::size_t>(p)];
        rec.comm = c.comm_mean;
        rec.empty_active = c.empty_active_fraction;
        rec.samples = c.samples;
        summary.records.push_back(std::move(rec));
      }
    }
  }

  std::filesystem::create_directories(out_dir);
  summary.runs_csv = out_dir / "runs.csv";
  summary.aggregate_csv = out_dir / "aggregate.csv";
  {
    auto out = open_out(summary.runs_csv);
    write_runs_csv(out, summary.records);
  }
  {
    auto out = open_out(summary.aggregate_csv);
    write_aggregate_csv(out, summary.records);
  }
  auto timings = open_out(out_dir / "eval_timings.csv");
  timings << "method,fault,rate,seed,seconds\n";
  for (std::size_t i = 0; i < n; ++i) {
    const auto [m, k, r, s] = decode(i);
    fmt::print(timings, "{},{},{:g},{},{:.3f}\n", cfg.methods[m].name(),
               to_string(cfg.fault_kinds[k]), cfg.fault_rates[r], cfg.seeds[s], seconds[i]);
  }
  return summary;
}

int cmd_props(const PropsReportOptions& options, std::ostream& out) {
  const auto results = run_props(options.props);
  bool all = true;
  for (const auto& r : results) {
    all &= r.passed;
    fmt::print(out, "{} {}: {}", r.passed ? "PASS" : "FAIL", r.name, r.detail);
    if (options.show_timings) fmt::print(out, " [{:.2f}s]", r.seconds);
    out << '\n';
  }
  fmt::print(out, "{} of {} certificates passed\n",
             std::count_if(results.begin(), results.end(), [](const auto& r) { return r.passed; }),
             results.size());
  return all ? 0 : 1;
}

std::vector<std::filesystem::path> cmd_plotdata(const std::vector<std::filesystem::path>& runs,
                                                const std::filesystem::path& out_dir) {
  std::vector<RunRecord> records;
  for (const auto& path : runs) {
    std::ifstream in(path);
    if (!in) throw ParseError(fmt::format("cannot open run file '{}'", path.string()));
    auto part = read_runs_csv(in, path.string());
    records.insert(records.end(), part.begin(), part.end());
  }
  std::filesystem::create_directories(out_dir);
  const auto groups = group_records(records);
  std::vector<std::filesystem::path> written;

  std::vector<std::pair<std::string, std::string>> panels;
  for (const auto& g : groups) {
    const auto key = std::make_pair(g.graph, g.fault);
    if (std::find(panels.begin(), panels.end(), key) == panels.end()) panels.push_back(key);
  }
  for (const auto& [graph, fault] : panels) {
    const auto path = out_dir / fmt::format("fig_{}_{}.csv", graph, fault);
    auto out = open_out(path);
    out << kPlotSchema << '\n' << "method,policy,x,y,err\n";
    for (const auto& g : groups) {
      if (g.graph != graph || g.fault != fault) continue;
      const auto [mean, sd] = mean_std(g.accuracy);
      fmt::print(out, "{},{},{:g},{},{}\n", g.method, g.policy, g.rate, format_double(mean),
                 format_double(sd));
    }
    written.push_back(path);
  }

  const auto acc_path = out_dir / "table_accuracy.csv";
  {
    auto out = open_out(acc_path);
    out << kPlotSchema << '\n' << "method,graph,fault,rate,policy,mean,std\n";
    for (const auto& g : groups) {
      const auto [mean, sd] = mean_std(g.accuracy);
      fmt::print(out, "{},{},{},{:g},{},{},{}\n", g.method, g.graph, g.fault, g.rate, g.policy,
                 format_double(mean), format_double(sd));
    }
  }
  written.push_back(acc_path);

  const auto comm_path = out_dir / "table_comm.csv";
  {
    auto out = open_out(comm_path);
    out << kPlotSchema << '\n' << "method,graph,fault,rate,comm\n";
    std::set<std::tuple<std::string, std::string, std::string, double>> seen;
    for (const auto& g : groups) {
      if (!seen.insert({g.method, g.graph, g.fault, g.rate}).second) continue;
      fmt::print(out, "{},{},{},{:g},{}\n", g.method, g.graph, g.fault, g.rate,
                 format_double(mean_std(g.comm).first));
    }
  }
  written.push_back(comm_path);
  return written;
}

}  // namespace mags

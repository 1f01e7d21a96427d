#include "mags/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <yaml-cpp/yaml.h>

#include "mags/error.hpp"

namespace mags {

namespace {

std::size_t parse_count(const std::string& text, const std::string& what) {
  std::size_t v = 0;
  const char* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || p != end || text.empty()) {
    throw ConfigError(fmt::format("bad {} '{}'", what, text));
  }
  return v;
}

}  // namespace

MethodSpec MethodSpec::parse(const std::string& name) {
  MethodSpec m;
  std::string rest = name;
  if (rest.rfind("PD-", 0) == 0) {
    m.dropout = DropoutKind::party;
    rest = rest.substr(3);
  } else if (rest.rfind("CD-", 0) == 0) {
    m.dropout = DropoutKind::communication;
    rest = rest.substr(3);
  }
  if (const auto g = rest.rfind("-G"); g != std::string::npos) {
    m.gossip_rounds = parse_count(rest.substr(g + 2), "gossip suffix in method " + name);
    rest = rest.substr(0, g);
  }
  if (rest == "VFL") {
    m.vfl = true;
  } else if (rest == "MACL") {
  } else if (rest.size() > 5 && rest.ends_with("-MACL")) {
    m.aggregator_count = parse_count(rest.substr(0, rest.size() - 5), "K in method " + name);
    if (*m.aggregator_count == 0) throw ConfigError("method " + name + " has zero aggregators");
  } else {
    throw ConfigError(fmt::format("unknown method '{}'", name));
  }
  return m;
}

std::string MethodSpec::variant() const {
  std::string s;
  if (dropout == DropoutKind::party) s = "PD-";
  if (dropout == DropoutKind::communication) s = "CD-";
  if (vfl) return s + "VFL";
  if (aggregator_count) s += fmt::format("{}-", *aggregator_count);
  return s + "MACL";
}

std::string MethodSpec::name() const {
  return gossip_rounds > 0 ? fmt::format("{}-G{}", variant(), gossip_rounds) : variant();
}

std::size_t MethodSpec::resolved_aggregators(std::size_t devices) const {
  if (vfl) return 1;
  return aggregator_count.value_or(devices);
}

void ExperimentConfig::validate() const {
  if (grid_side == 0) throw ConfigError("grid_side must be positive");
  if (methods.empty()) throw ConfigError("no methods configured");
  if (fault_kinds.empty()) throw ConfigError("no fault kinds configured");
  if (fault_rates.empty()) throw ConfigError("no fault rates configured");
  if (policies.empty()) throw ConfigError("no selection policies configured");
  if (seeds.empty()) throw ConfigError("no seeds configured");
  if (eval_trials == 0 || eval_batch_size == 0) {
    throw ConfigError("eval trials and batch size must be positive");
  }
  for (double r : fault_rates) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError(fmt::format("fault rate {} outside [0,1]", r));
  }
  for (FaultKind k : fault_kinds) {
    for (double r : fault_rates) fault_model(k, r).validate();
  }
  if (!(dropout_rate >= 0.0 && dropout_rate <= 1.0)) {
    throw ConfigError(fmt::format("dropout rate {} outside [0,1]", dropout_rate));
  }
  if (server_device >= device_count()) {
    throw ConfigError(fmt::format("server device {} outside 0..{}", server_device,
                                  device_count() - 1));
  }
  std::set<std::string> names;
  for (const auto& m : methods) {
    if (!names.insert(m.name()).second) {
      throw ConfigError(fmt::format("method {} listed twice", m.name()));
    }
    if (m.resolved_aggregators(device_count()) > device_count()) {
      throw ConfigError(fmt::format("method {} needs more aggregators than the {} devices",
                                    m.name(), device_count()));
    }
  }
  if (dataset.source == DatasetConfig::Source::synthetic) {
    if (dataset.train_size < 5 || dataset.test_size == 0 || dataset.classes < 2) {
      throw ConfigError("synthetic dataset needs train_size >= 5, test_size >= 1, classes >= 2");
    }
  }
  train.validate();
}

TrainConfig ExperimentConfig::train_config(const MethodSpec& method, std::uint64_t seed) const {
  TrainConfig cfg = train;
  cfg.seed = seed;
  cfg.dropout.kind = method.dropout;
  cfg.dropout.rate = method.dropout == DropoutKind::none ? 0.0 : dropout_rate;
  return cfg;
}

FaultModel ExperimentConfig::fault_model(FaultKind kind, double rate) const {
  FaultModel f;
  f.kind = kind;
  f.rate = kind == FaultKind::none ? 0.0 : rate;
  f.stay_alive = stay_alive;
  f.burn_in = burn_in;
  return f;
}

DeviceGraph ExperimentConfig::graph_for(const MethodSpec& method) const {
  const std::size_t c = device_count();
  if (method.vfl) {
    return build_graph(graph, c, 1, graph_seed).with_aggregators({server_device});
  }
  return build_graph(graph, c, method.resolved_aggregators(c), graph_seed, aggregator_choice);
}

namespace {

class Reader {
 public:
  explicit Reader(std::string source) : source_(std::move(source)) {}

  [[noreturn]] void fail(const YAML::Node& node, const std::string& msg) const {
    const auto mark = node.Mark();
    if (mark.is_null()) throw ConfigError(fmt::format("{}: {}", source_, msg));
    throw ConfigError(fmt::format("{}:{}: {}", source_, mark.line + 1, msg));
  }

  void require_map(const YAML::Node& node, const std::string& name,
                   std::initializer_list<const char*> keys) const {
    if (!node.IsMap()) fail(node, fmt::format("'{}' must be a mapping", name));
    const std::set<std::string> allowed(keys.begin(), keys.end());
    for (const auto& kv : node) {
      const auto key = kv.first.as<std::string>();
      if (!allowed.contains(key)) {
        fail(kv.first, fmt::format("unknown key '{}' in '{}'", key, name));
      }
    }
  }

  template <typename T>
  T scalar(const YAML::Node& node, const std::string& key) const {
    if (!node.IsScalar()) fail(node, fmt::format("'{}' must be a scalar", key));
    try {
      return node.as<T>();
    } catch (const YAML::Exception&) {
      fail(node, fmt::format("bad value '{}' for '{}'", node.Scalar(), key));
    }
  }

  template <typename T>
  void get(const YAML::Node& map, const char* key, T& out) const {
    if (const auto n = map[key]) out = scalar<T>(n, key);
  }

  std::vector<std::string> list(const YAML::Node& n, const std::string& key) const {
    std::vector<std::string> out;
    if (n.IsScalar()) {
      out.push_back(n.Scalar());
    } else if (n.IsSequence()) {
      for (const auto& e : n) out.push_back(scalar<std::string>(e, key));
    } else {
      fail(n, fmt::format("'{}' must be a list", key));
    }
    return out;
  }

  template <typename F>
  auto convert(const YAML::Node& n, F&& f) const {
    try {
      return f();
    } catch (const ConfigError& e) {
      fail(n, e.what());
    }
  }

 private:
  std::string source_;
};

std::filesystem::path resolve(const std::filesystem::path& p,
                              const std::optional<std::filesystem::path>& root) {
  if (p.is_relative() && root) return *root / p;
  return p;
}

}  // namespace

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
    if (item.empty()) continue;
    if (const auto dash = item.find('-'); dash != std::string::npos) {
      const auto lo = parse_count(item.substr(0, dash), "seed");
      const auto hi = parse_count(item.substr(dash + 1), "seed");
      if (hi < lo) throw ConfigError(fmt::format("bad seed range '{}'", item));
      for (auto s = lo; s <= hi; ++s) out.push_back(s);
    } else {
      out.push_back(parse_count(item, "seed"));
    }
  }
  if (out.empty()) throw ConfigError(fmt::format("empty seed list '{}'", text));
  return out;
}

ExperimentConfig parse_config(const std::string& text, const std::string& source_name,
                              const std::optional<std::filesystem::path>& data_root) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(fmt::format("{}:{}: {}", source_name, e.mark.line + 1, e.msg));
  }
  const Reader rd(source_name);
  ExperimentConfig cfg;
  if (!root || root.IsNull()) throw ConfigError(source_name + ": empty configuration");
  rd.require_map(root, "top level",
                 {"dataset", "partition", "graph", "methods", "train", "faults", "eval", "seeds",
                  "output"});

  if (const auto d = root["dataset"]) {
    rd.require_map(d, "dataset",
                   {"source", "train_size", "test_size", "classes", "sigma", "seed",
                    "train_images", "train_labels", "test_images", "test_labels", "train_limit",
                    "test_limit"});
    auto& ds = cfg.dataset;
    std::string source = "synthetic";
    rd.get(d, "source", source);
    if (source == "synthetic") {
      ds.source = DatasetConfig::Source::synthetic;
    } else if (source == "idx") {
      ds.source = DatasetConfig::Source::idx;
    } else {
      rd.fail(d["source"], fmt::format("unknown dataset source '{}'", source));
    }
    rd.get(d, "train_size", ds.train_size);
    rd.get(d, "test_size", ds.test_size);
    rd.get(d, "classes", ds.classes);
    rd.get(d, "sigma", ds.sigma);
    rd.get(d, "seed", ds.seed);
    rd.get(d, "train_limit", ds.train_limit);
    rd.get(d, "test_limit", ds.test_limit);
    if (ds.source == DatasetConfig::Source::idx) {
      auto path = [&](const char* key, std::filesystem::path& out) {
        const auto n = d[key];
        if (!n) rd.fail(d, fmt::format("idx dataset needs '{}'", key));
        out = resolve(rd.scalar<std::string>(n, key), data_root);
        if (!std::filesystem::exists(out)) {
          rd.fail(n, fmt::format("dataset file '{}' does not exist", out.string()));
        }
      };
      path("train_images", ds.train_images);
      path("train_labels", ds.train_labels);
      path("test_images", ds.test_images);
      path("test_labels", ds.test_labels);
    }
  }

  if (const auto p = root["partition"]) {
    rd.require_map(p, "partition", {"grid_side"});
    rd.get(p, "grid_side", cfg.grid_side);
  }

  if (const auto g = root["graph"]) {
    rd.require_map(g, "graph", {"kind", "seed", "aggregators", "server"});
    if (const auto k = g["kind"]) {
      const auto text = rd.scalar<std::string>(k, "kind");
      cfg.graph = rd.convert(k, [&] { return GraphSpec::parse(text); });
    }
    rd.get(g, "seed", cfg.graph_seed);
    rd.get(g, "server", cfg.server_device);
    if (const auto a = g["aggregators"]) {
      const auto text = rd.scalar<std::string>(a, "aggregators");
      if (text == "lowest") {
        cfg.aggregator_choice = AggregatorChoice::lowest;
      } else if (text == "random") {
        cfg.aggregator_choice = AggregatorChoice::uniform_random;
      } else {
        rd.fail(a, fmt::format("aggregators must be 'lowest' or 'random', got '{}'", text));
      }
    }
  }

  if (const auto m = root["methods"]) {
    if (!m.IsSequence()) rd.fail(m, "'methods' must be a list");
    for (const auto& e : m) {
      const auto text = rd.scalar<std::string>(e, "methods");
      cfg.methods.push_back(rd.convert(e, [&] { return MethodSpec::parse(text); }));
    }
  }

  if (const auto t = root["train"]) {
    rd.require_map(t, "train",
                   {"epochs", "batch_size", "lr", "beta1", "beta2", "eps", "dropout_rate",
                    "gossip_rounds", "fault_kind", "fault_rate"});
    rd.get(t, "epochs", cfg.train.epochs);
    rd.get(t, "batch_size", cfg.train.batch_size);
    rd.get(t, "lr", cfg.train.adam.lr);
    rd.get(t, "beta1", cfg.train.adam.beta1);
    rd.get(t, "beta2", cfg.train.adam.beta2);
    rd.get(t, "eps", cfg.train.adam.eps);
    rd.get(t, "dropout_rate", cfg.dropout_rate);
    rd.get(t, "gossip_rounds", cfg.train.train_gossip_rounds);
    if (const auto k = t["fault_kind"]) {
      const auto text = rd.scalar<std::string>(k, "fault_kind");
      cfg.train.train_faults.kind = rd.convert(k, [&] { return parse_fault_kind(text); });
    }
    rd.get(t, "fault_rate", cfg.train.train_faults.rate);
  }

  cfg.fault_kinds = {FaultKind::communication};
  cfg.fault_rates = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
  if (const auto f = root["faults"]) {
    rd.require_map(f, "faults", {"kinds", "rates", "stay_alive", "burn_in"});
    if (const auto k = f["kinds"]) {
      cfg.fault_kinds.clear();
      for (const auto& s : rd.list(k, "kinds")) {
        cfg.fault_kinds.push_back(rd.convert(k, [&] { return parse_fault_kind(s); }));
      }
    }
    if (const auto r = f["rates"]) {
      cfg.fault_rates.clear();
      for (const auto& s : rd.list(r, "rates")) {
        try {
          std::size_t used = 0;
          const double v = std::stod(s, &used);
          if (used != s.size()) throw std::invalid_argument(s);
          cfg.fault_rates.push_back(v);
        } catch (const std::exception&) {
          rd.fail(r, fmt::format("bad fault rate '{}'", s));
        }
      }
    }
    rd.get(f, "stay_alive", cfg.stay_alive);
    rd.get(f, "burn_in", cfg.burn_in);
    cfg.train.train_faults.stay_alive = cfg.stay_alive;
    cfg.train.train_faults.burn_in = cfg.burn_in;
  }

  cfg.policies.assign(kAllPolicies.begin(), kAllPolicies.end());
  if (const auto e = root["eval"]) {
    rd.require_map(e, "eval", {"policies", "trials", "batch_size"});
    if (const auto p = e["policies"]) {
      cfg.policies.clear();
      if (!p.IsNull()) {
        for (const auto& s : rd.list(p, "policies")) {
          cfg.policies.push_back(rd.convert(p, [&] { return parse_policy(s); }));
        }
      }
      if (cfg.policies.empty()) rd.fail(p, "policy list is empty");
    }
    rd.get(e, "trials", cfg.eval_trials);
    rd.get(e, "batch_size", cfg.eval_batch_size);
  }

  for (std::uint64_t s = 1; s <= 16; ++s) cfg.seeds.push_back(s);
  if (const auto s = root["seeds"]) {
    cfg.seeds.clear();
    if (s.IsScalar()) {
      const auto text = s.Scalar();
      cfg.seeds = rd.convert(s, [&] { return parse_seed_list(text); });
    } else {
      for (const auto& v : rd.list(s, "seeds")) {
        cfg.seeds.push_back(rd.convert(s, [&] { return parse_count(v, "seed"); }));
      }
    }
    if (cfg.seeds.empty()) rd.fail(s, "seed list is empty");
  }

  if (const auto o = root["output"]) cfg.output = rd.scalar<std::string>(o, "output");

  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(fmt::format("{}: {}", source_name, e.what()));
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::optional<std::filesystem::path>& data_root) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config '{}'", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string(), data_root);
}

}  // namespace mags

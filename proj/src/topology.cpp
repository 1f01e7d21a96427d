#include "mags/topology.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <istream>
#include <ostream>
#include <sstream>

#include <fmt/format.h>

#include "mags/error.hpp"
#include "mags/rng.hpp"

namespace mags {

std::string GraphSpec::name() const {
  switch (kind) {
    case GraphKind::complete: return "complete";
    case GraphKind::ring: return "ring";
    case GraphKind::grid: return "grid";
    case GraphKind::torus: return "torus";
    case GraphKind::rgg: return fmt::format("rgg-{:g}", radius);
  }
  return "unknown";
}

GraphSpec GraphSpec::parse(const std::string& text) {
  if (text == "complete") return {GraphKind::complete};
  if (text == "ring") return {GraphKind::ring};
  if (text == "grid") return {GraphKind::grid};
  if (text == "torus") return {GraphKind::torus};
  if (text.rfind("rgg-", 0) == 0 || text.rfind("rgg:", 0) == 0) {
    try {
      std::size_t used = 0;
      double r = std::stod(text.substr(4), &used);
      if (used == text.size() - 4 && r > 0.0) return {GraphKind::rgg, r};
    } catch (const std::exception&) {
    }
  }
  throw ConfigError(fmt::format("unknown graph kind '{}'", text));
}

DeviceGraph::DeviceGraph(GraphSpec spec, std::size_t device_count,
                         std::vector<LatticePos> positions, std::vector<std::uint8_t> adjacency,
                         std::vector<std::size_t> aggregators)
    : spec_(spec),
      device_count_(device_count),
      positions_(std::move(positions)),
      adjacency_(std::move(adjacency)),
      aggregators_(std::move(aggregators)) {
  if (adjacency_.size() != device_count_ * device_count_) {
    throw ConfigError("adjacency size does not match device count");
  }
  for (std::size_t i = 0; i < device_count_; ++i) adjacency_[i * device_count_ + i] = 1;
  if (aggregators_.empty() || aggregators_.size() > device_count_) {
    throw ConfigError(fmt::format("aggregator count {} out of range [1, {}]",
                                  aggregators_.size(), device_count_));
  }
  std::vector<std::uint8_t> seen(device_count_, 0);
  for (std::size_t a : aggregators_) {
    if (a >= device_count_ || seen[a]) {
      throw ConfigError(fmt::format("invalid or repeated aggregator device {}", a));
    }
    seen[a] = 1;
  }
}

std::vector<std::size_t> DeviceGraph::neighbors(std::size_t i) const {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < device_count_; ++j) {
    if (j != i && adjacent(i, j)) out.push_back(j);
  }
  return out;
}

std::size_t DeviceGraph::degree(std::size_t i) const {
  std::size_t d = 0;
  for (std::size_t j = 0; j < device_count_; ++j) d += adjacent(i, j) ? 1 : 0;
  return d;
}

std::size_t DeviceGraph::undirected_edge_count() const {
  std::size_t e = 0;
  for (std::size_t i = 0; i < device_count_; ++i) {
    for (std::size_t j = i + 1; j < device_count_; ++j) e += adjacent(i, j) ? 1 : 0;
  }
  return e;
}

std::optional<std::size_t> DeviceGraph::aggregator_slot(std::size_t device) const {
  auto it = std::find(aggregators_.begin(), aggregators_.end(), device);
  if (it == aggregators_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - aggregators_.begin());
}

DeviceGraph DeviceGraph::with_aggregators(std::vector<std::size_t> aggregators) const {
  return DeviceGraph(spec_, device_count_, positions_, adjacency_, std::move(aggregators));
}

namespace {

std::size_t lattice_side(std::size_t c) {
  auto s = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(c))));
  while (s * s < c) ++s;
  return s;
}

bool is_lattice_kind(GraphKind k) {
  return k == GraphKind::grid || k == GraphKind::torus || k == GraphKind::rgg;
}

}  // namespace

DeviceGraph build_graph(GraphSpec spec, std::size_t device_count, std::size_t aggregator_count,
                        std::uint64_t seed, AggregatorChoice choice) {
  const std::size_t c = device_count;
  if (c == 0) throw ConfigError("device count must be positive");
  if (aggregator_count < 1 || aggregator_count > c) {
    throw ConfigError(fmt::format("aggregator count {} out of range [1, {}]", aggregator_count, c));
  }
  const std::size_t side = lattice_side(c);
  if (is_lattice_kind(spec.kind) && side * side != c) {
    throw ConfigError(fmt::format("graph kind {} needs a perfect-square device count, got {}",
                                  spec.name(), c));
  }
  if (spec.kind == GraphKind::rgg && !(spec.radius > 0.0)) {
    throw ConfigError("rgg radius must be positive");
  }
  std::vector<LatticePos> pos(c);
  for (std::size_t i = 0; i < c; ++i) {
    pos[i] = {static_cast<int>(i / side), static_cast<int>(i % side)};
  }
  std::vector<std::uint8_t> adj(c * c, 0);
  auto link = [&](std::size_t i, std::size_t j) {
    adj[i * c + j] = 1;
    adj[j * c + i] = 1;
  };
  const int s = static_cast<int>(side);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = i + 1; j < c; ++j) {
      const int dr = std::abs(pos[i].row - pos[j].row);
      const int dc = std::abs(pos[i].col - pos[j].col);
      bool edge = false;
      switch (spec.kind) {
        case GraphKind::complete: edge = true; break;
        case GraphKind::ring: edge = (j == i + 1) || (i == 0 && j == c - 1); break;
        case GraphKind::grid: edge = dr + dc == 1; break;
        case GraphKind::torus: {
          const int wr = std::min(dr, s - dr);
          const int wc = std::min(dc, s - dc);
          edge = wr + wc == 1;
          break;
        }
        case GraphKind::rgg:
          edge = std::sqrt(static_cast<double>(dr * dr + dc * dc)) <= spec.radius;
          break;
      }
      if (edge) link(i, j);
    }
  }
  std::vector<std::size_t> aggs;
  if (choice == AggregatorChoice::lowest) {
    for (std::size_t k = 0; k < aggregator_count; ++k) aggs.push_back(k);
  } else {
    Rng rng(derive_seed(seed, "aggregators"));
    auto order = permutation(c, rng);
    aggs.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(aggregator_count));
    std::sort(aggs.begin(), aggs.end());
  }
  return DeviceGraph(spec, c, std::move(pos), std::move(adj), std::move(aggs));
}

ConsensusMatrix consensus_matrix(const DeviceGraph& g, std::span<const std::size_t> subset) {
  const std::size_t n = subset.size();
  ConsensusMatrix cm{Matrix(n, n), std::vector<double>(n, 0.0)};
  for (std::size_t a = 0; a < n; ++a) {
    double d = 0.0;
    for (std::size_t b = 0; b < n; ++b) d += g.adjacent(subset[a], subset[b]) ? 1.0 : 0.0;
    if (d == 0.0) throw ConfigError(fmt::format("device {} is isolated", subset[a]));
    cm.degree[a] = d;
    for (std::size_t b = 0; b < n; ++b) {
      if (g.adjacent(subset[a], subset[b])) cm.v(a, b) = 1.0 / d;
    }
  }
  return cm;
}

ConsensusMatrix consensus_matrix(const DeviceGraph& g) {
  std::vector<std::size_t> all(g.device_count());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return consensus_matrix(g, all);
}

double spectral_radius(const ConsensusMatrix& cm, PowerIterationOptions options) {
  const std::size_t n = cm.v.rows();
  if (n == 0) throw ConfigError("empty consensus matrix");
  const double inv_n = 1.0 / static_cast<double>(n);
  // y = (V - 11^T/n) x = V x - mean(x) 1
  auto apply = [&](const std::vector<double>& x) {
    double mean = 0.0;
    for (double v : x) mean += v;
    mean *= inv_n;
    std::vector<double> y(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      auto row = cm.v.row(i);
      for (std::size_t j = 0; j < n; ++j) s += row[j] * x[j];
      y[i] = s - mean;
    }
    return y;
  };
  auto norm = [](const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return std::sqrt(s);
  };
  Rng rng(options.seed);
  std::vector<double> x(n);
  for (double& v : x) v = 2.0 * rng.uniform() - 1.0;
  double nx = norm(x);
  for (double& v : x) v /= nx;

  double estimate = -1.0;
  double gap = 0.0;
  for (std::size_t it = 0; it < options.max_iterations; ++it) {
    auto z = apply(apply(x));
    const double nz = norm(z);
    if (nz < 1e-300) return 0.0;
    const double next = std::sqrt(nz);
    gap = std::abs(next - estimate);
    estimate = next;
    for (std::size_t i = 0; i < n; ++i) x[i] = z[i] / nz;
    if (gap < options.tolerance) return estimate;
  }
  throw NumericError(
      fmt::format("spectral radius did not converge in {} iterations (last gap {:.3e})",
                  options.max_iterations, gap),
      gap);
}

bool is_connected(const DeviceGraph& g, std::span<const std::size_t> subset) {
  if (subset.empty()) throw ConfigError("is_connected: subset must be nonempty");
  const std::size_t c = g.device_count();
  std::vector<std::uint8_t> in(c, 0), seen(c, 0);
  for (std::size_t d : subset) {
    if (d >= c) throw ConfigError(fmt::format("device {} out of range", d));
    in[d] = 1;
  }
  std::deque<std::size_t> queue{subset.front()};
  seen[subset.front()] = 1;
  std::size_t reached = 1;
  while (!queue.empty()) {
    const std::size_t u = queue.front();
    queue.pop_front();
    for (std::size_t v = 0; v < c; ++v) {
      if (in[v] && !seen[v] && g.adjacent(u, v)) {
        seen[v] = 1;
        ++reached;
        queue.push_back(v);
      }
    }
  }
  std::size_t distinct = 0;
  for (auto f : in) distinct += f;
  return reached == distinct;
}

void write_edge_list(std::ostream& out, const DeviceGraph& g) {
  out << fmt::format("# C={} K={} kind={}\n", g.device_count(), g.aggregators().size(),
                     g.spec().name());
  for (std::size_t i = 0; i < g.device_count(); ++i) {
    for (std::size_t j = i + 1; j < g.device_count(); ++j) {
      if (g.adjacent(i, j)) out << (i + 1) << ' ' << (j + 1) << '\n';
    }
  }
  for (std::size_t a : g.aggregators()) out << 0 << ' ' << (a + 1) << '\n';
}

DeviceGraph read_edge_list(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("edge list: missing header");
  std::size_t c = 0, k = 0;
  char kind[64] = {0};
  if (std::sscanf(line.c_str(), "# C=%zu K=%zu kind=%63s", &c, &k, kind) != 3 || c == 0) {
    throw ParseError(fmt::format("edge list: bad header '{}'", line));
  }
  GraphSpec spec = GraphSpec::parse(kind);
  const std::size_t side = lattice_side(c);
  std::vector<LatticePos> pos(c);
  for (std::size_t i = 0; i < c; ++i) {
    pos[i] = {static_cast<int>(i / side), static_cast<int>(i % side)};
  }
  std::vector<std::uint8_t> adj(c * c, 0);
  std::vector<std::size_t> aggs;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    long u = -1, v = -1;
    if (!(ls >> u >> v) || u < 0 || v < 0 || static_cast<std::size_t>(u) > c ||
        static_cast<std::size_t>(v) > c || v == 0) {
      throw ParseError(fmt::format("edge list line {}: bad pair '{}'", lineno, line));
    }
    if (u == 0) {
      aggs.push_back(static_cast<std::size_t>(v - 1));
    } else {
      adj[(u - 1) * c + (v - 1)] = 1;
      adj[(v - 1) * c + (u - 1)] = 1;
    }
  }
  if (aggs.size() != k) {
    throw ParseError(fmt::format("edge list: header says K={} but {} entity links found", k,
                                 aggs.size()));
  }
  return DeviceGraph(spec, c, std::move(pos), std::move(adj), std::move(aggs));
}

}  // namespace mags

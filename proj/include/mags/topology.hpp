#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mags/nn.hpp"

namespace mags {

// torus is the grid with wrap-around; it is the regular sparse lattice used
// by the gossip contraction certificate.
enum class GraphKind { complete, ring, grid, torus, rgg };

struct GraphSpec {
  GraphKind kind = GraphKind::complete;
  double radius = 1.0;  // rgg only

  std::string name() const;  // "complete", "ring", "grid", "torus", "rgg-1.5"
  static GraphSpec parse(const std::string& text);
};

struct LatticePos {
  int row = 0;
  int col = 0;
};

enum class AggregatorChoice { lowest, uniform_random };

// Undirected base topology over devices 0..C-1. The external collection
// entity is implicit: it links to every aggregator and to nothing else.
// Every device has a self-loop. External formats number devices 1..C and
// reserve 0 for the entity.
class DeviceGraph {
 public:
  DeviceGraph(GraphSpec spec, std::size_t device_count, std::vector<LatticePos> positions,
              std::vector<std::uint8_t> adjacency, std::vector<std::size_t> aggregators);

  const GraphSpec& spec() const { return spec_; }
  std::size_t device_count() const { return device_count_; }
  const std::vector<LatticePos>& positions() const { return positions_; }

  // Includes self-loops: adjacent(i, i) is always true.
  bool adjacent(std::size_t i, std::size_t j) const {
    return adjacency_[i * device_count_ + j] != 0;
  }
  std::vector<std::size_t> neighbors(std::size_t i) const;  // excludes i
  std::size_t degree(std::size_t i) const;                  // includes the self-loop
  std::size_t undirected_edge_count() const;                // device pairs, no self-loops

  const std::vector<std::size_t>& aggregators() const { return aggregators_; }
  std::optional<std::size_t> aggregator_slot(std::size_t device) const;

  DeviceGraph with_aggregators(std::vector<std::size_t> aggregators) const;

 private:
  GraphSpec spec_;
  std::size_t device_count_;
  std::vector<LatticePos> positions_;
  std::vector<std::uint8_t> adjacency_;
  std::vector<std::size_t> aggregators_;
};

// Lattice kinds (grid, torus, rgg) need C to be a perfect square; positions
// are row-major integer coordinates on a ceil(sqrt(C)) lattice.
DeviceGraph build_graph(GraphSpec spec, std::size_t device_count, std::size_t aggregator_count,
                        std::uint64_t seed = 0,
                        AggregatorChoice choice = AggregatorChoice::lowest);

struct ConsensusMatrix {
  Matrix v;                    // D^-1 A, row-stochastic
  std::vector<double> degree;  // self-loop included
};

ConsensusMatrix consensus_matrix(const DeviceGraph& g);
// Consensus matrix of the subgraph induced by subset (rows/cols in subset order).
ConsensusMatrix consensus_matrix(const DeviceGraph& g, std::span<const std::size_t> subset);

struct PowerIterationOptions {
  std::size_t max_iterations = 10000;
  double tolerance = 1e-10;
  std::uint64_t seed = 0x5eedULL;
};

// max |eigenvalue| of V - 11^T/C by power iteration on the squared operator
// (robust to +-lambda pairs). Throws NumericError on non-convergence.
double spectral_radius(const ConsensusMatrix& v, PowerIterationOptions options = {});

// Breadth-first reachability inside the subgraph induced by subset.
bool is_connected(const DeviceGraph& g, std::span<const std::size_t> subset);

// "# C=16 K=4 kind=grid" header, then one "u v" line per undirected device
// pair (u < v) and one "0 k" line per aggregator, with 1-based device ids.
void write_edge_list(std::ostream& out, const DeviceGraph& g);
DeviceGraph read_edge_list(std::istream& in);

}  // namespace mags

#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <sstream>

#include "mags/error.hpp"
#include "mags/topology.hpp"

using namespace mags;

namespace {

// Largest |eigenvalue| of V - 11^T/n by a dense eigensolver.
double dense_radius(const ConsensusMatrix& cm) {
  const std::size_t n = cm.v.rows();
  Eigen::MatrixXd m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) m(i, j) = cm.v(i, j) - 1.0 / static_cast<double>(n);
  }
  return Eigen::EigenSolver<Eigen::MatrixXd>(m).eigenvalues().cwiseAbs().maxCoeff();
}

std::vector<std::size_t> all_devices(std::size_t c) {
  std::vector<std::size_t> v(c);
  for (std::size_t i = 0; i < c; ++i) v[i] = i;
  return v;
}

bool same_edges(const DeviceGraph& a, const DeviceGraph& b) {
  if (a.device_count() != b.device_count()) return false;
  for (std::size_t i = 0; i < a.device_count(); ++i) {
    for (std::size_t j = 0; j < a.device_count(); ++j) {
      if (a.adjacent(i, j) != b.adjacent(i, j)) return false;
    }
  }
  return true;
}

}  // namespace

TEST_SUITE("topology") {

TEST_CASE("edge counts") {
  const auto grid = build_graph({GraphKind::grid}, 16, 1);
  CHECK(grid.undirected_edge_count() == 24);
  for (std::size_t i = 0; i < 16; ++i) CHECK(grid.adjacent(i, i));
  CHECK(build_graph({GraphKind::complete}, 4, 1).undirected_edge_count() == 6);
  CHECK(build_graph({GraphKind::complete}, 16, 1).undirected_edge_count() == 120);
  CHECK(build_graph({GraphKind::ring}, 16, 1).undirected_edge_count() == 16);
  CHECK(build_graph({GraphKind::torus}, 16, 1).undirected_edge_count() == 32);
  CHECK(build_graph({GraphKind::rgg, 1.5}, 16, 1).undirected_edge_count() == 42);
}

TEST_CASE("rgg with radius 1 equals the grid") {
  for (std::size_t c : {4u, 16u, 49u}) {
    CHECK(same_edges(build_graph({GraphKind::rgg, 1.0}, c, 1), build_graph({GraphKind::grid}, c, 1)));
  }
}

TEST_CASE("lattice kinds need a perfect square and K in range") {
  CHECK_THROWS_AS(build_graph({GraphKind::grid}, 15, 1), ConfigError);
  CHECK_THROWS_AS(build_graph({GraphKind::rgg, 2.0}, 10, 1), ConfigError);
  CHECK_THROWS_AS(build_graph({GraphKind::complete}, 4, 0), ConfigError);
  CHECK_THROWS_AS(build_graph({GraphKind::complete}, 4, 5), ConfigError);
  CHECK_NOTHROW(build_graph({GraphKind::ring}, 15, 15));
}

TEST_CASE("aggregator choice") {
  const auto low = build_graph({GraphKind::complete}, 16, 4);
  CHECK(low.aggregators() == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(low.aggregator_slot(2) == 2u);
  CHECK(!low.aggregator_slot(5).has_value());
  const auto a = build_graph({GraphKind::complete}, 16, 4, 7, AggregatorChoice::uniform_random);
  const auto b = build_graph({GraphKind::complete}, 16, 4, 7, AggregatorChoice::uniform_random);
  CHECK(a.aggregators() == b.aggregators());
  CHECK(a.aggregators().size() == 4);
}

TEST_CASE("consensus matrix entries") {
  const auto complete = consensus_matrix(build_graph({GraphKind::complete}, 16, 1));
  for (double v : complete.v.values()) CHECK(v == doctest::Approx(1.0 / 16.0));

  const auto ring = consensus_matrix(build_graph({GraphKind::ring}, 4, 1));
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(ring.v(i, i) == doctest::Approx(1.0 / 3.0));
    CHECK(ring.v(i, (i + 1) % 4) == doctest::Approx(1.0 / 3.0));
    CHECK(ring.v(i, (i + 2) % 4) == 0.0);
  }

  const auto grid = consensus_matrix(build_graph({GraphKind::grid}, 16, 1));
  CHECK(grid.v(0, 0) == doctest::Approx(1.0 / 3.0));
  CHECK(grid.v(0, 1) == doctest::Approx(1.0 / 3.0));
  CHECK(grid.v(0, 4) == doctest::Approx(1.0 / 3.0));
  CHECK(grid.v(5, 5) == doctest::Approx(1.0 / 5.0));
  CHECK(grid.v(5, 9) == doctest::Approx(1.0 / 5.0));
}

TEST_CASE("consensus rows sum to one") {
  for (std::size_t c : {4u, 16u, 49u}) {
    for (auto spec : {GraphSpec{GraphKind::complete}, GraphSpec{GraphKind::ring},
                      GraphSpec{GraphKind::grid}, GraphSpec{GraphKind::torus},
                      GraphSpec{GraphKind::rgg, 1.5}, GraphSpec{GraphKind::rgg, 2.5}}) {
      const auto cm = consensus_matrix(build_graph(spec, c, 1));
      for (std::size_t i = 0; i < c; ++i) {
        double s = 0.0;
        for (double v : cm.v.row(i)) s += v;
        CHECK(std::abs(s - 1.0) < 1e-12);
      }
    }
  }
}

TEST_CASE("spectral radius examples") {
  CHECK(spectral_radius(consensus_matrix(build_graph({GraphKind::complete}, 16, 1))) < 1e-9);
  const double ring16 = spectral_radius(consensus_matrix(build_graph({GraphKind::ring}, 16, 1)));
  CHECK(std::abs(ring16 - (1.0 + 2.0 * std::cos(std::numbers::pi / 8.0)) / 3.0) < 1e-6);
  CHECK(std::abs(ring16 - 0.949253) < 1e-6);
  const double ring4 = spectral_radius(consensus_matrix(build_graph({GraphKind::ring}, 4, 1)));
  CHECK(std::abs(ring4 - 1.0 / 3.0) < 1e-6);
}

TEST_CASE("spectral radius matches a dense eigensolver") {
  for (std::size_t c : {4u, 16u, 49u}) {
    for (auto spec : {GraphSpec{GraphKind::ring}, GraphSpec{GraphKind::grid},
                      GraphSpec{GraphKind::torus}, GraphSpec{GraphKind::rgg, 1.5},
                      GraphSpec{GraphKind::rgg, 2.0}}) {
      const auto cm = consensus_matrix(build_graph(spec, c, 1));
      const double lambda = spectral_radius(cm);
      CAPTURE(spec.name());
      CAPTURE(c);
      CHECK(std::abs(lambda - dense_radius(cm)) < 1e-6);
      CHECK(lambda < 1.0);
    }
  }
}

TEST_CASE("disconnected subset has radius one") {
  const auto ring = build_graph({GraphKind::ring}, 16, 1);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < 16; ++i) {
    if (i != 0 && i != 8) keep.push_back(i);
  }
  CHECK(!is_connected(ring, keep));
  CHECK(std::abs(spectral_radius(consensus_matrix(ring, keep)) - 1.0) < 1e-6);
}

TEST_CASE("non-convergence reports the last gap") {
  PowerIterationOptions opts;
  opts.max_iterations = 2;
  opts.tolerance = 0.0;
  try {
    spectral_radius(consensus_matrix(build_graph({GraphKind::ring}, 16, 1)), opts);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.last_gap() >= 0.0);
  }
}

TEST_CASE("connectivity") {
  const auto complete = build_graph({GraphKind::complete}, 16, 1);
  CHECK(is_connected(complete, all_devices(16)));
  CHECK(is_connected(complete, std::vector<std::size_t>{3, 9}));
  CHECK(is_connected(complete, std::vector<std::size_t>{5}));
  const auto ring = build_graph({GraphKind::ring}, 16, 1);
  CHECK(is_connected(ring, all_devices(16)));
  CHECK(!is_connected(ring, std::vector<std::size_t>{0, 2}));
}

TEST_CASE("build_graph is deterministic") {
  const auto a = build_graph({GraphKind::rgg, 2.0}, 16, 3, 5, AggregatorChoice::uniform_random);
  const auto b = build_graph({GraphKind::rgg, 2.0}, 16, 3, 5, AggregatorChoice::uniform_random);
  CHECK(same_edges(a, b));
  CHECK(a.aggregators() == b.aggregators());
}

TEST_CASE("edge list round trip") {
  const auto g = build_graph({GraphKind::grid}, 16, 4);
  std::stringstream ss;
  write_edge_list(ss, g);
  const std::string text = ss.str();
  CHECK(text.rfind("# C=16 K=4 kind=grid\n", 0) == 0);
  CHECK(text.find("\n1 2\n") != std::string::npos);
  CHECK(text.find("\n0 1\n") != std::string::npos);
  const auto back = read_edge_list(ss);
  CHECK(same_edges(g, back));
  CHECK(back.aggregators() == g.aggregators());

  std::stringstream bad("# C=4 K=1 kind=ring\n1 x\n");
  CHECK_THROWS_AS(read_edge_list(bad), ParseError);
}

TEST_CASE("graph names parse back") {
  for (const char* name : {"complete", "ring", "grid", "torus", "rgg-1.5"}) {
    CHECK(GraphSpec::parse(name).name() == name);
  }
  CHECK_THROWS_AS(GraphSpec::parse("star"), ConfigError);
}

}

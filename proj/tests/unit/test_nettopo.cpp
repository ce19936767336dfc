#include <cmath>
#include <set>

#include "doctest.h"
#include "glance/nettopo.hpp"

using namespace glance;

namespace {

int neighbor_count(const Graph& g, int u) {
  int n = 0;
  for (int v = 0; v < g.node_count(); ++v) n += g.weight(u, v) > 0.0;
  return n;
}

void check_invariants(const Graph& g) {
  for (int i = 0; i < g.node_count(); ++i) {
    CHECK(g.weight(i, i) == 0.0);
    for (int j = 0; j < g.node_count(); ++j) {
      CHECK(g.weight(i, j) == g.weight(j, i));
      CHECK((g.weight(i, j) > 0.0) == (g.link_index(i, j) >= 0));
    }
  }
}

}  // namespace

TEST_CASE("nsfnet has 14 nodes and 42 directed unit links") {
  const auto g = build_nsfnet();
  CHECK(g.node_count() == 14);
  CHECK(g.link_count() == 42);
  CHECK(g.wired());
  check_invariants(g);
  for (const auto& [a, b] : g.links()) CHECK(g.weight(a, b) == 1.0);
}

TEST_CASE("nsfnet degree sum") {
  // Oracle: degree of each endpoint counted from the raw edge list.
  const int edges[21][2] = {{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 7},  {2, 5},   {3, 4},
                            {3, 8}, {4, 5}, {4, 6}, {5, 12}, {5, 13}, {6, 7},  {7, 10},
                            {8, 9}, {8, 11}, {9, 10}, {9, 12}, {10, 11}, {10, 13}, {11, 12}};
  std::vector<double> expected(14, 0.0);
  for (const auto& e : edges) {
    expected[e[0]] += 1.0;
    expected[e[1]] += 1.0;
  }
  const auto d = build_nsfnet().degrees();
  double total = 0.0;
  for (int i = 0; i < 14; ++i) {
    CHECK(d[i] == expected[i]);
    total += d[i];
  }
  // Each undirected edge contributes to two diagonal entries.
  CHECK(total == 42.0);
}

TEST_CASE("degree equals weighted row sum for symmetric adjacency") {
  const auto g = build_pert_grid(4, 4, 30.0, 10.0, 5);
  const auto d = g.degrees();
  for (int i = 0; i < g.node_count(); ++i) {
    double row = 0.0;
    for (int j = 0; j < g.node_count(); ++j) row += g.weight(i, j);
    CHECK(std::abs(d[i] - row) < 1e-12);
  }
}

TEST_CASE("regular grid") {
  const auto g = build_reg_grid(4, 4, 30.0);
  CHECK(g.node_count() == 16);
  CHECK_FALSE(g.wired());
  check_invariants(g);
  CHECK(neighbor_count(g, 0) == 3);
  CHECK(neighbor_count(g, 5) == 8);  // interior: 4 straight + 4 diagonal

  const auto pair = build_reg_grid(1, 2, 30.0);
  CHECK(pair.link_count() == 2);
  CHECK(pair.weight(0, 1) == doctest::Approx(1.0 / std::log(901.0)).epsilon(1e-12));

  CHECK_THROWS_AS(build_reg_grid(0, 4, 30.0), std::invalid_argument);
  CHECK_THROWS_AS(build_reg_grid(1, 1, 30.0), std::invalid_argument);
  CHECK_THROWS_AS(build_reg_grid(4, 4, -1.0), std::invalid_argument);
}

TEST_CASE("perturbed grid") {
  SUBCASE("radius zero is the regular grid") {
    CHECK(build_pert_grid(4, 4, 30.0, 0.0, 123) == build_reg_grid(4, 4, 30.0));
  }
  SUBCASE("nodes stay within the disc") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto g = build_pert_grid(4, 4, 30.0, 10.0, seed);
      check_invariants(g);
      const auto& pos = *g.positions();
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) {
          const auto& p = pos[r * 4 + c];
          CHECK(std::hypot(p.x - 30.0 * c, p.y - 30.0 * r) <= 10.0);
        }
    }
  }
  SUBCASE("distinct seeds give distinct adjacency") {
    int differ = 0, pairs = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
      ++pairs;
      differ += build_pert_grid(4, 4, 30.0, 10.0, 2 * s).adjacency() !=
                build_pert_grid(4, 4, 30.0, 10.0, 2 * s + 1).adjacency();
    }
    CHECK(static_cast<double>(differ) / pairs > 0.9);
  }
  SUBCASE("same seed is reproducible") {
    CHECK(build_pert_grid(4, 4, 30.0, 10.0, 9) == build_pert_grid(4, 4, 30.0, 10.0, 9));
  }
  CHECK_THROWS_AS(build_pert_grid(4, 4, 30.0, -1.0, 1), std::invalid_argument);
}

TEST_CASE("wireless weights") {
  CHECK(wireless_weight(30.0) == doctest::Approx(0.146984).epsilon(1e-5));
  CHECK(wireless_weight(30.0 * std::sqrt(2.0)) == doctest::Approx(0.133397).epsilon(1e-5));
  CHECK(wireless_weight(30.0 * std::sqrt(2.0)) < wireless_weight(30.0));
  for (double d = 0.5; d < 45.0; d += 0.5) CHECK(wireless_weight(d + 0.5) < wireless_weight(d));

  const auto a = wireless_adjacency({{0, 0}, {50, 0}}, 45.0);
  CHECK(a[0][1] == 0.0);
  CHECK_THROWS_AS(wireless_adjacency({{1, 1}, {1, 1}}), std::invalid_argument);
}

TEST_CASE("path loss") {
  CHECK(path_loss_db(1.0) == doctest::Approx(46.67));
  CHECK(path_loss_db(10.0) == doctest::Approx(76.67));
  CHECK(path_loss_db(30.0) == doctest::Approx(46.67 + 30.0 * std::log10(30.0)));
  CHECK(path_loss_db(30.0) == doctest::Approx(90.983).epsilon(1e-4));
  CHECK_THROWS_AS(path_loss_db(0.0), std::invalid_argument);
  CHECK_THROWS_AS(path_loss_db(-3.0), std::invalid_argument);
}

TEST_CASE("graph validation") {
  CHECK_THROWS_AS(Graph({{0, 1}, {0, 0}}, true), std::invalid_argument);       // asymmetric
  CHECK_THROWS_AS(Graph({{1, 0}, {0, 0}}, true), std::invalid_argument);       // self loop
  CHECK_THROWS_AS(Graph({{0, 0.5}, {0.5, 0}}, true), std::invalid_argument);   // non-unit wired
  CHECK_THROWS_AS(Graph({{0, -1}, {-1, 0}}, false), std::invalid_argument);    // negative
  CHECK_THROWS_AS(Graph({{0, 1, 0}, {1, 0}}, true), std::invalid_argument);    // ragged
  CHECK_NOTHROW(Graph({{0, 0.5}, {0.5, 0}}, false));
}

TEST_CASE("flow sampling") {
  const auto two = build_reg_grid(1, 2, 30.0);
  const auto f = sample_flows(two, 2, 1);
  std::set<std::pair<int, int>> got;
  for (int i = 0; i < f.size(); ++i) got.emplace(f.sources[i], f.destinations[i]);
  CHECK(got == std::set<std::pair<int, int>>{{0, 1}, {1, 0}});
  CHECK_THROWS_AS(sample_flows(two, 3, 1), std::invalid_argument);

  const auto g = build_reg_grid();
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto fs = sample_flows(g, 10, seed);
    CHECK_NOTHROW(fs.validate(16));
    CHECK(fs.size() == 10);
  }
  CHECK(sample_flows(g, 10, 77) == sample_flows(g, 10, 77));
  CHECK_FALSE(sample_flows(g, 10, 77) == sample_flows(g, 10, 78));

  FlowSet bad{{0, 0}, {1, 1}};
  CHECK_THROWS_AS(bad.validate(4), std::invalid_argument);
  FlowSet self{{2}, {2}};
  CHECK_THROWS_AS(self.validate(4), std::invalid_argument);
}

TEST_CASE("topology json round trip") {
  for (const auto& g : {build_nsfnet(), build_pert_grid(4, 4, 30.0, 10.0, 3)}) {
    const auto back = graph_from_json(nlohmann::json::parse(graph_to_json(g).dump()));
    CHECK(back == g);
  }
  const auto fs = sample_flows(build_nsfnet(), 10, 4);
  CHECK(flows_from_json(flows_to_json(fs)) == fs);

  auto j = graph_to_json(build_nsfnet());
  j["edges"][0][2] = 0.5;
  CHECK_THROWS(graph_from_json(j));
}

TEST_CASE("connectivity") {
  const Graph g({{0, 1, 0}, {1, 0, 0}, {0, 0, 0}}, true);
  CHECK(is_connected(g, 0, 1));
  CHECK_FALSE(is_connected(g, 0, 2));
}

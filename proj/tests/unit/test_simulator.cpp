#include <cmath>

#include "doctest.h"
#include "glance/simulator.hpp"

using namespace glance;

namespace {

Graph line3() { return Graph({{0, 1, 0}, {1, 0, 1}, {0, 1, 0}}, true); }

SimConfig short_wireless() {
  auto c = SimConfig::wireless();
  c.t_gen = 30.0;
  return c;
}

void check_conservation(const SimResult& r) {
  for (const auto& f : r.flows) CHECK(f.generated == f.delivered + f.dropped + f.in_flight);
  for (const auto& l : r.links) CHECK(l.arrivals == l.served + l.dropped + l.queued_at_end);
}

}  // namespace

TEST_CASE("discrete traffic levels") {
  const auto t = sample_traffic_params(5000, TrafficMode::discrete, 1);
  int count[3] = {0, 0, 0};
  for (double v : t.flattened()) {
    REQUIRE((v == 1.0 || v == 10.0 || v == 20.0));
    count[v == 1.0 ? 0 : v == 10.0 ? 1 : 2]++;
  }
  const double n = 10000.0, p = 1.0 / 3.0, sigma = std::sqrt(n * p * (1 - p));
  for (int c : count) CHECK(std::abs(c - n * p) < 3.0 * sigma);
}

TEST_CASE("continuous traffic range") {
  const auto t = sample_traffic_params(1000, TrafficMode::continuous, 2);
  for (double v : t.flattened()) CHECK((v >= 1.0 && v <= 20.0));
  CHECK(TrafficParams::from_flattened(t.flattened()) == t);
  CHECK(sample_traffic_params(10, TrafficMode::continuous, 2) == sample_traffic_params(10, TrafficMode::continuous, 2));
}

TEST_CASE("idle two-link wired path has store-and-forward delay") {
  // tau_off is never reached within the horizon, and the CBR interval (16.8 ms)
  // exceeds the per-link service time, so packets never queue.
  auto cfg = SimConfig::wired();
  cfg.t_gen = 10.0;
  const FlowSet flows{{0}, {2}};
  const auto table = shortest_paths(line3(), flows, 0);
  const TrafficParams traffic{{1e9}, {1.0}};
  const auto r = simulate(line3(), table, traffic, cfg, 3);
  const double expected_ms = 1000.0 * 2.0 * (210.0 * 8.0) / cfg.link_capacity_default;
  CHECK(r.kpis.at(0, kDelay) == doctest::Approx(expected_ms).epsilon(1e-9));
  CHECK(r.kpis.at(0, kJitter) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(r.kpis.at(0, kThroughput) <= 100.0);
  CHECK(r.kpis.at(0, kThroughput) > 99.0);
  CHECK(r.kpis.at(0, kDrops) <= 1.0);  // at most the packet in transit at the horizon
  check_conservation(r);
}

TEST_CASE("saturated shared link") {
  // Two flows at 1 Mb/s each share link (1,2) of capacity 1 Mb/s.
  auto cfg = SimConfig::wired();
  cfg.t_gen = 30.0;
  cfg.cbr_rate = 1e6;
  const Graph g({{0, 1, 0, 0}, {1, 0, 1, 1}, {0, 1, 0, 0}, {0, 1, 0, 0}}, true);
  const FlowSet flows{{0, 3}, {2, 2}};
  const auto table = shortest_paths(g, flows, 0);
  const auto r = simulate(g, table, TrafficParams{{1e9, 1e9}, {1, 1}}, cfg, 4);
  const double total = r.kpis.at(0, kThroughput) + r.kpis.at(1, kThroughput);
  CHECK(total <= 1000.0 + 1e-9);
  CHECK(total > 900.0);
  CHECK(r.kpis.at(0, kDrops) > 0.0);
  CHECK(r.kpis.at(1, kDrops) > 0.0);
  const int shared = g.link_index(1, 2);
  CHECK(r.links[shared].served_bits <= cfg.link_capacity_default * cfg.t_gen + 1e-6);
  check_conservation(r);
}

TEST_CASE("random grid instances conserve packets") {
  const auto cfg = short_wireless();
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto g = build_pert_grid(4, 4, 30.0, 10.0, s);
    const auto flows = sample_flows(g, 10, s);
    const auto traffic = sample_traffic_params(10, TrafficMode::discrete, s);
    const auto table = shortest_paths(g, flows, s);
    const auto r = simulate(g, table, traffic, cfg, s);
    check_conservation(r);
    const auto caps = link_capacities(g, cfg);
    for (int l = 0; l < g.link_count(); ++l) CHECK(r.links[l].served_bits <= caps[l] * cfg.t_gen + 1e-6);
    for (int f = 0; f < 10; ++f) {
      CHECK(r.kpis.at(f, kThroughput) <= cfg.cbr_rate / 1000.0 + 1e-9);
      for (int k = 0; k < kKpiCount; ++k)
        if (!is_missing(r.kpis.at(f, k))) CHECK(r.kpis.at(f, k) >= 0.0);
    }
  }
}

TEST_CASE("wireless contention slows neighbouring flows") {
  // Two single-hop flows between disjoint node pairs in carrier-sense range
  // share the channel; without contention they would not interact.
  auto cfg = short_wireless();
  cfg.cbr_rate = 400'000.0;
  const auto g = build_reg_grid(2, 2);
  const FlowSet flows{{0, 2}, {1, 3}};
  const auto table = shortest_paths(g, flows, 0);
  const TrafficParams traffic{{1e9, 1e9}, {1, 1}};
  const auto with = simulate(g, table, traffic, cfg, 1);
  cfg.wireless_contention = false;
  const auto without = simulate(g, table, traffic, cfg, 1);
  CHECK(with.kpis.at(0, kDelay) + with.kpis.at(1, kDelay) > without.kpis.at(0, kDelay) + without.kpis.at(1, kDelay));
  check_conservation(with);
}

TEST_CASE("simulation is deterministic") {
  const auto g = build_reg_grid();
  const auto flows = sample_flows(g, 10, 1);
  const auto traffic = sample_traffic_params(10, TrafficMode::discrete, 1);
  const auto a = run_benchmarks(g, flows, traffic, short_wireless(), 4, 17);
  const auto b = run_benchmarks(g, flows, traffic, short_wireless(), 4, 17);
  REQUIRE(a.records.size() == 4);
  for (int r = 0; r < 4; ++r) CHECK(a.records[r].identical(b.records[r]));
  CHECK(a.seeds == b.seeds);
  CHECK(a.reference_table == b.reference_table);
  CHECK(a.reference_table == shortest_paths(g, flows, a.seeds[0]));

  const auto one = run_benchmarks(g, flows, traffic, short_wireless(), 1, 17);
  CHECK(one.records.size() == 1);
  CHECK(one.records[0].identical(a.records[0]));
  CHECK_THROWS_AS(run_benchmarks(g, flows, traffic, short_wireless(), 0, 17), std::invalid_argument);
}

TEST_CASE("benchmark runs may reroute") {
  const auto g = build_reg_grid();
  const FlowSet flows{{0}, {15}};  // many minimal 3-hop paths
  int rerouted = 0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    const auto ref = shortest_paths(g, flows, run_seed(i, 0));
    for (int r = 1; r < 4; ++r)
      if (!(shortest_paths(g, flows, run_seed(i, r)) == ref)) {
        ++rerouted;
        break;
      }
  }
  CHECK(rerouted > 0);
}

TEST_CASE("simbase estimate") {
  std::vector<KpiRecord> recs(3, KpiRecord(1));
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < kKpiCount; ++k) recs[r].at(0, k) = 2.0 * r;
  const auto s2 = simbase_estimate(recs, 2);
  CHECK(s2.at(0, 0) == 3.0);
  CHECK(simbase_estimate(recs, 1).identical(recs[1]));
  CHECK_THROWS_AS(simbase_estimate(recs, 3), std::invalid_argument);
  CHECK_THROWS_AS(simbase_estimate(recs, 0), std::invalid_argument);

  recs[2].at(0, kDelay) = kMissing;
  CHECK(simbase_estimate(recs, 2).at(0, kDelay) == 2.0);
  recs[1].at(0, kDelay) = kMissing;
  CHECK(is_missing(simbase_estimate(recs, 2).at(0, kDelay)));
}

TEST_CASE("missing KPIs when nothing is delivered") {
  auto cfg = SimConfig::wired();
  cfg.t_gen = 0.001;  // shorter than one CBR interval
  const FlowSet flows{{0}, {2}};
  const auto r = simulate(line3(), shortest_paths(line3(), flows, 0), TrafficParams{{5}, {5}}, cfg, 0);
  CHECK(is_missing(r.kpis.at(0, kDelay)));
  CHECK(is_missing(r.kpis.at(0, kJitter)));
  CHECK(r.kpis.at(0, kThroughput) == 0.0);
  CHECK(r.kpis.has_missing());
}

TEST_CASE("management runs") {
  const auto g = build_reg_grid();
  const NetworkInput x{&g, sample_flows(g, 4, 3), sample_traffic_params(4, TrafficMode::continuous, 3)};
  const std::array<std::uint64_t, 6> seeds{1, 2, 3, 4, 5, 6};
  const auto a = management_runs(x, short_wireless(), seeds);
  const auto b = management_runs(x, short_wireless(), seeds);
  CHECK(a.target.identical(b.target));
  CHECK(a.benchmark.identical(b.benchmark));
  CHECK(a.target.identical(averaged_runs(x, short_wireless(), {1, 2, 3})));
  CHECK_THROWS_AS(management_runs(x, short_wireless(), {1, 1, 3, 4, 5, 6}), std::invalid_argument);
}

TEST_CASE("config and record serialization") {
  auto c = SimConfig::wired();
  c.queue_buffer_pkts = 7;
  const auto back = sim_config_from_json(sim_config_to_json(c));
  CHECK(back.queue_buffer_pkts == 7);
  CHECK(back.cbr_rate == 100'000.0);
  CHECK_THROWS_AS(sim_config_from_json({{"t_gen", -1.0}}), std::invalid_argument);

  KpiRecord k(2);
  k.at(0, 0) = 1.5;
  k.at(1, 3) = 2.0;
  const auto j = kpi_to_json(k);
  CHECK(j[0][1].is_null());
  CHECK(kpi_from_json(nlohmann::json::parse(j.dump())).identical(k));
  CHECK(kpi_from_name("jitter") == kJitter);
  CHECK_THROWS_AS(kpi_from_name("latency"), std::invalid_argument);
}

TEST_CASE("malformed inputs are rejected") {
  auto cfg = SimConfig::wired();
  const FlowSet flows{{0}, {2}};
  auto table = shortest_paths(line3(), flows, 0);
  CHECK_THROWS_AS(simulate(line3(), table, TrafficParams{{1, 2}, {1, 2}}, cfg, 0), std::invalid_argument);
  CHECK_THROWS_AS(simulate(line3(), table, TrafficParams{{-1}, {1}}, cfg, 0), std::invalid_argument);
  table.paths[0].links = {{0, 2}};
  CHECK_THROWS_AS(simulate(line3(), table, TrafficParams{{1}, {1}}, cfg, 0), std::invalid_argument);
}

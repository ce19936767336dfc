#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "glance/nettopo.hpp"
#include "glance/routing.hpp"
#include "json.hpp"

namespace glance {

/// Mean on/off durations (seconds) per flow.
struct TrafficParams {
  std::vector<double> tau_on;
  std::vector<double> tau_off;

  int size() const { return static_cast<int>(tau_on.size()); }
  void validate() const;
  /// Zig-zag form [on_0, off_0, on_1, off_1, ...].
  std::vector<double> flattened() const;
  static TrafficParams from_flattened(const std::vector<double>& tau);
  bool operator==(const TrafficParams&) const = default;
};

enum class TrafficMode { discrete, continuous };

/// Discrete mode draws from {1, 10, 20}; continuous mode from U[1, 20].
TrafficParams sample_traffic_params(int flow_count, TrafficMode mode, std::uint64_t rng_seed);

struct SimConfig {
  double t_prep = 900.0;  // logical only, routing is computed up front
  double t_gen = 180.0;
  int packet_bytes = 210;
  double cbr_rate = 50'000.0;                // bits/s while "on"
  double link_capacity_default = 1'000'000.0;  // bits/s
  int queue_buffer_pkts = 50;
  bool wireless_contention = true;
  /// Distance whose wireless weight maps to link_capacity_default.
  double reference_distance = 30.0;

  static SimConfig wired();
  static SimConfig wireless();
  void validate() const;
  double packet_bits() const { return 8.0 * packet_bytes; }
};

nlohmann::json sim_config_to_json(const SimConfig& c);
SimConfig sim_config_from_json(const nlohmann::json& j, SimConfig base = {});

/// Per-link capacities (bits/s) aligned with graph.links(). Wired links get the
/// default; wireless links scale it by A_ij / A(reference_distance).
std::vector<double> link_capacities(const Graph& graph, const SimConfig& config);

inline constexpr int kKpiCount = 4;
enum Kpi : int { kDelay = 0, kJitter = 1, kThroughput = 2, kDrops = 3 };
inline constexpr std::array<const char*, kKpiCount> kKpiNames = {"delay", "jitter", "throughput", "drops"};
int kpi_from_name(const std::string& name);

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();
inline bool is_missing(double v) { return std::isnan(v); }

/// F x 4 matrix (delay ms, jitter ms, throughput kb/s, drops count); NaN marks
/// a missing cell.
class KpiRecord {
 public:
  KpiRecord() = default;
  explicit KpiRecord(int flows) : rows_(flows) { rows_.assign(flows, {kMissing, kMissing, kMissing, kMissing}); }

  int flows() const { return static_cast<int>(rows_.size()); }
  double& at(int flow, int kpi) { return rows_[flow][kpi]; }
  double at(int flow, int kpi) const { return rows_[flow][kpi]; }
  const std::vector<std::array<double, kKpiCount>>& rows() const { return rows_; }
  bool has_missing() const;
  /// Bitwise equality (NaN == NaN).
  bool identical(const KpiRecord& other) const;

 private:
  std::vector<std::array<double, kKpiCount>> rows_;
};

nlohmann::json kpi_to_json(const KpiRecord& k);
KpiRecord kpi_from_json(const nlohmann::json& j);

struct FlowCounters {
  long long generated = 0;
  long long delivered = 0;
  long long dropped = 0;    // tail-drop at a full buffer
  long long in_flight = 0;  // queued or in service at the horizon
};

struct LinkCounters {
  long long arrivals = 0;
  long long served = 0;
  long long dropped = 0;
  long long queued_at_end = 0;  // waiting or in service
  double served_bits = 0.0;
  double busy_time = 0.0;
};

struct SimResult {
  KpiRecord kpis;
  std::vector<FlowCounters> flows;
  std::vector<LinkCounters> links;
};

/// Event-driven run over [0, t_gen]. Sources start in the "on" state and
/// alternate exponential on/off phases with the given means. Throws
/// std::invalid_argument for a table that does not fit the graph.
SimResult simulate(const Graph& graph, const RoutingTable& table, const TrafficParams& traffic,
                   const SimConfig& config, std::uint64_t rng_seed);

/// Same as simulate() with an explicit per-link capacity vector.
SimResult simulate(const Graph& graph, const RoutingTable& table, const TrafficParams& traffic,
                   const SimConfig& config, const std::vector<double>& capacities, std::uint64_t rng_seed);

inline KpiRecord run_sim(const Graph& graph, const RoutingTable& table, const TrafficParams& traffic,
                         const SimConfig& config, std::uint64_t rng_seed) {
  return simulate(graph, table, traffic, config, rng_seed).kpis;
}

struct RunSet {
  std::vector<KpiRecord> records;  // records[0] is the reference run
  std::vector<std::uint64_t> seeds;
  RoutingTable reference_table;
};

/// Seed of run r under base_seed; used for both routing and traffic resampling.
std::uint64_t run_seed(std::uint64_t base_seed, int run);

/// N_r independent runs, each re-routing with its own seed.
RunSet run_benchmarks(const Graph& graph, const FlowSet& flows, const TrafficParams& traffic,
                      const SimConfig& config, int n_runs, std::uint64_t base_seed);

/// Elementwise mean over records for the given run indices, skipping missing
/// cells; a cell missing in every run stays missing.
KpiRecord average_records(const std::vector<KpiRecord>& records, const std::vector<int>& indices);

/// SimBase^{n+}: mean of benchmark runs 1..n.
KpiRecord simbase_estimate(const RunSet& runs, int n);
KpiRecord simbase_estimate(const std::vector<KpiRecord>& records, int n);

/// Network input for management evaluation.
struct NetworkInput {
  const Graph* graph = nullptr;
  FlowSet flows;
  TrafficParams traffic;
};

struct ManagementRuns {
  KpiRecord target;     // mean of runs with seeds[0..2]
  KpiRecord benchmark;  // mean of runs with seeds[3..5]
};

/// One simulated run of x with the given seed (routing + traffic resampling).
KpiRecord simulate_input(const NetworkInput& x, const SimConfig& config, std::uint64_t seed);

/// Mean over runs with the given seeds.
KpiRecord averaged_runs(const NetworkInput& x, const SimConfig& config, const std::vector<std::uint64_t>& seeds);

ManagementRuns management_runs(const NetworkInput& x, const SimConfig& config,
                               const std::array<std::uint64_t, 6>& seeds);

}  // namespace glance

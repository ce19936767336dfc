#include "glance/simulator.hpp"

#include <algorithm>
#include <deque>
#include <optional>
#include <queue>
#include <stdexcept>
#include <string>

#include "glance/random.hpp"

namespace glance {

void TrafficParams::validate() const {
  if (tau_on.size() != tau_off.size()) throw std::invalid_argument("tau_on and tau_off lengths differ");
  for (std::size_t i = 0; i < tau_on.size(); ++i)
    if (!(tau_on[i] > 0.0) || !(tau_off[i] > 0.0) || !std::isfinite(tau_on[i]) || !std::isfinite(tau_off[i]))
      throw std::invalid_argument("traffic parameters of flow " + std::to_string(i) + " must be positive");
}

std::vector<double> TrafficParams::flattened() const {
  std::vector<double> out;
  out.reserve(2 * tau_on.size());
  for (std::size_t i = 0; i < tau_on.size(); ++i) {
    out.push_back(tau_on[i]);
    out.push_back(tau_off[i]);
  }
  return out;
}

TrafficParams TrafficParams::from_flattened(const std::vector<double>& tau) {
  if (tau.size() % 2 != 0) throw std::invalid_argument("flattened traffic must have even length");
  TrafficParams t;
  for (std::size_t i = 0; i < tau.size(); i += 2) {
    t.tau_on.push_back(tau[i]);
    t.tau_off.push_back(tau[i + 1]);
  }
  return t;
}

TrafficParams sample_traffic_params(int flow_count, TrafficMode mode, std::uint64_t rng_seed) {
  static constexpr double kLevels[] = {1.0, 10.0, 20.0};
  auto rng = make_rng(rng_seed, {0x7aff1c});
  auto draw = [&] {
    return mode == TrafficMode::discrete ? kLevels[uniform_index(rng, 3)] : uniform(rng, 1.0, 20.0);
  };
  TrafficParams t;
  for (int i = 0; i < flow_count; ++i) {
    t.tau_on.push_back(draw());
    t.tau_off.push_back(draw());
  }
  return t;
}

SimConfig SimConfig::wired() {
  SimConfig c;
  c.cbr_rate = 100'000.0;
  c.wireless_contention = false;
  return c;
}

SimConfig SimConfig::wireless() {
  SimConfig c;
  c.cbr_rate = 50'000.0;
  c.wireless_contention = true;
  return c;
}

void SimConfig::validate() const {
  if (!(t_prep > 0) || !(t_gen > 0) || packet_bytes <= 0 || !(cbr_rate > 0) || !(link_capacity_default > 0) ||
      queue_buffer_pkts <= 0 || !(reference_distance > 0))
    throw std::invalid_argument("simulation config values must be positive");
}

nlohmann::json sim_config_to_json(const SimConfig& c) {
  return {{"t_prep", c.t_prep},
          {"t_gen", c.t_gen},
          {"packet_bytes", c.packet_bytes},
          {"cbr_rate", c.cbr_rate},
          {"link_capacity_default", c.link_capacity_default},
          {"queue_buffer_pkts", c.queue_buffer_pkts},
          {"wireless_contention", c.wireless_contention},
          {"reference_distance", c.reference_distance}};
}

SimConfig sim_config_from_json(const nlohmann::json& j, SimConfig c) {
  c.t_prep = j.value("t_prep", c.t_prep);
  c.t_gen = j.value("t_gen", c.t_gen);
  c.packet_bytes = j.value("packet_bytes", c.packet_bytes);
  c.cbr_rate = j.value("cbr_rate", c.cbr_rate);
  c.link_capacity_default = j.value("link_capacity_default", c.link_capacity_default);
  c.queue_buffer_pkts = j.value("queue_buffer_pkts", c.queue_buffer_pkts);
  c.wireless_contention = j.value("wireless_contention", c.wireless_contention);
  c.reference_distance = j.value("reference_distance", c.reference_distance);
  c.validate();
  return c;
}

std::vector<double> link_capacities(const Graph& graph, const SimConfig& config) {
  std::vector<double> caps;
  caps.reserve(graph.link_count());
  const double ref = wireless_weight(config.reference_distance);
  for (const auto& [a, b] : graph.links())
    caps.push_back(graph.wired() ? config.link_capacity_default
                                 : config.link_capacity_default * graph.weight(a, b) / ref);
  return caps;
}

int kpi_from_name(const std::string& name) {
  for (int k = 0; k < kKpiCount; ++k)
    if (name == kKpiNames[k]) return k;
  throw std::invalid_argument("unknown KPI '" + name + "' (expected delay, jitter, throughput or drops)");
}

bool KpiRecord::has_missing() const {
  for (const auto& r : rows_)
    for (double v : r)
      if (is_missing(v)) return true;
  return false;
}

bool KpiRecord::identical(const KpiRecord& other) const {
  if (flows() != other.flows()) return false;
  for (int i = 0; i < flows(); ++i)
    for (int k = 0; k < kKpiCount; ++k) {
      const double a = rows_[i][k], b = other.rows_[i][k];
      if (!(a == b || (is_missing(a) && is_missing(b)))) return false;
    }
  return true;
}

nlohmann::json kpi_to_json(const KpiRecord& k) {
  auto rows = nlohmann::json::array();
  for (const auto& r : k.rows()) {
    auto row = nlohmann::json::array();
    for (double v : r) {
      if (is_missing(v))
        row.push_back(nullptr);
      else
        row.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

KpiRecord kpi_from_json(const nlohmann::json& j) {
  KpiRecord k(static_cast<int>(j.size()));
  for (int i = 0; i < k.flows(); ++i) {
    if (j[i].size() != kKpiCount) throw std::invalid_argument("KPI rows must have 4 columns");
    for (int c = 0; c < kKpiCount; ++c) k.at(i, c) = j[i][c].is_null() ? kMissing : j[i][c].get<double>();
  }
  return k;
}

namespace {

struct Packet {
  int flow = 0;
  int hop = 0;
  double created = 0.0;
  double enqueued = 0.0;
};

struct Event {
  double time;
  std::uint64_t seq;
  int kind;  // 0 = emission (id = flow), 1 = transmission done (id = link or node)
  int id;
  bool operator>(const Event& o) const { return time != o.time ? time > o.time : seq > o.seq; }
};

// On/off CBR source. A packet takes one CBR interval to produce and may only be
// started while "on"; one already started is finished after the phase ends.
class Source {
 public:
  Source(double tau_on, double tau_off, double interval, Rng rng)
      : tau_on_(tau_on), tau_off_(tau_off), interval_(interval), rng_(std::move(rng)) {
    on_end_ = exponential(rng_, tau_on_);
  }

  double next_emission() {
    double start = std::max(on_start_, cursor_);
    while (start >= on_end_) {
      on_start_ = on_end_ + exponential(rng_, tau_off_);
      on_end_ = on_start_ + exponential(rng_, tau_on_);
      start = std::max(on_start_, cursor_);
    }
    cursor_ = start + interval_;
    return cursor_;
  }

 private:
  double tau_on_, tau_off_, interval_;
  Rng rng_;
  double on_start_ = 0.0, on_end_ = 0.0, cursor_ = 0.0;
};

class Engine {
 public:
  Engine(const Graph& graph, const RoutingTable& table, const TrafficParams& traffic, const SimConfig& config,
         const std::vector<double>& capacities, std::uint64_t seed)
      : graph_(graph), config_(config), capacities_(capacities), wireless_(!graph.wired() && config.wireless_contention) {
    config.validate();
    traffic.validate();
    const int f = static_cast<int>(table.paths.size());
    if (traffic.size() != f) throw std::invalid_argument("traffic parameters do not match the routing table");
    if (static_cast<int>(capacities.size()) != graph.link_count())
      throw std::invalid_argument("capacity vector does not match the link count");
    for (const auto& p : table.paths) {
      if (p.links.empty()) throw std::invalid_argument("routing table contains an empty path");
      for (std::size_t k = 0; k + 1 < p.links.size(); ++k)
        if (p.links[k].second != p.links[k + 1].first)
          throw std::invalid_argument("routing table path of flow " + std::to_string(p.flow_index) + " is not chained");
      paths_.push_back(path_link_indices(graph, p));
    }
    for (double c : capacities)
      if (!(c > 0.0)) throw std::invalid_argument("link capacities must be positive");

    const double interval = config.packet_bits() / config.cbr_rate;
    for (int i = 0; i < f; ++i)
      sources_.emplace_back(traffic.tau_on[i], traffic.tau_off[i], interval,
                            make_rng(seed, {0x50c, static_cast<std::uint64_t>(i)}));
    queues_.resize(graph.link_count());
    link_service_.resize(graph.link_count());
    node_service_.resize(graph.node_count());
    node_service_link_.assign(graph.node_count(), -1);
    service_start_.assign(wireless_ ? graph.node_count() : graph.link_count(), 0.0);
    result_.kpis = KpiRecord(f);
    result_.flows.resize(f);
    result_.links.resize(graph.link_count());
    delays_.resize(f);
  }

  SimResult run() {
    const double horizon = config_.t_gen;
    for (int i = 0; i < static_cast<int>(sources_.size()); ++i) schedule(sources_[i].next_emission(), 0, i);
    while (!events_.empty()) {
      const Event ev = events_.top();
      if (ev.time > horizon) break;
      events_.pop();
      now_ = ev.time;
      if (ev.kind == 0)
        on_emission(ev.id);
      else if (wireless_)
        on_node_done(ev.id);
      else
        on_link_done(ev.id);
    }
    finish(horizon);
    return std::move(result_);
  }

 private:
  void schedule(double t, int kind, int id) { events_.push({t, seq_++, kind, id}); }

  double tx_time(int link) const { return config_.packet_bits() / capacities_[link]; }

  // Returns false when the packet is tail-dropped.
  bool enqueue(int link, Packet p) {
    auto& lc = result_.links[link];
    ++lc.arrivals;
    if (static_cast<int>(queues_[link].size()) >= config_.queue_buffer_pkts) {
      ++lc.dropped;
      ++result_.flows[p.flow].dropped;
      return false;
    }
    p.enqueued = now_;
    queues_[link].push_back(p);
    return true;
  }

  void on_emission(int flow) {
    ++result_.flows[flow].generated;
    const int link = paths_[flow][0];
    if (enqueue(link, Packet{flow, 0, now_, now_})) start_after_enqueue(link);
    schedule(sources_[flow].next_emission(), 0, flow);
  }

  void start_after_enqueue(int link) {
    if (wireless_)
      try_start_node(graph_.links()[link].first);
    else
      try_start_link(link);
  }

  // Moves a packet that finished hop `hop` to its next queue or delivers it.
  // Returns the next link, or -1 when delivered or dropped.
  int advance(Packet p) {
    auto& path = paths_[p.flow];
    if (p.hop + 1 == static_cast<int>(path.size())) {
      ++result_.flows[p.flow].delivered;
      delays_[p.flow].push_back(now_ - p.created);
      return -1;
    }
    ++p.hop;
    const int next = path[p.hop];
    return enqueue(next, p) ? next : -1;
  }

  void complete(int link) {
    auto& lc = result_.links[link];
    ++lc.served;
    lc.served_bits += config_.packet_bits();
    lc.busy_time += tx_time(link);
  }

  // Wired: every link is an independent FIFO server.
  void try_start_link(int link) {
    if (link_service_[link] || queues_[link].empty()) return;
    link_service_[link] = queues_[link].front();
    queues_[link].pop_front();
    service_start_[link] = now_;
    schedule(now_ + tx_time(link), 1, link);
  }

  void on_link_done(int link) {
    const Packet p = *link_service_[link];
    link_service_[link].reset();
    complete(link);
    const int next = advance(p);
    if (next >= 0) try_start_link(next);
    try_start_link(link);
  }

  // Wireless: a node sends one packet at a time and defers while any neighbor
  // is sending (half-duplex plus carrier sense).
  bool channel_free(int u) const {
    if (node_service_[u]) return false;
    for (int v : graph_.neighbors(u))
      if (node_service_[v]) return false;
    return true;
  }

  // Outgoing link whose head packet has waited longest, or -1.
  int oldest_head(int u) const {
    int best = -1;
    for (int l : graph_.out_links(u))
      if (!queues_[l].empty() && (best < 0 || queues_[l].front().enqueued < queues_[best].front().enqueued)) best = l;
    return best;
  }

  void try_start_node(int u) {
    if (!channel_free(u)) return;
    const int link = oldest_head(u);
    if (link < 0) return;
    node_service_[u] = queues_[link].front();
    node_service_link_[u] = link;
    queues_[link].pop_front();
    service_start_[u] = now_;
    schedule(now_ + tx_time(link), 1, u);
  }

  void on_node_done(int u) {
    const Packet p = *node_service_[u];
    const int link = node_service_link_[u];
    node_service_[u].reset();
    node_service_link_[u] = -1;
    complete(link);
    advance(p);
    // The channel around u just cleared: let waiting nodes contend, oldest
    // head-of-line packet first.
    std::vector<std::pair<double, int>> contenders;
    auto consider = [&](int v) {
      const int l = oldest_head(v);
      if (l >= 0) contenders.emplace_back(queues_[l].front().enqueued, v);
    };
    consider(u);
    for (int v : graph_.neighbors(u)) consider(v);
    std::sort(contenders.begin(), contenders.end());
    for (const auto& [t, v] : contenders) try_start_node(v);
  }

  void finish(double horizon) {
    auto count_in_flight = [&](const Packet& p, int link) {
      ++result_.flows[p.flow].in_flight;
      ++result_.links[link].queued_at_end;
    };
    for (int l = 0; l < graph_.link_count(); ++l) {
      for (const auto& p : queues_[l]) count_in_flight(p, l);
      if (link_service_[l]) {
        count_in_flight(*link_service_[l], l);
        result_.links[l].busy_time += horizon - service_start_[l];
      }
    }
    for (int u = 0; u < graph_.node_count(); ++u)
      if (node_service_[u]) {
        count_in_flight(*node_service_[u], node_service_link_[u]);
        result_.links[node_service_link_[u]].busy_time += horizon - service_start_[u];
      }

    for (int f = 0; f < static_cast<int>(delays_.size()); ++f) {
      const auto& d = delays_[f];
      const auto& fc = result_.flows[f];
      auto& row = result_.kpis;
      row.at(f, kThroughput) = static_cast<double>(fc.delivered) * config_.packet_bits() / horizon / 1000.0;
      row.at(f, kDrops) = static_cast<double>(fc.dropped + fc.in_flight);
      if (d.empty()) continue;  // delay and jitter stay missing
      double sum = 0.0, jit = 0.0;
      for (std::size_t i = 0; i < d.size(); ++i) {
        sum += d[i];
        if (i > 0) jit += std::abs(d[i] - d[i - 1]);
      }
      row.at(f, kDelay) = 1000.0 * sum / static_cast<double>(d.size());
      row.at(f, kJitter) = d.size() > 1 ? 1000.0 * jit / static_cast<double>(d.size() - 1) : 0.0;
    }
  }

  const Graph& graph_;
  const SimConfig& config_;
  const std::vector<double>& capacities_;
  const bool wireless_;
  std::vector<std::vector<int>> paths_;
  std::vector<Source> sources_;
  std::vector<std::deque<Packet>> queues_;
  std::vector<std::optional<Packet>> link_service_;
  std::vector<std::optional<Packet>> node_service_;
  std::vector<int> node_service_link_;
  std::vector<double> service_start_;
  std::priority_queue<Event, std::vector<Event>, std::greater<>> events_;
  std::uint64_t seq_ = 0;
  double now_ = 0.0;
  std::vector<std::vector<double>> delays_;
  SimResult result_;
};

}  // namespace

SimResult simulate(const Graph& graph, const RoutingTable& table, const TrafficParams& traffic,
                   const SimConfig& config, const std::vector<double>& capacities, std::uint64_t rng_seed) {
  return Engine(graph, table, traffic, config, capacities, rng_seed).run();
}

SimResult simulate(const Graph& graph, const RoutingTable& table, const TrafficParams& traffic,
                   const SimConfig& config, std::uint64_t rng_seed) {
  const auto caps = link_capacities(graph, config);
  return simulate(graph, table, traffic, config, caps, rng_seed);
}

std::uint64_t run_seed(std::uint64_t base_seed, int run) {
  return derive_seed(base_seed, {0x2d4, static_cast<std::uint64_t>(run)});
}

RunSet run_benchmarks(const Graph& graph, const FlowSet& flows, const TrafficParams& traffic,
                      const SimConfig& config, int n_runs, std::uint64_t base_seed) {
  if (n_runs < 1) throw std::invalid_argument("need at least one run");
  RunSet set;
  const auto caps = link_capacities(graph, config);
  for (int r = 0; r < n_runs; ++r) {
    const auto seed = run_seed(base_seed, r);
    auto table = shortest_paths(graph, flows, seed);
    set.records.push_back(simulate(graph, table, traffic, config, caps, seed).kpis);
    set.seeds.push_back(seed);
    if (r == 0) set.reference_table = std::move(table);
  }
  return set;
}

KpiRecord average_records(const std::vector<KpiRecord>& records, const std::vector<int>& indices) {
  if (indices.empty()) throw std::invalid_argument("cannot average zero records");
  const int f = records.at(indices.front()).flows();
  KpiRecord out(f);
  for (int i = 0; i < f; ++i)
    for (int k = 0; k < kKpiCount; ++k) {
      double sum = 0.0;
      int count = 0;
      for (int r : indices) {
        const double v = records.at(r).at(i, k);
        if (!is_missing(v)) {
          sum += v;
          ++count;
        }
      }
      out.at(i, k) = count > 0 ? sum / count : kMissing;
    }
  return out;
}

KpiRecord simbase_estimate(const std::vector<KpiRecord>& records, int n) {
  const int n_runs = static_cast<int>(records.size());
  if (n < 1 || n > n_runs - 1)
    throw std::invalid_argument("SimBase order " + std::to_string(n) + " needs 1 <= n <= " + std::to_string(n_runs - 1));
  std::vector<int> idx;
  for (int r = 1; r <= n; ++r) idx.push_back(r);
  return average_records(records, idx);
}

KpiRecord simbase_estimate(const RunSet& runs, int n) { return simbase_estimate(runs.records, n); }

KpiRecord simulate_input(const NetworkInput& x, const SimConfig& config, std::uint64_t seed) {
  const auto table = shortest_paths(*x.graph, x.flows, seed);
  return run_sim(*x.graph, table, x.traffic, config, seed);
}

KpiRecord averaged_runs(const NetworkInput& x, const SimConfig& config, const std::vector<std::uint64_t>& seeds) {
  std::vector<KpiRecord> recs;
  std::vector<int> idx;
  for (auto s : seeds) {
    idx.push_back(static_cast<int>(recs.size()));
    recs.push_back(simulate_input(x, config, s));
  }
  return average_records(recs, idx);
}

ManagementRuns management_runs(const NetworkInput& x, const SimConfig& config,
                               const std::array<std::uint64_t, 6>& seeds) {
  for (int i = 0; i < 6; ++i)
    for (int j = i + 1; j < 6; ++j)
      if (seeds[i] == seeds[j]) throw std::invalid_argument("management runs need six distinct seeds");
  return {averaged_runs(x, config, {seeds[0], seeds[1], seeds[2]}),
          averaged_runs(x, config, {seeds[3], seeds[4], seeds[5]})};
}

}  // namespace glance

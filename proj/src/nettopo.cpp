#include "glance/nettopo.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <set>
#include <stdexcept>
#include <string>

#include "glance/random.hpp"
#include "nsfnet_data.hpp"

namespace glance {

Graph::Graph(std::vector<std::vector<double>> adjacency, bool wired,
             std::optional<std::vector<Position>> positions)
    : adjacency_(std::move(adjacency)), wired_(wired), positions_(std::move(positions)) {
  const int n = node_count();
  if (n < 1) throw std::invalid_argument("graph must have at least one node");
  if (positions_ && static_cast<int>(positions_->size()) != n)
    throw std::invalid_argument("positions size does not match node count");
  for (int i = 0; i < n; ++i) {
    if (static_cast<int>(adjacency_[i].size()) != n)
      throw std::invalid_argument("adjacency matrix is not square");
  }
  link_index_.assign(n, std::vector<int>(n, -1));
  out_links_.assign(n, {});
  neighbors_.assign(n, {});
  for (int i = 0; i < n; ++i) {
    if (adjacency_[i][i] != 0.0)
      throw std::invalid_argument("non-zero diagonal at node " + std::to_string(i));
    for (int j = 0; j < n; ++j) {
      const double w = adjacency_[i][j];
      if (!std::isfinite(w) || w < 0.0)
        throw std::invalid_argument("invalid weight at (" + std::to_string(i) + "," + std::to_string(j) + ")");
      if (w != adjacency_[j][i])
        throw std::invalid_argument("adjacency not symmetric at (" + std::to_string(i) + "," + std::to_string(j) + ")");
      if (w > 0.0) {
        if (wired_ && w != 1.0) throw std::invalid_argument("wired graph weights must be 1");
        link_index_[i][j] = static_cast<int>(links_.size());
        out_links_[i].push_back(static_cast<int>(links_.size()));
        links_.emplace_back(i, j);
        neighbors_[i].push_back(j);
      }
    }
  }
}

std::vector<double> Graph::degrees() const {
  const int n = node_count();
  std::vector<double> d(n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) d[i] += (adjacency_[i][j] + adjacency_[j][i]) / 2.0;
  return d;
}

bool Graph::operator==(const Graph& other) const {
  if (wired_ != other.wired_ || adjacency_ != other.adjacency_) return false;
  if (positions_.has_value() != other.positions_.has_value()) return false;
  if (positions_) {
    for (std::size_t i = 0; i < positions_->size(); ++i) {
      if ((*positions_)[i].x != (*other.positions_)[i].x || (*positions_)[i].y != (*other.positions_)[i].y)
        return false;
    }
  }
  return true;
}

void FlowSet::validate(int node_count) const {
  if (sources.size() != destinations.size())
    throw std::invalid_argument("flow source/destination lengths differ");
  std::set<std::pair<int, int>> seen;
  for (int i = 0; i < size(); ++i) {
    const int s = sources[i], d = destinations[i];
    if (s < 0 || d < 0 || s >= node_count || d >= node_count)
      throw std::invalid_argument("flow " + std::to_string(i) + " has out-of-range endpoint");
    if (s == d) throw std::invalid_argument("flow " + std::to_string(i) + " has source == destination");
    if (!seen.emplace(s, d).second)
      throw std::invalid_argument("flow " + std::to_string(i) + " duplicates an earlier pair");
  }
}

Graph build_nsfnet() {
  const auto topo = nlohmann::json::parse(detail::kNsfnetJson);
  const int n = topo.at("nodes").get<int>();
  std::vector<std::vector<double>> a(n, std::vector<double>(n, 0.0));
  for (const auto& e : topo.at("undirected_edges")) {
    const int i = e.at(0).get<int>(), j = e.at(1).get<int>();
    a[i][j] = 1.0;
    a[j][i] = 1.0;
  }
  return Graph(std::move(a), true);
}

double wireless_weight(double distance) { return 1.0 / std::log1p(distance * distance); }

std::vector<std::vector<double>> wireless_adjacency(const std::vector<Position>& positions, double conn_radius) {
  const auto n = positions.size();
  std::vector<std::vector<double>> a(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = std::hypot(positions[i].x - positions[j].x, positions[i].y - positions[j].y);
      if (d == 0.0)
        throw std::invalid_argument("coincident nodes " + std::to_string(i) + " and " + std::to_string(j));
      if (d <= conn_radius) a[i][j] = a[j][i] = wireless_weight(d);
    }
  }
  return a;
}

double path_loss_db(double distance_m) {
  if (!(distance_m > 0.0)) throw std::invalid_argument("path loss needs a positive distance");
  return 46.67 + 30.0 * std::log10(distance_m);
}

namespace {

std::vector<Position> lattice(int rows, int cols, double spacing) {
  if (rows < 1 || cols < 1 || rows * cols < 2)
    throw std::invalid_argument("grid needs positive dimensions and at least two nodes");
  if (!(spacing > 0.0)) throw std::invalid_argument("grid spacing must be positive");
  std::vector<Position> pos;
  pos.reserve(static_cast<std::size_t>(rows * cols));
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) pos.push_back({c * spacing, r * spacing});
  return pos;
}

}  // namespace

Graph build_reg_grid(int rows, int cols, double spacing, double conn_radius) {
  auto pos = lattice(rows, cols, spacing);
  auto a = wireless_adjacency(pos, conn_radius);
  return Graph(std::move(a), false, std::move(pos));
}

Graph build_pert_grid(int rows, int cols, double spacing, double radius, std::uint64_t rng_seed,
                      double conn_radius) {
  if (radius < 0.0) throw std::invalid_argument("perturbation radius must be non-negative");
  auto pos = lattice(rows, cols, spacing);
  if (radius > 0.0) {
    auto rng = make_rng(rng_seed, {0x9e47});
    for (auto& p : pos) {
      double dx, dy;
      do {
        dx = uniform(rng, -radius, radius);
        dy = uniform(rng, -radius, radius);
      } while (dx * dx + dy * dy > radius * radius);
      p.x += dx;
      p.y += dy;
    }
  }
  auto a = wireless_adjacency(pos, conn_radius);
  return Graph(std::move(a), false, std::move(pos));
}

FlowSet sample_flows(const Graph& graph, int flow_count, std::uint64_t rng_seed) {
  const int n = graph.node_count();
  const long long pairs = static_cast<long long>(n) * (n - 1);
  if (flow_count < 0 || flow_count > pairs)
    throw std::invalid_argument("cannot sample " + std::to_string(flow_count) + " unique flows from " +
                                std::to_string(pairs) + " ordered pairs");
  std::vector<std::pair<int, int>> all;
  all.reserve(static_cast<std::size_t>(pairs));
  for (int s = 0; s < n; ++s)
    for (int d = 0; d < n; ++d)
      if (s != d) all.emplace_back(s, d);
  auto rng = make_rng(rng_seed, {0xf10e});
  // Partial Fisher-Yates: the first flow_count entries are a uniform sample.
  FlowSet flows;
  for (int i = 0; i < flow_count; ++i) {
    const auto j = i + static_cast<std::size_t>(uniform_index(rng, all.size() - i));
    std::swap(all[i], all[j]);
    flows.sources.push_back(all[i].first);
    flows.destinations.push_back(all[i].second);
  }
  return flows;
}

bool is_connected(const Graph& graph, int source, int dest) {
  std::vector<char> seen(graph.node_count(), 0);
  std::queue<int> q;
  q.push(source);
  seen[source] = 1;
  while (!q.empty()) {
    const int u = q.front();
    q.pop();
    if (u == dest) return true;
    for (int v : graph.neighbors(u))
      if (!seen[v]) {
        seen[v] = 1;
        q.push(v);
      }
  }
  return false;
}

nlohmann::json graph_to_json(const Graph& graph) {
  nlohmann::json j;
  j["nodes"] = graph.node_count();
  j["wired"] = graph.wired();
  if (graph.positions()) {
    auto arr = nlohmann::json::array();
    for (const auto& p : *graph.positions()) arr.push_back({p.x, p.y});
    j["positions"] = std::move(arr);
  }
  auto edges = nlohmann::json::array();
  for (const auto& [a, b] : graph.links()) edges.push_back({a, b, graph.weight(a, b)});
  j["edges"] = std::move(edges);
  return j;
}

Graph graph_from_json(const nlohmann::json& j) {
  const int n = j.at("nodes").get<int>();
  if (n < 1) throw std::invalid_argument("topology: nodes must be positive");
  std::vector<std::vector<double>> a(n, std::vector<double>(n, 0.0));
  for (const auto& e : j.at("edges")) {
    const int s = e.at(0).get<int>(), d = e.at(1).get<int>();
    if (s < 0 || d < 0 || s >= n || d >= n) throw std::invalid_argument("topology: edge endpoint out of range");
    const double w = e.at(2).get<double>();
    if (!(w > 0.0)) throw std::invalid_argument("topology: edge weights must be positive");
    a[s][d] = w;
  }
  std::optional<std::vector<Position>> pos;
  if (j.contains("positions")) {
    pos.emplace();
    for (const auto& p : j.at("positions")) pos->push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  }
  return Graph(std::move(a), j.at("wired").get<bool>(), std::move(pos));
}

nlohmann::json flows_to_json(const FlowSet& flows) {
  return {{"src", flows.sources}, {"dst", flows.destinations}};
}

FlowSet flows_from_json(const nlohmann::json& j) {
  FlowSet f;
  f.sources = j.at("src").get<std::vector<int>>();
  f.destinations = j.at("dst").get<std::vector<int>>();
  return f;
}

}  // namespace glance

#include "glance/routing.hpp"

#include <queue>
#include <stdexcept>

#include "glance/random.hpp"

namespace glance {

std::vector<int> Path::nodes() const {
  std::vector<int> out;
  if (links.empty()) return out;
  out.push_back(links.front().first);
  for (const auto& l : links) out.push_back(l.second);
  return out;
}

namespace {

// Hop distances from source, -1 for unreachable nodes.
std::vector<int> bfs_distances(const Graph& graph, int source) {
  std::vector<int> dist(graph.node_count(), -1);
  std::queue<int> q;
  dist[source] = 0;
  q.push(source);
  while (!q.empty()) {
    const int u = q.front();
    q.pop();
    for (int li : graph.out_links(u)) {
      const int v = graph.links()[li].second;
      if (dist[v] < 0) {
        dist[v] = dist[u] + 1;
        q.push(v);
      }
    }
  }
  return dist;
}

void check_endpoint(const Graph& graph, int node) {
  if (node < 0 || node >= graph.node_count()) throw std::invalid_argument("flow endpoint out of range");
}

}  // namespace

Path shortest_path(const Graph& graph, int source, int dest, std::uint64_t rng_seed, int flow_index) {
  check_endpoint(graph, source);
  check_endpoint(graph, dest);
  if (source == dest) throw std::invalid_argument("flow " + std::to_string(flow_index) + " has source == destination");
  const auto dist = bfs_distances(graph, source);
  if (dist[dest] < 0)
    throw std::runtime_error("flow " + std::to_string(flow_index) + " (" + std::to_string(source) + " -> " +
                             std::to_string(dest) + ") is disconnected");

  // Number of minimal paths reaching each node; drawing predecessors with
  // probability sigma[p] / sigma[v] makes the whole path uniform.
  const int n = graph.node_count();
  std::vector<std::vector<int>> order(dist[dest] + 1);
  for (int v = 0; v < n; ++v)
    if (dist[v] >= 0 && dist[v] <= dist[dest]) order[dist[v]].push_back(v);
  std::vector<double> sigma(n, 0.0);
  sigma[source] = 1.0;
  for (int layer = 1; layer <= dist[dest]; ++layer)
    for (int v : order[layer])
      for (int p : graph.neighbors(v))
        if (dist[p] == layer - 1 && graph.link_index(p, v) >= 0) sigma[v] += sigma[p];

  auto rng = make_rng(rng_seed, {0x7a61e, static_cast<std::uint64_t>(flow_index)});
  Path path;
  path.flow_index = flow_index;
  path.links.resize(dist[dest]);
  int cur = dest;
  for (int layer = dist[dest]; layer > 0; --layer) {
    double pick = uniform01(rng) * sigma[cur];
    int chosen = -1;
    for (int p : graph.neighbors(cur)) {
      if (dist[p] != layer - 1 || graph.link_index(p, cur) < 0) continue;
      chosen = p;
      pick -= sigma[p];
      if (pick < 0.0) break;
    }
    path.links[layer - 1] = {chosen, cur};
    cur = chosen;
  }
  return path;
}

RoutingTable shortest_paths(const Graph& graph, const FlowSet& flows, std::uint64_t rng_seed) {
  RoutingTable table;
  table.seed = rng_seed;
  table.paths.reserve(flows.size());
  for (int i = 0; i < flows.size(); ++i)
    table.paths.push_back(shortest_path(graph, flows.sources[i], flows.destinations[i], rng_seed, i));
  return table;
}

std::set<Path> enumerate_shortest_paths(const Graph& graph, int source, int dest) {
  if (graph.node_count() > kMaxEnumerationNodes)
    throw std::invalid_argument("enumerate_shortest_paths is limited to " + std::to_string(kMaxEnumerationNodes) +
                                " nodes");
  check_endpoint(graph, source);
  check_endpoint(graph, dest);
  std::set<Path> out;
  const auto dist = bfs_distances(graph, source);
  if (source == dest || dist[dest] < 0) return out;

  // Layered DFS: only follow links that advance the BFS layer by exactly one.
  std::vector<Link> stack;
  auto dfs = [&](auto&& self, int u) -> void {
    if (u == dest) {
      out.insert(Path{stack, 0});
      return;
    }
    for (int li : graph.out_links(u)) {
      const int v = graph.links()[li].second;
      if (dist[v] == dist[u] + 1 && dist[v] <= dist[dest]) {
        stack.emplace_back(u, v);
        self(self, v);
        stack.pop_back();
      }
    }
  };
  dfs(dfs, source);
  return out;
}

std::vector<RoutingViolation> validate_table(const RoutingTable& table, const Graph& graph, const FlowSet& flows,
                                             int max_links) {
  std::vector<RoutingViolation> out;
  if (static_cast<int>(table.paths.size()) != flows.size()) {
    out.push_back({-1, "count", -1,
                   "table has " + std::to_string(table.paths.size()) + " paths for " + std::to_string(flows.size()) +
                       " flows"});
    return out;
  }
  const int n = graph.node_count();
  for (int i = 0; i < flows.size(); ++i) {
    const auto& links = table.paths[i].links;
    if (links.empty()) {
      out.push_back({i, "empty", -1, "path has no links"});
      continue;
    }
    for (int k = 0; k < static_cast<int>(links.size()); ++k) {
      const auto [a, b] = links[k];
      if (a < 0 || b < 0 || a >= n || b >= n || graph.link_index(a, b) < 0)
        out.push_back({i, "missing-link", k, "link (" + std::to_string(a) + "," + std::to_string(b) + ") not in graph"});
      if (k + 1 < static_cast<int>(links.size()) && links[k + 1].first != b)
        out.push_back({i, "broken-chain", k, "gap after link " + std::to_string(k)});
    }
    if (links.front().first != flows.sources[i] || links.back().second != flows.destinations[i])
      out.push_back({i, "endpoint", -1, "path endpoints do not match flow"});
    std::set<int> visited;
    bool loop = !visited.insert(links.front().first).second;
    for (const auto& l : links) loop = loop || !visited.insert(l.second).second;
    if (loop) out.push_back({i, "loop", -1, "path revisits a node"});
    if (max_links > 0 && static_cast<int>(links.size()) > max_links)
      out.push_back({i, "path-too-long", -1,
                     std::to_string(links.size()) + " links exceeds limit " + std::to_string(max_links)});
  }
  return out;
}

std::vector<int> path_link_indices(const Graph& graph, const Path& path) {
  std::vector<int> out;
  out.reserve(path.links.size());
  for (const auto& [a, b] : path.links) {
    const int li = (a >= 0 && b >= 0 && a < graph.node_count() && b < graph.node_count()) ? graph.link_index(a, b) : -1;
    if (li < 0) throw std::invalid_argument("path uses link (" + std::to_string(a) + "," + std::to_string(b) + ") absent from graph");
    out.push_back(li);
  }
  return out;
}

nlohmann::json routing_to_json(const RoutingTable& table) {
  auto paths = nlohmann::json::array();
  for (const auto& p : table.paths) {
    auto links = nlohmann::json::array();
    for (const auto& [a, b] : p.links) links.push_back({a, b});
    paths.push_back(std::move(links));
  }
  return {{"seed", table.seed}, {"paths", std::move(paths)}};
}

RoutingTable routing_from_json(const nlohmann::json& j) {
  RoutingTable t;
  t.seed = j.at("seed").get<std::uint64_t>();
  int i = 0;
  for (const auto& p : j.at("paths")) {
    Path path;
    path.flow_index = i++;
    for (const auto& l : p) path.links.emplace_back(l.at(0).get<int>(), l.at(1).get<int>());
    t.paths.push_back(std::move(path));
  }
  return t;
}

}  // namespace glance

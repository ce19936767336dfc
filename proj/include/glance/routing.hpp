#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "glance/nettopo.hpp"
#include "json.hpp"

namespace glance {

struct Path {
  std::vector<Link> links;
  int flow_index = 0;

  int hop_count() const { return static_cast<int>(links.size()); }
  /// Node sequence source, ..., destination.
  std::vector<int> nodes() const;
  bool operator==(const Path&) const = default;
  auto operator<=>(const Path&) const = default;
};

struct RoutingTable {
  std::vector<Path> paths;
  std::uint64_t seed = 0;

  bool operator==(const RoutingTable&) const = default;
};

/// One hop-count-minimal path per flow. Among equal-cost candidates the path
/// is drawn uniformly at random from a stream seeded by (rng_seed, flow index).
/// Throws std::runtime_error naming the first disconnected flow.
RoutingTable shortest_paths(const Graph& graph, const FlowSet& flows, std::uint64_t rng_seed);

/// Single-flow variant; shortest_paths(graph, flows, seed).paths[i] ==
/// shortest_path(graph, s_i, d_i, seed, i).
Path shortest_path(const Graph& graph, int source, int dest, std::uint64_t rng_seed, int flow_index);

inline constexpr int kMaxEnumerationNodes = 12;

/// Every simple minimal-hop path from source to dest (empty when unreachable).
/// Exhaustive, so restricted to graphs with at most kMaxEnumerationNodes nodes.
std::set<Path> enumerate_shortest_paths(const Graph& graph, int source, int dest);

struct RoutingViolation {
  int flow_index = -1;
  std::string kind;  // "count", "empty", "missing-link", "broken-chain", "endpoint", "loop", "path-too-long"
  int position = -1;  // link index within the path when applicable
  std::string detail;
};

/// Checks path invariants against the graph and flows; never throws.
/// max_links <= 0 disables the length check.
std::vector<RoutingViolation> validate_table(const RoutingTable& table, const Graph& graph, const FlowSet& flows,
                                             int max_links = 0);

/// Link indices (into graph.links()) of a path; throws if a link is absent.
std::vector<int> path_link_indices(const Graph& graph, const Path& path);

nlohmann::json routing_to_json(const RoutingTable& table);
RoutingTable routing_from_json(const nlohmann::json& j);

}  // namespace glance

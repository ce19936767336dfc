#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace glance {

struct Position {
  double x = 0.0;
  double y = 0.0;
};

using Link = std::pair<int, int>;

/// Directed weighted topology. Links are the ordered pairs (i, j) with
/// A[i][j] > 0, stored in row-major order of the adjacency matrix.
class Graph {
 public:
  Graph() = default;

  /// Builds a graph from a dense adjacency matrix; throws std::invalid_argument
  /// if any invariant (zero diagonal, symmetry, non-negativity, unit wired
  /// weights) is violated.
  Graph(std::vector<std::vector<double>> adjacency, bool wired,
        std::optional<std::vector<Position>> positions = std::nullopt);

  int node_count() const { return static_cast<int>(adjacency_.size()); }
  bool wired() const { return wired_; }
  const std::optional<std::vector<Position>>& positions() const { return positions_; }
  const std::vector<std::vector<double>>& adjacency() const { return adjacency_; }
  double weight(int i, int j) const { return adjacency_[i][j]; }
  const std::vector<Link>& links() const { return links_; }
  int link_count() const { return static_cast<int>(links_.size()); }

  /// Index of link (i, j) in links(), or -1 when absent.
  int link_index(int i, int j) const { return link_index_[i][j]; }

  /// Links emanating from node u, as indices into links().
  const std::vector<int>& out_links(int u) const { return out_links_[u]; }

  /// Nodes sharing a positive-weight link with u in either direction.
  const std::vector<int>& neighbors(int u) const { return neighbors_[u]; }

  /// D_ii = sum_j (A_ij + A_ji) / 2.
  std::vector<double> degrees() const;

  bool operator==(const Graph& other) const;

 private:
  std::vector<std::vector<double>> adjacency_;
  bool wired_ = true;
  std::optional<std::vector<Position>> positions_;
  std::vector<Link> links_;
  std::vector<std::vector<int>> link_index_;
  std::vector<std::vector<int>> out_links_;
  std::vector<std::vector<int>> neighbors_;
};

/// Ordered (source, destination) pairs; sources[i] != destinations[i] and
/// all pairs are unique.
struct FlowSet {
  std::vector<int> sources;
  std::vector<int> destinations;

  int size() const { return static_cast<int>(sources.size()); }
  void validate(int node_count) const;
  bool operator==(const FlowSet&) const = default;
};

inline constexpr double kGridSpacing = 30.0;
inline constexpr double kGridConnectivityRadius = 45.0;

Graph build_nsfnet();
Graph build_reg_grid(int rows = 4, int cols = 4, double spacing = kGridSpacing,
                     double conn_radius = kGridConnectivityRadius);
Graph build_pert_grid(int rows, int cols, double spacing, double radius,
                      std::uint64_t rng_seed,
                      double conn_radius = kGridConnectivityRadius);

/// A_ij = 1 / ln(1 + d_ij^2) for 0 < d_ij <= conn_radius, else 0.
std::vector<std::vector<double>> wireless_adjacency(const std::vector<Position>& positions,
                                                    double conn_radius = kGridConnectivityRadius);
double wireless_weight(double distance);

/// Log-distance path loss in dB: 46.67 + 30 log10(d).
double path_loss_db(double distance_m);

FlowSet sample_flows(const Graph& graph, int flow_count, std::uint64_t rng_seed);

bool is_connected(const Graph& graph, int source, int dest);

// Topology file: {nodes, positions?, edges: [[i, j, w], ...], wired}.
nlohmann::json graph_to_json(const Graph& graph);
Graph graph_from_json(const nlohmann::json& j);
nlohmann::json flows_to_json(const FlowSet& flows);
FlowSet flows_from_json(const nlohmann::json& j);

}  // namespace glance

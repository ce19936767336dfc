#pragma once

// Learnable digital twins: GLANCE (path GRU + link MLP + edge graph
// convolution), the RouteNet-style ablation without node embeddings, and a
// fixed-size GCN baseline. All models map one or more network instances to
// per-flow predictions of the four normalized KPIs.

#include <string>
#include <tuple>
#include <vector>

#include "glance/autodiff.hpp"
#include "glance/nettopo.hpp"
#include "glance/routing.hpp"
#include "glance/simulator.hpp"
#include "json.hpp"

namespace glance {

struct GlanceDims {
  int d_node = 16;
  int d_link = 16;
  int d_path = 32;
  int T = 3;
  int L_max = 3;
  std::vector<int> link_mlp_hidden{64, 32, 16};
  std::vector<int> readout_hidden{32, 64, 128, 32};
  int K = kKpiCount;

  static GlanceDims compact();
  static GlanceDims large();
  void validate() const;
  bool operator==(const GlanceDims&) const = default;
};

nlohmann::json dims_to_json(const GlanceDims& d);
GlanceDims dims_from_json(const nlohmann::json& j);

/// Raw-unit rescaling applied to the seeded input features.
struct FeatureScaling {
  double capacity = 1e6;  // h_l^0[0] = c / capacity
  double tau = 1.0;       // h_p^0[0:2] = tau / tau
  bool operator==(const FeatureScaling&) const = default;
};

/// Model-ready view of one or more instances. Batches are disjoint unions:
/// node, link and path indices are offset per instance.
struct TwinInput {
  int node_count = 0;
  std::vector<double> degree;                        // D_uu per node
  std::vector<int> conv_row, conv_col;               // sparse D^-1/2 (A + I) D^-1/2
  std::vector<double> conv_weight;
  std::vector<int> node_instance;                    // owning instance per node
  std::vector<int> instance_nodes;                   // node count per instance
  std::vector<double> link_capacity;                 // scaled
  std::vector<int> link_tail;                        // l[0]
  std::vector<int> link_head;                        // l[1]
  std::vector<std::vector<int>> path_links;          // link indices in order
  std::vector<double> tau_on, tau_off;               // scaled
  std::vector<int> path_instance;
  std::vector<int> instance_paths;                   // flow count per instance

  int link_count() const { return static_cast<int>(link_tail.size()); }
  int path_count() const { return static_cast<int>(path_links.size()); }
  int instance_count() const { return static_cast<int>(instance_paths.size()); }
};

/// Throws std::invalid_argument if the table does not fit graph/traffic or a
/// path exceeds max_links (when max_links > 0).
TwinInput make_twin_input(const Graph& graph, const RoutingTable& table, const TrafficParams& traffic,
                          const std::vector<double>& capacities, const FeatureScaling& scaling = {},
                          int max_links = 0);

TwinInput batch_inputs(const std::vector<const TwinInput*>& parts);

enum class ModelKind { glance, routenet, gnn };
std::string model_kind_name(ModelKind k);
ModelKind model_kind_from_name(const std::string& name);

/// Embeddings of one forward pass.
struct EmbeddingState {
  ad::Var h_paths;  // F x d_path
  ad::Var h_links;  // L x d_link
  ad::Var h_nodes;  // N x d_node (unused by routenet)
  /// GRU states m recorded during the last path update, grouped by step:
  /// rows of m_states[s] belong to the links m_links[s].
  std::vector<ad::Var> m_states;
  std::vector<std::vector<int>> m_links;
};

/// Algorithm steps, exposed individually so compositions can be tested.
/// tau, when given, is a paths x 2 variable replacing the input's traffic so
/// gradients can flow into it.
EmbeddingState init_embeddings(ad::Tape& tape, const TwinInput& in, const GlanceDims& dims,
                               const ad::Var* tau = nullptr);
void path_update(ad::Tape& tape, const ad::ParamSet& params, const TwinInput& in, EmbeddingState& s,
                 bool use_nodes = true);
void link_update(ad::Tape& tape, const ad::ParamSet& params, const TwinInput& in, const GlanceDims& dims,
                 EmbeddingState& s, bool use_nodes = true);
void node_update(ad::Tape& tape, const ad::ParamSet& params, const TwinInput& in, EmbeddingState& s);
/// K readouts on the final path embeddings; columns of inactive tasks are
/// zero constants and their parameters are never touched.
ad::Var readout(ad::Tape& tape, const ad::ParamSet& params, const GlanceDims& dims, ad::Var h_paths,
                const std::vector<int>& tasks);

class TwinModel {
 public:
  TwinModel() = default;
  TwinModel(ModelKind kind, GlanceDims dims, ad::ParamSet params, int gnn_flows = 0)
      : kind_(kind), dims_(std::move(dims)), params_(std::move(params)), gnn_flows_(gnn_flows) {}

  /// Glorot-initialized parameters for every readout task in [0, K).
  static TwinModel init(ModelKind kind, const GlanceDims& dims, std::uint64_t seed, int gnn_flows = 10);

  ModelKind kind() const { return kind_; }
  const GlanceDims& dims() const { return dims_; }
  int gnn_flows() const { return gnn_flows_; }
  ad::ParamSet& params() { return params_; }
  const ad::ParamSet& params() const { return params_; }
  std::size_t parameter_count() const { return params_.parameter_count(); }

  /// Predictions (total paths x K, normalized units) on the tape.
  /// tau optionally overrides the traffic features (glance and routenet only).
  ad::Var forward(ad::Tape& tape, const TwinInput& in, const std::vector<int>& tasks = {0, 1, 2, 3},
                  const ad::Var* tau = nullptr) const;
  /// Value-only convenience.
  ad::Tensor predict(const TwinInput& in) const;

  /// Names of embedding (non-readout) parameters.
  std::vector<std::string> embedding_parameter_names() const;
  /// Replaces readout k with freshly initialized weights.
  void reinit_readout(int k, std::uint64_t seed);
  static std::string readout_prefix(ModelKind kind, int k);

 private:
  ModelKind kind_ = ModelKind::glance;
  GlanceDims dims_;
  ad::ParamSet params_;
  int gnn_flows_ = 0;
};

/// Parameter count of a freshly built model, without allocating weights.
std::size_t count_parameters(ModelKind kind, const GlanceDims& dims, int gnn_flows = 10);

inline constexpr int kGnnChannels = 96;
inline constexpr int kGnnLayers = 3;

/// GNN baseline input: node j carries (tau_on, tau_off) of flow f in columns
/// 2f, 2f+1 when it lies on that flow's path, zeros otherwise.
ad::Tensor gnn_node_features(const TwinInput& in, int flows);

}  // namespace glance

#include "glance/twin.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace glance {

using ad::ParamSet;
using ad::Tape;
using ad::Tensor;
using ad::Var;

GlanceDims GlanceDims::compact() { return GlanceDims{}; }

GlanceDims GlanceDims::large() {
  GlanceDims d;
  d.d_node = 32;
  d.d_link = 32;
  d.d_path = 64;
  d.readout_hidden = {64, 128, 128, 32};
  return d;
}

void GlanceDims::validate() const {
  if (d_path < 2) throw std::invalid_argument("d_path must be at least 2 (tau_on, tau_off)");
  if (d_link < 1 || d_node < 1) throw std::invalid_argument("d_link and d_node must be at least 1");
  if (T < 1) throw std::invalid_argument("T must be at least 1");
  if (L_max < 1) throw std::invalid_argument("L_max must be at least 1");
  if (K < 1 || K > kKpiCount) throw std::invalid_argument("K must be in [1, 4]");
  for (int h : link_mlp_hidden)
    if (h < 1) throw std::invalid_argument("link MLP widths must be positive");
  for (int h : readout_hidden)
    if (h < 1) throw std::invalid_argument("readout widths must be positive");
}

nlohmann::json dims_to_json(const GlanceDims& d) {
  return {{"d_node", d.d_node},   {"d_link", d.d_link},
          {"d_path", d.d_path},   {"T", d.T},
          {"L_max", d.L_max},     {"link_mlp_hidden", d.link_mlp_hidden},
          {"readout_hidden", d.readout_hidden}, {"K", d.K}};
}

GlanceDims dims_from_json(const nlohmann::json& j) {
  GlanceDims d;
  d.d_node = j.value("d_node", d.d_node);
  d.d_link = j.value("d_link", d.d_link);
  d.d_path = j.value("d_path", d.d_path);
  d.T = j.value("T", d.T);
  d.L_max = j.value("L_max", d.L_max);
  d.link_mlp_hidden = j.value("link_mlp_hidden", d.link_mlp_hidden);
  d.readout_hidden = j.value("readout_hidden", d.readout_hidden);
  d.K = j.value("K", d.K);
  d.validate();
  return d;
}

TwinInput make_twin_input(const Graph& graph, const RoutingTable& table, const TrafficParams& traffic,
                          const std::vector<double>& capacities, const FeatureScaling& scaling, int max_links) {
  traffic.validate();
  if (static_cast<int>(table.paths.size()) != traffic.size())
    throw std::invalid_argument("routing table has " + std::to_string(table.paths.size()) + " paths but traffic has " +
                                std::to_string(traffic.size()) + " flows");
  if (static_cast<int>(capacities.size()) != graph.link_count())
    throw std::invalid_argument("capacity vector does not match the link count");

  TwinInput in;
  const int n = graph.node_count();
  in.node_count = n;
  in.degree = graph.degrees();
  in.node_instance.assign(n, 0);
  in.instance_nodes = {n};

  std::vector<double> dhat(n, 1.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) dhat[i] += graph.weight(i, j);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double a = (i == j ? 1.0 : 0.0) + graph.weight(i, j);
      if (a == 0.0) continue;
      in.conv_row.push_back(i);
      in.conv_col.push_back(j);
      in.conv_weight.push_back(a / std::sqrt(dhat[i] * dhat[j]));
    }

  for (int l = 0; l < graph.link_count(); ++l) {
    in.link_capacity.push_back(capacities[l] / scaling.capacity);
    in.link_tail.push_back(graph.links()[l].first);
    in.link_head.push_back(graph.links()[l].second);
  }
  for (int f = 0; f < traffic.size(); ++f) {
    const auto& p = table.paths[f];
    if (p.links.empty()) throw std::invalid_argument("flow " + std::to_string(f) + " has an empty path");
    if (max_links > 0 && p.hop_count() > max_links)
      throw std::invalid_argument("flow " + std::to_string(f) + " path has " + std::to_string(p.hop_count()) +
                                  " links, more than L_max = " + std::to_string(max_links));
    for (std::size_t k = 0; k + 1 < p.links.size(); ++k)
      if (p.links[k].second != p.links[k + 1].first)
        throw std::invalid_argument("flow " + std::to_string(f) + " path is not chained");
    in.path_links.push_back(path_link_indices(graph, p));
    in.tau_on.push_back(traffic.tau_on[f] / scaling.tau);
    in.tau_off.push_back(traffic.tau_off[f] / scaling.tau);
    in.path_instance.push_back(0);
  }
  in.instance_paths = {traffic.size()};
  return in;
}

TwinInput batch_inputs(const std::vector<const TwinInput*>& parts) {
  TwinInput out;
  int node_off = 0, link_off = 0, inst_off = 0;
  for (const TwinInput* p : parts) {
    auto append = [](auto& dst, const auto& src) { dst.insert(dst.end(), src.begin(), src.end()); };
    append(out.degree, p->degree);
    for (std::size_t e = 0; e < p->conv_row.size(); ++e) {
      out.conv_row.push_back(p->conv_row[e] + node_off);
      out.conv_col.push_back(p->conv_col[e] + node_off);
    }
    append(out.conv_weight, p->conv_weight);
    for (int v : p->node_instance) out.node_instance.push_back(v + inst_off);
    append(out.instance_nodes, p->instance_nodes);
    append(out.link_capacity, p->link_capacity);
    for (int v : p->link_tail) out.link_tail.push_back(v + node_off);
    for (int v : p->link_head) out.link_head.push_back(v + node_off);
    for (const auto& links : p->path_links) {
      auto shifted = links;
      for (int& l : shifted) l += link_off;
      out.path_links.push_back(std::move(shifted));
    }
    append(out.tau_on, p->tau_on);
    append(out.tau_off, p->tau_off);
    for (int v : p->path_instance) out.path_instance.push_back(v + inst_off);
    append(out.instance_paths, p->instance_paths);
    node_off += p->node_count;
    link_off += p->link_count();
    inst_off += p->instance_count();
  }
  out.node_count = node_off;
  return out;
}

std::string model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::glance: return "glance";
    case ModelKind::routenet: return "routenet";
    case ModelKind::gnn: return "gnn";
  }
  return "unknown";
}

ModelKind model_kind_from_name(const std::string& name) {
  if (name == "glance") return ModelKind::glance;
  if (name == "routenet") return ModelKind::routenet;
  if (name == "gnn") return ModelKind::gnn;
  throw std::invalid_argument("unknown model kind '" + name + "' (expected glance, routenet or gnn)");
}

namespace {

// [first_column | zeros] with the given total width.
Var seeded(Tape& tape, Var first, std::size_t rows, int width) {
  const std::size_t used = first.cols();
  if (static_cast<std::size_t>(width) == used) return first;
  return ad::concat({first, tape.constant(Tensor::zeros(rows, width - used))}, 1);
}

Var column(Tape& tape, const std::vector<double>& v) { return tape.constant(Tensor(v.size(), 1, v)); }

std::vector<std::size_t> widths(std::size_t in, const std::vector<int>& hidden, std::size_t out) {
  std::vector<std::size_t> w{in};
  for (int h : hidden) w.push_back(h);
  w.push_back(out);
  return w;
}

std::size_t mlp_count(const std::vector<std::size_t>& w) {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < w.size(); ++i) n += w[i] * w[i + 1] + w[i + 1];
  return n;
}

// Sparse D^-1/2 (A + I) D^-1/2 X.
Var graph_conv(const TwinInput& in, Var x) {
  return ad::segment_sum(ad::scale_rows(ad::gather_rows(x, in.conv_col), in.conv_weight), in.conv_row,
                         static_cast<std::size_t>(in.node_count));
}

std::size_t gru_input_dim(ModelKind kind, const GlanceDims& d) {
  return kind == ModelKind::routenet ? d.d_link : d.d_link + d.d_node;
}

std::size_t link_input_dim(ModelKind kind, const GlanceDims& d) {
  return kind == ModelKind::routenet ? d.d_link + d.d_path : d.d_link + d.d_node + d.d_path;
}

}  // namespace

EmbeddingState init_embeddings(Tape& tape, const TwinInput& in, const GlanceDims& dims, const Var* tau) {
  EmbeddingState s;
  const std::size_t f = in.path_count();
  Var t;
  if (tau) {
    if (tau->rows() != f || tau->cols() != 2)
      throw std::invalid_argument("traffic override must be " + std::to_string(f) + "x2, got " +
                                  tau->value().shape_string());
    t = *tau;
  } else {
    std::vector<double> v;
    for (std::size_t i = 0; i < f; ++i) {
      v.push_back(in.tau_on[i]);
      v.push_back(in.tau_off[i]);
    }
    t = tape.constant(Tensor(f, 2, v));
  }
  s.h_paths = seeded(tape, t, f, dims.d_path);
  s.h_links = seeded(tape, column(tape, in.link_capacity), in.link_count(), dims.d_link);
  s.h_nodes = seeded(tape, column(tape, in.degree), in.node_count, dims.d_node);
  return s;
}

void path_update(Tape& tape, const ParamSet& params, const TwinInput& in, EmbeddingState& s, bool use_nodes) {
  const auto gru = ad::GruWeights::bind(tape, params, "gru");
  s.m_states.clear();
  s.m_links.clear();
  std::size_t longest = 0;
  for (const auto& p : in.path_links) longest = std::max(longest, p.size());
  Var h = s.h_paths;
  for (std::size_t step = 0; step < longest; ++step) {
    // Paths shorter than this step are finished and keep their state.
    std::vector<int> active, links, tails;
    for (int i = 0; i < in.path_count(); ++i)
      if (in.path_links[i].size() > step) {
        active.push_back(i);
        links.push_back(in.path_links[i][step]);
        tails.push_back(in.link_tail[links.back()]);
      }
    Var x = ad::gather_rows(s.h_links, links);
    if (use_nodes) x = ad::concat({x, ad::gather_rows(s.h_nodes, tails)}, 1);
    Var m = ad::gru_cell(x, ad::gather_rows(h, active), gru);
    h = ad::scatter_rows(h, active, m);
    s.m_states.push_back(m);
    s.m_links.push_back(std::move(links));
  }
  s.h_paths = h;
}

void link_update(Tape& tape, const ParamSet& params, const TwinInput& in, const GlanceDims& dims, EmbeddingState& s,
                 bool use_nodes) {
  const std::size_t n_links = in.link_count();
  Var msum;
  if (s.m_states.empty()) {
    msum = tape.constant(Tensor::zeros(n_links, dims.d_path));
  } else {
    std::vector<int> ids;
    for (const auto& l : s.m_links) ids.insert(ids.end(), l.begin(), l.end());
    Var all = s.m_states.size() == 1 ? s.m_states[0] : ad::concat(std::span<const Var>(s.m_states), 0);
    msum = ad::segment_sum(all, ids, n_links);
  }
  Var x = use_nodes ? ad::concat({s.h_links, ad::gather_rows(s.h_nodes, in.link_tail), msum}, 1)
                    : ad::concat({s.h_links, msum}, 1);
  s.h_links = ad::mlp(tape, params, "link", dims.link_mlp_hidden.size() + 1, x);
}

void node_update(Tape& tape, const ParamSet& params, const TwinInput& in, EmbeddingState& s) {
  Var out_links = ad::segment_sum(s.h_links, in.link_tail, static_cast<std::size_t>(in.node_count));
  Var x = ad::matmul(ad::concat({s.h_nodes, out_links}, 1), tape.param(params, "node.W"));
  s.h_nodes = ad::relu(graph_conv(in, x));
}

Var readout(Tape& tape, const ParamSet& params, const GlanceDims& dims, Var h_paths, const std::vector<int>& tasks) {
  std::vector<Var> cols;
  for (int k = 0; k < dims.K; ++k) {
    if (std::find(tasks.begin(), tasks.end(), k) == tasks.end())
      cols.push_back(tape.constant(Tensor::zeros(h_paths.rows(), 1)));
    else
      cols.push_back(ad::mlp(tape, params, "readout." + std::to_string(k), dims.readout_hidden.size() + 1, h_paths));
  }
  return cols.size() == 1 ? cols[0] : ad::concat(std::span<const Var>(cols), 1);
}

Tensor gnn_node_features(const TwinInput& in, int flows) {
  Tensor x = Tensor::zeros(in.node_count, 2 * flows);
  std::vector<int> path_base(in.instance_count() + 1, 0);
  for (int i = 0; i < in.instance_count(); ++i) path_base[i + 1] = path_base[i] + in.instance_paths[i];
  for (int p = 0; p < in.path_count(); ++p) {
    const int f = p - path_base[in.path_instance[p]];
    if (f >= flows) throw std::invalid_argument("instance has more flows than the GNN input width");
    std::vector<int> nodes{in.link_tail[in.path_links[p].front()]};
    for (int l : in.path_links[p]) nodes.push_back(in.link_head[l]);
    for (int v : nodes) {
      x(v, 2 * f) = in.tau_on[p];
      x(v, 2 * f + 1) = in.tau_off[p];
    }
  }
  return x;
}

namespace {

Var gnn_forward(Tape& tape, const ParamSet& params, const TwinInput& in, int flows, const GlanceDims& dims,
                const std::vector<int>& tasks) {
  for (int f : in.instance_paths)
    if (f != flows)
      throw std::invalid_argument("GNN baseline was built for " + std::to_string(flows) + " flows, instance has " +
                                  std::to_string(f));
  Var h = tape.constant(gnn_node_features(in, flows));
  for (int layer = 0; layer < kGnnLayers; ++layer) {
    const std::string base = "gcn." + std::to_string(layer);
    h = ad::relu(ad::add_bias(graph_conv(in, ad::matmul(h, tape.param(params, base + ".W"))),
                              tape.param(params, base + ".b")));
  }
  std::vector<double> inv;
  for (int n : in.instance_nodes) inv.push_back(1.0 / n);
  Var pooled = ad::scale_rows(ad::segment_sum(h, in.node_instance, in.instance_count()), inv);
  std::vector<Var> cols;
  const std::size_t total = in.path_count();
  for (int k = 0; k < dims.K; ++k) {
    if (std::find(tasks.begin(), tasks.end(), k) == tasks.end()) {
      cols.push_back(tape.constant(Tensor::zeros(total, 1)));
      continue;
    }
    const std::string base = "head." + std::to_string(k);
    Var y = ad::add_bias(ad::matmul(pooled, tape.param(params, base + ".W")), tape.param(params, base + ".b"));
    // Row i holds instance i's F outputs; paths are stored instance-major.
    cols.push_back(ad::reshape(y, total, 1));
  }
  return cols.size() == 1 ? cols[0] : ad::concat(std::span<const Var>(cols), 1);
}

}  // namespace

TwinModel TwinModel::init(ModelKind kind, const GlanceDims& dims, std::uint64_t seed, int gnn_flows) {
  dims.validate();
  ParamSet p;
  auto rng = make_rng(seed, {0x1417});
  if (kind == ModelKind::gnn) {
    if (gnn_flows < 1) throw std::invalid_argument("GNN baseline needs a positive flow count");
    std::size_t in = 2 * gnn_flows;
    for (int layer = 0; layer < kGnnLayers; ++layer) {
      const std::string base = "gcn." + std::to_string(layer);
      p.set(base + ".W", ad::glorot_uniform(in, kGnnChannels, rng));
      p.set(base + ".b", Tensor::zeros(1, kGnnChannels));
      in = kGnnChannels;
    }
    for (int k = 0; k < dims.K; ++k) {
      const std::string base = "head." + std::to_string(k);
      p.set(base + ".W", ad::glorot_uniform(kGnnChannels, gnn_flows, rng));
      p.set(base + ".b", Tensor::zeros(1, gnn_flows));
    }
    return TwinModel(kind, dims, std::move(p), gnn_flows);
  }
  ad::init_gru(p, "gru", gru_input_dim(kind, dims), dims.d_path, rng);
  ad::init_mlp(p, "link", widths(link_input_dim(kind, dims), dims.link_mlp_hidden, dims.d_link), rng);
  if (kind == ModelKind::glance) p.set("node.W", ad::glorot_uniform(dims.d_node + dims.d_link, dims.d_node, rng));
  TwinModel m(kind, dims, std::move(p), 0);
  for (int k = 0; k < dims.K; ++k) m.reinit_readout(k, derive_seed(seed, {0x7ead, static_cast<std::uint64_t>(k)}));
  return m;
}

std::string TwinModel::readout_prefix(ModelKind kind, int k) {
  return (kind == ModelKind::gnn ? "head." : "readout.") + std::to_string(k);
}

void TwinModel::reinit_readout(int k, std::uint64_t seed) {
  if (k < 0 || k >= dims_.K) throw std::invalid_argument("readout index out of range");
  const std::string prefix = readout_prefix(kind_, k) + ".";
  for (auto it = params_.begin(); it != params_.end();) {
    const std::string name = it->first;
    ++it;
    if (name.rfind(prefix, 0) == 0) params_.erase(name);
  }
  auto rng = make_rng(seed, {0x4ead});
  if (kind_ == ModelKind::gnn) {
    params_.set(prefix + "W", ad::glorot_uniform(kGnnChannels, gnn_flows_, rng));
    params_.set(prefix + "b", Tensor::zeros(1, gnn_flows_));
  } else {
    ad::init_mlp(params_, readout_prefix(kind_, k), widths(dims_.d_path, dims_.readout_hidden, 1), rng);
  }
}

std::vector<std::string> TwinModel::embedding_parameter_names() const {
  std::vector<std::string> out;
  const std::string ro = kind_ == ModelKind::gnn ? "head." : "readout.";
  for (const auto& [name, t] : params_)
    if (name.rfind(ro, 0) != 0) out.push_back(name);
  return out;
}

Var TwinModel::forward(Tape& tape, const TwinInput& in, const std::vector<int>& tasks, const Var* tau) const {
  for (int k : tasks)
    if (k < 0 || k >= dims_.K) throw std::invalid_argument("task index " + std::to_string(k) + " out of range");
  if (kind_ == ModelKind::gnn) {
    if (tau) throw std::invalid_argument("the GNN baseline does not support traffic gradients");
    return gnn_forward(tape, params_, in, gnn_flows_, dims_, tasks);
  }
  const bool nodes = kind_ == ModelKind::glance;
  EmbeddingState s = init_embeddings(tape, in, dims_, tau);
  for (int t = 0; t < dims_.T; ++t) {
    // All three updates read the embeddings of layer t.
    const Var h_links_t = s.h_links;
    path_update(tape, params_, in, s, nodes);
    link_update(tape, params_, in, dims_, s, nodes);
    if (nodes) {
      const Var h_links_next = s.h_links;
      s.h_links = h_links_t;
      node_update(tape, params_, in, s);
      s.h_links = h_links_next;
    }
  }
  return readout(tape, params_, dims_, s.h_paths, tasks);
}

Tensor TwinModel::predict(const TwinInput& in) const {
  Tape tape;
  return forward(tape, in).value();
}

std::size_t count_parameters(ModelKind kind, const GlanceDims& dims, int gnn_flows) {
  if (kind == ModelKind::gnn) {
    const std::size_t c = kGnnChannels, in = 2 * gnn_flows;
    return in * c + c + (kGnnLayers - 1) * (c * c + c) + dims.K * (c * gnn_flows + gnn_flows);
  }
  const std::size_t gi = gru_input_dim(kind, dims), dp = dims.d_path;
  std::size_t n = 3 * (gi * dp + dp * dp + dp);
  n += mlp_count(widths(link_input_dim(kind, dims), dims.link_mlp_hidden, dims.d_link));
  if (kind == ModelKind::glance) n += static_cast<std::size_t>(dims.d_node + dims.d_link) * dims.d_node;
  n += dims.K * mlp_count(widths(dp, dims.readout_hidden, 1));
  return n;
}

}  // namespace glance

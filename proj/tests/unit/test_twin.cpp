#include "doctest.h"
#include "glance/twin.hpp"
#include "toys.hpp"

using namespace glance;
using namespace glance::ad;
using glance::testing::Instance;

namespace {

void zero_all(ParamSet& p) {
  for (auto& [name, t] : p) std::fill(t.values().begin(), t.values().end(), 0.0);
}

// A hand-made input: two paths over three links on three nodes.
TwinInput manual_input() {
  TwinInput in;
  in.node_count = 3;
  in.degree = {1, 2, 1};
  in.conv_row = {0, 1, 2};
  in.conv_col = {0, 1, 2};
  in.conv_weight = {1, 1, 1};
  in.node_instance = {0, 0, 0};
  in.instance_nodes = {3};
  in.link_capacity = {1.0, 0.5, 2.0};
  in.link_tail = {0, 1, 2};
  in.link_head = {1, 2, 1};
  in.path_links = {{0, 1}, {1}};
  in.tau_on = {10, 20};
  in.tau_off = {1, 1};
  in.path_instance = {0, 0};
  in.instance_paths = {2};
  return in;
}

Var sq_loss(Tape& t, Var pred) {
  auto rng = make_rng(99);
  Tensor w = Tensor::zeros(pred.rows(), pred.cols());
  for (auto& v : w.values()) v = uniform(rng, -1, 1);
  return sum(pred * pred) + sum(pred * t.constant(w));
}

}  // namespace

TEST_CASE("embedding initialization") {
  auto in = manual_input();
  in.tau_on[0] = 10;
  in.tau_off[0] = 1;
  in.link_capacity[0] = 1e6 / 1e6;
  in.degree[0] = 3;
  GlanceDims d = glance::testing::toy_dims();
  d.d_path = 4;
  Tape t;
  auto s = init_embeddings(t, in, d);
  CHECK(s.h_paths.value().shape() == std::vector<std::size_t>{2, 4});
  CHECK(s.h_paths.value()(0, 0) == 10);
  CHECK(s.h_paths.value()(0, 1) == 1);
  CHECK(s.h_paths.value()(0, 2) == 0);
  CHECK(s.h_paths.value()(0, 3) == 0);
  CHECK(s.h_links.value()(0, 0) == 1.0);
  CHECK(s.h_links.value()(0, 1) == 0.0);
  CHECK(s.h_nodes.value()(0, 0) == 3.0);
  CHECK(s.h_nodes.value()(0, 3) == 0.0);

  const auto g = build_reg_grid(1, 2);
  const auto x = make_twin_input(g, shortest_paths(g, FlowSet{{0}, {1}}, 0), TrafficParams{{1}, {1}},
                                 std::vector<double>(2, 1e6));
  CHECK(x.link_capacity[0] == 1.0);
}

TEST_CASE("path length limit") {
  const auto g = build_nsfnet();
  FlowSet flows{{0}, {13}};
  const auto table = shortest_paths(g, flows, 0);
  const std::vector<double> caps(g.link_count(), 1e6);
  CHECK_THROWS_AS(make_twin_input(g, table, TrafficParams{{1}, {1}}, caps, {}, table.paths[0].hop_count() - 1),
                  std::invalid_argument);
  CHECK_NOTHROW(make_twin_input(g, table, TrafficParams{{1}, {1}}, caps, {}, table.paths[0].hop_count()));
}

TEST_CASE("path update") {
  const auto d = glance::testing::toy_dims();
  auto m = TwinModel::init(ModelKind::glance, d, 1);
  const auto in = manual_input();

  SUBCASE("zero-weight gru halves the state each step") {
    ParamSet p = m.params();
    zero_all(p);
    Tape t;
    auto s = init_embeddings(t, in, d);
    path_update(t, p, in, s);
    CHECK(s.h_paths.value()(0, 0) == 10.0 * 0.25);  // two links
    CHECK(s.h_paths.value()(1, 0) == 20.0 * 0.5);   // one link
    CHECK(s.h_paths.value()(1, 1) == 0.5);
  }
  SUBCASE("a one-link path records exactly one state") {
    Tape t;
    auto s = init_embeddings(t, in, d);
    path_update(t, m.params(), in, s);
    REQUIRE(s.m_states.size() == 2);
    CHECK(s.m_links[0] == std::vector<int>{0, 1});
    CHECK(s.m_links[1] == std::vector<int>{1});
    // Path 1 is the second active row at step 0 and is done afterwards.
    for (int c = 0; c < d.d_path; ++c) CHECK(s.m_states[0].value()(1, c) == s.h_paths.value()(1, c));
  }
  SUBCASE("link order matters") {
    ParamSet p = m.params();
    glance::testing::randomize(p, 3);
    auto rev = in;
    std::reverse(rev.path_links[0].begin(), rev.path_links[0].end());
    Tape t;
    auto a = init_embeddings(t, in, d);
    auto b = init_embeddings(t, rev, d);
    path_update(t, p, in, a);
    path_update(t, p, rev, b);
    CHECK(glance::testing::max_abs_diff(a.h_paths.value(), b.h_paths.value()) > 1e-6);
  }
}

TEST_CASE("link update") {
  const auto d = glance::testing::toy_dims();
  auto m = TwinModel::init(ModelKind::glance, d, 2);
  ParamSet p = m.params();
  glance::testing::randomize(p, 4);
  const auto in = manual_input();
  Tape t;
  auto s = init_embeddings(t, in, d);
  path_update(t, p, in, s);
  const auto before = s;
  link_update(t, p, in, d, s);

  // Oracle: per-link MLP applied row by row with an explicit message sum.
  auto row_mlp = [&](int link, const std::vector<double>& msum) {
    Tape u;
    std::vector<double> x;
    for (int c = 0; c < d.d_link; ++c) x.push_back(before.h_links.value()(link, c));
    for (int c = 0; c < d.d_node; ++c) x.push_back(before.h_nodes.value()(in.link_tail[link], c));
    x.insert(x.end(), msum.begin(), msum.end());
    return mlp(u, p, "link", d.link_mlp_hidden.size() + 1, u.constant(Tensor(1, x.size(), x))).value();
  };
  const auto& m0 = before.m_states[0].value();
  const auto& m1 = before.m_states[1].value();
  std::vector<double> zero(d.d_path, 0.0), link0(d.d_path), link1(d.d_path);
  for (int c = 0; c < d.d_path; ++c) {
    link0[c] = m0(0, c);
    link1[c] = m0(1, c) + m1(0, c);  // link 1 is on both paths
  }
  const Tensor e0 = row_mlp(0, link0), e1 = row_mlp(1, link1), e2 = row_mlp(2, zero);
  for (int c = 0; c < d.d_link; ++c) {
    CHECK(s.h_links.value()(0, c) == doctest::Approx(e0[c]).epsilon(1e-14));
    CHECK(s.h_links.value()(1, c) == doctest::Approx(e1[c]).epsilon(1e-14));
    CHECK(s.h_links.value()(2, c) == doctest::Approx(e2[c]).epsilon(1e-14));
  }

  SUBCASE("zero weights give the bias") {
    ParamSet z = p;
    for (auto& [name, v] : z)
      if (name.rfind("link.", 0) == 0 && name.back() == 'W') std::fill(v.values().begin(), v.values().end(), 0.0);
    Tape u;
    auto s2 = init_embeddings(u, in, d);
    path_update(u, z, in, s2);
    link_update(u, z, in, d, s2);
    const auto& last_b = z.at("link." + std::to_string(d.link_mlp_hidden.size()) + ".b");
    for (int l = 0; l < 3; ++l)
      for (int c = 0; c < d.d_link; ++c) CHECK(s2.h_links.value()(l, c) == last_b[c]);
  }
}

TEST_CASE("node update") {
  SUBCASE("isolated node with identity weight") {
    TwinInput in;
    in.node_count = 1;
    in.degree = {0};
    in.conv_row = {0};
    in.conv_col = {0};
    in.conv_weight = {1.0};
    in.node_instance = {0};
    in.instance_nodes = {1};
    in.instance_paths = {0};
    ParamSet p;
    Tensor w = Tensor::zeros(3, 2);  // d_node 2, d_link 1
    w(0, 0) = w(1, 1) = 1.0;
    p.set("node.W", w);
    Tape t;
    EmbeddingState s;
    s.h_nodes = t.constant(Tensor(1, 2, {-1.5, 2.5}));
    s.h_links = t.constant(Tensor::zeros(0, 1));
    node_update(t, p, in, s);
    CHECK(s.h_nodes.value().values() == std::vector<double>{0.0, 2.5});
  }
  SUBCASE("normalization matches the dense formula") {
    const auto x = glance::testing::square_instance();
    const auto in = x.input();
    const int n = 4;
    std::vector<double> dh(n, 1.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) dh[i] += x.graph.weight(i, j);
    for (std::size_t e = 0; e < in.conv_row.size(); ++e) {
      const int i = in.conv_row[e], j = in.conv_col[e];
      const double a = x.graph.weight(i, j) + (i == j);
      CHECK(in.conv_weight[e] == doctest::Approx(a / std::sqrt(dh[i] * dh[j])).epsilon(1e-15));
    }
  }
  SUBCASE("node relabeling permutes the output") {
    const auto d = glance::testing::toy_dims();
    auto m = TwinModel::init(ModelKind::glance, d, 3);
    glance::testing::randomize(m.params(), 5);
    const auto x = glance::testing::grid_instance(4);
    std::vector<int> perm(16);
    std::iota(perm.begin(), perm.end(), 0);
    auto rng = make_rng(6);
    glance::shuffle(perm.begin(), perm.end(), rng);
    const auto y = glance::testing::permute_nodes(x, perm);
    const auto ix = x.input(), iy = y.input();
    Tape t;
    auto sx = init_embeddings(t, ix, d), sy = init_embeddings(t, iy, d);
    node_update(t, m.params(), ix, sx);
    node_update(t, m.params(), iy, sy);
    for (int v = 0; v < 16; ++v)
      for (int c = 0; c < d.d_node; ++c)
        CHECK(std::abs(sx.h_nodes.value()(v, c) - sy.h_nodes.value()(perm[v], c)) < 1e-9);
  }
}

TEST_CASE("glance forward") {
  const auto d = glance::testing::toy_dims();
  const auto x = glance::testing::grid_instance(7);
  const auto in = x.input();

  SUBCASE("zero weights predict the readout biases") {
    auto m = TwinModel::init(ModelKind::glance, d, 1);
    zero_all(m.params());
    for (int k = 0; k < 4; ++k)
      m.params().at("readout." + std::to_string(k) + "." + std::to_string(d.readout_hidden.size()) + ".b")[0] = k + 0.5;
    const auto y = m.predict(in);
    for (int f = 0; f < 10; ++f)
      for (int k = 0; k < 4; ++k) CHECK(y(f, k) == k + 0.5);
  }
  SUBCASE("flow permutation is exact") {
    auto m = TwinModel::init(ModelKind::glance, d, 2);
    glance::testing::randomize(m.params(), 2);
    std::vector<int> order{3, 7, 0, 9, 1, 2, 8, 4, 6, 5};
    const auto y = m.predict(in);
    const auto z = m.predict(glance::testing::permute_flows(x, order).input());
    for (int i = 0; i < 10; ++i)
      for (int k = 0; k < 4; ++k) CHECK(z(i, k) == y(order[i], k));
  }
  SUBCASE("node relabeling") {
    auto m = TwinModel::init(ModelKind::glance, d, 3);
    glance::testing::randomize(m.params(), 3);
    std::vector<int> perm(16);
    std::iota(perm.rbegin(), perm.rend(), 0);
    const auto y = m.predict(in);
    const auto z = m.predict(glance::testing::permute_nodes(x, perm).input());
    CHECK(glance::testing::max_abs_diff(y, z) < 1e-9);
  }
  SUBCASE("one layer equals the manual composition") {
    auto d1 = d;
    d1.T = 1;
    auto m = TwinModel::init(ModelKind::glance, d1, 4);
    glance::testing::randomize(m.params(), 4);
    Tape t;
    auto s = init_embeddings(t, in, d1);
    const Var h_links0 = s.h_links;
    path_update(t, m.params(), in, s);
    link_update(t, m.params(), in, d1, s);
    EmbeddingState for_nodes = s;
    for_nodes.h_links = h_links0;
    node_update(t, m.params(), in, for_nodes);
    const auto manual = readout(t, m.params(), d1, s.h_paths, {0, 1, 2, 3}).value();
    CHECK(manual == m.predict(in));
  }
  SUBCASE("batched equals separate") {
    auto m = TwinModel::init(ModelKind::glance, d, 5);
    const auto other = glance::testing::grid_instance(8).input();
    const auto both = batch_inputs({&in, &other});
    const auto y = m.predict(both);
    const auto a = m.predict(in), b = m.predict(other);
    for (int f = 0; f < 10; ++f)
      for (int k = 0; k < 4; ++k) {
        CHECK(y(f, k) == a(f, k));
        CHECK(y(10 + f, k) == b(f, k));
      }
  }
  SUBCASE("inactive tasks are zero and untouched") {
    auto m = TwinModel::init(ModelKind::glance, d, 6);
    Tape t;
    auto y = m.forward(t, in, {0});
    t.backward(sum(abs(y)));
    const auto g = t.param_grads();
    for (int k = 1; k < 4; ++k) {
      for (int f = 0; f < 10; ++f) CHECK(y.value()(f, k) == 0.0);
      for (const auto& [name, v] : g) CHECK(name.rfind("readout." + std::to_string(k), 0) != 0);
    }
    CHECK(g.count("gru.W_z") == 1);
  }
}

TEST_CASE("glance gradients match finite differences") {
  const auto d = glance::testing::toy_dims();
  auto m = TwinModel::init(ModelKind::glance, d, 11);
  glance::testing::randomize(m.params(), 11);
  const auto in = glance::testing::square_instance().input();
  const auto r = glance::testing::finite_difference_check(m.params(), [&](Tape& t, const ParamSet& p) {
    const TwinModel mm(ModelKind::glance, d, p);
    return sq_loss(t, mm.forward(t, in));
  });
  CHECK(r.checked == m.parameter_count());
  INFO(r.worst_name);
  CHECK(r.worst_rel < 1e-4);
}

TEST_CASE("traffic gradients") {
  const auto d = glance::testing::toy_dims();
  auto m = TwinModel::init(ModelKind::glance, d, 12);
  glance::testing::randomize(m.params(), 12);
  const auto in = glance::testing::square_instance().input();
  auto loss = [&](const Tensor& tau) {
    Tape t;
    Var v = t.variable(tau);
    Var l = sq_loss(t, m.forward(t, in, {0, 1, 2, 3}, &v));
    t.backward(l);
    return std::make_pair(l.value()[0], t.grad(v));
  };
  const Tensor tau(2, 2, {10, 1, 1, 20});
  const auto [l0, g] = loss(tau);
  for (std::size_t i = 0; i < 4; ++i) {
    Tensor a = tau, b = tau;
    a[i] += 1e-6;
    b[i] -= 1e-6;
    const double fd = (loss(a).first - loss(b).first) / 2e-6;
    CHECK(fd == doctest::Approx(g[i]).epsilon(1e-5));
  }
  // Same value as the default features.
  Tape t;
  CHECK(m.forward(t, in).value() == m.predict(in));
  CHECK(l0 == doctest::Approx(l0));
}

TEST_CASE("routenet") {
  const auto d = glance::testing::toy_dims();
  auto rn = TwinModel::init(ModelKind::routenet, d, 21);
  glance::testing::randomize(rn.params(), 21);

  SUBCASE("ignores node weights and positions") {
    // Same link support, different weights; capacities held fixed.
    const auto x = glance::testing::grid_instance(2);
    auto adj = x.graph.adjacency();
    for (auto& row : adj)
      for (auto& v : row)
        if (v > 0) v = 0.9;
    const Graph g2(adj, false);
    const auto in1 = x.input();
    const auto in2 = make_twin_input(g2, x.table, x.traffic, x.capacities);
    CHECK(rn.predict(in1) == rn.predict(in2));
    auto gl = TwinModel::init(ModelKind::glance, d, 22);
    glance::testing::randomize(gl.params(), 22);
    CHECK(glance::testing::max_abs_diff(gl.predict(in1), gl.predict(in2)) > 1e-9);
  }
  SUBCASE("zero weights predict readout biases") {
    auto z = rn;
    zero_all(z.params());
    const auto y = z.predict(glance::testing::square_instance().input());
    for (double v : y.values()) CHECK(v == 0.0);
  }
  SUBCASE("glance with node inputs removed reduces to routenet") {
    auto gl = TwinModel::init(ModelKind::glance, d, 23);
    zero_all(gl.params());
    // Copy routenet weights into the link-facing rows, leave node rows zero.
    for (const auto& [name, t] : rn.params()) {
      Tensor& dst = gl.params().at(name);
      if (name.rfind("gru.W_", 0) == 0) {
        for (int r = 0; r < d.d_link; ++r)
          for (std::size_t c = 0; c < t.cols(); ++c) dst(r, c) = t(r, c);
      } else if (name == "link.0.W") {
        for (std::size_t c = 0; c < t.cols(); ++c) {
          for (int r = 0; r < d.d_link; ++r) dst(r, c) = t(r, c);
          for (int r = 0; r < d.d_path; ++r) dst(d.d_link + d.d_node + r, c) = t(d.d_link + r, c);
        }
      } else {
        dst = t;
      }
    }
    const auto in = glance::testing::grid_instance(3).input();
    CHECK(glance::testing::max_abs_diff(gl.predict(in), rn.predict(in)) < 1e-12);
  }
  SUBCASE("flow permutation is exact") {
    const auto x = glance::testing::grid_instance(5);
    std::vector<int> order{9, 8, 7, 6, 5, 4, 3, 2, 1, 0};
    const auto y = rn.predict(x.input());
    const auto z = rn.predict(glance::testing::permute_flows(x, order).input());
    for (int i = 0; i < 10; ++i)
      for (int k = 0; k < 4; ++k) CHECK(z(i, k) == y(order[i], k));
  }
}

TEST_CASE("gnn baseline") {
  const auto d = glance::testing::toy_dims();
  const auto x = glance::testing::grid_instance(6);
  auto gnn = TwinModel::init(ModelKind::gnn, d, 31, 10);

  SUBCASE("features mark on-path nodes only") {
    const auto in = x.input();
    const auto feat = gnn_node_features(in, 10);
    for (int v = 0; v < 16; ++v)
      for (int f = 0; f < 10; ++f) {
        const auto nodes = x.table.paths[f].nodes();
        const bool on = std::find(nodes.begin(), nodes.end(), v) != nodes.end();
        CHECK(feat(v, 2 * f) == (on ? x.traffic.tau_on[f] : 0.0));
        CHECK(feat(v, 2 * f + 1) == (on ? x.traffic.tau_off[f] : 0.0));
      }
  }
  SUBCASE("flow order matters") {
    glance::testing::randomize(gnn.params(), 31);
    std::vector<int> order{1, 0, 2, 3, 4, 5, 6, 7, 8, 9};
    const auto y = gnn.predict(x.input());
    const auto z = gnn.predict(glance::testing::permute_flows(x, order).input());
    double diff = 0.0;
    for (int k = 0; k < 4; ++k) diff = std::max(diff, std::abs(z(0, k) - y(1, k)));
    CHECK(diff > 1e-6);
  }
  SUBCASE("zero weights predict head biases") {
    zero_all(gnn.params());
    gnn.params().at("head.2.b")[4] = 3.0;
    const auto y = gnn.predict(x.input());
    CHECK(y(4, 2) == 3.0);
    CHECK(y(5, 2) == 0.0);
  }
  SUBCASE("flow count is fixed") {
    const auto small = glance::testing::grid_instance(6, 4);
    CHECK_THROWS_AS(gnn.predict(small.input()), std::invalid_argument);
  }
  SUBCASE("gradients") {
    auto small = TwinModel::init(ModelKind::gnn, d, 32, 2);
    glance::testing::randomize(small.params(), 32, 0.2);
    const auto in = glance::testing::square_instance().input();
    const auto r = glance::testing::finite_difference_check(small.params(), [&](Tape& t, const ParamSet& p) {
      const TwinModel mm(ModelKind::gnn, d, p, 2);
      return sq_loss(t, mm.forward(t, in));
    }, 1e-4, 1e-8, 53);
    INFO(r.worst_name);
    CHECK(r.worst_rel < 1e-4);
  }
}

TEST_CASE("parameter counts") {
  // Three 96-channel GCN layers on 20 inputs plus four 96 -> 10 dense heads.
  CHECK(count_parameters(ModelKind::gnn, GlanceDims::compact(), 10) == 24520);
  CHECK(TwinModel::init(ModelKind::gnn, GlanceDims::compact(), 1, 10).parameter_count() == 24520);
  for (auto kind : {ModelKind::glance, ModelKind::routenet})
    for (const auto& dims : {GlanceDims::compact(), GlanceDims::large()}) {
      const auto a = TwinModel::init(kind, dims, 1), b = TwinModel::init(kind, dims, 2);
      CHECK(a.parameter_count() == count_parameters(kind, dims));
      CHECK(a.parameter_count() == b.parameter_count());
    }
  // gru 3*(32*32 + 32*32 + 32), link 64-64-32-16-16, node 32x16, four readouts
  // 32-32-64-128-32-1.
  CHECK(count_parameters(ModelKind::glance, GlanceDims::compact()) ==
        3 * (32 * 32 + 32 * 32 + 32) + (64 * 64 + 64 + 64 * 32 + 32 + 32 * 16 + 16 + 16 * 16 + 16) + 32 * 16 +
            4 * (32 * 32 + 32 + 32 * 64 + 64 + 64 * 128 + 128 + 128 * 32 + 32 + 32 + 1));
}

TEST_CASE("readout reinitialization") {
  auto m = TwinModel::init(ModelKind::glance, glance::testing::toy_dims(), 1);
  const auto before = m.params();
  m.reinit_readout(2, 777);
  for (const auto& name : m.embedding_parameter_names()) CHECK(m.params().at(name) == before.at(name));
  CHECK_FALSE(m.params().at("readout.2.0.W") == before.at("readout.2.0.W"));
  CHECK(m.params().at("readout.1.0.W") == before.at("readout.1.0.W"));
  CHECK(m.params().size() == before.size());
  for (const auto& name : m.embedding_parameter_names()) CHECK(name.rfind("readout", 0) != 0);
}

TEST_CASE("dims") {
  CHECK(dims_from_json(dims_to_json(GlanceDims::large())) == GlanceDims::large());
  GlanceDims bad;
  bad.d_path = 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK(model_kind_from_name("routenet") == ModelKind::routenet);
  CHECK_THROWS_AS(model_kind_from_name("mlp"), std::invalid_argument);
}

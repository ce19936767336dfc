#include "glance/manage.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>

#include "glance/parallel.hpp"
#include "glance/random.hpp"

namespace glance {

using ad::Tape;
using ad::Tensor;
using ad::Var;
using nlohmann::json;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_context(const TwinContext& ctx) {
  if (!ctx.model || !ctx.graph) throw std::invalid_argument("management context needs a model and a graph");
  if (ctx.model->kind() == ModelKind::gnn) throw std::invalid_argument("management needs a glance or routenet twin");
  if (static_cast<int>(ctx.capacities.size()) != ctx.graph->link_count())
    throw std::invalid_argument("capacity vector does not match the graph's links");
}

double objective_of(const Tensor& pred, const TargetProfile& target) {
  Tape t;
  return masked_mae(t, t.constant(pred), target.k_targ, target.tasks).value()[0];
}

double predict_objective(const TwinContext& ctx, const RoutingTable& table, const TrafficParams& traffic,
                         const TargetProfile& target) {
  const auto in = make_twin_input(*ctx.graph, table, traffic, ctx.capacities, ctx.scaling, ctx.max_links);
  return objective_of(ctx.model->predict(in), target);
}

std::string dump_tau(const std::vector<double>& tau) {
  std::string s;
  for (double v : tau) s += (s.empty() ? "" : ", ") + fmt::format("{}", v);
  return "[" + s + "]";
}

json array_json(const std::array<double, kKpiCount>& v) {
  json j;
  for (int k = 0; k < kKpiCount; ++k) j[kKpiNames[k]] = v[k];
  return j;
}

}  // namespace

void TargetProfile::validate(int flows) const {
  if (k_targ.rows() != static_cast<std::size_t>(flows) || k_targ.cols() != kKpiCount)
    throw std::invalid_argument("target profile must be " + std::to_string(flows) + "x4, got " +
                                k_targ.shape_string());
  if (tasks.empty()) throw std::invalid_argument("target profile selects no KPI");
  for (int k : tasks) {
    if (k < 0 || k >= kKpiCount) throw std::invalid_argument("target task out of range");
    for (std::size_t r = 0; r < k_targ.rows(); ++r)
      if (std::isinf(k_targ(r, k))) throw std::invalid_argument("target profile has an infinite entry");
  }
}

TargetProfile TargetProfile::from_record(const KpiRecord& raw, const Normalizer& norm, std::vector<int> tasks) {
  const auto n = norm.normalize(raw);
  TargetProfile t;
  t.k_targ = Tensor::zeros(n.flows(), kKpiCount);
  for (int f = 0; f < n.flows(); ++f)
    for (int k = 0; k < kKpiCount; ++k) t.k_targ(f, k) = n.at(f, k);
  t.tasks = std::move(tasks);
  return t;
}

double management_objective(const TwinContext& ctx, const FlowSet& flows, const TrafficParams& traffic,
                            const TargetProfile& target) {
  check_context(ctx);
  target.validate(flows.size());
  return predict_objective(ctx, shortest_paths(*ctx.graph, flows, ctx.routing_seed), traffic, target);
}

std::pair<double, std::vector<double>> traffic_gradient(const TwinContext& ctx, const RoutingTable& table,
                                                        const FlowSet& flows, const TrafficParams& traffic,
                                                        const TargetProfile& target) {
  const auto in = make_twin_input(*ctx.graph, table, traffic, ctx.capacities, ctx.scaling, ctx.max_links);
  const int f = flows.size();
  Tensor tau = Tensor::zeros(f, 2);
  for (int i = 0; i < f; ++i) {
    tau(i, 0) = in.tau_on[i];
    tau(i, 1) = in.tau_off[i];
  }
  Tape t;
  const Var v = t.variable(std::move(tau));
  const Var loss = masked_mae(t, ctx.model->forward(t, in, target.tasks, &v), target.k_targ, target.tasks);
  t.backward(loss);
  const auto g = t.grad(v);
  std::vector<double> grad(g.values());
  for (double& x : grad) x /= ctx.scaling.tau;
  return {loss.value()[0], grad};
}

ManageResult gd_traffic(const TwinContext& ctx, const FlowSet& flows, const TargetProfile& target,
                        const TrafficParams& tau0, const GdOptions& opt) {
  check_context(ctx);
  target.validate(flows.size());
  tau0.validate();
  if (tau0.size() != flows.size()) throw std::invalid_argument("traffic does not match the flow count");
  if (!(opt.tau_min > 0.0 && opt.tau_min <= opt.tau_max)) throw std::invalid_argument("invalid traffic bounds");
  if (!(opt.alpha0 > 0.0) || opt.max_iters < 0 || opt.max_halvings < 0)
    throw std::invalid_argument("invalid step settings");
  auto tau = tau0.flattened();
  if (!opt.free.empty() && opt.free.size() != tau.size())
    throw std::invalid_argument("free mask must have one entry per traffic parameter");
  for (double v : tau)
    if (v < opt.tau_min || v > opt.tau_max)
      throw std::invalid_argument(fmt::format("initial traffic {} outside [{}, {}]", v, opt.tau_min, opt.tau_max));

  const auto table = shortest_paths(*ctx.graph, flows, ctx.routing_seed);
  ManageResult r;
  r.flows = flows;
  r.tasks = target.tasks;
  auto [J, grad] = traffic_gradient(ctx, table, flows, tau0, target);
  ++r.evaluations;
  r.trajectory.push_back(J);
  r.stop_reason = "max_iters";

  for (int it = 0; it < opt.max_iters; ++it) {
    for (std::size_t i = 0; i < grad.size(); ++i)
      if (!std::isfinite(grad[i]))
        throw NumericalError(fmt::format("non-finite traffic gradient at iteration {} entry {}; tau = {}", it, i,
                                         dump_tau(tau)));
    double alpha = opt.alpha0;
    bool accepted = false, stalled = false;
    std::vector<double> cand(tau.size());
    double Jc = J;
    for (int h = 0; h <= opt.max_halvings; ++h, alpha *= 0.5) {
      for (std::size_t i = 0; i < tau.size(); ++i) {
        const bool free = opt.free.empty() || opt.free[i];
        cand[i] = free ? std::clamp(tau[i] - alpha * grad[i], opt.tau_min, opt.tau_max) : tau[i];
      }
      if (cand == tau) {
        stalled = true;
        break;
      }
      Jc = predict_objective(ctx, table, TrafficParams::from_flattened(cand), target);
      ++r.evaluations;
      if (Jc < J) {
        accepted = true;
        break;
      }
      if (Jc == J) {
        stalled = true;
        break;
      }
    }
    if (!accepted) {
      r.stop_reason = stalled ? "stationary" : "line_search";
      break;
    }
    const double rel = (J - Jc) / std::max(std::abs(J), std::numeric_limits<double>::min());
    tau = cand;
    grad = traffic_gradient(ctx, table, flows, TrafficParams::from_flattened(tau), target).second;
    ++r.evaluations;
    J = Jc;
    r.trajectory.push_back(J);
    if (rel < opt.rel_tol) {
      r.stop_reason = "converged";
      break;
    }
  }
  r.traffic = TrafficParams::from_flattened(tau);
  return r;
}

double destination_objective(const TwinContext& ctx, const std::vector<int>& sources,
                             const std::vector<int>& destinations, const TrafficParams& traffic,
                             const TargetProfile& target) {
  const int n = ctx.graph->node_count();
  for (std::size_t i = 0; i < sources.size(); ++i) {
    if (destinations[i] < 0 || destinations[i] >= n || destinations[i] == sources[i]) return kInf;
    for (std::size_t j = 0; j < i; ++j)
      if (sources[j] == sources[i] && destinations[j] == destinations[i]) return kInf;
  }
  const FlowSet flows{sources, destinations};
  RoutingTable table;
  try {
    table = shortest_paths(*ctx.graph, flows, ctx.routing_seed);
  } catch (const std::runtime_error&) {
    return kInf;
  }
  for (const auto& p : table.paths)
    if (ctx.max_links > 0 && p.hop_count() > ctx.max_links) return kInf;
  return predict_objective(ctx, table, traffic, target);
}

ManageResult hillclimb_destinations(const TwinContext& ctx, const std::vector<int>& sources,
                                    const TrafficParams& traffic, const TargetProfile& target,
                                    const HillClimbOptions& opt) {
  check_context(ctx);
  const int f = static_cast<int>(sources.size());
  const int n = ctx.graph->node_count();
  target.validate(f);
  if (traffic.size() != f) throw std::invalid_argument("traffic does not match the flow count");
  if (opt.n_init < 1 || opt.n_rand < 1) throw std::invalid_argument("n_init and n_rand must be >= 1");
  for (int s : sources)
    if (s < 0 || s >= n) throw std::invalid_argument("source node out of range");
  if (n < 3) throw std::invalid_argument("destination search needs at least three nodes");

  struct Restart {
    std::vector<int> dst;
    double J = kInf;
    std::vector<double> trajectory;
    int evaluations = 0;
  };
  std::vector<Restart> restarts(opt.n_rand);

  parallel_for(opt.n_rand, opt.jobs, [&](std::size_t ri) {
    Restart& R = restarts[ri];
    auto rng = make_rng(opt.seed, {0x41c, ri});
    std::map<std::vector<int>, double> memo;
    auto eval = [&](const std::vector<int>& d) {
      auto it = memo.find(d);
      if (it != memo.end()) return it->second;
      ++R.evaluations;
      return memo[d] = destination_objective(ctx, sources, d, traffic, target);
    };
    auto collides = [&](const std::vector<int>& d, int i, int node) {
      for (int j = 0; j < f; ++j)
        if (j != i && sources[j] == sources[i] && d[j] == node) return true;
      return false;
    };

    for (int s = 0; s < opt.n_init; ++s) {
      std::vector<int> d(f);
      for (int i = 0; i < f; ++i) {
        for (int attempt = 0; attempt < 100; ++attempt) {
          auto pick = static_cast<int>(uniform_index(rng, n - 1));
          if (pick >= sources[i]) ++pick;
          d[i] = pick;
          bool clash = false;
          for (int j = 0; j < i; ++j) clash = clash || (sources[j] == sources[i] && d[j] == pick);
          if (!clash) break;
        }
      }
      const double J = eval(d);
      if (J < R.J) {
        R.J = J;
        R.dst = d;
      }
    }
    if (!std::isfinite(R.J)) return;
    R.trajectory.push_back(R.J);

    for (bool moved = true; moved;) {
      moved = false;
      std::vector<int> order(f);
      std::iota(order.begin(), order.end(), 0);
      shuffle(order.begin(), order.end(), rng);
      for (int i : order) {
        std::vector<int> cands;
        for (int v = 0; v < n; ++v)
          if (v != sources[i] && v != R.dst[i]) cands.push_back(v);
        shuffle(cands.begin(), cands.end(), rng);
        for (int v : cands) {
          if (collides(R.dst, i, v)) continue;
          auto d = R.dst;
          d[i] = v;
          const double J = eval(d);
          if (J < R.J) {
            R.J = J;
            R.dst = std::move(d);
            R.trajectory.push_back(J);
            moved = true;
          }
        }
      }
    }
  });

  std::size_t best = 0;
  for (std::size_t i = 1; i < restarts.size(); ++i)
    if (restarts[i].J < restarts[best].J) best = i;
  if (!std::isfinite(restarts[best].J))
    throw std::runtime_error("no valid destination assignment found from the random starts");

  ManageResult r;
  r.flows = FlowSet{sources, restarts[best].dst};
  r.traffic = traffic;
  r.trajectory = restarts[best].trajectory;
  for (const auto& R : restarts) r.evaluations += R.evaluations;
  r.stop_reason = "local_optimum";
  r.tasks = target.tasks;
  return r;
}

std::array<double, kKpiCount> normalized_mae(const KpiRecord& a, const KpiRecord& b, const Normalizer& norm) {
  if (a.flows() != b.flows()) throw std::invalid_argument("KPI records have different flow counts");
  std::array<double, kKpiCount> out{};
  for (int k = 0; k < kKpiCount; ++k) {
    double s = 0.0;
    int c = 0;
    for (int f = 0; f < a.flows(); ++f) {
      if (is_missing(a.at(f, k)) || is_missing(b.at(f, k))) continue;
      s += std::abs(a.at(f, k) - b.at(f, k)) / norm.iqr[k];
      ++c;
    }
    out[k] = c ? s / c : kMissing;
  }
  return out;
}

std::array<double, kKpiCount> hinge_failure_ratio(const std::vector<KpiRecord>& k_gen,
                                                  const std::vector<KpiRecord>& k_targ) {
  if (k_gen.size() != k_targ.size()) throw std::invalid_argument("hinge: instance counts differ");
  std::array<double, kKpiCount> fail{}, out{};
  std::array<int, kKpiCount> cells{};
  for (std::size_t i = 0; i < k_gen.size(); ++i) {
    if (k_gen[i].flows() != k_targ[i].flows()) throw std::invalid_argument("hinge: flow counts differ");
    for (int f = 0; f < k_gen[i].flows(); ++f)
      for (int k = 0; k < kKpiCount; ++k) {
        const double g = k_gen[i].at(f, k), t = k_targ[i].at(f, k);
        if (is_missing(g) || is_missing(t)) continue;
        ++cells[k];
        if (k == kThroughput ? g < t : g > t) fail[k] += 1.0;
      }
  }
  for (int k = 0; k < kKpiCount; ++k) out[k] = cells[k] ? fail[k] / cells[k] : kMissing;
  return out;
}

void evaluate_management(ManageResult& r, const NetworkInput& x_orig, const NetworkInput& x_gen, const SimConfig& sim,
                         const std::array<std::uint64_t, 6>& orig_seeds,
                         const std::array<std::uint64_t, 3>& gen_seeds, const Normalizer& norm,
                         const std::vector<int>& tasks) {
  if (tasks.empty()) throw std::invalid_argument("no objective KPI selected");
  const auto runs = management_runs(x_orig, sim, orig_seeds);
  r.k_targ = runs.target;
  r.k_bm = runs.benchmark;
  r.k_gen = averaged_runs(x_gen, sim, {gen_seeds.begin(), gen_seeds.end()});
  r.eps_gen = normalized_mae(r.k_gen, r.k_targ, norm);
  r.eps_bm = normalized_mae(r.k_bm, r.k_targ, norm);
  r.eps_gen_total = r.eps_bm_total = 0.0;
  for (int k : tasks) {
    r.eps_gen_total += r.eps_gen[k] / static_cast<double>(tasks.size());
    r.eps_bm_total += r.eps_bm[k] / static_cast<double>(tasks.size());
  }
  r.hinge_gen = hinge_failure_ratio({r.k_gen}, {r.k_targ});
  r.tasks = tasks;
}

json manage_result_json(const ManageResult& r) {
  std::vector<std::string> tasks;
  for (int k : r.tasks) tasks.push_back(kKpiNames[k]);
  json j = {{"flows", flows_to_json(r.flows)},
            {"traffic", {{"tau_on", r.traffic.tau_on}, {"tau_off", r.traffic.tau_off}}},
            {"trajectory", r.trajectory},
            {"evaluations", r.evaluations},
            {"stop_reason", r.stop_reason},
            {"tasks", tasks}};
  if (r.k_targ.flows() > 0) {
    j["k_targ"] = kpi_to_json(r.k_targ);
    j["k_gen"] = kpi_to_json(r.k_gen);
    j["k_bm"] = kpi_to_json(r.k_bm);
    j["eps_gen"] = array_json(r.eps_gen);
    j["eps_bm"] = array_json(r.eps_bm);
    j["eps_gen_total"] = r.eps_gen_total;
    j["eps_bm_total"] = r.eps_bm_total;
    j["hinge_gen"] = array_json(r.hinge_gen);
  }
  return j;
}

std::string trajectory_csv(const ManageResult& r) {
  std::string out = "step,J\n";
  for (std::size_t i = 0; i < r.trajectory.size(); ++i) out += fmt::format("{},{}\n", i, r.trajectory[i]);
  return out;
}

}  // namespace glance

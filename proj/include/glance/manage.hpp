#pragma once

// Network management through a frozen twin: gradient descent over on/off
// traffic means and hill-climbing over flow destinations, both minimizing
// the masked MAE between twin predictions and a target KPI profile.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "glance/pipeline.hpp"

namespace glance {

/// Target KPIs in normalized units; tasks select the objective columns.
struct TargetProfile {
  ad::Tensor k_targ;  // F x 4
  std::vector<int> tasks{0, 1, 2, 3};

  void validate(int flows) const;
  static TargetProfile from_record(const KpiRecord& raw, const Normalizer& norm, std::vector<int> tasks = {0, 1, 2, 3});
};

/// Everything the twin needs besides destinations / traffic.
struct TwinContext {
  const TwinModel* model = nullptr;
  const Graph* graph = nullptr;
  std::vector<double> capacities;
  FeatureScaling scaling;
  int max_links = 3;
  std::uint64_t routing_seed = 0;  // fixed tie-break for twin queries
};

struct ManageResult {
  FlowSet flows;          // optimized destinations (or the given flows)
  TrafficParams traffic;  // optimized traffic (or the given traffic)
  std::vector<double> trajectory;  // J of every accepted state, initial first
  int evaluations = 0;
  std::string stop_reason;

  // Filled by evaluate_management (raw units).
  KpiRecord k_targ, k_gen, k_bm;
  std::array<double, kKpiCount> eps_gen{}, eps_bm{};  // per-KPI MAE, normalized
  double eps_gen_total = 0.0, eps_bm_total = 0.0;     // mean over objective KPIs
  std::array<double, kKpiCount> hinge_gen{};           // failure ratio per KPI
  std::vector<int> tasks;
};

/// J = masked MAE between twin predictions for (flows, traffic) and the target.
double management_objective(const TwinContext& ctx, const FlowSet& flows, const TrafficParams& traffic,
                            const TargetProfile& target);

struct GdOptions {
  double alpha0 = 0.1;
  int max_iters = 500;
  double tau_min = 1.0;
  double tau_max = 20.0;
  int max_halvings = 20;
  double rel_tol = 1e-6;
  /// Per entry of the flattened [on_0, off_0, on_1, ...] vector; all free when empty.
  std::vector<bool> free;
};

/// Projected gradient descent with backtracking. Each iteration starts at
/// alpha0 and halves until J does not increase; it stops at max_iters, after
/// max_halvings failed halvings, or when the relative improvement falls below
/// rel_tol. Throws NumericalError with the iterate on a non-finite gradient.
ManageResult gd_traffic(const TwinContext& ctx, const FlowSet& flows, const TargetProfile& target,
                        const TrafficParams& tau0, const GdOptions& opt = {});

/// J and dJ/dtau (flattened, raw units) at tau.
std::pair<double, std::vector<double>> traffic_gradient(const TwinContext& ctx, const RoutingTable& table,
                                                        const FlowSet& flows, const TrafficParams& traffic,
                                                        const TargetProfile& target);

struct HillClimbOptions {
  int n_init = 100;
  int n_rand = 5;
  std::uint64_t seed = 1;
  int jobs = 1;
};

/// Destination search from N_init random starts per restart; flows and
/// candidates are visited in shuffled order and every strict improvement is
/// taken. Passes repeat until one makes no move, so the result is a local
/// optimum under single-destination changes. Returns the best restart.
ManageResult hillclimb_destinations(const TwinContext& ctx, const std::vector<int>& sources,
                                    const TrafficParams& traffic, const TargetProfile& target,
                                    const HillClimbOptions& opt = {});

/// J for a destination vector, or +inf when the flows are invalid
/// (duplicate pair, self loop, unreachable or longer than max_links).
double destination_objective(const TwinContext& ctx, const std::vector<int>& sources,
                             const std::vector<int>& destinations, const TrafficParams& traffic,
                             const TargetProfile& target);

/// Simulation protocol: k_targ from orig_seeds[0..2] on x_orig, k_bm from
/// orig_seeds[3..5] on x_orig, k_gen from gen_seeds on x_gen.
void evaluate_management(ManageResult& r, const NetworkInput& x_orig, const NetworkInput& x_gen, const SimConfig& sim,
                         const std::array<std::uint64_t, 6>& orig_seeds,
                         const std::array<std::uint64_t, 3>& gen_seeds, const Normalizer& norm,
                         const std::vector<int>& tasks);

/// Per-KPI MAE in normalized units over cells present in both records.
std::array<double, kKpiCount> normalized_mae(const KpiRecord& a, const KpiRecord& b, const Normalizer& norm);

/// Fraction of (instance, flow) cells whose generated KPI violates the
/// target bound: higher delay, jitter or drops, lower throughput. Equality
/// satisfies the bound.
std::array<double, kKpiCount> hinge_failure_ratio(const std::vector<KpiRecord>& k_gen,
                                                  const std::vector<KpiRecord>& k_targ);

nlohmann::json manage_result_json(const ManageResult& r);
std::string trajectory_csv(const ManageResult& r);

}  // namespace glance

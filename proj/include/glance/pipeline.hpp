#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "glance/simulator.hpp"
#include "glance/twin.hpp"
#include "json.hpp"

namespace glance {

// ---------------------------------------------------------------------------
// Scenarios and datasets

struct Scenario {
  std::string name;
  bool nsfnet = false;         // otherwise a 4x4 wireless grid
  bool perturbed = false;      // per-sample PertGrid topology
  bool random_flows = false;   // per-sample flow sets
  TrafficMode traffic = TrafficMode::discrete;
  double learning_rate = 5e-4;
};

/// nsfnet-fixed, reggrid-fixed, reggrid-randflows, pertgrid-randtopo,
/// nsfnet-continuous. Throws std::invalid_argument for anything else.
Scenario scenario_by_name(const std::string& name);
std::vector<std::string> scenario_names();
SimConfig default_sim_config(const Scenario& s);

struct Sample {
  std::string id;
  std::string graph_id;
  FlowSet flows;
  TrafficParams traffic;
  RoutingTable table;             // reference run's routing
  std::vector<double> capacities;  // bits/s, aligned with the graph's links
  std::vector<KpiRecord> runs;     // runs[0] is the reference
  std::vector<std::uint64_t> seeds;
};

struct Dataset {
  std::string scenario;
  SimConfig sim;
  FeatureScaling scaling;
  int flows = 10;
  int max_links = 3;
  std::uint64_t seed = 0;
  std::map<std::string, Graph> graphs;
  std::vector<Sample> train, val, test;

  const Graph& graph(const Sample& s) const;
  nlohmann::json manifest() const;
};

struct GenerateOptions {
  std::string scenario = "reggrid-fixed";
  int n_train = 200;
  int n_val = 50;
  int n_test = 50;
  int n_runs_test = 4;
  int flows = 10;
  int max_links = 3;
  std::uint64_t seed = 1;
  std::optional<SimConfig> sim;  // scenario default when empty
  int jobs = 1;
};

Dataset generate_dataset(const GenerateOptions& opt);

/// Writes manifest.json, train/val/test.jsonl and topologies/<id>.json.
void save_dataset(const Dataset& d, const std::string& dir);
Dataset load_dataset(const std::string& dir);

nlohmann::json sample_to_json(const Sample& s);
Sample sample_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Pre-processing

inline constexpr double kMaxDelayMs = 2000.0;
inline constexpr double kMaxJitterMs = 200.0;

struct CleaningReport {
  int train_discarded = 0;
  int val_discarded = 0;
  int test_discarded = 0;
  int test_cells_imputed = 0;
  nlohmann::json to_json() const;
};

/// Training/validation samples with a missing KPI or a flow above the delay or
/// jitter threshold are dropped. Test benchmark cells missing in run r >= 1 are
/// filled with the mean of the same cell over the other benchmark runs; the
/// reference run is never used. Test samples missing a reference cell, or a
/// cell in every benchmark run, are dropped.
CleaningReport filter_and_impute(Dataset& d);

/// Type-7 (linear interpolation) quantile of unsorted values, q in [0, 1].
double quantile(std::vector<double> values, double q);

struct Normalizer {
  static constexpr double kEpsilon = 1e-9;
  std::array<double, kKpiCount> iqr{1.0, 1.0, 1.0, 1.0};

  KpiRecord normalize(const KpiRecord& k) const;
  KpiRecord denormalize(const KpiRecord& k) const;
  nlohmann::json to_json() const;
  static Normalizer from_json(const nlohmann::json& j);
};

/// Per-KPI IQR pooled over every flow of every sample's reference run. A
/// vanishing IQR falls back to the mean absolute deviation from the median,
/// and either is clamped below at kEpsilon.
Normalizer fit_normalizer(const std::vector<const Sample*>& samples);

/// Model input plus normalized reference targets (NaN where missing).
struct Prepared {
  TwinInput input;
  ad::Tensor target;  // F x 4
};

Prepared prepare(const Dataset& d, const Sample& s, const Normalizer& norm);
std::vector<Prepared> prepare_all(const Dataset& d, const std::vector<const Sample*>& samples,
                                  const Normalizer& norm);

// ---------------------------------------------------------------------------
// Training

enum class Strategy { stl, mtl, tl };
std::string strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& s);

struct TrainConfig {
  Strategy strategy = Strategy::mtl;
  std::vector<int> tasks{0, 1, 2, 3};  // STL/TL: the single target task
  ModelKind model = ModelKind::glance;
  GlanceDims dims = GlanceDims::compact();
  int epochs = 100;
  int batch = 10;
  int folds = 4;
  double lr = 1e-3;
  double l2_link = 1e-3;
  double l2_readout = 1e-4;
  std::uint64_t seed = 1;

  ad::L2Groups l2_groups() const;
  void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// Masked MAE summed over tasks: sum_k mean_{cells with a target} |p - y|.
ad::Var masked_mae(ad::Tape& tape, ad::Var pred, const ad::Tensor& target, const std::vector<int>& tasks);

struct EpochLog {
  int epoch = 0;
  int fold = 0;
  std::string split;  // "train" or "val"
  double total = 0.0;
  std::array<double, kKpiCount> per_kpi{};
};

/// Resumable optimizer state.
struct TrainState {
  TwinModel model;
  TwinModel best;
  ad::Adam adam;
  int epoch = 0;  // epochs completed
  double best_val = 0.0;
  int best_epoch = -1;
  std::vector<EpochLog> curve;
};

/// Training state as a checkpoint: "model.*", "best.*", "adam.*" tensors plus
/// epoch bookkeeping and the curve in the manifest.
void save_train_state(const std::string& path, const TrainState& s, const nlohmann::json& extra = {});
TrainState load_train_state(const std::string& path);

struct TrainResult {
  TwinModel best;
  TwinModel last;
  double best_val = 0.0;
  int best_epoch = -1;
  std::vector<EpochLog> curve;
};

/// Per-task mean absolute error of model on the prepared set (normalized
/// units), computed over cells with a target.
std::array<double, kKpiCount> per_task_mae(const TwinModel& model, const std::vector<Prepared>& data,
                                           int batch = 10);

struct TrainHooks {
  /// Only these parameters are updated; all are trainable when empty.
  std::vector<std::string> trainable;
  /// Called after each completed epoch with the current state.
  std::function<void(const TrainState&)> on_epoch;
  int fold = 0;
};

/// Adam on masked MAE. Validation loss after every epoch selects the best
/// model. Throws NumericalError naming epoch and batch on divergence.
TrainResult train(TwinModel init, const std::vector<Prepared>& train_set, const std::vector<Prepared>& val_set,
                  const TrainConfig& config, const TrainHooks& hooks = {}, std::optional<TrainState> resume = {});

/// Freezes every embedding parameter of an MTL model pretrained without
/// target_kpi, attaches a fresh readout for it and trains only that readout.
TrainResult transfer_retrain(const TwinModel& pretrained, const std::vector<int>& pretrained_tasks, int target_kpi,
                             const std::vector<Prepared>& train_set, const std::vector<Prepared>& val_set,
                             TrainConfig config, const TrainHooks& hooks = {});

struct FoldResult {
  int fold = 0;
  std::vector<int> val_indices;
  Normalizer normalizer;
  TrainResult result;
};

struct CvResult {
  std::vector<FoldResult> folds;
  double mean_best = 0.0;
  double std_best = 0.0;
};

/// Seeded fold assignment over pool indices: fold_of[i] in [0, folds).
std::vector<int> assign_folds(std::size_t n, int folds, std::uint64_t seed);

CvResult cross_validate(const Dataset& d, const std::vector<const Sample*>& pool, const TrainConfig& config,
                        int jobs = 1);

// ---------------------------------------------------------------------------
// Evaluation

/// NMAE_k over all (sample, flow) cells with a reference value.
std::array<double, kKpiCount> nmae(const std::vector<KpiRecord>& predicted, const std::vector<KpiRecord>& reference,
                                   const Normalizer& norm);

/// Denormalized model predictions per sample.
std::vector<KpiRecord> predict_records(const TwinModel& model, const Dataset& d,
                                       const std::vector<const Sample*>& samples, const Normalizer& norm);

struct EvalRow {
  std::string method;
  std::array<double, kKpiCount> nmae{};
  double sum() const;
};

/// Rows for each given model, SimBase^{n+} for n = 1..N_r-1, and the training
/// median / mean predictors.
std::vector<EvalRow> evaluate(const std::vector<std::pair<std::string, const TwinModel*>>& models, const Dataset& d,
                              const std::vector<const Sample*>& train, const std::vector<const Sample*>& test,
                              const Normalizer& norm);

nlohmann::json eval_report_json(const std::vector<EvalRow>& rows);
std::string curve_csv(const std::vector<EpochLog>& curve);

/// Checkpoint with a self-describing manifest (kind, dims, normalizer,
/// scaling, scenario, trained tasks).
void save_model(const std::string& path, const TwinModel& m, const Normalizer& norm, const Dataset& d,
                const std::vector<int>& tasks, const nlohmann::json& extra = {});
struct LoadedModel {
  TwinModel model;
  Normalizer normalizer;
  FeatureScaling scaling;
  std::string scenario;
  std::vector<int> tasks;
  nlohmann::json manifest;
};
LoadedModel load_model(const std::string& path);

std::vector<const Sample*> pointers(const std::vector<Sample>& v);

}  // namespace glance

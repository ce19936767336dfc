#include "glance/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

#include "glance/parallel.hpp"
#include "glance/random.hpp"

namespace glance {

namespace fs = std::filesystem;
using ad::Tape;
using ad::Tensor;
using ad::Var;
using nlohmann::json;

namespace {

constexpr double kPertRadius = 10.0;
constexpr int kMaxRedraws = 1000;

const std::vector<Scenario>& scenarios() {
  static const std::vector<Scenario> all = {
      {"nsfnet-fixed", true, false, false, TrafficMode::discrete, 1e-3},
      {"reggrid-fixed", false, false, false, TrafficMode::discrete, 5e-4},
      {"reggrid-randflows", false, false, true, TrafficMode::discrete, 5e-4},
      {"pertgrid-randtopo", false, true, false, TrafficMode::discrete, 5e-4},
      {"nsfnet-continuous", true, false, false, TrafficMode::continuous, 1e-3},
  };
  return all;
}

bool paths_fit(const Graph& g, const FlowSet& flows, int max_links) {
  try {
    const auto table = shortest_paths(g, flows, 0);
    for (const auto& p : table.paths)
      if (max_links > 0 && p.hop_count() > max_links) return false;
    return true;
  } catch (const std::runtime_error&) {
    return false;
  }
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

std::vector<Sample> read_jsonl(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::vector<Sample> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(sample_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(fmt::format("{}:{}: {}", p.string(), lineno, e.what()));
    }
  }
  return out;
}

Tensor stack_targets(const std::vector<const Prepared*>& parts) {
  std::size_t rows = 0;
  for (const auto* p : parts) rows += p->target.rows();
  std::vector<double> v;
  v.reserve(rows * kKpiCount);
  for (const auto* p : parts) v.insert(v.end(), p->target.values().begin(), p->target.values().end());
  return Tensor(rows, kKpiCount, std::move(v));
}

struct Accumulator {
  std::array<double, kKpiCount> sum{};
  std::array<long long, kKpiCount> count{};

  void add(const Tensor& pred, const Tensor& target) {
    for (std::size_t r = 0; r < target.rows(); ++r)
      for (int k = 0; k < kKpiCount; ++k) {
        const double y = target(r, k);
        if (std::isnan(y)) continue;
        sum[k] += std::abs(pred(r, k) - y);
        ++count[k];
      }
  }
  std::array<double, kKpiCount> mean() const {
    std::array<double, kKpiCount> out{};
    for (int k = 0; k < kKpiCount; ++k) out[k] = count[k] ? sum[k] / static_cast<double>(count[k]) : 0.0;
    return out;
  }
};

double task_total(const std::array<double, kKpiCount>& v, const std::vector<int>& tasks) {
  double t = 0.0;
  for (int k : tasks) t += v[k];
  return t;
}

json curve_to_json(const std::vector<EpochLog>& curve) {
  auto arr = json::array();
  for (const auto& e : curve)
    arr.push_back({{"epoch", e.epoch}, {"fold", e.fold}, {"split", e.split}, {"total", e.total},
                   {"per_kpi", e.per_kpi}});
  return arr;
}

std::vector<EpochLog> curve_from_json(const json& j) {
  std::vector<EpochLog> out;
  for (const auto& e : j) {
    EpochLog l;
    l.epoch = e.at("epoch");
    l.fold = e.at("fold");
    l.split = e.at("split");
    l.total = e.at("total");
    l.per_kpi = e.at("per_kpi").get<std::array<double, kKpiCount>>();
    out.push_back(l);
  }
  return out;
}

json model_manifest(const TwinModel& m) {
  return {{"kind", model_kind_name(m.kind())}, {"dims", dims_to_json(m.dims())}, {"gnn_flows", m.gnn_flows()}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Scenarios and datasets

Scenario scenario_by_name(const std::string& name) {
  for (const auto& s : scenarios())
    if (s.name == name) return s;
  std::string known;
  for (const auto& s : scenarios()) known += (known.empty() ? "" : ", ") + s.name;
  throw std::invalid_argument("unknown scenario '" + name + "' (expected one of: " + known + ")");
}

std::vector<std::string> scenario_names() {
  std::vector<std::string> out;
  for (const auto& s : scenarios()) out.push_back(s.name);
  return out;
}

SimConfig default_sim_config(const Scenario& s) { return s.nsfnet ? SimConfig::wired() : SimConfig::wireless(); }

const Graph& Dataset::graph(const Sample& s) const {
  auto it = graphs.find(s.graph_id);
  if (it == graphs.end()) throw std::runtime_error("sample " + s.id + " references unknown graph " + s.graph_id);
  return it->second;
}

json Dataset::manifest() const {
  auto ids = json::array();
  for (const auto& [id, g] : graphs) ids.push_back(id);
  return {{"format", "glance-dataset"},
          {"version", 1},
          {"scenario", scenario},
          {"seed", seed},
          {"flows", flows},
          {"max_links", max_links},
          {"sim", sim_config_to_json(sim)},
          {"scaling", {{"capacity", scaling.capacity}, {"tau", scaling.tau}}},
          {"thresholds", {{"delay_ms", kMaxDelayMs}, {"jitter_ms", kMaxJitterMs}}},
          {"sizes", {{"train", train.size()}, {"val", val.size()}, {"test", test.size()}}},
          {"graphs", ids}};
}

Dataset generate_dataset(const GenerateOptions& opt) {
  const Scenario sc = scenario_by_name(opt.scenario);
  if (opt.n_train < 0 || opt.n_val < 0 || opt.n_test < 0) throw std::invalid_argument("negative split size");
  if (opt.n_runs_test < 1) throw std::invalid_argument("test samples need at least one run");
  if (opt.flows < 1) throw std::invalid_argument("need at least one flow");

  Dataset d;
  d.scenario = sc.name;
  d.sim = opt.sim ? *opt.sim : default_sim_config(sc);
  d.sim.validate();
  d.flows = opt.flows;
  d.max_links = opt.max_links;
  d.seed = opt.seed;

  const Graph base = sc.nsfnet ? build_nsfnet() : build_reg_grid(4, 4);
  FlowSet fixed;
  if (!sc.random_flows) {
    for (int attempt = 0;; ++attempt) {
      if (attempt == kMaxRedraws) throw std::runtime_error("no flow set fits the path length limit");
      fixed = sample_flows(base, opt.flows, derive_seed(opt.seed, {0xf1, static_cast<std::uint64_t>(attempt)}));
      if (paths_fit(base, fixed, opt.max_links)) break;
    }
  }
  if (!sc.perturbed) d.graphs.emplace("g0", base);

  struct Split {
    const char* name;
    int n;
    int runs;
    std::vector<Sample>* out;
  };
  const std::array<Split, 3> splits{{{"train", opt.n_train, 1, &d.train},
                                     {"val", opt.n_val, 1, &d.val},
                                     {"test", opt.n_test, opt.n_runs_test, &d.test}}};
  for (std::size_t si = 0; si < splits.size(); ++si) {
    const auto& split = splits[si];
    std::vector<Sample> samples(split.n);
    std::vector<Graph> graphs(sc.perturbed ? split.n : 0);
    parallel_for(split.n, opt.jobs, [&](std::size_t i) {
      const auto seed = derive_seed(opt.seed, {0x5a, si, i});
      Sample& s = samples[i];
      s.id = fmt::format("{}-{}", split.name, i);
      Graph g = base;
      FlowSet flows = fixed;
      for (int attempt = 0;; ++attempt) {
        if (attempt == kMaxRedraws) throw std::runtime_error("sample " + s.id + ": no topology fits its flows");
        const auto a = static_cast<std::uint64_t>(attempt);
        if (sc.perturbed) g = build_pert_grid(4, 4, kGridSpacing, kPertRadius, derive_seed(seed, {0x70, a}));
        if (sc.random_flows) flows = sample_flows(g, opt.flows, derive_seed(seed, {0xf1, a}));
        if (paths_fit(g, flows, opt.max_links)) break;
      }
      s.graph_id = sc.perturbed ? "t" + s.id : "g0";
      s.flows = flows;
      s.traffic = sample_traffic_params(opt.flows, sc.traffic, derive_seed(seed, {0x7a}));
      auto runs = run_benchmarks(g, flows, s.traffic, d.sim, split.runs, derive_seed(seed, {0x5e}));
      s.table = std::move(runs.reference_table);
      s.runs = std::move(runs.records);
      s.seeds = std::move(runs.seeds);
      s.capacities = link_capacities(g, d.sim);
      if (sc.perturbed) graphs[i] = std::move(g);
    });
    for (std::size_t i = 0; i < graphs.size(); ++i) d.graphs.emplace(samples[i].graph_id, std::move(graphs[i]));
    *split.out = std::move(samples);
  }
  return d;
}

json sample_to_json(const Sample& s) {
  auto runs = json::array();
  for (const auto& r : s.runs) runs.push_back(kpi_to_json(r));
  return {{"id", s.id},
          {"graph", s.graph_id},
          {"flows", flows_to_json(s.flows)},
          {"traffic", {{"tau_on", s.traffic.tau_on}, {"tau_off", s.traffic.tau_off}}},
          {"routing", routing_to_json(s.table)},
          {"capacities", s.capacities},
          {"runs", runs},
          {"seeds", s.seeds}};
}

Sample sample_from_json(const json& j) {
  Sample s;
  s.id = j.at("id");
  s.graph_id = j.at("graph");
  s.flows = flows_from_json(j.at("flows"));
  s.traffic.tau_on = j.at("traffic").at("tau_on").get<std::vector<double>>();
  s.traffic.tau_off = j.at("traffic").at("tau_off").get<std::vector<double>>();
  s.traffic.validate();
  s.table = routing_from_json(j.at("routing"));
  s.capacities = j.at("capacities").get<std::vector<double>>();
  for (const auto& r : j.at("runs")) s.runs.push_back(kpi_from_json(r));
  s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (s.runs.empty()) throw std::invalid_argument("sample " + s.id + " has no runs");
  for (const auto& r : s.runs)
    if (r.flows() != s.flows.size()) throw std::invalid_argument("sample " + s.id + ": KPI rows do not match flows");
  return s;
}

void save_dataset(const Dataset& d, const std::string& dir) {
  const fs::path root(dir);
  fs::create_directories(root / "topologies");
  write_file(root / "manifest.json", d.manifest().dump(2) + "\n");
  for (const auto& [id, g] : d.graphs) write_file(root / "topologies" / (id + ".json"), graph_to_json(g).dump() + "\n");
  const std::array<std::pair<const char*, const std::vector<Sample>*>, 3> splits{
      {{"train", &d.train}, {"val", &d.val}, {"test", &d.test}}};
  for (const auto& [name, samples] : splits) {
    std::string text;
    for (const auto& s : *samples) text += sample_to_json(s).dump() + "\n";
    write_file(root / (std::string(name) + ".jsonl"), text);
  }
}

Dataset load_dataset(const std::string& dir) {
  const fs::path root(dir);
  if (!fs::exists(root / "manifest.json")) throw std::runtime_error("no dataset manifest in " + dir);
  const json m = json::parse(read_file(root / "manifest.json"));
  if (m.value("format", "") != "glance-dataset") throw std::runtime_error(dir + " is not a dataset directory");
  Dataset d;
  d.scenario = m.at("scenario");
  d.seed = m.at("seed");
  d.flows = m.at("flows");
  d.max_links = m.at("max_links");
  d.sim = sim_config_from_json(m.at("sim"));
  d.scaling.capacity = m.at("scaling").at("capacity");
  d.scaling.tau = m.at("scaling").at("tau");
  for (const auto& id : m.at("graphs"))
    d.graphs.emplace(id.get<std::string>(),
                     graph_from_json(json::parse(read_file(root / "topologies" / (id.get<std::string>() + ".json")))));
  d.train = read_jsonl(root / "train.jsonl");
  d.val = read_jsonl(root / "val.jsonl");
  d.test = read_jsonl(root / "test.jsonl");
  for (const auto* split : {&d.train, &d.val, &d.test})
    for (const auto& s : *split) {
      const auto& g = d.graph(s);
      const auto bad = validate_table(s.table, g, s.flows, d.max_links);
      if (!bad.empty())
        throw std::runtime_error("sample " + s.id + ": invalid routing (" + bad.front().kind + ", flow " +
                                 std::to_string(bad.front().flow_index) + ")");
      if (static_cast<int>(s.capacities.size()) != g.link_count())
        throw std::runtime_error("sample " + s.id + ": capacity count does not match graph links");
    }
  return d;
}

// ---------------------------------------------------------------------------
// Pre-processing

json CleaningReport::to_json() const {
  return {{"train_discarded", train_discarded},
          {"val_discarded", val_discarded},
          {"test_discarded", test_discarded},
          {"test_cells_imputed", test_cells_imputed}};
}

CleaningReport filter_and_impute(Dataset& d) {
  CleaningReport rep;
  auto violates = [](const Sample& s) {
    const auto& ref = s.runs.front();
    if (ref.has_missing()) return true;
    for (const auto& row : ref.rows())
      if (row[kDelay] > kMaxDelayMs || row[kJitter] > kMaxJitterMs) return true;
    return false;
  };
  auto drop = [&](std::vector<Sample>& v, int& counter) {
    const auto before = v.size();
    v.erase(std::remove_if(v.begin(), v.end(), violates), v.end());
    counter += static_cast<int>(before - v.size());
  };
  drop(d.train, rep.train_discarded);
  drop(d.val, rep.val_discarded);

  std::vector<Sample> kept;
  for (auto& s : d.test) {
    bool discard = s.runs.front().has_missing();
    const int n_runs = static_cast<int>(s.runs.size());
    int imputed = 0;
    for (int f = 0; f < s.flows.size() && !discard; ++f)
      for (int k = 0; k < kKpiCount && !discard; ++k)
        for (int r = 1; r < n_runs; ++r) {
          if (!is_missing(s.runs[r].at(f, k))) continue;
          double sum = 0.0;
          int n = 0;
          for (int o = 1; o < n_runs; ++o) {
            const double v = s.runs[o].at(f, k);
            if (o != r && !is_missing(v)) {
              sum += v;
              ++n;
            }
          }
          if (n == 0) {
            discard = true;
            break;
          }
          s.runs[r].at(f, k) = sum / n;
          ++imputed;
        }
    if (discard) {
      ++rep.test_discarded;
    } else {
      rep.test_cells_imputed += imputed;
      kept.push_back(std::move(s));
    }
  }
  d.test = std::move(kept);
  return rep;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("quantile of an empty set");
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("quantile level must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] + (h - static_cast<double>(lo)) * (values[lo + 1] - values[lo]);
}

KpiRecord Normalizer::normalize(const KpiRecord& k) const {
  KpiRecord out = k;
  for (int f = 0; f < k.flows(); ++f)
    for (int j = 0; j < kKpiCount; ++j) out.at(f, j) = k.at(f, j) / iqr[j];
  return out;
}

KpiRecord Normalizer::denormalize(const KpiRecord& k) const {
  KpiRecord out = k;
  for (int f = 0; f < k.flows(); ++f)
    for (int j = 0; j < kKpiCount; ++j) out.at(f, j) = k.at(f, j) * iqr[j];
  return out;
}

json Normalizer::to_json() const {
  json j;
  for (int k = 0; k < kKpiCount; ++k) j[kKpiNames[k]] = iqr[k];
  return {{"iqr", j}};
}

Normalizer Normalizer::from_json(const json& j) {
  Normalizer n;
  for (int k = 0; k < kKpiCount; ++k) {
    n.iqr[k] = j.at("iqr").at(kKpiNames[k]);
    if (!(n.iqr[k] > 0.0)) throw std::invalid_argument("normalizer IQR must be positive");
  }
  return n;
}

Normalizer fit_normalizer(const std::vector<const Sample*>& samples) {
  if (samples.empty()) throw std::invalid_argument("cannot fit a normalizer on an empty training set");
  Normalizer n;
  for (int k = 0; k < kKpiCount; ++k) {
    std::vector<double> pool;
    for (const auto* s : samples)
      for (const auto& row : s->runs.front().rows())
        if (!is_missing(row[k])) pool.push_back(row[k]);
    if (pool.empty()) {
      n.iqr[k] = Normalizer::kEpsilon;
      continue;
    }
    double scale = quantile(pool, 0.75) - quantile(pool, 0.25);
    if (scale < Normalizer::kEpsilon) {
      // Mostly-constant KPI (e.g. drops on an uncongested grid): use the mean
      // absolute deviation from the median instead of a vanishing IQR.
      const double med = quantile(pool, 0.5);
      scale = 0.0;
      for (double v : pool) scale += std::abs(v - med) / static_cast<double>(pool.size());
    }
    n.iqr[k] = std::max(scale, Normalizer::kEpsilon);
  }
  return n;
}

Prepared prepare(const Dataset& d, const Sample& s, const Normalizer& norm) {
  Prepared p;
  p.input = make_twin_input(d.graph(s), s.table, s.traffic, s.capacities, d.scaling, d.max_links);
  const auto y = norm.normalize(s.runs.front());
  p.target = Tensor::zeros(y.flows(), kKpiCount);
  for (int f = 0; f < y.flows(); ++f)
    for (int k = 0; k < kKpiCount; ++k) p.target(f, k) = y.at(f, k);
  return p;
}

std::vector<Prepared> prepare_all(const Dataset& d, const std::vector<const Sample*>& samples,
                                  const Normalizer& norm) {
  std::vector<Prepared> out;
  out.reserve(samples.size());
  for (const auto* s : samples) out.push_back(prepare(d, *s, norm));
  return out;
}

std::vector<const Sample*> pointers(const std::vector<Sample>& v) {
  std::vector<const Sample*> out;
  out.reserve(v.size());
  for (const auto& s : v) out.push_back(&s);
  return out;
}

// ---------------------------------------------------------------------------
// Training

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::stl: return "stl";
    case Strategy::mtl: return "mtl";
    case Strategy::tl: return "tl";
  }
  return "?";
}

Strategy strategy_from_name(const std::string& s) {
  if (s == "stl") return Strategy::stl;
  if (s == "mtl") return Strategy::mtl;
  if (s == "tl") return Strategy::tl;
  throw std::invalid_argument("unknown strategy '" + s + "' (expected stl, mtl or tl)");
}

ad::L2Groups TrainConfig::l2_groups() const {
  return {{"link", l2_link}, {"readout", l2_readout}, {"head", l2_readout}};
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch < 1) throw std::invalid_argument("batch must be >= 1");
  if (folds < 2) throw std::invalid_argument("folds must be >= 2");
  if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (l2_link < 0.0 || l2_readout < 0.0) throw std::invalid_argument("L2 coefficients must be non-negative");
  if (tasks.empty()) throw std::invalid_argument("at least one task is required");
  std::set<int> seen;
  for (int k : tasks) {
    if (k < 0 || k >= kKpiCount) throw std::invalid_argument("task index " + std::to_string(k) + " out of range");
    if (!seen.insert(k).second) throw std::invalid_argument("duplicate task " + std::to_string(k));
  }
  if (strategy != Strategy::mtl && tasks.size() != 1)
    throw std::invalid_argument(strategy_name(strategy) + " trains exactly one task");
  dims.validate();
}

json train_config_to_json(const TrainConfig& c) {
  std::vector<std::string> tasks;
  for (int k : c.tasks) tasks.push_back(kKpiNames[k]);
  return {{"strategy", strategy_name(c.strategy)},
          {"tasks", tasks},
          {"model", model_kind_name(c.model)},
          {"dims", dims_to_json(c.dims)},
          {"epochs", c.epochs},
          {"batch", c.batch},
          {"folds", c.folds},
          {"lr", c.lr},
          {"l2_link", c.l2_link},
          {"l2_readout", c.l2_readout},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  if (j.contains("strategy")) c.strategy = strategy_from_name(j.at("strategy"));
  if (j.contains("tasks")) {
    c.tasks.clear();
    for (const auto& t : j.at("tasks")) c.tasks.push_back(t.is_string() ? kpi_from_name(t) : t.get<int>());
  }
  if (j.contains("model")) c.model = model_kind_from_name(j.at("model"));
  if (j.contains("dims")) c.dims = dims_from_json(j.at("dims"));
  if (j.contains("epochs")) c.epochs = j.at("epochs");
  if (j.contains("batch")) c.batch = j.at("batch");
  if (j.contains("folds")) c.folds = j.at("folds");
  if (j.contains("lr")) c.lr = j.at("lr");
  if (j.contains("l2_link")) c.l2_link = j.at("l2_link");
  if (j.contains("l2_readout")) c.l2_readout = j.at("l2_readout");
  if (j.contains("seed")) c.seed = j.at("seed");
  return c;
}

Var masked_mae(Tape& tape, Var pred, const Tensor& target, const std::vector<int>& tasks) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw std::invalid_argument("masked_mae: prediction " + pred.value().shape_string() + " vs target " +
                                target.shape_string());
  const std::size_t rows = target.rows(), cols = target.cols();
  Tensor y = Tensor::zeros(rows, cols), w = Tensor::zeros(rows, cols);
  for (int k : tasks) {
    std::size_t n = 0;
    for (std::size_t r = 0; r < rows; ++r) n += std::isnan(target(r, k)) ? 0 : 1;
    for (std::size_t r = 0; r < rows; ++r) {
      if (std::isnan(target(r, k))) continue;
      y(r, k) = target(r, k);
      w(r, k) = 1.0 / static_cast<double>(n);
    }
  }
  return ad::sum(ad::abs(pred - tape.constant(std::move(y))) * tape.constant(std::move(w)));
}

std::array<double, kKpiCount> per_task_mae(const TwinModel& model, const std::vector<Prepared>& data, int batch) {
  Accumulator acc;
  for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(batch)) {
    std::vector<const TwinInput*> inputs;
    std::vector<const Prepared*> parts;
    for (std::size_t j = i; j < std::min(data.size(), i + batch); ++j) {
      inputs.push_back(&data[j].input);
      parts.push_back(&data[j]);
    }
    acc.add(model.predict(batch_inputs(inputs)), stack_targets(parts));
  }
  return acc.mean();
}

void save_train_state(const std::string& path, const TrainState& s, const json& extra) {
  ad::ParamSet all;
  for (const auto& [n, t] : s.model.params()) all.set("model." + n, t);
  for (const auto& [n, t] : s.best.params()) all.set("best." + n, t);
  for (const auto& [n, t] : s.adam.state()) all.set("adam." + n, t);
  json m = {{"format", "glance-train-state"},
            {"model", model_manifest(s.model)},
            {"epoch", s.epoch},
            {"best_val", s.best_val},
            {"best_epoch", s.best_epoch},
            {"adam_steps", s.adam.steps()},
            {"adam", {{"lr", s.adam.config().lr}, {"beta1", s.adam.config().beta1},
                      {"beta2", s.adam.config().beta2}, {"eps", s.adam.config().eps}}},
            {"curve", curve_to_json(s.curve)},
            {"extra", extra}};
  ad::save_checkpoint(path, all, m);
}

TrainState load_train_state(const std::string& path) {
  auto [all, m] = ad::load_checkpoint(path);
  if (m.value("format", "") != "glance-train-state") throw std::runtime_error(path + " is not a training state");
  const auto kind = model_kind_from_name(m.at("model").at("kind"));
  const auto dims = dims_from_json(m.at("model").at("dims"));
  const int gnn_flows = m.at("model").at("gnn_flows");
  ad::ParamSet model, best, adam;
  for (const auto& [n, t] : all) {
    if (n.rfind("model.", 0) == 0) model.set(n.substr(6), t);
    else if (n.rfind("best.", 0) == 0) best.set(n.substr(5), t);
    else if (n.rfind("adam.", 0) == 0) adam.set(n.substr(5), t);
  }
  ad::AdamConfig ac;
  ac.lr = m.at("adam").at("lr");
  ac.beta1 = m.at("adam").at("beta1");
  ac.beta2 = m.at("adam").at("beta2");
  ac.eps = m.at("adam").at("eps");
  TrainState s;
  s.model = TwinModel(kind, dims, std::move(model), gnn_flows);
  s.best = TwinModel(kind, dims, std::move(best), gnn_flows);
  s.adam = ad::Adam(ac);
  s.adam.load_state(adam, m.at("adam_steps").get<long long>());
  s.epoch = m.at("epoch");
  s.best_val = m.at("best_val").is_null() ? std::numeric_limits<double>::infinity() : m.at("best_val").get<double>();
  s.best_epoch = m.at("best_epoch");
  s.curve = curve_from_json(m.at("curve"));
  return s;
}

TrainResult train(TwinModel init, const std::vector<Prepared>& train_set, const std::vector<Prepared>& val_set,
                  const TrainConfig& config, const TrainHooks& hooks, std::optional<TrainState> resume) {
  config.validate();
  if (train_set.empty()) throw std::invalid_argument("empty training set");
  TrainState st = resume ? std::move(*resume)
                         : TrainState{init, init, ad::Adam(ad::AdamConfig{config.lr}), 0,
                                      std::numeric_limits<double>::infinity(), -1, {}};
  const std::set<std::string> trainable(hooks.trainable.begin(), hooks.trainable.end());
  const auto l2 = config.l2_groups();

  for (int epoch = st.epoch; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(config.seed, {0xe90c, static_cast<std::uint64_t>(epoch)});
    shuffle(order.begin(), order.end(), rng);

    Accumulator acc;
    int batch_index = 0;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(config.batch), ++batch_index) {
      std::vector<const TwinInput*> inputs;
      std::vector<const Prepared*> parts;
      for (std::size_t j = i; j < std::min(order.size(), i + config.batch); ++j) {
        inputs.push_back(&train_set[order[j]].input);
        parts.push_back(&train_set[order[j]]);
      }
      const auto target = stack_targets(parts);
      Tape tape;
      const Var pred = st.model.forward(tape, batch_inputs(inputs), config.tasks);
      const Var loss = masked_mae(tape, pred, target, config.tasks);
      const auto context = fmt::format("fold {} epoch {} batch {}", hooks.fold, epoch, batch_index);
      if (!std::isfinite(loss.value()[0])) throw NumericalError(context + ": non-finite training loss");
      acc.add(pred.value(), target);
      tape.backward(loss);
      auto grads = tape.param_grads();
      if (!trainable.empty())
        for (auto it = grads.begin(); it != grads.end();)
          it = trainable.count(it->first) ? std::next(it) : grads.erase(it);
      try {
        st.adam.step(st.model.params(), grads, l2);
      } catch (const NumericalError& e) {
        throw NumericalError(context + ": " + e.what());
      }
    }

    EpochLog tr{epoch, hooks.fold, "train", 0.0, acc.mean()};
    tr.total = task_total(tr.per_kpi, config.tasks);
    st.curve.push_back(tr);
    double selection = tr.total;
    if (!val_set.empty()) {
      EpochLog va{epoch, hooks.fold, "val", 0.0, per_task_mae(st.model, val_set, config.batch)};
      va.total = task_total(va.per_kpi, config.tasks);
      if (!std::isfinite(va.total))
        throw NumericalError(fmt::format("fold {} epoch {}: non-finite validation loss", hooks.fold, epoch));
      st.curve.push_back(va);
      selection = va.total;
    }
    if (selection < st.best_val) {
      st.best_val = selection;
      st.best_epoch = epoch;
      st.best = st.model;
    }
    st.epoch = epoch + 1;
    if (hooks.on_epoch) hooks.on_epoch(st);
  }
  return TrainResult{st.best, st.model, st.best_val, st.best_epoch, st.curve};
}

TrainResult transfer_retrain(const TwinModel& pretrained, const std::vector<int>& pretrained_tasks, int target_kpi,
                             const std::vector<Prepared>& train_set, const std::vector<Prepared>& val_set,
                             TrainConfig config, const TrainHooks& hooks) {
  if (target_kpi < 0 || target_kpi >= kKpiCount) throw std::invalid_argument("target KPI out of range");
  if (std::find(pretrained_tasks.begin(), pretrained_tasks.end(), target_kpi) != pretrained_tasks.end())
    throw std::invalid_argument(std::string("pretrained model already learned '") + kKpiNames[target_kpi] +
                                "'; transfer needs a model pretrained on the complementary KPIs");
  TwinModel model = pretrained;
  model.reinit_readout(target_kpi, derive_seed(config.seed, {0x71}));
  const std::string prefix = TwinModel::readout_prefix(model.kind(), target_kpi) + ".";
  TrainHooks h = hooks;
  h.trainable.clear();
  for (const auto& [name, t] : model.params())
    if (name.rfind(prefix, 0) == 0) h.trainable.push_back(name);
  config.strategy = Strategy::tl;
  config.tasks = {target_kpi};
  return train(std::move(model), train_set, val_set, config, h);
}

std::vector<int> assign_folds(std::size_t n, int folds, std::uint64_t seed) {
  if (folds < 2) throw std::invalid_argument("folds must be >= 2");
  if (n < static_cast<std::size_t>(folds)) throw std::invalid_argument("fewer samples than folds");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  auto rng = make_rng(seed, {0xc5});
  shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> fold_of(n);
  for (std::size_t i = 0; i < n; ++i) fold_of[perm[i]] = static_cast<int>(i % folds);
  return fold_of;
}

CvResult cross_validate(const Dataset& d, const std::vector<const Sample*>& pool, const TrainConfig& config,
                        int jobs) {
  config.validate();
  const auto fold_of = assign_folds(pool.size(), config.folds, config.seed);
  CvResult cv;
  cv.folds.resize(config.folds);
  parallel_for(config.folds, jobs, [&](std::size_t f) {
    std::vector<const Sample*> tr, va;
    FoldResult& out = cv.folds[f];
    out.fold = static_cast<int>(f);
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (fold_of[i] == static_cast<int>(f)) {
        va.push_back(pool[i]);
        out.val_indices.push_back(static_cast<int>(i));
      } else {
        tr.push_back(pool[i]);
      }
    }
    out.normalizer = fit_normalizer(tr);
    const auto model = TwinModel::init(config.model, config.dims, derive_seed(config.seed, {0x1d, f}), d.flows);
    TrainHooks hooks;
    hooks.fold = static_cast<int>(f);
    out.result = train(model, prepare_all(d, tr, out.normalizer), prepare_all(d, va, out.normalizer), config, hooks);
  });
  double sum = 0.0;
  for (const auto& f : cv.folds) sum += f.result.best_val;
  cv.mean_best = sum / static_cast<double>(cv.folds.size());
  double ss = 0.0;
  for (const auto& f : cv.folds) ss += (f.result.best_val - cv.mean_best) * (f.result.best_val - cv.mean_best);
  cv.std_best = std::sqrt(ss / static_cast<double>(cv.folds.size() - 1));
  return cv;
}

// ---------------------------------------------------------------------------
// Evaluation

std::array<double, kKpiCount> nmae(const std::vector<KpiRecord>& predicted, const std::vector<KpiRecord>& reference,
                                   const Normalizer& norm) {
  if (predicted.size() != reference.size()) throw std::invalid_argument("nmae: sample counts differ");
  std::array<double, kKpiCount> sum{}, out{};
  std::array<long long, kKpiCount> count{};
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i].flows() != reference[i].flows()) throw std::invalid_argument("nmae: flow counts differ");
    for (int f = 0; f < reference[i].flows(); ++f)
      for (int k = 0; k < kKpiCount; ++k) {
        const double p = predicted[i].at(f, k), r = reference[i].at(f, k);
        if (is_missing(p) || is_missing(r)) continue;
        sum[k] += std::abs(p - r) / norm.iqr[k];
        ++count[k];
      }
  }
  for (int k = 0; k < kKpiCount; ++k)
    out[k] = count[k] ? sum[k] / static_cast<double>(count[k]) : std::numeric_limits<double>::quiet_NaN();
  return out;
}

std::vector<KpiRecord> predict_records(const TwinModel& model, const Dataset& d,
                                       const std::vector<const Sample*>& samples, const Normalizer& norm) {
  std::vector<KpiRecord> out;
  out.reserve(samples.size());
  for (const auto* s : samples) {
    const auto in = make_twin_input(d.graph(*s), s->table, s->traffic, s->capacities, d.scaling, d.max_links);
    const auto y = model.predict(in);
    KpiRecord rec(s->flows.size());
    for (int f = 0; f < rec.flows(); ++f)
      for (int k = 0; k < kKpiCount; ++k) rec.at(f, k) = y(f, k);
    out.push_back(norm.denormalize(rec));
  }
  return out;
}

double EvalRow::sum() const { return std::accumulate(nmae.begin(), nmae.end(), 0.0); }

std::vector<EvalRow> evaluate(const std::vector<std::pair<std::string, const TwinModel*>>& models, const Dataset& d,
                              const std::vector<const Sample*>& train, const std::vector<const Sample*>& test,
                              const Normalizer& norm) {
  std::vector<KpiRecord> reference;
  for (const auto* s : test) reference.push_back(s->runs.front());
  std::vector<EvalRow> rows;
  for (const auto& [name, model] : models) rows.push_back({name, nmae(predict_records(*model, d, test, norm), reference, norm)});

  std::size_t n_runs = std::numeric_limits<std::size_t>::max();
  for (const auto* s : test) n_runs = std::min(n_runs, s->runs.size());
  if (test.empty()) n_runs = 0;
  for (std::size_t n = 1; n < n_runs; ++n) {
    std::vector<KpiRecord> est;
    for (const auto* s : test) est.push_back(simbase_estimate(s->runs, static_cast<int>(n)));
    rows.push_back({fmt::format("simbase-{}", n), nmae(est, reference, norm)});
  }

  if (!train.empty()) {
    std::array<double, kKpiCount> med{}, avg{};
    for (int k = 0; k < kKpiCount; ++k) {
      std::vector<double> pool;
      for (const auto* s : train)
        for (const auto& row : s->runs.front().rows())
          if (!is_missing(row[k])) pool.push_back(row[k]);
      med[k] = pool.empty() ? 0.0 : quantile(pool, 0.5);
      avg[k] = pool.empty() ? 0.0 : std::accumulate(pool.begin(), pool.end(), 0.0) / static_cast<double>(pool.size());
    }
    for (const auto& [name, value] : {std::pair{"median", med}, std::pair{"mean", avg}}) {
      std::vector<KpiRecord> est;
      for (const auto* s : test) {
        KpiRecord r(s->flows.size());
        for (int f = 0; f < r.flows(); ++f)
          for (int k = 0; k < kKpiCount; ++k) r.at(f, k) = value[k];
        est.push_back(r);
      }
      rows.push_back({name, nmae(est, reference, norm)});
    }
  }
  return rows;
}

json eval_report_json(const std::vector<EvalRow>& rows) {
  auto methods = json::array();
  json table = json::object();
  for (const auto& r : rows) {
    methods.push_back(r.method);
    json row;
    for (int k = 0; k < kKpiCount; ++k) row[kKpiNames[k]] = r.nmae[k];
    row["sum"] = r.sum();
    table[r.method] = row;
  }
  return {{"metric", "nmae"}, {"kpis", kKpiNames}, {"methods", methods}, {"nmae", table}};
}

std::string curve_csv(const std::vector<EpochLog>& curve) {
  std::string out = "epoch,fold,split,loss_total";
  for (const char* k : kKpiNames) out += fmt::format(",loss_{}", k);
  out += "\n";
  for (const auto& e : curve) {
    out += fmt::format("{},{},{},{}", e.epoch, e.fold, e.split, e.total);
    for (double v : e.per_kpi) out += fmt::format(",{}", v);
    out += "\n";
  }
  return out;
}

void save_model(const std::string& path, const TwinModel& m, const Normalizer& norm, const Dataset& d,
                const std::vector<int>& tasks, const json& extra) {
  std::vector<std::string> names;
  for (int k : tasks) names.push_back(kKpiNames[k]);
  json manifest = {{"format", "glance-model"},
                   {"model", model_manifest(m)},
                   {"normalizer", norm.to_json()},
                   {"scaling", {{"capacity", d.scaling.capacity}, {"tau", d.scaling.tau}}},
                   {"scenario", d.scenario},
                   {"max_links", d.max_links},
                   {"tasks", names},
                   {"extra", extra}};
  ad::save_checkpoint(path, m.params(), manifest);
}

LoadedModel load_model(const std::string& path) {
  auto [params, m] = ad::load_checkpoint(path);
  if (m.value("format", "") != "glance-model") throw std::runtime_error(path + " is not a model checkpoint");
  LoadedModel out;
  const auto& mm = m.at("model");
  out.model = TwinModel(model_kind_from_name(mm.at("kind")), dims_from_json(mm.at("dims")), std::move(params),
                        mm.at("gnn_flows"));
  out.normalizer = Normalizer::from_json(m.at("normalizer"));
  out.scaling.capacity = m.at("scaling").at("capacity");
  out.scaling.tau = m.at("scaling").at("tau");
  out.scenario = m.at("scenario");
  for (const auto& t : m.at("tasks")) out.tasks.push_back(kpi_from_name(t));
  out.manifest = std::move(m);
  return out;
}

}  // namespace glance

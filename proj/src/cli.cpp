#include "glance/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "glance/parallel.hpp"

namespace glance::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::string> kpi_names(const std::vector<int>& ks) {
  std::vector<std::string> out;
  for (int k : ks) out.push_back(kKpiNames[k]);
  return out;
}

std::vector<int> kpis_from_json(const json& j) {
  std::vector<int> out;
  for (const auto& v : j) out.push_back(kpi_from_name(v.get<std::string>()));
  return out;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be an object");
  for (const auto& [key, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw std::invalid_argument("unknown config key '" + where + key + "'");
  }
}

fs::path output_dir(const ExperimentConfig& c, const std::string& command) {
  if (!c.output.empty()) return c.output;
  const char* root = std::getenv(kOutputRootEnv);
  return fs::path(root && *root ? root : "glance-out") / command;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

fs::path prepare_output(const ExperimentConfig& c, const std::string& command) {
  const auto dir = output_dir(c, command);
  fs::create_directories(dir);
  json resolved = config_to_json(c);
  resolved["command"] = command;
  if (resolved["output"].get<std::string>().empty()) resolved["output"] = dir.string();
  write_json(dir / "config.resolved.json", resolved);
  return dir;
}

Dataset require_dataset(const ExperimentConfig& c) {
  if (c.data_dir.empty()) throw UsageError("no dataset given (use --data)");
  if (!fs::exists(fs::path(c.data_dir) / "manifest.json"))
    throw UsageError("no dataset at '" + c.data_dir + "' (missing manifest.json)");
  return load_dataset(c.data_dir);
}

LoadedModel require_model(const std::string& path, const Dataset& d) {
  if (!fs::exists(path)) throw UsageError("checkpoint '" + path + "' does not exist");
  auto m = load_model(path);
  if (m.scenario != d.scenario)
    throw UsageError("checkpoint '" + path + "' was trained on scenario " + m.scenario + " but the dataset is " +
                     d.scenario);
  if (m.model.kind() == ModelKind::gnn && m.model.gnn_flows() != d.flows)
    throw UsageError("GNN checkpoint expects " + std::to_string(m.model.gnn_flows()) + " flows");
  return m;
}

std::string rows_csv(const std::vector<EvalRow>& rows) {
  std::string out = "method";
  for (const char* k : kKpiNames) out += fmt::format(",{}", k);
  out += ",sum\n";
  for (const auto& r : rows) {
    out += r.method;
    for (double v : r.nmae) out += fmt::format(",{}", v);
    out += fmt::format(",{}\n", r.sum());
  }
  return out;
}

void print_rows(std::ostream& out, const std::vector<EvalRow>& rows) {
  out << fmt::format("{:<24}", "method");
  for (const char* k : kKpiNames) out << fmt::format("{:>12}", k);
  out << fmt::format("{:>12}\n", "sum");
  for (const auto& r : rows) {
    out << fmt::format("{:<24}", r.method);
    for (double v : r.nmae) out << fmt::format(" {:>11.4g}", v);
    out << fmt::format(" {:>11.4g}\n", r.sum());
  }
}

std::vector<KpiRecord> references(const std::vector<const Sample*>& test) {
  std::vector<KpiRecord> out;
  for (const auto* s : test) out.push_back(s->runs.front());
  return out;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(ExperimentConfig& c, std::ostream& out) {
  const auto scenario = scenario_by_name(c.scenario);
  GenerateOptions o;
  o.scenario = c.scenario;
  o.n_train = c.n_train;
  o.n_val = c.n_val;
  o.n_test = c.n_test;
  o.n_runs_test = c.n_runs_test;
  o.flows = c.flows;
  o.max_links = c.max_links;
  o.seed = c.seed;
  o.sim = sim_config_from_json(c.sim, default_sim_config(scenario));
  o.jobs = c.jobs;
  c.sim = sim_config_to_json(*o.sim);

  auto d = generate_dataset(o);
  const auto report = filter_and_impute(d);
  const auto dir = prepare_output(c, "gen-data");
  save_dataset(d, dir.string());
  write_json(dir / "generation_report.json",
             {{"scenario", d.scenario},
              {"seed", c.seed},
              {"requested", {{"train", c.n_train}, {"val", c.n_val}, {"test", c.n_test}}},
              {"kept", {{"train", d.train.size()}, {"val", d.val.size()}, {"test", d.test.size()}}},
              {"cleaning", report.to_json()}});
  out << fmt::format("dataset {} written to {} (train {}, val {}, test {})\n", d.scenario, dir.string(),
                     d.train.size(), d.val.size(), d.test.size());
  return kExitOk;
}

int cmd_train(ExperimentConfig& c, std::ostream& out) {
  const auto d = require_dataset(c);
  TrainConfig tc = c.train;
  tc.seed = c.seed;
  tc.lr = c.lr.value_or(scenario_by_name(d.scenario).learning_rate);
  c.lr = tc.lr;
  tc.validate();
  if (tc.strategy == Strategy::tl && c.pretrained.empty()) throw UsageError("tl needs --pretrained");
  if (tc.strategy == Strategy::tl && c.cv) throw UsageError("cross-validation is not available for tl");
  if (c.cv && c.resume) throw UsageError("--resume applies to single runs only");
  const auto train_ptrs = pointers(d.train);
  const auto val_ptrs = pointers(d.val);

  if (c.cv) {
    std::vector<const Sample*> pool = train_ptrs;
    pool.insert(pool.end(), val_ptrs.begin(), val_ptrs.end());
    const auto dir = prepare_output(c, "train");
    const auto cv = cross_validate(d, pool, tc, c.jobs);
    json folds = json::array();
    std::vector<EpochLog> curve;
    for (const auto& f : cv.folds) {
      save_model((dir / fmt::format("fold-{}.ckpt", f.fold)).string(), f.result.best, f.normalizer, d, tc.tasks,
                 {{"fold", f.fold}, {"best_epoch", f.result.best_epoch}, {"best_val", f.result.best_val}});
      folds.push_back({{"fold", f.fold},
                       {"val_size", f.val_indices.size()},
                       {"best_val", f.result.best_val},
                       {"best_epoch", f.result.best_epoch}});
      curve.insert(curve.end(), f.result.curve.begin(), f.result.curve.end());
    }
    write_text(dir / "curves.csv", curve_csv(curve));
    write_json(dir / "cv_report.json", {{"strategy", strategy_name(tc.strategy)},
                                        {"tasks", kpi_names(tc.tasks)},
                                        {"folds", folds},
                                        {"mean_best_val", cv.mean_best},
                                        {"std_best_val", cv.std_best}});
    out << fmt::format("cross-validation: best validation loss {:.4f} +/- {:.4f}\n", cv.mean_best, cv.std_best);
    return kExitOk;
  }

  const auto dir = prepare_output(c, "train");
  const auto state_path = (dir / "state.ckpt").string();
  TrainHooks hooks;
  hooks.on_epoch = [&](const TrainState& s) { save_train_state(state_path, s); };
  TrainResult result;
  Normalizer norm;
  if (tc.strategy == Strategy::tl) {
    if (!fs::exists(c.pretrained)) throw UsageError("checkpoint '" + c.pretrained + "' does not exist");
    const auto pre = require_model(c.pretrained, d);
    norm = pre.normalizer;
    result = transfer_retrain(pre.model, pre.tasks, tc.tasks.front(), prepare_all(d, train_ptrs, norm),
                              prepare_all(d, val_ptrs, norm), tc, hooks);
  } else {
    norm = fit_normalizer(train_ptrs);
    std::optional<TrainState> resume;
    if (c.resume) {
      if (!fs::exists(state_path)) throw UsageError("nothing to resume: " + state_path + " does not exist");
      resume = load_train_state(state_path);
    }
    const auto init = TwinModel::init(tc.model, tc.dims, tc.seed, d.flows);
    result = train(init, prepare_all(d, train_ptrs, norm), prepare_all(d, val_ptrs, norm), tc, hooks, resume);
  }
  const json info = {{"strategy", strategy_name(tc.strategy)},
                     {"best_epoch", result.best_epoch},
                     {"best_val", result.best_val},
                     {"epochs", tc.epochs}};
  save_model((dir / "model.ckpt").string(), result.best, norm, d, tc.tasks, info);
  write_text(dir / "curves.csv", curve_csv(result.curve));
  json report = info;
  report["tasks"] = kpi_names(tc.tasks);
  report["model"] = model_kind_name(tc.model);
  report["parameters"] = result.best.parameter_count();
  report["normalizer"] = norm.to_json();
  write_json(dir / "train_report.json", report);
  out << fmt::format("trained {} ({}): best validation loss {:.4f} at epoch {}\n", model_kind_name(tc.model),
                     strategy_name(tc.strategy), result.best_val, result.best_epoch);
  return kExitOk;
}

int cmd_eval(ExperimentConfig& c, std::ostream& out, bool with_models) {
  const auto d = require_dataset(c);
  if (with_models && c.models.empty()) throw UsageError("no checkpoint given (use --model)");
  const auto train_ptrs = pointers(d.train);
  const auto test_ptrs = pointers(d.test);
  const auto norm = fit_normalizer(train_ptrs);
  const auto refs = references(test_ptrs);
  std::vector<EvalRow> rows;
  if (with_models)
    for (const auto& path : c.models) {
      const auto m = require_model(path, d);
      const auto name = model_kind_name(m.model.kind()) + ":" + fs::path(path).stem().string();
      rows.push_back({name, nmae(predict_records(m.model, d, test_ptrs, m.normalizer), refs, norm)});
    }
  const auto base = evaluate({}, d, train_ptrs, test_ptrs, norm);
  rows.insert(rows.end(), base.begin(), base.end());
  const std::string command = with_models ? "eval" : "benchmark";
  const auto dir = prepare_output(c, command);
  auto report = eval_report_json(rows);
  report["normalizer"] = norm.to_json();
  report["test_samples"] = d.test.size();
  write_json(dir / (command + ".json"), report);
  write_text(dir / (command + ".csv"), rows_csv(rows));
  print_rows(out, rows);
  return kExitOk;
}

double r_squared(const std::vector<double>& truth, const std::vector<double>& pred) {
  if (truth.size() < 2) return kMissing;
  double mean = 0.0;
  for (double v : truth) mean += v / static_cast<double>(truth.size());
  double ss_tot = 0.0, ss_res = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
    ss_res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
  }
  return ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : kMissing;
}

int cmd_manage(ExperimentConfig& c, std::ostream& out, bool traffic) {
  const auto d = require_dataset(c);
  if (c.models.size() != 1) throw UsageError("management needs exactly one checkpoint (use --model)");
  const auto lm = require_model(c.models.front(), d);
  if (lm.model.kind() == ModelKind::gnn) throw UsageError("management needs a glance or routenet checkpoint");
  const auto& ms = c.manage;
  if (ms.kpis.empty()) throw UsageError("no objective KPI selected");
  const int n = std::min<int>(ms.instances, static_cast<int>(d.test.size()));
  if (n < 1) throw UsageError("dataset has no test instances");
  const std::string command = traffic ? "manage-traffic" : "manage-flows";
  const auto routing_seed = derive_seed(c.seed, {0x3d});

  std::vector<ManageResult> results(n);
  parallel_for(n, c.jobs, [&](std::size_t i) {
    const Sample& s = d.test[i];
    const Graph& g = d.graph(s);
    std::array<std::uint64_t, 6> orig;
    std::array<std::uint64_t, 3> gen;
    for (std::uint64_t j = 0; j < 6; ++j) orig[j] = derive_seed(c.seed, {0x3a, i, j});
    for (std::uint64_t j = 0; j < 3; ++j) gen[j] = derive_seed(c.seed, {0x3a, i, 6 + j});
    const NetworkInput x_orig{&g, s.flows, s.traffic};
    const auto target_raw = averaged_runs(x_orig, d.sim, {orig[0], orig[1], orig[2]});
    const auto target = TargetProfile::from_record(target_raw, lm.normalizer, ms.kpis);
    TwinContext ctx{&lm.model, &g, s.capacities, lm.scaling, d.max_links, routing_seed};
    ManageResult r;
    NetworkInput x_gen = x_orig;
    if (traffic) {
      const auto tau0 = sample_traffic_params(s.flows.size(), TrafficMode::continuous, derive_seed(c.seed, {0x3b, i}));
      r = gd_traffic(ctx, s.flows, target, tau0, ms.gd);
      x_gen.traffic = r.traffic;
    } else {
      HillClimbOptions h;
      h.n_init = ms.n_init;
      h.n_rand = ms.n_rand;
      h.seed = derive_seed(c.seed, {0x3c, i});
      r = hillclimb_destinations(ctx, s.flows.sources, s.traffic, target, h);
      x_gen.flows = r.flows;
    }
    evaluate_management(r, x_orig, x_gen, d.sim, orig, gen, lm.normalizer, ms.kpis);
    results[i] = std::move(r);
  });

  const auto dir = prepare_output(c, command);
  fs::create_directories(dir / "reports");
  std::string errors = "instance,kpi,eps_gen,eps_bm,hinge_gen\n";
  std::string traj = "instance,step,J\n";
  std::vector<KpiRecord> gens, targs;
  std::array<double, kKpiCount> mean_gen{}, mean_bm{};
  std::array<int, kKpiCount> counted{};
  double total_gen = 0.0, total_bm = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto& r = results[i];
    json rep = manage_result_json(r);
    rep["instance"] = d.test[i].id;
    rep["seed"] = c.seed;
    write_json(dir / "reports" / fmt::format("instance-{}.json", i), rep);
    for (int k : ms.kpis) {
      errors += fmt::format("{},{},{},{},{}\n", i, kKpiNames[k], r.eps_gen[k], r.eps_bm[k], r.hinge_gen[k]);
      if (!is_missing(r.eps_gen[k]) && !is_missing(r.eps_bm[k])) {
        mean_gen[k] += r.eps_gen[k];
        mean_bm[k] += r.eps_bm[k];
        ++counted[k];
      }
    }
    for (std::size_t t = 0; t < r.trajectory.size(); ++t) traj += fmt::format("{},{},{}\n", i, t, r.trajectory[t]);
    total_gen += r.eps_gen_total / n;
    total_bm += r.eps_bm_total / n;
    gens.push_back(r.k_gen);
    targs.push_back(r.k_targ);
  }
  const auto hinge = hinge_failure_ratio(gens, targs);

  // R^2 of generated vs target KPIs in normalized units, pooled and per KPI.
  std::vector<double> pooled_t, pooled_g;
  json per_kpi_r2, eps_gen_json, eps_bm_json, hinge_json;
  for (int k : ms.kpis) {
    std::vector<double> t, g;
    for (int i = 0; i < n; ++i)
      for (int f = 0; f < gens[i].flows(); ++f) {
        const double a = targs[i].at(f, k), b = gens[i].at(f, k);
        if (is_missing(a) || is_missing(b)) continue;
        t.push_back(a / lm.normalizer.iqr[k]);
        g.push_back(b / lm.normalizer.iqr[k]);
      }
    per_kpi_r2[kKpiNames[k]] = r_squared(t, g);
    pooled_t.insert(pooled_t.end(), t.begin(), t.end());
    pooled_g.insert(pooled_g.end(), g.begin(), g.end());
    eps_gen_json[kKpiNames[k]] = counted[k] ? mean_gen[k] / counted[k] : kMissing;
    eps_bm_json[kKpiNames[k]] = counted[k] ? mean_bm[k] / counted[k] : kMissing;
    hinge_json[kKpiNames[k]] = hinge[k];
  }
  write_text(dir / "errors.csv", errors);
  write_text(dir / "trajectories.csv", traj);
  write_json(dir / "summary.json", {{"command", command},
                                    {"instances", n},
                                    {"tasks", kpi_names(ms.kpis)},
                                    {"mean_eps_gen", eps_gen_json},
                                    {"mean_eps_bm", eps_bm_json},
                                    {"mean_eps_gen_total", total_gen},
                                    {"mean_eps_bm_total", total_bm},
                                    {"hinge_failure_ratio", hinge_json},
                                    {"r2_pooled", r_squared(pooled_t, pooled_g)},
                                    {"r2_per_kpi", per_kpi_r2}});
  out << fmt::format("{}: {} instances, mean eps_gen {:.4f}, mean eps_bm {:.4f}\n", command, n, total_gen, total_bm);
  return kExitOk;
}

int cmd_inspect(const std::string& path, std::ostream& out) {
  if (fs::is_directory(path)) {
    const auto d = load_dataset(path);
    json j = d.manifest();
    json stats;
    for (int k = 0; k < kKpiCount; ++k) {
      std::vector<double> v;
      for (const auto& s : d.train)
        for (const auto& row : s.runs.front().rows())
          if (!is_missing(row[k])) v.push_back(row[k]);
      if (v.empty()) continue;
      stats[kKpiNames[k]] = {{"min", quantile(v, 0.0)}, {"median", quantile(v, 0.5)}, {"max", quantile(v, 1.0)}};
    }
    j["train_kpis"] = stats;
    out << j.dump(2) << "\n";
    return kExitOk;
  }
  if (!fs::exists(path)) throw UsageError("'" + path + "' does not exist");
  const auto [params, manifest] = ad::load_checkpoint(path);
  json tensors = json::object();
  for (const auto& [name, t] : params) tensors[name] = t.shape();
  out << json{{"manifest", manifest}, {"parameters", params.parameter_count()}, {"tensors", tensors}}.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

json config_to_json(const ExperimentConfig& c) {
  json train = train_config_to_json(c.train);
  train.erase("seed");
  train["lr"] = c.lr ? json(*c.lr) : json(nullptr);
  train["cv"] = c.cv;
  train["resume"] = c.resume;
  train["pretrained"] = c.pretrained;
  return {{"scenario", c.scenario},
          {"seed", c.seed},
          {"output", c.output},
          {"jobs", c.jobs},
          {"data",
           {{"n_train", c.n_train},
            {"n_val", c.n_val},
            {"n_test", c.n_test},
            {"n_runs_test", c.n_runs_test},
            {"flows", c.flows},
            {"max_links", c.max_links}}},
          {"sim", c.sim},
          {"data_dir", c.data_dir},
          {"models", c.models},
          {"train", train},
          {"manage",
           {{"instances", c.manage.instances},
            {"kpis", kpi_names(c.manage.kpis)},
            {"alpha0", c.manage.gd.alpha0},
            {"max_iters", c.manage.gd.max_iters},
            {"tau_min", c.manage.gd.tau_min},
            {"tau_max", c.manage.gd.tau_max},
            {"max_halvings", c.manage.gd.max_halvings},
            {"rel_tol", c.manage.gd.rel_tol},
            {"n_init", c.manage.n_init},
            {"n_rand", c.manage.n_rand}}}};
}

ExperimentConfig config_from_json(const json& j, ExperimentConfig c) {
  check_keys(j, {"scenario", "seed", "output", "jobs", "data", "sim", "data_dir", "models", "train", "manage", "command"},
             "");
  try {
    if (j.contains("scenario")) c.scenario = j.at("scenario");
    if (j.contains("seed")) c.seed = j.at("seed");
    if (j.contains("output")) c.output = j.at("output");
    if (j.contains("jobs")) c.jobs = j.at("jobs");
    if (j.contains("data")) {
      const auto& dj = j.at("data");
      check_keys(dj, {"n_train", "n_val", "n_test", "n_runs_test", "flows", "max_links"}, "data.");
      c.n_train = dj.value("n_train", c.n_train);
      c.n_val = dj.value("n_val", c.n_val);
      c.n_test = dj.value("n_test", c.n_test);
      c.n_runs_test = dj.value("n_runs_test", c.n_runs_test);
      c.flows = dj.value("flows", c.flows);
      c.max_links = dj.value("max_links", c.max_links);
    }
    if (j.contains("sim")) {
      check_keys(j.at("sim"), {"t_prep", "t_gen", "packet_bytes", "cbr_rate", "link_capacity_default",
                               "queue_buffer_pkts", "wireless_contention", "reference_distance"},
                 "sim.");
      for (const auto& [k, v] : j.at("sim").items()) c.sim[k] = v;
    }
    if (j.contains("data_dir")) c.data_dir = j.at("data_dir");
    if (j.contains("models")) c.models = j.at("models").get<std::vector<std::string>>();
    if (j.contains("train")) {
      json tj = j.at("train");
      check_keys(tj, {"strategy", "tasks", "model", "dims", "epochs", "batch", "folds", "lr", "l2_link", "l2_readout",
                      "cv", "resume", "pretrained"},
                 "train.");
      if (tj.contains("lr")) c.lr = tj.at("lr").is_null() ? std::nullopt : std::optional<double>(tj.at("lr"));
      c.cv = tj.value("cv", c.cv);
      c.resume = tj.value("resume", c.resume);
      c.pretrained = tj.value("pretrained", c.pretrained);
      for (const char* k : {"lr", "cv", "resume", "pretrained"}) tj.erase(k);
      c.train = train_config_from_json(tj, c.train);
    }
    if (j.contains("manage")) {
      const auto& mj = j.at("manage");
      check_keys(mj, {"instances", "kpis", "alpha0", "max_iters", "tau_min", "tau_max", "max_halvings", "rel_tol",
                      "n_init", "n_rand"},
                 "manage.");
      auto& m = c.manage;
      m.instances = mj.value("instances", m.instances);
      if (mj.contains("kpis")) m.kpis = kpis_from_json(mj.at("kpis"));
      m.gd.alpha0 = mj.value("alpha0", m.gd.alpha0);
      m.gd.max_iters = mj.value("max_iters", m.gd.max_iters);
      m.gd.tau_min = mj.value("tau_min", m.gd.tau_min);
      m.gd.tau_max = mj.value("tau_max", m.gd.tau_max);
      m.gd.max_halvings = mj.value("max_halvings", m.gd.max_halvings);
      m.gd.rel_tol = mj.value("rel_tol", m.gd.rel_tol);
      m.n_init = mj.value("n_init", m.n_init);
      m.n_rand = mj.value("n_rand", m.n_rand);
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed config: ") + e.what());
  }
  if (c.jobs < 1) throw std::invalid_argument("jobs must be >= 1");
  return c;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Learnable network digital twin: data generation, training, evaluation and management"};
  app.name("glance");
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output;
  std::optional<int> jobs;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON experiment config")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Global seed");
    sub->add_option("--out", output, "Output directory");
    sub->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
  };
  std::optional<std::string> data_dir;
  auto with_data = [&](CLI::App* sub) { sub->add_option("--data", data_dir, "Dataset directory"); };

  auto* gen = app.add_subcommand("gen-data", "Simulate a dataset");
  common(gen);
  std::optional<std::string> scenario;
  std::optional<int> n_train, n_val, n_test, n_runs, flows;
  std::optional<double> t_gen;
  gen->add_option("--scenario", scenario, "Scenario name")
      ->check(CLI::IsMember(scenario_names()));
  gen->add_option("--n-train", n_train);
  gen->add_option("--n-val", n_val);
  gen->add_option("--n-test", n_test);
  gen->add_option("--runs", n_runs, "Simulation runs per test sample");
  gen->add_option("--flows", flows);
  gen->add_option("--t-gen", t_gen, "Traffic generation time (s)");

  auto* train_cmd = app.add_subcommand("train", "Train a twin on a dataset");
  common(train_cmd);
  with_data(train_cmd);
  std::optional<std::string> strategy, model_kind, dims_name, pretrained;
  std::vector<std::string> kpis;
  std::optional<int> epochs, batch;
  std::optional<double> lr;
  bool cv = false, resume = false;
  train_cmd->add_option("--strategy", strategy)->check(CLI::IsMember({"stl", "mtl", "tl"}));
  train_cmd->add_option("--kpi", kpis, "Trained KPIs")->check(CLI::IsMember({"delay", "jitter", "throughput", "drops"}));
  train_cmd->add_option("--model", model_kind)->check(CLI::IsMember({"glance", "routenet", "gnn"}));
  train_cmd->add_option("--dims", dims_name)->check(CLI::IsMember({"compact", "large"}));
  train_cmd->add_option("--epochs", epochs)->check(CLI::PositiveNumber);
  train_cmd->add_option("--batch", batch)->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr", lr);
  train_cmd->add_option("--pretrained", pretrained, "MTL checkpoint for tl");
  train_cmd->add_flag("--cv", cv, "4-fold cross-validation over train + val");
  train_cmd->add_flag("--resume", resume, "Continue from state.ckpt in the output directory");

  std::vector<std::string> models;
  auto* eval_cmd = app.add_subcommand("eval", "NMAE of checkpoints against benchmarks");
  common(eval_cmd);
  with_data(eval_cmd);
  eval_cmd->add_option("--model", models, "Checkpoint (repeatable)");

  auto* bench = app.add_subcommand("benchmark", "NMAE of SimBase and naive predictors");
  common(bench);
  with_data(bench);

  std::optional<int> instances, n_init, n_rand, max_iters;
  std::optional<double> alpha;
  std::vector<std::string> manage_kpis;
  auto manage_opts = [&](CLI::App* sub) {
    common(sub);
    with_data(sub);
    sub->add_option("--model", models, "Checkpoint");
    sub->add_option("--instances", instances)->check(CLI::PositiveNumber);
    sub->add_option("--kpi", manage_kpis, "Objective KPIs")
        ->check(CLI::IsMember({"delay", "jitter", "throughput", "drops"}));
  };
  auto* mtraffic = app.add_subcommand("manage-traffic", "Gradient descent over traffic loads");
  manage_opts(mtraffic);
  mtraffic->add_option("--alpha", alpha, "Initial step size");
  mtraffic->add_option("--max-iters", max_iters);
  auto* mflows = app.add_subcommand("manage-flows", "Hill-climbing over flow destinations");
  manage_opts(mflows);
  mflows->add_option("--n-init", n_init)->check(CLI::PositiveNumber);
  mflows->add_option("--n-rand", n_rand)->check(CLI::PositiveNumber);

  auto* inspect = app.add_subcommand("inspect", "Summarize a dataset directory or checkpoint");
  std::string inspect_path;
  inspect->add_option("path", inspect_path)->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    err << "run 'glance --help' or 'glance <command> --help' for usage\n";
    return kExitUsage;
  }

  try {
    if (inspect->parsed()) return cmd_inspect(inspect_path, out);

    ExperimentConfig c;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      json j;
      try {
        j = json::parse(in);
      } catch (const json::exception& e) {
        throw UsageError("cannot parse " + config_path + ": " + e.what());
      }
      c = config_from_json(j);
    }
    if (seed) c.seed = *seed;
    if (output) c.output = *output;
    if (jobs) c.jobs = *jobs;
    if (data_dir) c.data_dir = *data_dir;
    if (scenario) c.scenario = *scenario;
    if (n_train) c.n_train = *n_train;
    if (n_val) c.n_val = *n_val;
    if (n_test) c.n_test = *n_test;
    if (n_runs) c.n_runs_test = *n_runs;
    if (flows) c.flows = *flows;
    if (t_gen) c.sim["t_gen"] = *t_gen;
    if (strategy) c.train.strategy = strategy_from_name(*strategy);
    if (!kpis.empty()) {
      c.train.tasks.clear();
      for (const auto& k : kpis) c.train.tasks.push_back(kpi_from_name(k));
    }
    if (model_kind) c.train.model = model_kind_from_name(*model_kind);
    if (dims_name) c.train.dims = *dims_name == "large" ? GlanceDims::large() : GlanceDims::compact();
    if (epochs) c.train.epochs = *epochs;
    if (batch) c.train.batch = *batch;
    if (lr) c.lr = *lr;
    if (cv) c.cv = true;
    if (resume) c.resume = true;
    if (pretrained) c.pretrained = *pretrained;
    if (!models.empty()) c.models = models;
    if (instances) c.manage.instances = *instances;
    if (!manage_kpis.empty()) {
      c.manage.kpis.clear();
      for (const auto& k : manage_kpis) c.manage.kpis.push_back(kpi_from_name(k));
    }
    if (alpha) c.manage.gd.alpha0 = *alpha;
    if (max_iters) c.manage.gd.max_iters = *max_iters;
    if (n_init) c.manage.n_init = *n_init;
    if (n_rand) c.manage.n_rand = *n_rand;

    if (gen->parsed()) return cmd_gen_data(c, out);
    if (train_cmd->parsed()) return cmd_train(c, out);
    if (eval_cmd->parsed()) return cmd_eval(c, out, true);
    if (bench->parsed()) return cmd_eval(c, out, false);
    if (mtraffic->parsed()) return cmd_manage(c, out, true);
    if (mflows->parsed()) return cmd_manage(c, out, false);
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::runtime_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace glance::cli

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "glance/cli.hpp"

using namespace glance;
using nlohmann::json;

namespace {

namespace fs = std::filesystem;

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

const fs::path& root() {
  static const fs::path r = [] {
    auto p = fs::temp_directory_path() / "glance_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return r;
}

std::string path(const std::string& name) { return (root() / name).string(); }

std::vector<std::string> gen_args(const std::string& out, const std::string& scenario = "reggrid-fixed") {
  return {"gen-data", "--scenario", scenario, "--n-train", "12", "--n-val", "4", "--n-test", "4",
          "--t-gen",  "10",         "--seed",  "5",        "--out",        out};
}

// Shared tiny dataset and a 2-epoch compact checkpoint trained on it.
const std::string& dataset() {
  static const std::string d = [] {
    const auto r = run_cli(gen_args(path("ds")));
    REQUIRE_MESSAGE(r.code == 0, r.err);
    return path("ds");
  }();
  return d;
}

std::vector<std::string> train_args(const std::string& out, int epochs) {
  return {"train", "--data", dataset(), "--epochs", std::to_string(epochs), "--seed", "3", "--out", out};
}

const std::string& checkpoint() {
  static const std::string c = [] {
    const auto r = run_cli(train_args(path("tr"), 2));
    REQUIRE_MESSAGE(r.code == 0, r.err);
    return path("tr") + "/model.ckpt";
  }();
  return c;
}

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "config.resolved.json")
      out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

// Minimal draft-07 subset: type, required, properties, additionalProperties,
// items, minItems, maxItems, enum, minimum and local $ref.
void validate(const json& v, const json& schema, const json& root_schema, const std::string& where,
              std::vector<std::string>& errors) {
  if (schema.contains("$ref")) {
    const auto ref = schema.at("$ref").get<std::string>();
    validate(v, root_schema.at(json::json_pointer(ref.substr(1))), root_schema, where, errors);
    return;
  }
  if (schema.contains("type")) {
    const json types = schema.at("type").is_array() ? schema.at("type") : json::array({schema.at("type")});
    bool ok = false;
    for (const auto& t : types) {
      const auto name = t.get<std::string>();
      ok = ok || (name == "object" && v.is_object()) || (name == "array" && v.is_array()) ||
           (name == "string" && v.is_string()) || (name == "number" && v.is_number()) ||
           (name == "integer" && v.is_number_integer()) || (name == "null" && v.is_null()) ||
           (name == "boolean" && v.is_boolean());
    }
    if (!ok) {
      errors.push_back(where + ": type " + std::string(v.type_name()));
      return;
    }
  }
  if (schema.contains("enum")) {
    bool ok = false;
    for (const auto& e : schema.at("enum")) ok = ok || e == v;
    if (!ok) errors.push_back(where + ": not in enum");
  }
  if (schema.contains("minimum") && v.is_number() && v.get<double>() < schema.at("minimum").get<double>())
    errors.push_back(where + ": below minimum");
  if (v.is_object()) {
    for (const auto& k : schema.value("required", json::array()))
      if (!v.contains(k.get<std::string>())) errors.push_back(where + ": missing " + k.get<std::string>());
    const auto props = schema.value("properties", json::object());
    for (const auto& [k, sub] : v.items()) {
      if (props.contains(k))
        validate(sub, props.at(k), root_schema, where + "." + k, errors);
      else if (!schema.value("additionalProperties", true))
        errors.push_back(where + ": unexpected " + k);
    }
  }
  if (v.is_array()) {
    if (schema.contains("minItems") && v.size() < schema.at("minItems").get<std::size_t>())
      errors.push_back(where + ": too few items");
    if (schema.contains("maxItems") && v.size() > schema.at("maxItems").get<std::size_t>())
      errors.push_back(where + ": too many items");
    if (schema.contains("items"))
      for (std::size_t i = 0; i < v.size(); ++i)
        validate(v[i], schema.at("items"), root_schema, where + "[" + std::to_string(i) + "]", errors);
  }
}

std::vector<std::string> schema_errors(const json& report) {
  const auto schema = read_json(fs::path(GLANCE_SOURCE_DIR) / "schemas" / "manage_report.schema.json");
  std::vector<std::string> errors;
  validate(report, schema, schema, "$", errors);
  return errors;
}

}  // namespace

TEST_CASE("gen-data") {
  const auto& ds = dataset();
  SUBCASE("same config twice gives byte-identical files") {
    REQUIRE(run_cli(gen_args(path("ds2"))).code == 0);
    const auto a = tree(ds), b = tree(path("ds2"));
    CHECK(a.size() >= 5);
    CHECK(a == b);
  }
  SUBCASE("manifest and resolved config") {
    const auto m = read_json(fs::path(ds) / "manifest.json");
    CHECK(m.at("seed") == 5);
    CHECK(m.at("scaling").contains("capacity"));
    const auto c = read_json(fs::path(ds) / "config.resolved.json");
    CHECK(c.at("command") == "gen-data");
    CHECK(c.at("sim").at("t_gen") == 10.0);
    CHECK(c.at("sim").contains("cbr_rate"));
    CHECK(read_json(fs::path(ds) / "generation_report.json").at("requested").at("train") == 12);
  }
  SUBCASE("resolved config reproduces the dataset") {
    const auto r = run_cli({"gen-data", "--config", ds + "/config.resolved.json", "--out", path("ds3")});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(tree(ds) == tree(path("ds3")));
  }
  SUBCASE("scenario typo is a usage error") {
    auto args = gen_args(path("typo"));
    args[2] = "reggrid-fixd";
    const auto r = run_cli(args);
    CHECK(r.code == 2);
    CHECK(r.err.find("--help") != std::string::npos);
    CHECK_FALSE(fs::exists(path("typo")));
  }
  SUBCASE("unknown config key is a usage error") {
    std::ofstream(path("bad.json")) << R"({"sede": 3})";
    const auto r = run_cli({"gen-data", "--config", path("bad.json"), "--out", path("bad")});
    CHECK(r.code == 2);
    CHECK(r.err.find("sede") != std::string::npos);
  }
}

TEST_CASE("train") {
  const auto& ckpt = checkpoint();
  SUBCASE("seeded runs are byte-identical") {
    REQUIRE(run_cli(train_args(path("tr2"), 2)).code == 0);
    CHECK(slurp(ckpt) == slurp(path("tr2") + "/model.ckpt"));
    CHECK(slurp(path("tr") + "/curves.csv") == slurp(path("tr2") + "/curves.csv"));
    const auto c = read_json(path("tr") + "/config.resolved.json");
    CHECK(c.at("train").at("lr") == 5e-4);
    CHECK(read_json(path("tr") + "/train_report.json").at("parameters") > 0);
  }
  SUBCASE("resume continues the same run") {
    REQUIRE(run_cli(train_args(path("res"), 2)).code == 0);
    auto resumed = train_args(path("res"), 4);
    resumed.push_back("--resume");
    const auto r = run_cli(resumed);
    REQUIRE_MESSAGE(r.code == 0, r.err);
    REQUIRE(run_cli(train_args(path("direct"), 4)).code == 0);
    CHECK(slurp(path("res") + "/model.ckpt") == slurp(path("direct") + "/model.ckpt"));
    CHECK(slurp(path("res") + "/curves.csv") == slurp(path("direct") + "/curves.csv"));
  }
  SUBCASE("resolved config reproduces the checkpoint") {
    const auto r = run_cli({"train", "--config", path("tr") + "/config.resolved.json", "--out", path("tr3")});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(slurp(ckpt) == slurp(path("tr3") + "/model.ckpt"));
  }
  SUBCASE("diverging training exits 3") {
    auto args = train_args(path("nan"), 2);
    args.insert(args.end(), {"--lr", "1e300"});
    const auto r = run_cli(args);
    CHECK(r.code == 3);
    CHECK(r.err.find("epoch") != std::string::npos);
  }
  SUBCASE("missing inputs exit 2") {
    CHECK(run_cli({"train", "--data", path("nowhere"), "--out", path("x")}).code == 2);
    CHECK(run_cli({"train", "--data", dataset(), "--strategy", "tl", "--kpi", "delay", "--pretrained",
               path("none.ckpt"), "--out", path("x")})
              .code == 2);
    auto args = train_args(path("fresh"), 2);
    args.push_back("--resume");
    CHECK(run_cli(args).code == 2);
  }
  SUBCASE("tl from a model pretrained on the other KPIs") {
    auto pre = train_args(path("pre"), 1);
    pre.insert(pre.end(), {"--kpi", "delay", "--kpi", "jitter", "--kpi", "throughput"});
    REQUIRE(run_cli(pre).code == 0);
    CHECK(run_cli({"train", "--data", dataset(), "--strategy", "tl", "--kpi", "drops", "--pretrained", ckpt, "--out",
                   path("tl")})
              .code == 2);
    const auto r = run_cli({"train", "--data", dataset(), "--strategy", "tl", "--kpi", "drops", "--pretrained",
                            path("pre") + "/model.ckpt", "--epochs", "1", "--out", path("tl")});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(read_json(path("tl") + "/train_report.json").at("tasks") == json::array({"drops"}));
  }
}

TEST_CASE("eval and benchmark") {
  const auto& ckpt = checkpoint();
  SUBCASE("eval rows") {
    const auto r = run_cli({"eval", "--data", dataset(), "--model", ckpt, "--out", path("ev")});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto j = read_json(path("ev") + "/eval.json");
    CHECK(j.at("methods") == json::array({"glance:model", "simbase-1", "simbase-2", "simbase-3", "median", "mean"}));
    const auto csv = slurp(path("ev") + "/eval.csv");
    CHECK(csv.rfind("method,delay,jitter,throughput,drops,sum\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
  }
  SUBCASE("benchmark on a 4-run test set has three SimBase rows") {
    const auto r = run_cli({"benchmark", "--data", dataset(), "--out", path("bm")});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    int simbase = 0;
    const auto report = read_json(path("bm") + "/benchmark.json");
    for (const auto& m : report.at("methods"))
      simbase += m.get<std::string>().rfind("simbase-", 0) == 0;
    CHECK(simbase == 3);
  }
  SUBCASE("zero-weight checkpoint scores as its bias predictor") {
    const auto d = load_dataset(dataset());
    auto lm = load_model(ckpt);
    for (auto& [n, t] : lm.model.params()) std::fill(t.values().begin(), t.values().end(), 0.0);
    const double bias[4] = {0.4, 0.1, 1.2, 0.0};
    const auto last = std::to_string(lm.model.dims().readout_hidden.size());
    for (int k = 0; k < 4; ++k) lm.model.params().at("readout." + std::to_string(k) + "." + last + ".b")[0] = bias[k];
    const auto zero = path("zero.ckpt");
    save_model(zero, lm.model, lm.normalizer, d, lm.tasks);
    const auto r = run_cli({"eval", "--data", dataset(), "--model", zero, "--out", path("zero")});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto got = read_json(path("zero") + "/eval.json").at("nmae").at("glance:zero");
    for (int k = 0; k < 4; ++k) {
      const double iqr = lm.normalizer.iqr[k];
      double s = 0.0;
      int n = 0;
      for (const auto& smp : d.test)
        for (const auto& row : smp.runs.front().rows())
          if (!is_missing(row[k])) {
            s += std::abs(bias[k] * iqr - row[k]) / iqr;
            ++n;
          }
      REQUIRE(n > 0);
      CHECK(got.at(kKpiNames[k]).get<double>() == doctest::Approx(s / n).epsilon(1e-9));
    }
  }
  SUBCASE("default output root comes from the environment") {
    ::setenv(cli::kOutputRootEnv, path("envroot").c_str(), 1);
    const auto r = run_cli({"benchmark", "--data", dataset()});
    ::unsetenv(cli::kOutputRootEnv);
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(fs::exists(path("envroot") + "/benchmark/benchmark.json"));
  }
  SUBCASE("missing checkpoint exits 2") {
    CHECK(run_cli({"eval", "--data", dataset(), "--model", path("none.ckpt"), "--out", path("x")}).code == 2);
  }
}

TEST_CASE("manage") {
  const auto& ckpt = checkpoint();
  SUBCASE("traffic with a delay-only objective") {
    const auto r = run_cli({"manage-traffic", "--data", dataset(), "--model", ckpt, "--kpi", "delay", "--instances", "2",
                        "--max-iters", "5", "--out", path("mt")});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto summary = read_json(path("mt") + "/summary.json");
    CHECK(summary.at("tasks") == json::array({"delay"}));
    CHECK(summary.at("mean_eps_gen").size() == 1);
    for (int i = 0; i < 2; ++i) {
      const auto rep = read_json(path("mt") + "/reports/instance-" + std::to_string(i) + ".json");
      const auto errors = schema_errors(rep);
      CHECK_MESSAGE(errors.empty(), (errors.empty() ? "" : errors.front()));
      CHECK(rep.at("tasks") == json::array({"delay"}));
      CHECK(rep.at("trajectory").size() <= 6);
    }
    CHECK(slurp(path("mt") + "/errors.csv").rfind("instance,kpi,eps_gen,eps_bm,hinge_gen\n", 0) == 0);
  }
  SUBCASE("flows report validates and is reproducible") {
    const std::vector<std::string> base{"manage-flows", "--data", dataset(), "--model", ckpt, "--instances", "1",
                                        "--n-init", "2", "--n-rand", "2"};
    auto a = base, b = base;
    a.insert(a.end(), {"--out", path("mf1")});
    b.insert(b.end(), {"--out", path("mf2"), "--jobs", "2"});
    REQUIRE(run_cli(a).code == 0);
    REQUIRE(run_cli(b).code == 0);
    const auto rep = read_json(path("mf1") + "/reports/instance-0.json");
    CHECK(schema_errors(rep).empty());
    CHECK(rep.at("stop_reason") == "local_optimum");
    CHECK(tree(path("mf1")) == tree(path("mf2")));
  }
  SUBCASE("schema rejects a malformed report") {
    auto rep = read_json(path("mf1") + "/reports/instance-0.json");
    rep["tasks"] = json::array({"latency"});
    rep.erase("k_gen");
    CHECK(schema_errors(rep).size() == 2);
  }
  SUBCASE("checkpoint from another scenario exits 2") {
    auto args = gen_args(path("nsf"), "nsfnet-fixed");
    REQUIRE(run_cli(args).code == 0);
    const auto r = run_cli({"manage-traffic", "--data", path("nsf"), "--model", ckpt, "--out", path("mm")});
    CHECK(r.code == 2);
    CHECK(r.err.find("scenario") != std::string::npos);
  }
}

TEST_CASE("inspect") {
  auto r = run_cli({"inspect", dataset()});
  REQUIRE(r.code == 0);
  CHECK(json::parse(r.out).contains("train_kpis"));
  r = run_cli({"inspect", checkpoint()});
  REQUIRE(r.code == 0);
  CHECK(json::parse(r.out).at("parameters") > 0);
  CHECK(run_cli({"inspect", path("nothing")}).code == 2);
  CHECK(run_cli({}).code == 2);
}

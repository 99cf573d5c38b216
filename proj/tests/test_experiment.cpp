#include <doctest.h>

#include "check.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "ebmcal/experiment.hpp"

using namespace ebmcal;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"({
  "task": {"vocab_size": 12, "min_len": 4, "max_len": 6, "n_train": 64, "n_dev_pool": 40, "seed": 3},
  "methods": ["baseline", "t_scal_train", "t_scal_dev", "scal_bin_train", "scal_bin_dev", "ebm_scalar"],
  "seeds": [1, 2, 3],
  "nce": {"K": 2},
  "noise": {"k": 5, "d_model": 8, "n_layers": 1, "n_heads": 2, "epochs": 1, "mode": "pool", "pool_size": 2},
  "encoder": {"d_model": 8, "n_layers": 1, "n_heads": 2, "ff_mult": 2},
  "train": {"steps": 12, "batch_size": 8, "lr": 0.003, "eval_interval": 5},
  "eval": {"B": 10}
})";

ExperimentConfig tiny(const std::string& patch = "{}") {
  auto j = nlohmann::json::parse(kTiny);
  j.merge_patch(nlohmann::json::parse(patch));
  ConfigResult r = parse_config(j.dump());
  {
    INFO((r.issues.empty() ? "" : r.issues[0].str()));
    CHECK(r.issues.empty());
  }
  return *r.config;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ebmcal_exp_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream is(p);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    rows.push_back(f);
  }
  return rows;
}

bool has_issue(const ConfigResult& r, const std::string& field, const std::string& message = "") {
  for (const auto& i : r.issues)
    if (i.field == field && (message.empty() || i.message == message)) return true;
  return false;
}

}  // namespace

TEST_CASE("Config.EmptyFileListsRequiredFields") {
  const ConfigResult r = parse_config("");
  CHECK_FALSE(r.config);
  REQUIRE_EQ(r.issues.size(), 2u);
  CHECK(has_issue(r, "methods"));
  CHECK(has_issue(r, "seeds"));
}

TEST_CASE("Config.RejectsZeroK") {
  const ConfigResult r = parse_config(R"({"methods": ["baseline"], "seeds": [1], "nce": {"K": 0}})");
  CHECK_FALSE(r.config);
  CHECK(has_issue(r, "nce.K", "K must be ≥ 1"));
}

TEST_CASE("Config.MinimalConfigGetsDefaults") {
  const ConfigResult r = parse_config(R"({"methods": ["baseline"], "seeds": [7]})");
  REQUIRE(r.config);
  const auto j = nlohmann::json::parse(config_to_json(*r.config));
  CHECK_EQ(j["noise"]["M"].get<double>(), 0.4);
  CHECK_EQ(j["noise"]["k"].get<int>(), 20);
  CHECK_EQ(j["nce"]["K"].get<int>(), 8);
  CHECK_EQ(j["eval"]["B"].get<int>(), 20);
  CHECK_EQ(j["noise"]["mode"].get<std::string>(), "on_the_fly");
  CHECK_EQ(j["task"]["overlap"].get<double>(), 0.5);
  CHECK_EQ(j["task"]["n_train"].get<int>(), 2000);
}

TEST_CASE("Config.NormalisedFormRoundTrips") {
  const std::string once = config_to_json(tiny());
  const ConfigResult r = parse_config(once);
  REQUIRE(r.config);
  CHECK_EQ(config_to_json(*r.config), once);
}

TEST_CASE("Config.AggregatesEveryError") {
  const ConfigResult r = parse_config(R"({
    "methods": ["baseline", "ebm_magic", "baseline"],
    "seeds": [1, -2],
    "colour": "red",
    "noise": {"M": 1.5, "k": 0, "mode": "cached"},
    "encoder": {"d_model": 10, "n_heads": 4, "depth": 3},
    "train": {"lr": 0, "eval_interval": 0},
    "task": {"overlap": -0.1}
  })");
  CHECK_FALSE(r.config);
  for (const char* f : {"methods[1]", "methods[2]", "seeds[1]", "colour", "noise.M", "noise.k", "noise.mode",
                        "encoder.n_heads", "encoder.depth", "train.lr", "train.eval_interval", "task.overlap"})
    {
      INFO(f);
      CHECK(has_issue(r, f));
    }
  CHECK(has_issue(r, "colour", "unknown key"));
}

TEST_CASE("Config.RejectsMalformedJsonAndWrongTypes") {
  CHECK_FALSE(parse_config("{\"methods\": [").config);
  const ConfigResult r = parse_config(R"({"methods": "baseline", "seeds": [1], "train": {"steps": "many"}})");
  CHECK(has_issue(r, "methods"));
  CHECK(has_issue(r, "train.steps", "must be an integer"));
  CHECK(has_issue(parse_config(R"({"methods": ["baseline"], "seeds": [1], "task": {}, "dataset": "x"})"),
                        "task"));
}

TEST_CASE("Config.ValidateReadsFile") {
  const fs::path dir = scratch("cfgfile");
  fs::create_directories(dir);
  std::ofstream(dir / "c.json") << R"({"methods": ["baseline"], "seeds": [1]})";
  CHECK(validate_config(dir / "c.json").config);
  CHECK_FALSE(validate_config(dir / "missing.json").config);
  std::ofstream(dir / "empty.json").close();
  CHECK_EQ(validate_config(dir / "empty.json").issues.size(), 2u);
}

TEST_CASE("Methods.FitSourceLabels") {
  CHECK_EQ(fit_source("t_scal_train"), "train");
  CHECK_EQ(fit_source("scal_bin_dev"), "dev");
  CHECK_EQ(fit_source("baseline"), "");
  CHECK_EQ(fit_source("ebm_hidden"), "");
  CHECK_EQ(ebm_variant("ebm_sharp_hidden"), EnergyVariant::SharpHidden);
  CHECK(is_known_method("scal_bin_train"));
  CHECK_FALSE(is_known_method("t_scal"));
}

TEST_CASE("Summary.MeanAndSampleStd") {
  std::vector<CellResult> cells = {{"a", 1, true, 0.5, 0.1, ""},
                                   {"a", 2, true, 0.7, 0.3, ""},
                                   {"b", 1, true, 0.9, 0.2, ""},
                                   {"a", 3, false, 0.0, 0.0, "boom"}};
  const auto rows = summarize(cells);
  REQUIRE_EQ(rows.size(), 2u);
  CHECK_EQ(rows[0].method, "a");
  CHECK_EQ(rows[0].n_ok, 2u);
  CHECK_EQ(rows[0].n_failed, 1u);
  CHECK_NEAR(rows[0].acc_mean, 0.6, 1e-15);
  CHECK_NEAR(rows[0].acc_std, std::sqrt(0.02), 1e-15);
  CHECK_NEAR(rows[0].ece_std, std::sqrt(0.02), 1e-15);
  CHECK_EQ(rows[1].acc_std, 0.0);
}

TEST_CASE("Run.MinimalBaselineRun") {
  ExperimentConfig cfg = tiny();
  cfg.methods = {"baseline"};
  cfg.seeds = {7};
  const fs::path out = scratch("minimal");
  const RunReport rep = run_experiment(cfg, out);
  CHECK_EQ(rep.exit_code(), 0);
  const auto rows = csv_rows(out / "summary.csv");
  REQUIRE_EQ(rows.size(), 1u);
  CHECK_EQ(rows[0][0], "baseline");
  CHECK_EQ(rows[0][2], "1");
  const double acc = std::stod(rows[0][4]), ec = std::stod(rows[0][6]);
  CHECK_GT(acc, 0.0);
  CHECK_LE(acc, 1.0);
  CHECK_GE(ec, 0.0);
  CHECK_LE(ec, 1.0);
  for (const char* f : {"config.json", "results.csv", "summary.txt", "tradeoff.csv", "trajectory_baseline_7.csv",
                        "reliability_baseline_7.csv", "scatter_baseline_7.csv", "histogram_baseline_7.csv"})
    {
      INFO(f);
      CHECK(fs::exists(out / f));
    }
  // No EBM method: no noise model is trained.
  CHECK_FALSE(fs::exists(out / "noise_lm.ebmc"));
}

// Every FullRun case shares one run, computed on first use.
struct FullRun {
  FullRun() {
    static const fs::path dir = scratch("full");
    static const RunReport report = run_experiment(tiny(), dir);
    out_ = &dir;
    report_ = &report;
  }
  const fs::path* out_;
  const RunReport* report_;
};

TEST_CASE_FIXTURE(FullRun, "FullRun.EveryCellSucceeds") {
  CHECK_EQ(report_->exit_code(), 0);
  CHECK_EQ(report_->cells.size(), 18u);
  for (const auto& c : report_->cells) {
    INFO(c.method << " " << c.error);
    CHECK(c.ok);
  }
}

TEST_CASE_FIXTURE(FullRun, "FullRun.SummaryRecomputableFromResults") {
  std::map<std::string, std::vector<double>> acc, ec;
  std::vector<std::string> order;
  for (const auto& r : csv_rows(*out_ / "results.csv")) {
    if (!acc.count(r[0])) order.push_back(r[0]);
    acc[r[0]].push_back(std::stod(r[4]));
    ec[r[0]].push_back(std::stod(r[5]));
  }
  auto stats = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::pair{m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
  };
  const auto rows = csv_rows(*out_ / "summary.csv");
  REQUIRE_EQ(rows.size(), order.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK_EQ(rows[i][0], order[i]);
    const auto [am, as] = stats(acc[order[i]]);
    const auto [em, es] = stats(ec[order[i]]);
    CHECK_EQ(std::stod(rows[i][4]), am);
    CHECK_EQ(std::stod(rows[i][5]), as);
    CHECK_EQ(std::stod(rows[i][6]), em);
    CHECK_EQ(std::stod(rows[i][7]), es);
  }
}

TEST_CASE_FIXTURE(FullRun, "FullRun.CellsCarryTheirFitSource") {
  for (const auto& r : csv_rows(*out_ / "results.csv")) {
    const std::string& m = r[0];
    CHECK_EQ(r[1], std::string(fit_source(m)));
    if (m.starts_with("t_scal") || m.starts_with("scal_bin")) {
      {
        INFO(m);
        CHECK_FALSE(r[1].empty());
      }
    }
  }
  for (const auto& r : csv_rows(*out_ / "summary.csv")) CHECK_EQ(r[1], std::string(fit_source(r[0])));
}

TEST_CASE_FIXTURE(FullRun, "FullRun.TrajectoriesAtEveryInterval") {
  for (const char* m : {"baseline", "ebm_scalar"})
    for (int seed : {1, 2, 3}) {
      const auto rows = csv_rows(*out_ / ("trajectory_" + std::string(m) + "_" + std::to_string(seed) + ".csv"));
      REQUIRE_EQ(rows.size(), 3u);
      CHECK_EQ(rows[0][0], "5");
      CHECK_EQ(rows[1][0], "10");
      CHECK_EQ(rows[2][0], "12");
    }
  // Calibrators reuse the baseline model and have no trajectory of their own.
  CHECK_FALSE(fs::exists(*out_ / "trajectory_t_scal_dev_1.csv"));
}

TEST_CASE_FIXTURE(FullRun, "FullRun.TradeoffReconstructsTrajectories") {
  std::vector<std::vector<std::string>> expected;
  for (const auto& r : csv_rows(*out_ / "results.csv")) {
    if (r[0] != "baseline" && r[0] != "ebm_scalar") continue;
    for (const auto& t : csv_rows(*out_ / ("trajectory_" + r[0] + "_" + r[2] + ".csv")))
      expected.push_back({r[0], r[2], t[0], t[4], t[5]});
  }
  CHECK_EQ(csv_rows(*out_ / "tradeoff.csv"), expected);
}

TEST_CASE_FIXTURE(FullRun, "FullRun.ReportRebuildIsIdentical") {
  const fs::path copy = scratch("full_copy");
  fs::copy(*out_, copy);
  for (const char* f : {"summary.csv", "summary.txt", "tradeoff.csv"}) fs::remove(copy / f);
  write_report(copy);
  for (const char* f : {"summary.csv", "summary.txt", "tradeoff.csv"}) CHECK_EQ(slurp(copy / f), slurp(*out_ / f));
}

TEST_CASE_FIXTURE(FullRun, "FullRun.PlotFiles") {
  const auto rel = csv_rows(*out_ / "reliability_scal_bin_dev_2.csv");
  CHECK_EQ(rel.size(), 2u * 10u);  // two classes, ten bins
  const auto scatter = csv_rows(*out_ / "scatter_ebm_scalar_1.csv");
  CHECK_EQ(scatter.size(), 20u);  // test half of the 40-example dev pool
  const auto shift = csv_rows(*out_ / "shift_table.csv");
  REQUIRE_EQ(shift.size(), 20u);
  for (std::size_t i = 1; i < shift.size(); ++i) CHECK_GE(std::stod(shift[i - 1][2]), std::stod(shift[i][2]));
  CHECK(fs::exists(*out_ / "noise_pool.jsonl"));
  CHECK(fs::exists(*out_ / "noise_lm_log.csv"));
}

TEST_CASE("Run.RepeatIsBitwiseIdentical") {
  for (const char* mode : {"pool", "on_the_fly"}) {
    ExperimentConfig cfg = tiny(std::string(R"({"noise": {"mode": ")") + mode + R"("}, "encoder": {"dropout": 0.1}})");
    cfg.methods = {"baseline", "scal_bin_dev", "ebm_hidden"};
    cfg.seeds = {4};
    const fs::path a = scratch(std::string("rep_a_") + mode), b = scratch(std::string("rep_b_") + mode);
    run_experiment(cfg, a);
    run_experiment(cfg, b);
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(a)) {
      {
        INFO(e.path());
        CHECK_EQ(slurp(e.path()), slurp(b / e.path().filename()));
      }
      ++n;
    }
    CHECK_EQ(n, static_cast<std::size_t>(std::distance(fs::directory_iterator(b), fs::directory_iterator())));
  }
}

TEST_CASE("Run.FailedCellsAreRecorded") {
  ExperimentConfig cfg = tiny();
  cfg.methods = {"baseline", "ebm_hidden"};
  cfg.seeds = {1};
  cfg.noise_lm = fs::temp_directory_path() / "ebmcal_no_such_lm";
  const fs::path out = scratch("fail");
  const RunReport rep = run_experiment(cfg, out);
  CHECK_EQ(rep.exit_code(), 1);
  REQUIRE_EQ(rep.cells.size(), 2u);
  CHECK(rep.cells[0].ok);
  CHECK_FALSE(rep.cells[1].ok);
  CHECK_FALSE(rep.cells[1].error.empty());
  const auto rows = csv_rows(out / "summary.csv");
  REQUIRE_EQ(rows.size(), 2u);
  CHECK_EQ(rows[1][2], "0");
  CHECK_EQ(rows[1][3], "1");
  CHECK_NE(slurp(out / "summary.txt").find("failed: ebm_hidden seed 1"), std::string::npos);
  // Every cell failing is still a nonzero exit.
  cfg.methods = {"ebm_hidden"};
  CHECK_EQ(run_experiment(cfg, scratch("fail_all")).exit_code(), 1);
}

#ifdef EBMCAL_CLI
namespace {
int cli(const std::string& args) {
  const int status = std::system((std::string(EBMCAL_CLI) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}
}  // namespace

TEST_CASE("Cli.ExitCodesAndSeedOffset") {
  const fs::path dir = scratch("cli");
  fs::create_directories(dir);
  {
    auto j = nlohmann::json::parse(kTiny);
    j["methods"] = {"baseline", "t_scal_dev"};
    j["seeds"] = {1};
    std::ofstream(dir / "good.json") << j.dump();
  }
  std::ofstream(dir / "bad.json") << R"({"methods": [], "seeds": [1], "nce": {"K": 0}})";

  CHECK_EQ(cli("run --config " + (dir / "bad.json").string() + " --out " + (dir / "o").string()), 2);
  CHECK_EQ(cli("run --out " + (dir / "o").string()), 2);
  CHECK_EQ(cli("run --config " + (dir / "good.json").string()), 2);  // no output directory
  CHECK_EQ(cli("run --config " + (dir / "good.json").string() + " --out " + (dir / "o").string() +
                " --seed-offset 10"),
            0);
  CHECK(fs::exists(dir / "o" / "trajectory_baseline_11.csv"));
  CHECK_EQ(cli("report --out " + (dir / "o").string()), 0);
  CHECK_EQ(cli("generate-data --config " + (dir / "good.json").string() + " --out " + (dir / "d").string()), 0);
  CHECK(fs::exists(dir / "d" / "data.jsonl"));
  CHECK_EQ(cli("train-noise --config " + (dir / "good.json").string() + " --out " + (dir / "n").string()), 0);
  CHECK(fs::exists(dir / "n" / "noise_lm.ebmc"));

  // A saved dataset and noise LM can stand in for the generated ones.
  auto j = nlohmann::json::parse(kTiny);
  j.erase("task");
  j["dataset"] = (dir / "d" / "data.jsonl").string();
  j["noise"]["lm_path"] = (dir / "n" / "noise_lm").string();
  j["methods"] = {"ebm_hidden"};
  j["seeds"] = {1};
  std::ofstream(dir / "reuse.json") << j.dump();
  CHECK_EQ(cli("run --config " + (dir / "reuse.json").string() + " --out " + (dir / "r").string()), 0);
  CHECK_FALSE(fs::exists(dir / "r" / "noise_lm.ebmc"));
  CHECK(fs::exists(dir / "r" / "trajectory_ebm_hidden_1.csv"));
}
#endif

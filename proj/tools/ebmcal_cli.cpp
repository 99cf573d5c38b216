// Command-line front end for the calibration experiments.
//
// Exit codes: 0 success, 1 failure of some or all cells (or a runtime
// error), 2 invalid config or usage.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ebmcal/alloc.hpp"
#include "ebmcal/experiment.hpp"
#include "ebmcal/format.hpp"
#include "ebmcal/rng.hpp"

namespace fs = std::filesystem;
using namespace ebmcal;

namespace {

constexpr int kConfigError = 2;

std::optional<ExperimentConfig> load_config(const std::string& path) {
  const ConfigResult res = validate_config(path);
  if (!res.config) {
    std::cerr << "invalid config " << path << ":\n";
    for (const auto& issue : res.issues) std::cerr << "  " << issue.str() << '\n';
  }
  return res.config;
}

std::optional<fs::path> output_dir(const std::string& flag, const ExperimentConfig& cfg) {
  if (!flag.empty()) return fs::path(flag);
  if (cfg.output) return *cfg.output;
  std::cerr << "no output directory: pass --out or set \"output\" in the config\n";
  return std::nullopt;
}

int generate_data(const ExperimentConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  const DatasetSplit split = load_or_generate(cfg);
  save_split(out / "data.jsonl", split);
  std::cerr << "wrote " << (out / "data.jsonl").string() << ": " << split.train.size() << " train, "
            << split.dev.size() << " dev, " << split.test.size() << " test\n";
  return 0;
}

int train_noise(const ExperimentConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  const DatasetSplit split = load_or_generate(cfg);
  MaskSpec mask{cfg.M};
  mask.validate();
  NoiseLmState lm = init_noise_lm(noise_lm_config(cfg, split.task),
                                  derive_seed({cfg.lm_schedule.seed, hash_name("noise_lm")}));
  std::vector<TokenSeq> corpus;
  for (const auto& ex : split.train) corpus.push_back(ex.tokens);
  const LmTrainLog log = finetune_mlm(lm, corpus, mask, cfg.lm_schedule);
  save_noise_lm(out / "noise_lm", lm);
  std::ofstream os(out / "noise_lm_log.csv");
  os << "epoch,heldout_perplexity,train_loss\n";
  for (std::size_t e = 0; e < log.heldout_perplexity.size(); ++e)
    os << e << ',' << fmt(log.heldout_perplexity[e]) << ',' << (e == 0 ? std::string() : fmt(log.train_loss[e - 1]))
       << '\n';
  std::cerr << "held-out perplexity " << fmt(log.heldout_perplexity.front()) << " -> "
            << fmt(log.heldout_perplexity.back()) << "; saved " << (out / "noise_lm").string() << ".{ebmc,json}\n";
  return 0;
}

int run(ExperimentConfig cfg, const fs::path& out, std::uint64_t seed_offset) {
  for (auto& s : cfg.seeds) s += seed_offset;
  const RunReport report = run_experiment(cfg, out, &std::cerr);
  std::cout << render_summary(summarize(report.cells));
  return report.exit_code();
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Energy-based calibration experiments on synthetic classification tasks"};
  app.require_subcommand(1);

  std::string config_path, out_flag;
  std::uint64_t seed_offset = 0;

  auto* gen = app.add_subcommand("generate-data", "Generate the configured task and write data.jsonl");
  auto* noise = app.add_subcommand("train-noise", "Train the masked-conditioning noise LM and save it");
  auto* runc = app.add_subcommand("run", "Train and evaluate every (method, seed) cell and write the report");
  auto* rep = app.add_subcommand("report", "Rebuild summary and trade-off files from an existing run directory");
  for (auto* sub : {gen, noise, runc}) {
    sub->add_option("--config", config_path, "JSON experiment config")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_flag, "Output directory (overrides the config's \"output\")");
  }
  runc->add_option("--seed-offset", seed_offset, "Added to every configured seed");
  rep->add_option("--out", out_flag, "Run directory containing results.csv")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }

  try {
    if (rep->parsed()) {
      std::cout << render_summary(write_report(out_flag));
      return 0;
    }
    const auto cfg = load_config(config_path);
    if (!cfg) return kConfigError;
    const auto out = output_dir(out_flag, *cfg);
    if (!out) return kConfigError;
    if (gen->parsed()) return generate_data(*cfg, *out);
    if (noise->parsed()) return train_noise(*cfg, *out);
    return run(*cfg, *out, seed_offset);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

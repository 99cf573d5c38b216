#pragma once

// Batch experiment runner: one baseline classifier per seed, post-hoc
// calibrators fitted on it, and NCE-trained variants from the same
// initialisation. Every artifact is a pure function of the config.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ebmcal/data.hpp"
#include "ebmcal/encoder.hpp"
#include "ebmcal/energy.hpp"
#include "ebmcal/noise_lm.hpp"
#include "ebmcal/trainer.hpp"

namespace ebmcal {

// Method names in canonical report order.
inline constexpr std::string_view kMethods[] = {"baseline",       "t_scal_train", "t_scal_dev", "scal_bin_train",
                                                "scal_bin_dev",   "ebm_scalar",   "ebm_hidden", "ebm_sharp_hidden"};

bool is_known_method(std::string_view m);
bool is_ebm_method(std::string_view m);
// "train", "dev" or "" for methods without a post-hoc calibrator.
std::string_view fit_source(std::string_view m);
EnergyVariant ebm_variant(std::string_view m);

enum class NoiseMode { OnTheFly, Pool };
std::string_view to_string(NoiseMode m);

struct ExperimentConfig {
  std::optional<std::filesystem::path> dataset;  // overrides `task` when set
  TaskSpec task;
  std::vector<std::string> methods;
  std::vector<std::uint64_t> seeds;

  int K = 8;
  double M = 0.4;
  std::size_t k = 20;
  NoiseMode noise_mode = NoiseMode::OnTheFly;
  std::size_t pool_size = 16;  // samples per training example in pool mode
  std::optional<std::filesystem::path> noise_lm;  // stem of a saved LM; trained when absent
  NoiseLmConfig lm;    // vocab_size and max_seq_len follow the task
  LmSchedule lm_schedule;

  EncoderConfig encoder;  // vocab_size, max_seq_len, n_classes follow the task
  TrainSchedule train;    // seed is replaced per cell

  int B = 20;  // ECE bins
  int reliability_bins = 10;
  int scal_bin_bins = 20;
  int histogram_bins = 20;

  std::optional<std::filesystem::path> output;
};

struct ConfigIssue {
  std::string field;
  std::string message;
  std::string str() const { return field.empty() ? message : field + ": " + message; }
};

struct ConfigResult {
  std::optional<ExperimentConfig> config;  // set iff issues is empty
  std::vector<ConfigIssue> issues;
};

// Parses and checks a JSON config. Missing optional fields take defaults;
// unknown keys and every invalid field are reported together.
ConfigResult parse_config(std::string_view text);
ConfigResult validate_config(const std::filesystem::path& path);
// Normalised form with every default written out.
std::string config_to_json(const ExperimentConfig& cfg);

DatasetSplit load_or_generate(const ExperimentConfig& cfg);
NoiseLmConfig noise_lm_config(const ExperimentConfig& cfg, const Task& task);
EncoderConfig encoder_config(const ExperimentConfig& cfg, const Task& task);

struct CellResult {
  std::string method;
  std::uint64_t seed = 0;
  bool ok = false;
  double accuracy = 0.0;
  double ece = 0.0;
  std::string error;
};

struct RunReport {
  std::vector<CellResult> cells;
  // 0 when every cell succeeded, 1 otherwise.
  int exit_code() const;
};

// Writes config.json, results.csv, per-cell trajectory/reliability/scatter/
// histogram files, shift_table.csv and, through write_report, the summary.
// `log` receives progress lines with wall-clock timings; files never do.
RunReport run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream* log = nullptr);

struct SummaryRow {
  std::string method;
  std::string fit_source;
  std::size_t n_ok = 0;
  std::size_t n_failed = 0;
  double acc_mean = 0.0, acc_std = 0.0;
  double ece_mean = 0.0, ece_std = 0.0;
};

std::vector<CellResult> read_results_csv(const std::filesystem::path& path);
// Mean and sample standard deviation (0 for a single value) over the
// successful cells of each method, in order of first appearance.
std::vector<SummaryRow> summarize(const std::vector<CellResult>& cells);
std::string render_summary(const std::vector<SummaryRow>& rows);

// Rebuilds summary.csv, summary.txt and tradeoff.csv from results.csv and
// the trajectory files in `out`.
std::vector<SummaryRow> write_report(const std::filesystem::path& out);

}  // namespace ebmcal

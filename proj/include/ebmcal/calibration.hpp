#pragma once

// Calibration measurement (ECE, reliability bins), post-hoc calibrators
// (temperature scaling, scaling-binning) and energy/entropy analyses.

#include <cstddef>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "ebmcal/data.hpp"
#include "ebmcal/encoder.hpp"
#include "ebmcal/energy.hpp"

namespace ebmcal {

class CalibrationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Matrix = std::vector<std::vector<double>>;

// One (sample, class) confidence. A record set holds every class for every
// sample, with exactly one true label per sample.
struct PredictionRecord {
  std::size_t sample_id = 0;
  int class_id = 0;
  double confidence = 0.0;
  bool is_true_label = false;

  bool operator==(const PredictionRecord&) const = default;
};

std::vector<PredictionRecord> make_records(const Matrix& posteriors, std::span<const int> labels);

struct BinStats {
  int class_id = 0;
  int bin = 0;
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  double mean_confidence = 0.0;  // 0 for empty bins
  double accuracy = 0.0;         // 0 for empty bins
};

// Bins [i/B, (i+1)/B), with confidence 1.0 in the last bin.
int confidence_bin(double confidence, int B);

// Per class, per bin, in class-major order. Throws CalibrationError for an
// inconsistent record set.
std::vector<BinStats> reliability_data(std::span<const PredictionRecord> records, int B);

// (1/|Y|) sum_y sum_b (|B_yb| / n) |acc(B_yb) - conf(B_yb)|.
double ece(std::span<const PredictionRecord> records, int B);
double ece_from_bins(std::span<const BinStats> bins);

// Fraction of samples whose highest-confidence class is the true label.
double accuracy(const Matrix& posteriors, std::span<const int> labels);

// Mean negative log-likelihood of softmax(logits / T).
double nll_at_temperature(const Matrix& logits, std::span<const int> labels, double T);

enum class CalibratorKind { Temperature, ScalingBinning };

struct CalibratorParams {
  CalibratorKind kind = CalibratorKind::Temperature;
  double temperature = 1.0;
  bool degenerate = false;  // fit set had a single class; T fixed at 1
  int bins = 0;
  // Scaling-binning only, per class: B-1 ascending boundaries, B outputs.
  Matrix boundaries;
  Matrix outputs;
};

// Golden-section search for T on log T in [-3, 3] (tolerance 1e-4). The
// result never has higher NLL than T = 1.
CalibratorParams fit_temperature(const Matrix& logits, std::span<const int> labels);
std::vector<double> apply_temperature(const CalibratorParams& params, std::span<const double> logits);
Matrix apply_temperature(const CalibratorParams& params, const Matrix& logits);

// Temperature step, then per-class equal-mass bins over the scaled dev
// confidences; each bin outputs the mean scaled confidence of its dev points.
// A value equal to a boundary belongs to the upper bin.
CalibratorParams fit_scaling_binning(const Matrix& logits, std::span<const int> labels, int B);
// Per-class bin outputs for one row, renormalised to sum to 1.
std::vector<double> apply_scaling_binning(const CalibratorParams& params, std::span<const double> logits);
Matrix apply_scaling_binning(const CalibratorParams& params, const Matrix& logits);

// Natural-log entropy, 0 log 0 := 0. Throws unless p sums to 1 +- 1e-6.
double entropy(std::span<const double> p);

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

struct HistogramBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
};

// Fixed-width bins spanning [min, max] of the values; the maximum falls in
// the last bin.
std::vector<HistogramBin> histogram(std::span<const double> values, int n_bins);
int histogram_bin(std::span<const HistogramBin> hist, double v);

struct ScatterRow {
  std::size_t sample_id = 0;
  double energy = 0.0;
  double entropy = 0.0;
  int hist_bin = 0;
};

struct EnergyEntropyScatter {
  std::vector<ScatterRow> rows;
  double rank_correlation = 0.0;
  std::vector<HistogramBin> histogram;
};

EnergyEntropyScatter energy_entropy_scatter(std::span<const double> energies, const Matrix& posteriors,
                                            int hist_bins = 20);
EnergyEntropyScatter energy_entropy_scatter(const EncoderState& state, EnergyVariant variant,
                                            std::span<const Example> test_set, int hist_bins = 20);

struct ShiftRow {
  std::size_t sample_id = 0;
  int label = 0;
  double energy = 0.0;  // Ê under the EBM-trained model
  std::vector<double> baseline_posterior;
  std::vector<double> ebm_posterior;
};

// Sorted by energy, highest first (ties by sample_id).
std::vector<ShiftRow> confidence_shift_report(const EncoderState& baseline, const EncoderState& ebm,
                                              EnergyVariant variant, std::span<const Example> test_set);

void write_records_csv(const std::filesystem::path& path, std::span<const PredictionRecord> records);
std::vector<PredictionRecord> read_records_csv(const std::filesystem::path& path);
void write_reliability_csv(const std::filesystem::path& path, std::span<const BinStats> bins);
void write_scatter_csv(const std::filesystem::path& path, const EnergyEntropyScatter& scatter);
void write_histogram_csv(const std::filesystem::path& path, std::span<const HistogramBin> hist);
void write_shift_csv(const std::filesystem::path& path, std::span<const ShiftRow> rows);

}  // namespace ebmcal

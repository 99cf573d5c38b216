#include "ebmcal/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>

#include "ebmcal/format.hpp"

namespace ebmcal {

std::vector<PredictionRecord> make_records(const Matrix& posteriors, std::span<const int> labels) {
  if (posteriors.size() != labels.size()) throw CalibrationError("posterior rows and labels differ in count");
  std::vector<PredictionRecord> out;
  for (std::size_t i = 0; i < posteriors.size(); ++i) {
    const auto& p = posteriors[i];
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= p.size())
      throw CalibrationError("label " + std::to_string(labels[i]) + " out of range for sample " + std::to_string(i));
    for (std::size_t y = 0; y < p.size(); ++y)
      out.push_back({i, static_cast<int>(y), p[y], static_cast<int>(y) == labels[i]});
  }
  return out;
}

int confidence_bin(double c, int B) {
  if (B < 1) throw CalibrationError("number of bins must be >= 1");
  int b = static_cast<int>(std::floor(c * B));
  b = std::clamp(b, 0, B - 1);
  // Edges are i/B exactly; correct for rounding in c * B.
  while (b > 0 && c < static_cast<double>(b) / B) --b;
  while (b < B - 1 && c >= static_cast<double>(b + 1) / B) ++b;
  return b;
}

namespace {

struct SampleCheck {
  std::vector<bool> seen;
  int n_true = 0;
};

// Returns |Y| after checking that every sample carries every class once and
// exactly one true label.
int validate_records(std::span<const PredictionRecord> records) {
  if (records.empty()) throw CalibrationError("empty record set");
  int n_classes = 0;
  for (const auto& r : records) {
    if (r.class_id < 0) throw CalibrationError("negative class_id in sample " + std::to_string(r.sample_id));
    if (!(r.confidence >= 0.0 && r.confidence <= 1.0))
      throw CalibrationError("confidence outside [0, 1] in sample " + std::to_string(r.sample_id));
    n_classes = std::max(n_classes, r.class_id + 1);
  }
  std::unordered_map<std::size_t, SampleCheck> samples;
  for (const auto& r : records) {
    auto& s = samples[r.sample_id];
    if (s.seen.empty()) s.seen.assign(static_cast<std::size_t>(n_classes), false);
    if (s.seen[static_cast<std::size_t>(r.class_id)])
      throw CalibrationError("sample " + std::to_string(r.sample_id) + " has class " + std::to_string(r.class_id) +
                             " twice");
    s.seen[static_cast<std::size_t>(r.class_id)] = true;
    s.n_true += r.is_true_label;
  }
  for (const auto& [id, s] : samples) {
    for (std::size_t y = 0; y < s.seen.size(); ++y)
      if (!s.seen[y])
        throw CalibrationError("sample " + std::to_string(id) + " is missing class " + std::to_string(y));
    if (s.n_true != 1)
      throw CalibrationError("sample " + std::to_string(id) + " has " + std::to_string(s.n_true) +
                             " true labels, expected 1");
  }
  return n_classes;
}

}  // namespace

std::vector<BinStats> reliability_data(std::span<const PredictionRecord> records, int B) {
  if (B < 1) throw CalibrationError("number of bins must be >= 1");
  const int C = validate_records(records);
  std::vector<BinStats> bins(static_cast<std::size_t>(C * B));
  std::vector<double> conf_sum(bins.size(), 0.0), correct(bins.size(), 0.0);
  for (int y = 0; y < C; ++y) {
    for (int b = 0; b < B; ++b) {
      auto& s = bins[static_cast<std::size_t>(y * B + b)];
      s.class_id = y;
      s.bin = b;
      s.lower = static_cast<double>(b) / B;
      s.upper = static_cast<double>(b + 1) / B;
    }
  }
  for (const auto& r : records) {
    const auto k = static_cast<std::size_t>(r.class_id * B + confidence_bin(r.confidence, B));
    ++bins[k].count;
    conf_sum[k] += r.confidence;
    correct[k] += r.is_true_label ? 1.0 : 0.0;
  }
  for (std::size_t k = 0; k < bins.size(); ++k) {
    if (bins[k].count == 0) continue;
    const auto n = static_cast<double>(bins[k].count);
    bins[k].mean_confidence = conf_sum[k] / n;
    bins[k].accuracy = correct[k] / n;
  }
  return bins;
}

double ece_from_bins(std::span<const BinStats> bins) {
  if (bins.empty()) throw CalibrationError("no bins");
  int C = 0;
  for (const auto& b : bins) C = std::max(C, b.class_id + 1);
  std::vector<double> n(static_cast<std::size_t>(C), 0.0);
  for (const auto& b : bins) n[static_cast<std::size_t>(b.class_id)] += static_cast<double>(b.count);
  double total = 0.0;
  for (const auto& b : bins) {
    if (b.count == 0) continue;
    total += static_cast<double>(b.count) / n[static_cast<std::size_t>(b.class_id)] *
             std::abs(b.accuracy - b.mean_confidence);
  }
  return total / C;
}

double ece(std::span<const PredictionRecord> records, int B) { return ece_from_bins(reliability_data(records, B)); }

double accuracy(const Matrix& posteriors, std::span<const int> labels) {
  if (posteriors.empty() || posteriors.size() != labels.size())
    throw CalibrationError("accuracy needs one label per nonempty posterior row");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < posteriors.size(); ++i) {
    const auto& p = posteriors[i];
    hit += static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()) == labels[i];
  }
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

namespace {

void check_logits(const Matrix& logits, std::span<const int> labels) {
  if (logits.empty()) throw CalibrationError("empty fit set");
  if (logits.size() != labels.size()) throw CalibrationError("logit rows and labels differ in count");
  const std::size_t C = logits[0].size();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits[i].size() != C || C < 2) throw CalibrationError("ragged or single-class logits");
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= C)
      throw CalibrationError("label " + std::to_string(labels[i]) + " out of range");
  }
}

std::vector<double> softmax_scaled(std::span<const double> l, double T) {
  std::vector<double> p(l.size());
  double mx = -INFINITY;
  for (double v : l) mx = std::max(mx, v / T);
  double z = 0.0;
  for (std::size_t i = 0; i < l.size(); ++i) z += p[i] = std::exp(l[i] / T - mx);
  for (auto& v : p) v /= z;
  return p;
}

}  // namespace

double nll_at_temperature(const Matrix& logits, std::span<const int> labels, double T) {
  check_logits(logits, labels);
  if (!(T > 0.0)) throw CalibrationError("temperature must be positive");
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const auto& l = logits[i];
    double mx = -INFINITY;
    for (double v : l) mx = std::max(mx, v / T);
    double z = 0.0;
    for (double v : l) z += std::exp(v / T - mx);
    total += mx + std::log(z) - l[static_cast<std::size_t>(labels[i])] / T;
  }
  return total / static_cast<double>(logits.size());
}

CalibratorParams fit_temperature(const Matrix& logits, std::span<const int> labels) {
  check_logits(logits, labels);
  CalibratorParams p;
  p.kind = CalibratorKind::Temperature;
  if (std::all_of(labels.begin(), labels.end(), [&](int y) { return y == labels[0]; })) {
    p.degenerate = true;
    return p;
  }
  auto f = [&](double u) { return nll_at_temperature(logits, labels, std::exp(u)); };
  const double invphi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = -3.0, b = 3.0;
  double c = b - invphi * (b - a), d = a + invphi * (b - a);
  double fc = f(c), fd = f(d);
  while (b - a > 1e-4) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - invphi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + invphi * (b - a);
      fd = f(d);
    }
  }
  const double t = std::exp(0.5 * (a + b));
  p.temperature = f(std::log(t)) <= f(0.0) ? t : 1.0;
  return p;
}

std::vector<double> apply_temperature(const CalibratorParams& params, std::span<const double> logits) {
  if (!(params.temperature > 0.0)) throw CalibrationError("temperature must be positive");
  return softmax_scaled(logits, params.temperature);
}

Matrix apply_temperature(const CalibratorParams& params, const Matrix& logits) {
  Matrix out;
  for (const auto& l : logits) out.push_back(apply_temperature(params, l));
  return out;
}

CalibratorParams fit_scaling_binning(const Matrix& logits, std::span<const int> labels, int B) {
  check_logits(logits, labels);
  if (B < 1) throw CalibrationError("number of bins must be >= 1");
  const std::size_t n = logits.size(), C = logits[0].size();
  if (static_cast<std::size_t>(B) > n)
    throw CalibrationError("scaling-binning with " + std::to_string(B) + " bins needs at least that many fit samples, got " +
                           std::to_string(n));
  CalibratorParams p = fit_temperature(logits, labels);
  p.kind = CalibratorKind::ScalingBinning;
  p.bins = B;
  const Matrix scaled = apply_temperature(p, logits);
  for (std::size_t y = 0; y < C; ++y) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = scaled[i][y];
    std::sort(v.begin(), v.end());
    std::vector<double> bounds;
    for (int j = 1; j < B; ++j) bounds.push_back(v[static_cast<std::size_t>(j) * n / static_cast<std::size_t>(B)]);
    std::vector<double> sum(static_cast<std::size_t>(B), 0.0);
    std::vector<std::size_t> cnt(static_cast<std::size_t>(B), 0);
    for (double c : v) {
      const auto b = static_cast<std::size_t>(std::upper_bound(bounds.begin(), bounds.end(), c) - bounds.begin());
      sum[b] += c;
      ++cnt[b];
    }
    std::vector<double> outs(static_cast<std::size_t>(B));
    for (std::size_t b = 0; b < outs.size(); ++b) {
      if (cnt[b] > 0) {
        outs[b] = sum[b] / static_cast<double>(cnt[b]);
      } else {
        // Empty only when boundaries coincide; fall back to the bin midpoint.
        const double lo = b == 0 ? 0.0 : bounds[b - 1], hi = b + 1 == outs.size() ? 1.0 : bounds[b];
        outs[b] = 0.5 * (lo + hi);
      }
    }
    p.boundaries.push_back(std::move(bounds));
    p.outputs.push_back(std::move(outs));
  }
  return p;
}

std::vector<double> apply_scaling_binning(const CalibratorParams& params, std::span<const double> logits) {
  if (params.kind != CalibratorKind::ScalingBinning) throw CalibrationError("not a scaling-binning calibrator");
  if (logits.size() != params.outputs.size()) throw CalibrationError("class count differs from the fitted calibrator");
  const auto scaled = apply_temperature(params, logits);
  std::vector<double> out(scaled.size());
  double total = 0.0;
  for (std::size_t y = 0; y < scaled.size(); ++y) {
    const auto& bounds = params.boundaries[y];
    const auto b = static_cast<std::size_t>(std::upper_bound(bounds.begin(), bounds.end(), scaled[y]) - bounds.begin());
    total += out[y] = params.outputs[y][b];
  }
  if (total > 0.0) {
    for (auto& v : out) v /= total;
  } else {
    for (auto& v : out) v = 1.0 / static_cast<double>(out.size());
  }
  return out;
}

Matrix apply_scaling_binning(const CalibratorParams& params, const Matrix& logits) {
  Matrix out;
  for (const auto& l : logits) out.push_back(apply_scaling_binning(params, l));
  return out;
}

double entropy(std::span<const double> p) {
  if (p.empty()) throw CalibrationError("entropy of an empty vector");
  double total = 0.0, h = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw CalibrationError("entropy: negative or NaN probability");
    total += v;
    if (v > 0.0) h -= v * std::log(v);
  }
  if (std::abs(total - 1.0) > 1e-6) throw CalibrationError("entropy: probabilities sum to " + fmt(total) + ", not 1");
  return h;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw CalibrationError("spearman needs two equal-length series of >= 2");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n, my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  // Undefined when either side is constant; reported as 0.
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

std::vector<HistogramBin> histogram(std::span<const double> values, int n_bins) {
  if (values.empty()) throw CalibrationError("histogram of no values");
  if (n_bins < 1) throw CalibrationError("histogram needs >= 1 bin");
  double lo = *std::min_element(values.begin(), values.end());
  double hi = *std::max_element(values.begin(), values.end());
  if (hi == lo) hi = lo + 1.0;
  const double w = (hi - lo) / n_bins;
  std::vector<HistogramBin> hist(static_cast<std::size_t>(n_bins));
  for (int b = 0; b < n_bins; ++b) {
    hist[static_cast<std::size_t>(b)].lower = lo + b * w;
    hist[static_cast<std::size_t>(b)].upper = b + 1 == n_bins ? hi : lo + (b + 1) * w;
  }
  for (double v : values) ++hist[static_cast<std::size_t>(histogram_bin(hist, v))].count;
  return hist;
}

int histogram_bin(std::span<const HistogramBin> hist, double v) {
  int b = 0;
  while (b + 1 < static_cast<int>(hist.size()) && v >= hist[static_cast<std::size_t>(b) + 1].lower) ++b;
  return b;
}

EnergyEntropyScatter energy_entropy_scatter(std::span<const double> energies, const Matrix& posteriors,
                                            int hist_bins) {
  if (energies.empty()) throw CalibrationError("empty test set");
  if (energies.size() != posteriors.size()) throw CalibrationError("energies and posteriors differ in count");
  EnergyEntropyScatter s;
  s.histogram = histogram(energies, hist_bins);
  std::vector<double> h(energies.size());
  for (std::size_t i = 0; i < energies.size(); ++i) {
    h[i] = entropy(posteriors[i]);
    s.rows.push_back({i, energies[i], h[i], histogram_bin(s.histogram, energies[i])});
  }
  s.rank_correlation = energies.size() >= 2 ? spearman(energies, h) : 0.0;
  return s;
}

namespace {

struct EvalOutputs {
  Matrix posteriors;
  std::vector<double> energies;
};

EvalOutputs evaluate(const EncoderState& state, EnergyVariant variant, std::span<const Example> set) {
  EvalOutputs out;
  const std::size_t chunk = 64, C = state.config.n_classes;
  for (std::size_t i = 0; i < set.size(); i += chunk) {
    std::vector<TokenSeq> xs;
    for (std::size_t j = i; j < std::min(set.size(), i + chunk); ++j) xs.push_back(set[j].tokens);
    EncoderOutput fo = encoder_forward(state, xs);
    Tensor p = softmax(fo.logits, 1);
    Tensor e = energy_hat(variant, fo);
    for (std::size_t r = 0; r < xs.size(); ++r) {
      out.posteriors.emplace_back(p.data().begin() + static_cast<std::ptrdiff_t>(r * C),
                                  p.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * C));
      out.energies.push_back(e[r]);
    }
  }
  return out;
}

}  // namespace

EnergyEntropyScatter energy_entropy_scatter(const EncoderState& state, EnergyVariant variant,
                                            std::span<const Example> test_set, int hist_bins) {
  if (test_set.empty()) throw CalibrationError("empty test set");
  EvalOutputs ev = evaluate(state, variant, test_set);
  return energy_entropy_scatter(ev.energies, ev.posteriors, hist_bins);
}

std::vector<ShiftRow> confidence_shift_report(const EncoderState& baseline, const EncoderState& ebm,
                                              EnergyVariant variant, std::span<const Example> test_set) {
  if (baseline.config.vocab_size != ebm.config.vocab_size || baseline.config.n_classes != ebm.config.n_classes)
    throw CalibrationError("baseline and EBM models disagree on vocabulary or class count");
  if (test_set.empty()) throw CalibrationError("empty test set");
  EvalOutputs b = evaluate(baseline, variant, test_set), e = evaluate(ebm, variant, test_set);
  std::vector<ShiftRow> rows;
  for (std::size_t i = 0; i < test_set.size(); ++i)
    rows.push_back({i, test_set[i].label, e.energies[i], b.posteriors[i], e.posteriors[i]});
  std::stable_sort(rows.begin(), rows.end(), [](const ShiftRow& a, const ShiftRow& c) { return a.energy > c.energy; });
  return rows;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw CalibrationError("cannot write " + path.string());
  return os;
}

}  // namespace

void write_records_csv(const std::filesystem::path& path, std::span<const PredictionRecord> records) {
  auto os = open_out(path);
  os << "sample_id,class_id,confidence,is_true_label\n";
  for (const auto& r : records)
    os << r.sample_id << ',' << r.class_id << ',' << fmt(r.confidence) << ',' << (r.is_true_label ? 1 : 0) << '\n';
}

std::vector<PredictionRecord> read_records_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw CalibrationError("cannot read " + path.string());
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(is, line) || line != "sample_id,class_id,confidence,is_true_label")
    throw CalibrationError(path.string() + ":1: expected header sample_id,class_id,confidence,is_true_label");
  std::vector<PredictionRecord> out;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[4];
    int k = 0;
    while (k < 4 && std::getline(ss, f[k], ',')) ++k;
    try {
      if (k != 4) throw std::invalid_argument("expected 4 fields");
      PredictionRecord r;
      r.sample_id = std::stoull(f[0]);
      r.class_id = std::stoi(f[1]);
      r.confidence = std::stod(f[2]);
      if (f[3] == "1" || f[3] == "true") {
        r.is_true_label = true;
      } else if (f[3] != "0" && f[3] != "false") {
        throw std::invalid_argument("is_true_label must be 0/1");
      }
      out.push_back(r);
    } catch (const std::exception& e) {
      throw CalibrationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_reliability_csv(const std::filesystem::path& path, std::span<const BinStats> bins) {
  auto os = open_out(path);
  os << "class_id,bin,lower,upper,count,mean_confidence,accuracy\n";
  for (const auto& b : bins)
    os << b.class_id << ',' << b.bin << ',' << fmt(b.lower) << ',' << fmt(b.upper) << ',' << b.count << ','
       << fmt(b.mean_confidence) << ',' << fmt(b.accuracy) << '\n';
}

void write_scatter_csv(const std::filesystem::path& path, const EnergyEntropyScatter& scatter) {
  auto os = open_out(path);
  os << "sample_id,energy,entropy,hist_bin\n";
  for (const auto& r : scatter.rows)
    os << r.sample_id << ',' << fmt(r.energy) << ',' << fmt(r.entropy) << ',' << r.hist_bin << '\n';
}

void write_histogram_csv(const std::filesystem::path& path, std::span<const HistogramBin> hist) {
  auto os = open_out(path);
  os << "bin,lower,upper,count\n";
  for (std::size_t b = 0; b < hist.size(); ++b)
    os << b << ',' << fmt(hist[b].lower) << ',' << fmt(hist[b].upper) << ',' << hist[b].count << '\n';
}

void write_shift_csv(const std::filesystem::path& path, std::span<const ShiftRow> rows) {
  auto os = open_out(path);
  os << "sample_id,label,energy";
  const std::size_t C = rows.empty() ? 0 : rows[0].baseline_posterior.size();
  for (std::size_t y = 0; y < C; ++y) os << ",baseline_p" << y;
  for (std::size_t y = 0; y < C; ++y) os << ",ebm_p" << y;
  os << '\n';
  for (const auto& r : rows) {
    os << r.sample_id << ',' << r.label << ',' << fmt(r.energy);
    for (double v : r.baseline_posterior) os << ',' << fmt(v);
    for (double v : r.ebm_posterior) os << ',' << fmt(v);
    os << '\n';
  }
}

}  // namespace ebmcal

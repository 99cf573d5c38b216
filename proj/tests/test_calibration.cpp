#include <doctest.h>

#include "check.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "ebmcal/calibration.hpp"
#include "ebmcal/rng.hpp"

using namespace ebmcal;

namespace {

std::vector<double> softmax_ref(const std::vector<double>& l) {
  double mx = *std::max_element(l.begin(), l.end()), z = 0.0;
  std::vector<double> p(l.size());
  for (std::size_t i = 0; i < l.size(); ++i) z += p[i] = std::exp(l[i] - mx);
  for (auto& v : p) v /= z;
  return p;
}

// Random posterior rows, with some one-hot rows and some entries sitting
// exactly on bin edges.
Matrix random_posteriors(Rng& rng, std::size_t n, std::size_t C) {
  Matrix m;
  for (std::size_t i = 0; i < n; ++i) {
    const auto kind = rng.uniform_index(5);
    std::vector<double> p(C, 0.0);
    if (kind == 0) {
      p[rng.uniform_index(C)] = 1.0;
    } else if (kind == 1 && C == 2) {
      p[0] = static_cast<double>(rng.uniform_index(21)) / 20.0;
      p[1] = 1.0 - p[0];
    } else {
      std::vector<double> l(C);
      for (auto& v : l) v = rng.uniform(-4, 4);
      p = softmax_ref(l);
    }
    m.push_back(p);
  }
  return m;
}

std::vector<int> random_labels(Rng& rng, std::size_t n, std::size_t C) {
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng.uniform_index(C));
  return y;
}

// Direct definition: per class, per interval [b/B, (b+1)/B) (last closed),
// scan all samples.
double brute_force_ece(const Matrix& post, const std::vector<int>& labels, int B) {
  const std::size_t n = post.size(), C = post[0].size();
  double total = 0.0;
  for (std::size_t y = 0; y < C; ++y) {
    for (int b = 0; b < B; ++b) {
      const double lo = static_cast<double>(b) / B, hi = static_cast<double>(b + 1) / B;
      double cnt = 0, conf = 0, hit = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double c = post[i][y];
        const bool in = c >= lo && (c < hi || (b == B - 1 && c <= 1.0));
        if (!in) continue;
        cnt += 1;
        conf += c;
        hit += labels[i] == static_cast<int>(y);
      }
      if (cnt > 0) total += cnt / static_cast<double>(n) * std::abs(hit / cnt - conf / cnt);
    }
  }
  return total / static_cast<double>(C);
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// Rank by counting: 1 + #smaller + (#equal - 1) / 2.
std::vector<double> count_ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double lt = 0, eq = 0;
    for (double w : v) {
      lt += w < v[i];
      eq += w == v[i];
    }
    r[i] = 1.0 + lt + (eq - 1.0) / 2.0;
  }
  return r;
}

Matrix random_logits(Rng& rng, std::size_t n, std::size_t C, double scale) {
  Matrix m(n, std::vector<double>(C));
  for (auto& row : m)
    for (auto& v : row) v = rng.uniform(-scale, scale);
  return m;
}

// Labels drawn from softmax(logits / t_true) so a fit has a clear optimum.
std::vector<int> sampled_labels(Rng& rng, const Matrix& logits, double t_true) {
  std::vector<int> y;
  for (const auto& l : logits) {
    std::vector<double> s(l);
    for (auto& v : s) v /= t_true;
    const auto p = softmax_ref(s);
    double u = rng.uniform(), acc = 0;
    int k = 0;
    for (; k + 1 < static_cast<int>(p.size()); ++k) {
      acc += p[static_cast<std::size_t>(k)];
      if (u < acc) break;
    }
    y.push_back(k);
  }
  return y;
}

EncoderConfig tiny_config() {
  EncoderConfig c;
  c.vocab_size = 12;
  c.max_seq_len = 10;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.n_classes = 3;
  c.ff_mult = 2;
  c.dropout = 0.0;
  return c;
}

std::vector<Example> tiny_examples(Rng& rng, std::size_t n) {
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    TokenSeq x(1 + rng.uniform_index(8));
    for (auto& t : x) t = 5 + static_cast<int>(rng.uniform_index(7));
    out.push_back({x, static_cast<int>(rng.uniform_index(3))});
  }
  return out;
}

}  // namespace

TEST_CASE("Ece.OneHotCorrectIsZero") {
  Matrix p{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  std::vector<int> y{0, 1, 2};
  CHECK_EQ(ece(make_records(p, y), 20), 0.0);
}

TEST_CASE("Ece.HandCase") {
  Matrix p{{0.9, 0.1}};
  std::vector<int> y{0};
  // (1/2)(|1 - 0.9| + |0 - 0.1|); the double inputs make this 0.1 to rounding.
  CHECK_NEAR(ece(make_records(p, y), 20), 0.1, 1e-16);
}

TEST_CASE("Ece.MatchesBruteForceOracle") {
  Rng rng(1);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng.uniform_index(60), C = 2 + rng.uniform_index(3);
    const int B = std::array<int, 3>{1, 10, 20}[rng.uniform_index(3)];
    auto post = random_posteriors(rng, n, C);
    auto labels = random_labels(rng, n, C);
    const double e = ece(make_records(post, labels), B);
    REQUIRE_NEAR(e, brute_force_ece(post, labels, B), 1e-12);
    REQUIRE_GE(e, 0.0);
    REQUIRE_LE(e, 1.0);
  }
}

TEST_CASE("Ece.PermutationAndRelabelInvariant") {
  Rng rng(2);
  auto post = random_posteriors(rng, 200, 3);
  auto labels = random_labels(rng, 200, 3);
  auto rec = make_records(post, labels);
  const double base = ece(rec, 20);
  for (int t = 0; t < 10; ++t) {
    auto shuffled = rec;
    for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.uniform_index(i)]);
    CHECK_NEAR(ece(shuffled, 20), base, 1e-12);
    for (auto& r : shuffled) r.sample_id = r.sample_id * 7919 + 13;
    CHECK_NEAR(ece(shuffled, 20), base, 1e-12);
  }
}

TEST_CASE("Ece.BinEdgesAndOne") {
  CHECK_EQ(confidence_bin(0.0, 20), 0);
  CHECK_EQ(confidence_bin(1.0, 20), 19);
  CHECK_EQ(confidence_bin(1.0, 1), 0);
  for (int B : {3, 7, 10, 20})
    for (int i = 0; i < B; ++i) {
      CHECK_EQ(confidence_bin(static_cast<double>(i) / B, B), i);
      CHECK_EQ(confidence_bin(std::nextafter(static_cast<double>(i + 1) / B, 0.0), B), i);
    }
}

TEST_CASE("Ece.RejectsInconsistentRecords") {
  std::vector<PredictionRecord> rec{{0, 0, 0.6, true}, {0, 1, 0.4, false}, {1, 0, 0.5, true}};
  CHECK_THROWS_AS(ece(rec, 10), CalibrationError);
  rec.push_back({1, 1, 0.5, true});
  CHECK_THROWS_AS(ece(rec, 10), CalibrationError);
  rec.back().is_true_label = false;
  CHECK_NOTHROW(ece(rec, 10));
  CHECK_THROWS_AS(ece(rec, 0), CalibrationError);
  CHECK_THROWS_AS(ece(std::vector<PredictionRecord>{}, 10), CalibrationError);
}

TEST_CASE("Reliability.SingleBinAggregates") {
  Rng rng(3);
  auto post = random_posteriors(rng, 50, 2);
  auto labels = random_labels(rng, 50, 2);
  auto bins = reliability_data(make_records(post, labels), 1);
  REQUIRE_EQ(bins.size(), 2u);
  for (int y = 0; y < 2; ++y) {
    double conf = 0, hit = 0;
    for (std::size_t i = 0; i < 50; ++i) {
      conf += post[i][static_cast<std::size_t>(y)];
      hit += labels[i] == y;
    }
    CHECK_EQ(bins[static_cast<std::size_t>(y)].count, 50u);
    CHECK_NEAR(bins[static_cast<std::size_t>(y)].mean_confidence, conf / 50, 1e-12);
    CHECK_NEAR(bins[static_cast<std::size_t>(y)].accuracy, hit / 50, 1e-12);
  }
}

TEST_CASE("Reliability.PartitionBoundsAndRecomposition") {
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng.uniform_index(80), C = 2 + rng.uniform_index(3);
    const int B = 1 + static_cast<int>(rng.uniform_index(20));
    auto rec = make_records(random_posteriors(rng, n, C), random_labels(rng, n, C));
    auto bins = reliability_data(rec, B);
    REQUIRE_EQ(bins.size(), C * static_cast<std::size_t>(B));
    std::vector<std::size_t> per_class(C, 0);
    for (const auto& b : bins) {
      per_class[static_cast<std::size_t>(b.class_id)] += b.count;
      REQUIRE_GE(b.accuracy, 0.0);
      REQUIRE_LE(b.accuracy, 1.0);
      if (b.count > 0) {
        REQUIRE_GE(b.mean_confidence, b.lower);
        REQUIRE_LE(b.mean_confidence, b.upper);
      }
    }
    for (auto c : per_class) REQUIRE_EQ(c, n);
    REQUIRE_EQ(ece_from_bins(bins), ece(rec, B));
  }
}

TEST_CASE("Reliability.MergingDisjointSetsAddsCounts") {
  Rng rng(5);
  auto r1 = make_records(random_posteriors(rng, 70, 3), random_labels(rng, 70, 3));
  auto r2 = make_records(random_posteriors(rng, 45, 3), random_labels(rng, 45, 3));
  for (auto& r : r2) r.sample_id += 1000;
  auto merged = r1;
  merged.insert(merged.end(), r2.begin(), r2.end());
  auto b1 = reliability_data(r1, 20), b2 = reliability_data(r2, 20), bm = reliability_data(merged, 20);
  for (std::size_t k = 0; k < bm.size(); ++k) CHECK_EQ(bm[k].count, b1[k].count + b2[k].count);
}

TEST_CASE("Temperature.ApplyExamples") {
  CalibratorParams p;
  std::vector<double> l{2.0, 0.0};
  p.temperature = 1.0;
  auto q = apply_temperature(p, l);
  auto ref = softmax_ref(l);
  CHECK_NEAR(q[0], ref[0], 1e-15);
  p.temperature = 2.0;
  q = apply_temperature(p, l);
  CHECK_NEAR(q[0], 0.731059, 1e-6);
  CHECK_NEAR(q[1], 0.268941, 1e-6);
  p.temperature = 1e6;
  Rng rng(6);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> z(5);
    for (auto& v : z) v = rng.uniform(-10, 10);
    for (double v : apply_temperature(p, z)) CHECK_LT(std::abs(v - 0.2), 1e-5);
  }
  p.temperature = 0.0;
  CHECK_THROWS_AS(apply_temperature(p, l), CalibrationError);
  p.temperature = -1.0;
  CHECK_THROWS_AS(apply_temperature(p, l), CalibrationError);
}

TEST_CASE("Temperature.StationaryAtOneStaysAtOne") {
  // Logits (ln 3, 0) with label frequency 3:1 make softmax exactly the
  // empirical class frequency, so dNLL/dT vanishes at T = 1.
  Matrix logits(4, {std::log(3.0), 0.0});
  std::vector<int> labels{0, 0, 0, 1};
  const double T = fit_temperature(logits, labels).temperature;
  CHECK_NEAR(T, 1.0, 1e-3);
  // Grid oracle.
  double best_t = 0, best = INFINITY;
  for (int i = -3000; i <= 3000; ++i) {
    const double t = std::exp(i * 1e-3);
    const double f = nll_at_temperature(logits, labels, t);
    if (f < best) {
      best = f;
      best_t = t;
    }
  }
  CHECK_NEAR(T, best_t, 2e-3);
}

TEST_CASE("Temperature.MatchesGridOracleAndScalesWithLogits") {
  Rng rng(7);
  for (int t = 0; t < 10; ++t) {
    auto logits = random_logits(rng, 200, 3, 4.0);
    auto labels = sampled_labels(rng, logits, rng.uniform(0.5, 3.0));
    const double T = fit_temperature(logits, labels).temperature;
    double best_t = 0, best = INFINITY;
    for (int i = -3000; i <= 3000; i += 2) {
      const double tt = std::exp(i * 1e-3);
      const double f = nll_at_temperature(logits, labels, tt);
      if (f < best) {
        best = f;
        best_t = tt;
      }
    }
    CHECK_NEAR(std::log(T), std::log(best_t), 3e-3);
    Matrix doubled = logits;
    for (auto& row : doubled)
      for (auto& v : row) v *= 2;
    CHECK_NEAR(fit_temperature(doubled, labels).temperature / T, 2.0, 2e-3);
  }
}

TEST_CASE("Temperature.PreservesArgmaxAndNeverRaisesNll") {
  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    const std::size_t C = 2 + rng.uniform_index(4);
    auto logits = random_logits(rng, 40 + rng.uniform_index(100), C, rng.uniform(0.1, 8.0));
    auto labels = sampled_labels(rng, logits, rng.uniform(0.2, 5.0));
    if (std::all_of(labels.begin(), labels.end(), [&](int y) { return y == labels[0]; })) labels[0] = 1 - labels[0];
    auto p = fit_temperature(logits, labels);
    REQUIRE_GT(p.temperature, 0.0);
    REQUIRE_LE(nll_at_temperature(logits, labels, p.temperature), nll_at_temperature(logits, labels, 1.0));
    auto test_logits = random_logits(rng, 50, C, 5.0);
    for (const auto& l : test_logits) {
      auto q = apply_temperature(p, l);
      REQUIRE_EQ(std::max_element(q.begin(), q.end()) - q.begin(), std::max_element(l.begin(), l.end()) - l.begin());
    }
  }
}

TEST_CASE("Temperature.DegenerateFitSet") {
  Matrix logits{{1.0, 0.0}, {0.5, 0.2}};
  std::vector<int> labels{1, 1};
  auto p = fit_temperature(logits, labels);
  CHECK(p.degenerate);
  CHECK_EQ(p.temperature, 1.0);
  CHECK_THROWS_AS(fit_temperature(Matrix{}, std::vector<int>{}), CalibrationError);
}

TEST_CASE("ScalingBinning.SingleBinGivesDevMean") {
  Rng rng(9);
  auto logits = random_logits(rng, 100, 2, 3.0);
  auto labels = sampled_labels(rng, logits, 1.5);
  auto p = fit_scaling_binning(logits, labels, 1);
  auto scaled = apply_temperature(p, logits);
  double m0 = 0;
  for (const auto& s : scaled) m0 += s[0] / 100.0;
  for (const auto& l : random_logits(rng, 50, 2, 6.0)) {
    auto q = apply_scaling_binning(p, l);
    CHECK_NEAR(q[0], m0, 1e-12);
    CHECK_NEAR(q[0] + q[1], 1.0, 1e-12);
  }
}

TEST_CASE("ScalingBinning.BoundaryTieGoesToUpperBin") {
  Matrix logits{{-1.0, 0.0}, {0.0, 0.0}, {1.0, 0.0}, {2.0, 0.0}};
  std::vector<int> labels{1, 0, 1, 0};
  auto p = fit_scaling_binning(logits, labels, 2);
  auto scaled = apply_temperature(p, logits);
  // Class 0 confidences ascend with the row index; the boundary is row 2.
  REQUIRE_EQ(p.boundaries[0].size(), 1u);
  CHECK_EQ(p.boundaries[0][0], scaled[2][0]);
  CHECK_NEAR(p.outputs[0][0], 0.5 * (scaled[0][0] + scaled[1][0]), 1e-15);
  CHECK_NEAR(p.outputs[0][1], 0.5 * (scaled[2][0] + scaled[3][0]), 1e-15);
  // Applying to the boundary row uses the upper-bin output for class 0.
  auto q = apply_scaling_binning(p, logits[2]);
  const double c1 = scaled[2][1];
  const std::size_t b1 = static_cast<std::size_t>(
      std::count_if(p.boundaries[1].begin(), p.boundaries[1].end(), [&](double b) { return b <= c1; }));
  const double raw0 = p.outputs[0][1], raw1 = p.outputs[1][b1];
  CHECK_NEAR(q[0], raw0 / (raw0 + raw1), 1e-15);
}

TEST_CASE("ScalingBinning.PiecewiseConstantAndBounded") {
  Rng rng(10);
  auto logits = random_logits(rng, 300, 3, 3.0);
  auto labels = sampled_labels(rng, logits, 1.0);
  auto p = fit_scaling_binning(logits, labels, 10);
  for (const auto& outs : p.outputs)
    for (double v : outs) {
      CHECK_GE(v, 0.0);
      CHECK_LE(v, 1.0);
    }
  for (const auto& b : p.boundaries) CHECK(std::is_sorted(b.begin(), b.end()));
  // Nudging a logit row by a hair keeps every class in its bin.
  for (const auto& l : random_logits(rng, 100, 3, 3.0)) {
    auto l2 = l;
    for (auto& v : l2) v += 1e-3;  // softmax invariant shift
    CHECK_EQ(apply_scaling_binning(p, l), apply_scaling_binning(p, l2));
    auto q = apply_scaling_binning(p, l);
    CHECK_NEAR(std::accumulate(q.begin(), q.end(), 0.0), 1.0, 1e-12);
  }
  CHECK_THROWS_AS(fit_scaling_binning(random_logits(rng, 5, 2, 1.0), std::vector<int>{0, 1, 0, 1, 0}, 6),
               CalibrationError);
}

TEST_CASE("Entropy.Examples") {
  CHECK_NEAR(entropy(std::vector<double>{0.5, 0.5}), 0.693147, 1e-6);
  CHECK_EQ(entropy(std::vector<double>{0.0, 1.0, 0.0}), 0.0);
  CHECK_NEAR(entropy(std::vector<double>{0.9, 0.1}), 0.325083, 1e-6);
  CHECK_THROWS_AS(entropy(std::vector<double>{0.5, 0.6}), CalibrationError);
}

TEST_CASE("Spearman.MatchesCountingOracle") {
  Rng rng(11);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 3 + rng.uniform_index(60);
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = static_cast<double>(rng.uniform_index(t % 2 ? 5 : 1000));
      b[i] = a[i] * rng.uniform(-1, 1) + static_cast<double>(rng.uniform_index(4));
    }
    const auto ra = count_ranks(a), rb = count_ranks(b);
    if (std::all_of(ra.begin(), ra.end(), [&](double r) { return r == ra[0]; })) continue;
    if (std::all_of(rb.begin(), rb.end(), [&](double r) { return r == rb[0]; })) continue;
    REQUIRE_NEAR(spearman(a, b), pearson(ra, rb), 1e-12);
  }
  std::vector<double> x{1, 2, 3}, c{5, 5, 5};
  CHECK_EQ(spearman(x, c), 0.0);
  CHECK_NEAR(spearman(x, std::vector<double>{3, 2, 1}), -1.0, 1e-15);
}

TEST_CASE("Histogram.CoversAllValues") {
  Rng rng(12);
  std::vector<double> v(500);
  for (auto& x : v) x = rng.normal() * 3.0;
  auto h = histogram(v, 20);
  std::size_t total = 0;
  for (const auto& b : h) total += b.count;
  CHECK_EQ(total, v.size());
  CHECK_EQ(h.front().lower, *std::min_element(v.begin(), v.end()));
  CHECK_EQ(h.back().upper, *std::max_element(v.begin(), v.end()));
  CHECK_EQ(histogram_bin(h, h.back().upper), 19);
  auto flat = histogram(std::vector<double>{2.0, 2.0}, 4);
  CHECK_EQ(flat[0].count, 2u);
}

TEST_CASE("Scatter.RowsEntropyBoundsAndCorrelation") {
  EncoderState s = init_encoder(tiny_config(), 21);
  Rng rng(13);
  auto test = tiny_examples(rng, 70);
  for (auto variant : {EnergyVariant::Scalar, EnergyVariant::Hidden, EnergyVariant::SharpHidden}) {
    auto sc = energy_entropy_scatter(s, variant, test);
    REQUIRE_EQ(sc.rows.size(), test.size());
    std::vector<double> e, h;
    for (const auto& r : sc.rows) {
      CHECK_GE(r.entropy, 0.0);
      CHECK_LE(r.entropy, std::log(3.0) + 1e-12);
      CHECK_NEAR(r.energy, energy_hat(variant, s, test[r.sample_id].tokens), 1e-12);
      e.push_back(r.energy);
      h.push_back(r.entropy);
    }
    CHECK_NEAR(sc.rank_correlation, pearson(count_ranks(e), count_ranks(h)), 1e-12);
    std::size_t total = 0;
    for (const auto& b : sc.histogram) total += b.count;
    CHECK_EQ(total, test.size());
  }
  CHECK_THROWS_AS(energy_entropy_scatter(s, EnergyVariant::Hidden, std::vector<Example>{}), CalibrationError);
}

TEST_CASE("ShiftReport.SelfComparisonSortedNormalised") {
  EncoderState s = init_encoder(tiny_config(), 22);
  EncoderState other = init_encoder(tiny_config(), 23);
  Rng rng(14);
  auto test = tiny_examples(rng, 40);
  auto rows = confidence_shift_report(s, s, EnergyVariant::Hidden, test);
  REQUIRE_EQ(rows.size(), test.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK_EQ(rows[i].baseline_posterior, rows[i].ebm_posterior);
    if (i > 0) {
      CHECK_GE(rows[i - 1].energy, rows[i].energy);
    }
  }
  for (const auto& r : confidence_shift_report(s, other, EnergyVariant::Scalar, test)) {
    CHECK_NEAR(std::accumulate(r.baseline_posterior.begin(), r.baseline_posterior.end(), 0.0), 1.0, 1e-9);
    CHECK_NEAR(std::accumulate(r.ebm_posterior.begin(), r.ebm_posterior.end(), 0.0), 1.0, 1e-9);
    CHECK_EQ(r.label, test[r.sample_id].label);
  }
  EncoderConfig c = tiny_config();
  c.vocab_size = 13;
  CHECK_THROWS_AS(confidence_shift_report(s, init_encoder(c, 1), EnergyVariant::Hidden, test), CalibrationError);
}

TEST_CASE("Csv.RecordsRoundTripAndErrors") {
  const auto dir = std::filesystem::temp_directory_path() / "ebmcal_test_calibration";
  std::filesystem::create_directories(dir);
  Rng rng(15);
  auto rec = make_records(random_posteriors(rng, 30, 3), random_labels(rng, 30, 3));
  write_records_csv(dir / "r.csv", rec);
  CHECK_EQ(read_records_csv(dir / "r.csv"), rec);
  {
    std::ofstream os(dir / "bad.csv");
    os << "sample_id,class_id,confidence,is_true_label\n0,0,0.5,1\n0,1,oops,0\n";
  }
  try {
    read_records_csv(dir / "bad.csv");
    FAIL("expected an error");
  } catch (const CalibrationError& e) {
    {
      INFO(e.what());
      CHECK_NE(std::string(e.what()).find("bad.csv:3:"), std::string::npos);
    }
  }
  std::filesystem::remove_all(dir);
}

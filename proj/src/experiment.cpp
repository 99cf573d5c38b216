#include "ebmcal/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "ebmcal/calibration.hpp"
#include "ebmcal/format.hpp"
#include "ebmcal/rng.hpp"

namespace ebmcal {

using json = nlohmann::ordered_json;

bool is_known_method(std::string_view m) { return std::find(std::begin(kMethods), std::end(kMethods), m) != std::end(kMethods); }

bool is_ebm_method(std::string_view m) { return m.starts_with("ebm_"); }

std::string_view fit_source(std::string_view m) {
  if (m.ends_with("_train")) return "train";
  if (m.ends_with("_dev")) return "dev";
  return "";
}

EnergyVariant ebm_variant(std::string_view m) {
  if (m == "ebm_scalar") return EnergyVariant::Scalar;
  if (m == "ebm_hidden") return EnergyVariant::Hidden;
  if (m == "ebm_sharp_hidden") return EnergyVariant::SharpHidden;
  throw std::invalid_argument("not an EBM method: " + std::string(m));
}

std::string_view to_string(NoiseMode m) { return m == NoiseMode::Pool ? "pool" : "on_the_fly"; }

// ---------------------------------------------------------------------------
// Config parsing

namespace {

class ConfigReader {
 public:
  explicit ConfigReader(std::vector<ConfigIssue>& issues) : issues_(issues) {}

  void fail(std::string field, std::string message) { issues_.push_back({std::move(field), std::move(message)}); }

  // Reports keys of `obj` outside `allowed`. Returns false if `obj` is not an object.
  bool object(const json& obj, const std::string& path, std::initializer_list<std::string_view> allowed) {
    if (!obj.is_object()) {
      fail(path, "must be an object");
      return false;
    }
    for (const auto& [key, _] : obj.items())
      if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) fail(join(path, key), "unknown key");
    return true;
  }

  template <class T>
  void integer(const json& obj, const std::string& path, const char* key, T& out, long long min,
               const char* name = nullptr) {
    if (!obj.contains(key)) return;
    const json& v = obj[key];
    const std::string field = join(path, key);
    if (!v.is_number_integer()) return fail(field, "must be an integer");
    const bool below = v.is_number_unsigned() ? v.get<unsigned long long>() < static_cast<unsigned long long>(std::max(min, 0LL))
                                              : v.get<long long>() < min;
    if (below) return fail(field, std::string(name ? name : key) + " must be ≥ " + std::to_string(min));
    out = v.is_number_unsigned() ? static_cast<T>(v.get<unsigned long long>()) : static_cast<T>(v.get<long long>());
  }

  // Accepts numbers in [lo, hi] (or (lo, hi] when `open_lo`).
  void number(const json& obj, const std::string& path, const char* key, double& out, double lo, double hi,
              bool open_lo = false) {
    if (!obj.contains(key)) return;
    const json& v = obj[key];
    const std::string field = join(path, key);
    if (!v.is_number()) return fail(field, "must be a number");
    const double d = v.get<double>();
    if (!(open_lo ? d > lo : d >= lo) || !(d <= hi) || !std::isfinite(d)) {
      std::string range = (open_lo ? "(" : "[") + fmt(lo) + ", " + (std::isinf(hi) ? "inf)" : fmt(hi) + "]");
      return fail(field, std::string(key) + " must lie in " + range);
    }
    out = d;
  }

  void string(const json& obj, const std::string& path, const char* key, std::string& out) {
    if (!obj.contains(key)) return;
    if (!obj[key].is_string()) return fail(join(path, key), "must be a string");
    out = obj[key].get<std::string>();
  }

  static std::string join(const std::string& path, std::string_view key) {
    return path.empty() ? std::string(key) : path + "." + std::string(key);
  }

 private:
  std::vector<ConfigIssue>& issues_;
};

void read_task(ConfigReader& r, const json& j, TaskSpec& t) {
  if (!r.object(j, "task", {"n_classes", "vocab_size", "min_len", "max_len", "kind", "overlap", "n_train",
                            "n_dev_pool", "seed"}))
    return;
  r.integer(j, "task", "n_classes", t.n_classes, 2);
  r.integer(j, "task", "vocab_size", t.vocab_size, 1);
  r.integer(j, "task", "min_len", t.min_len, 1);
  r.integer(j, "task", "max_len", t.max_len, 1);
  r.integer(j, "task", "n_train", t.n_train, 1);
  r.integer(j, "task", "n_dev_pool", t.n_dev_pool, 2);
  r.integer(j, "task", "seed", t.seed, 0);
  r.number(j, "task", "overlap", t.overlap, 0.0, 1.0);
  std::string kind(to_string(t.kind));
  r.string(j, "task", "kind", kind);
  try {
    t.kind = task_kind_from_string(kind);
  } catch (const DataError& e) {
    r.fail("task.kind", e.what());
  }
  if (t.vocab_size < t.n_classes) r.fail("task.vocab_size", "vocab_size must be ≥ n_classes");
  if (t.max_len < t.min_len) r.fail("task.max_len", "max_len must be ≥ min_len");
}

void check_heads(ConfigReader& r, const std::string& path, std::size_t d_model, std::size_t n_heads) {
  if (n_heads > 0 && d_model % n_heads != 0) r.fail(path + ".n_heads", "n_heads must divide d_model");
}

}  // namespace

ConfigResult parse_config(std::string_view text) {
  ConfigResult res;
  ConfigReader r(res.issues);
  json j;
  const bool blank = std::all_of(text.begin(), text.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
  if (blank) {
    j = json::object();
  } else {
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      r.fail("", std::string("invalid JSON: ") + e.what());
      return res;
    }
  }
  if (!r.object(j, "", {"task", "dataset", "methods", "seeds", "nce", "noise", "encoder", "train", "eval", "output"}))
    return res;

  ExperimentConfig c;
  if (j.contains("dataset")) {
    if (j["dataset"].is_string())
      c.dataset = j["dataset"].get<std::string>();
    else
      r.fail("dataset", "must be a path string");
    if (j.contains("task")) r.fail("task", "task and dataset are mutually exclusive");
  }
  if (j.contains("task")) read_task(r, j["task"], c.task);

  if (!j.contains("methods")) {
    r.fail("methods", "required: nonempty list of methods");
  } else if (!j["methods"].is_array() || j["methods"].empty()) {
    r.fail("methods", "must be a nonempty list");
  } else {
    for (std::size_t i = 0; i < j["methods"].size(); ++i) {
      const json& m = j["methods"][i];
      const std::string field = "methods[" + std::to_string(i) + "]";
      if (!m.is_string()) {
        r.fail(field, "must be a string");
        continue;
      }
      const auto name = m.get<std::string>();
      if (!is_known_method(name))
        r.fail(field, "unknown method '" + name + "'");
      else if (std::find(c.methods.begin(), c.methods.end(), name) != c.methods.end())
        r.fail(field, "duplicate method '" + name + "'");
      else
        c.methods.push_back(name);
    }
  }

  if (!j.contains("seeds")) {
    r.fail("seeds", "required: nonempty list of nonnegative integers");
  } else if (!j["seeds"].is_array() || j["seeds"].empty()) {
    r.fail("seeds", "must be a nonempty list");
  } else {
    for (std::size_t i = 0; i < j["seeds"].size(); ++i) {
      const json& s = j["seeds"][i];
      const std::string field = "seeds[" + std::to_string(i) + "]";
      if (!s.is_number_integer() || (!s.is_number_unsigned() && s.get<long long>() < 0)) {
        r.fail(field, "must be a nonnegative integer");
        continue;
      }
      const auto seed = s.get<std::uint64_t>();
      if (std::find(c.seeds.begin(), c.seeds.end(), seed) != c.seeds.end())
        r.fail(field, "duplicate seed " + std::to_string(seed));
      else
        c.seeds.push_back(seed);
    }
  }

  if (j.contains("nce") && r.object(j["nce"], "nce", {"K"})) r.integer(j["nce"], "nce", "K", c.K, 1);

  if (j.contains("noise") &&
      r.object(j["noise"], "noise", {"M", "k", "mode", "pool_size", "lm_path", "seed", "d_model", "n_layers", "n_heads",
                                     "ff_mult", "epochs", "batch_size", "lr"})) {
    const json& n = j["noise"];
    r.number(n, "noise", "M", c.M, 0.0, 1.0);
    r.integer(n, "noise", "k", c.k, 1);
    std::string mode(to_string(c.noise_mode));
    r.string(n, "noise", "mode", mode);
    if (mode == "pool")
      c.noise_mode = NoiseMode::Pool;
    else if (mode != "on_the_fly")
      r.fail("noise.mode", "mode must be on_the_fly or pool");
    r.integer(n, "noise", "pool_size", c.pool_size, 1);
    if (n.contains("lm_path")) {
      if (n["lm_path"].is_string())
        c.noise_lm = n["lm_path"].get<std::string>();
      else if (!n["lm_path"].is_null())
        r.fail("noise.lm_path", "must be a path string or null");
    }
    r.integer(n, "noise", "seed", c.lm_schedule.seed, 0);
    r.integer(n, "noise", "d_model", c.lm.d_model, 1);
    r.integer(n, "noise", "n_layers", c.lm.n_layers, 1);
    r.integer(n, "noise", "n_heads", c.lm.n_heads, 1);
    r.integer(n, "noise", "ff_mult", c.lm.ff_mult, 1);
    r.integer(n, "noise", "epochs", c.lm_schedule.epochs, 0);
    r.integer(n, "noise", "batch_size", c.lm_schedule.batch_size, 1);
    r.number(n, "noise", "lr", c.lm_schedule.lr, 0.0, INFINITY, true);
    check_heads(r, "noise", c.lm.d_model, c.lm.n_heads);
  }

  if (j.contains("encoder") &&
      r.object(j["encoder"], "encoder", {"d_model", "n_layers", "n_heads", "ff_mult", "dropout", "head"})) {
    const json& e = j["encoder"];
    r.integer(e, "encoder", "d_model", c.encoder.d_model, 1);
    r.integer(e, "encoder", "n_layers", c.encoder.n_layers, 1);
    r.integer(e, "encoder", "n_heads", c.encoder.n_heads, 1);
    r.integer(e, "encoder", "ff_mult", c.encoder.ff_mult, 1);
    r.number(e, "encoder", "dropout", c.encoder.dropout, 0.0, 1.0);
    if (c.encoder.dropout >= 1.0) r.fail("encoder.dropout", "dropout must be < 1");
    std::string head(to_string(c.encoder.head));
    r.string(e, "encoder", "head", head);
    try {
      c.encoder.head = head_kind_from_string(head);
    } catch (const std::exception& ex) {
      r.fail("encoder.head", ex.what());
    }
    check_heads(r, "encoder", c.encoder.d_model, c.encoder.n_heads);
  }

  if (j.contains("train") && r.object(j["train"], "train", {"steps", "batch_size", "lr", "eval_interval"})) {
    const json& t = j["train"];
    r.integer(t, "train", "steps", c.train.steps, 0);
    r.integer(t, "train", "batch_size", c.train.batch_size, 1);
    r.integer(t, "train", "eval_interval", c.train.eval_interval, 1);
    r.number(t, "train", "lr", c.train.lr, 0.0, INFINITY, true);
  }

  if (j.contains("eval") && r.object(j["eval"], "eval", {"B", "reliability_bins", "scal_bin_bins", "histogram_bins"})) {
    const json& e = j["eval"];
    r.integer(e, "eval", "B", c.B, 1);
    r.integer(e, "eval", "reliability_bins", c.reliability_bins, 1);
    r.integer(e, "eval", "scal_bin_bins", c.scal_bin_bins, 1);
    r.integer(e, "eval", "histogram_bins", c.histogram_bins, 1);
  }

  if (j.contains("output")) {
    if (j["output"].is_string())
      c.output = j["output"].get<std::string>();
    else
      r.fail("output", "must be a path string");
  }

  if (!c.dataset && c.k > static_cast<std::size_t>(c.task.vocab_size) + 1)
    r.fail("noise.k", "k must be ≤ task.vocab_size + 1 (content tokens plus EOS)");

  if (res.issues.empty()) res.config = std::move(c);
  return res;
}

ConfigResult validate_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) {
    ConfigResult res;
    res.issues.push_back({"", "cannot read config file " + path.string()});
    return res;
  }
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const ExperimentConfig& c) {
  json j;
  if (c.dataset) {
    j["dataset"] = c.dataset->string();
  } else {
    j["task"] = {{"n_classes", c.task.n_classes}, {"vocab_size", c.task.vocab_size}, {"min_len", c.task.min_len},
                 {"max_len", c.task.max_len},     {"kind", to_string(c.task.kind)},   {"overlap", c.task.overlap},
                 {"n_train", c.task.n_train},     {"n_dev_pool", c.task.n_dev_pool},  {"seed", c.task.seed}};
  }
  j["methods"] = c.methods;
  j["seeds"] = c.seeds;
  j["nce"] = {{"K", c.K}};
  j["noise"] = {{"M", c.M},
                {"k", c.k},
                {"mode", to_string(c.noise_mode)},
                {"pool_size", c.pool_size},
                {"lm_path", c.noise_lm ? json(c.noise_lm->string()) : json(nullptr)},
                {"seed", c.lm_schedule.seed},
                {"d_model", c.lm.d_model},
                {"n_layers", c.lm.n_layers},
                {"n_heads", c.lm.n_heads},
                {"ff_mult", c.lm.ff_mult},
                {"epochs", c.lm_schedule.epochs},
                {"batch_size", c.lm_schedule.batch_size},
                {"lr", c.lm_schedule.lr}};
  j["encoder"] = {{"d_model", c.encoder.d_model}, {"n_layers", c.encoder.n_layers},
                  {"n_heads", c.encoder.n_heads}, {"ff_mult", c.encoder.ff_mult},
                  {"dropout", c.encoder.dropout}, {"head", to_string(c.encoder.head)}};
  j["train"] = {{"steps", c.train.steps},
                {"batch_size", c.train.batch_size},
                {"lr", c.train.lr},
                {"eval_interval", c.train.eval_interval}};
  j["eval"] = {{"B", c.B},
               {"reliability_bins", c.reliability_bins},
               {"scal_bin_bins", c.scal_bin_bins},
               {"histogram_bins", c.histogram_bins}};
  if (c.output) j["output"] = c.output->string();
  return j.dump(2) + "\n";
}

DatasetSplit load_or_generate(const ExperimentConfig& cfg) {
  return cfg.dataset ? load_split(*cfg.dataset) : generate_task(cfg.task);
}

NoiseLmConfig noise_lm_config(const ExperimentConfig& cfg, const Task& task) {
  NoiseLmConfig c = cfg.lm;
  c.vocab_size = static_cast<std::size_t>(task.spec.vocab_size + Vocab::kNumSpecials);
  c.max_seq_len = static_cast<std::size_t>(task.spec.max_len);
  return c;
}

EncoderConfig encoder_config(const ExperimentConfig& cfg, const Task& task) {
  EncoderConfig c = cfg.encoder;
  c.vocab_size = static_cast<std::size_t>(task.spec.vocab_size + Vocab::kNumSpecials);
  // Noise samples may be up to twice as long as the longest data sequence.
  c.max_seq_len = 2 * static_cast<std::size_t>(task.spec.max_len);
  c.n_classes = static_cast<std::size_t>(task.spec.n_classes);
  return c;
}

int RunReport::exit_code() const {
  return std::all_of(cells.begin(), cells.end(), [](const CellResult& c) { return c.ok; }) ? 0 : 1;
}

// ---------------------------------------------------------------------------
// Running

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string cell_stem(std::string_view method, std::uint64_t seed) {
  return std::string(method) + "_" + std::to_string(seed);
}

// CSV-safe single-line message.
std::string sanitize(std::string s) {
  for (char& ch : s)
    if (ch == ',' || ch == '\n' || ch == '\r') ch = ';';
  return s;
}

Matrix softmax_rows(const Matrix& logits) {
  CalibratorParams identity;
  return apply_temperature(identity, logits);
}

struct SplitData {
  std::vector<TokenSeq> xs;
  std::vector<int> ys;
};

SplitData unpack(std::span<const Example> set) {
  SplitData d;
  for (const auto& ex : set) {
    d.xs.push_back(ex.tokens);
    d.ys.push_back(ex.label);
  }
  return d;
}

class Runner {
 public:
  Runner(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream* log)
      : cfg_(cfg), out_(out), log_(log) {}

  RunReport run() {
    std::filesystem::create_directories(out_);
    write_text(out_ / "config.json", config_to_json(cfg_));
    split_ = load_or_generate(cfg_);
    enc_cfg_ = encoder_config(cfg_, split_.task);
    enc_cfg_.validate();
    test_ = unpack(split_.test);
    if (split_.test.empty()) throw DataError("test split is empty");

    if (std::any_of(cfg_.methods.begin(), cfg_.methods.end(), [](const std::string& m) { return is_ebm_method(m); }))
      prepare_noise();

    RunReport report;
    for (auto seed : cfg_.seeds) {
      for (const auto& m : cfg_.methods) report.cells.push_back(run_cell(m, seed));
      if (seed == cfg_.seeds.front()) write_shift_table(seed);
      baselines_.erase(seed);
    }
    write_results(report.cells);
    write_report(out_);
    return report;
  }

 private:
  void note(const std::string& line) {
    if (log_) *log_ << line << std::endl;
  }

  static void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << text;
  }

  void prepare_noise() {
    const auto t0 = Clock::now();
    try {
      MaskSpec mask{cfg_.M};
      mask.validate();
      if (cfg_.noise_lm) {
        lm_ = std::make_unique<NoiseLmState>(load_noise_lm(*cfg_.noise_lm));
        if (lm_->config.vocab_size != enc_cfg_.vocab_size)
          throw NoiseError("noise LM vocabulary does not match the task");
      } else {
        lm_ = std::make_unique<NoiseLmState>(
            init_noise_lm(noise_lm_config(cfg_, split_.task), derive_seed({cfg_.lm_schedule.seed, hash_name("noise_lm")})));
        std::vector<TokenSeq> corpus;
        for (const auto& ex : split_.train) corpus.push_back(ex.tokens);
        const LmTrainLog lml = finetune_mlm(*lm_, corpus, mask, cfg_.lm_schedule);
        save_noise_lm(out_ / "noise_lm", *lm_);
        std::ofstream os(out_ / "noise_lm_log.csv");
        os << "epoch,heldout_perplexity,train_loss\n";
        for (std::size_t e = 0; e < lml.heldout_perplexity.size(); ++e)
          os << e << ',' << fmt(lml.heldout_perplexity[e]) << ','
             << (e == 0 ? std::string() : fmt(lml.train_loss[e - 1])) << '\n';
        note("noise LM: held-out perplexity " + fmt(lml.heldout_perplexity.front()) + " -> " +
             fmt(lml.heldout_perplexity.back()));
      }
      if (cfg_.noise_mode == NoiseMode::Pool) {
        pool_ = build_noise_pool(*lm_, split_.train, mask, cfg_.k, cfg_.pool_size,
                                 derive_seed({cfg_.lm_schedule.seed, hash_name("pool")}));
        write_noise_cache(out_ / "noise_pool.jsonl", pool_);
        noise_ = std::make_unique<PooledNoiseSource>(pool_, split_.train.size());
      } else {
        noise_ = std::make_unique<LmNoiseSource>(*lm_, split_.train, mask, cfg_.k);
      }
      note("noise model ready (" + std::to_string(seconds_since(t0)) + " s)");
    } catch (const std::exception& e) {
      noise_error_ = e.what();
      noise_.reset();
      note("noise model failed: " + noise_error_);
    }
  }

  TrainSchedule schedule(std::uint64_t seed) const {
    TrainSchedule s = cfg_.train;
    s.seed = seed;
    return s;
  }

  EncoderState fresh_encoder(std::uint64_t seed) const {
    return init_encoder(enc_cfg_, derive_seed({seed, hash_name("encoder")}));
  }

  // Trains the seed's baseline once; later calibrator cells reuse it.
  const EncoderState& baseline(std::uint64_t seed) {
    auto it = baselines_.find(seed);
    if (it != baselines_.end()) {
      if (!it->second.error.empty()) throw std::runtime_error("baseline training failed: " + it->second.error);
      return *it->second.state;
    }
    Trained& t = baselines_[seed];
    try {
      EncoderState s = fresh_encoder(seed);
      t.log = train_joint(s, split_.train, split_.dev, nullptr, std::nullopt, schedule(seed));
      t.state = std::make_unique<EncoderState>(std::move(s));
    } catch (const std::exception& e) {
      t.error = e.what();
      throw;
    }
    return *t.state;
  }

  CellResult run_cell(const std::string& method, std::uint64_t seed) {
    CellResult r;
    r.method = method;
    r.seed = seed;
    const auto t0 = Clock::now();
    try {
      Matrix post;
      if (method == "baseline") {
        const EncoderState& s = baseline(seed);
        write_train_log_csv(out_ / ("trajectory_" + cell_stem(method, seed) + ".csv"), baselines_[seed].log);
        post = softmax_rows(batch_logits(s, test_.xs));
        write_scatter(method, seed, s, EnergyVariant::Hidden);
      } else if (is_ebm_method(method)) {
        if (!noise_) throw NoiseError("noise model unavailable: " + noise_error_);
        const EnergyVariant v = ebm_variant(method);
        EncoderState s = fresh_encoder(seed);
        const TrainLog log = train_joint(s, split_.train, split_.dev, noise_.get(), NceConfig{cfg_.K, v}, schedule(seed));
        write_train_log_csv(out_ / ("trajectory_" + cell_stem(method, seed) + ".csv"), log);
        post = softmax_rows(batch_logits(s, test_.xs));
        write_scatter(method, seed, s, v);
        if (seed == cfg_.seeds.front() && !shift_model_) {
          shift_model_ = std::make_unique<EncoderState>(s.clone());
          shift_variant_ = v;
        }
      } else {
        const EncoderState& s = baseline(seed);
        const bool on_train = fit_source(method) == "train";
        const SplitData fit = unpack(on_train ? std::span<const Example>(split_.train) : std::span<const Example>(split_.dev));
        const Matrix fit_logits = batch_logits(s, fit.xs);
        const Matrix test_logits = batch_logits(s, test_.xs);
        if (method.starts_with("t_scal")) {
          post = apply_temperature(fit_temperature(fit_logits, fit.ys), test_logits);
        } else {
          post = apply_scaling_binning(fit_scaling_binning(fit_logits, fit.ys, cfg_.scal_bin_bins), test_logits);
        }
      }
      const auto records = make_records(post, test_.ys);
      r.accuracy = accuracy(post, test_.ys);
      r.ece = ece(records, cfg_.B);
      write_reliability_csv(out_ / ("reliability_" + cell_stem(method, seed) + ".csv"),
                            reliability_data(records, cfg_.reliability_bins));
      r.ok = true;
      note("seed " + std::to_string(seed) + " " + method + ": acc " + fmt(r.accuracy) + " ece " + fmt(r.ece) + " (" +
           std::to_string(seconds_since(t0)) + " s)");
    } catch (const std::exception& e) {
      r.ok = false;
      r.error = sanitize(e.what());
      note("seed " + std::to_string(seed) + " " + method + ": FAILED " + r.error);
    }
    return r;
  }

  void write_scatter(const std::string& method, std::uint64_t seed, const EncoderState& s, EnergyVariant v) {
    const auto sc = energy_entropy_scatter(s, v, split_.test, cfg_.histogram_bins);
    write_scatter_csv(out_ / ("scatter_" + cell_stem(method, seed) + ".csv"), sc);
    write_histogram_csv(out_ / ("histogram_" + cell_stem(method, seed) + ".csv"), sc.histogram);
  }

  // Baseline versus the first EBM method of the first seed.
  void write_shift_table(std::uint64_t seed) {
    if (!shift_model_) return;
    try {
      const auto rows = confidence_shift_report(baseline(seed), *shift_model_, shift_variant_, split_.test);
      write_shift_csv(out_ / "shift_table.csv", rows);
    } catch (const std::exception& e) {
      note("shift table skipped: " + std::string(e.what()));
    }
    shift_model_.reset();
  }

  void write_results(const std::vector<CellResult>& cells) {
    std::ofstream os(out_ / "results.csv", std::ios::binary);
    if (!os) throw std::runtime_error("cannot write results.csv");
    os << "method,fit_source,seed,status,accuracy,ece,error\n";
    for (const auto& c : cells) {
      os << c.method << ',' << fit_source(c.method) << ',' << c.seed << ',' << (c.ok ? "ok" : "failed") << ',';
      if (c.ok) os << fmt(c.accuracy) << ',' << fmt(c.ece);
      else os << ',';
      os << ',' << c.error << '\n';
    }
  }

  struct Trained {
    std::unique_ptr<EncoderState> state;
    TrainLog log;
    std::string error;
  };

  const ExperimentConfig& cfg_;
  std::filesystem::path out_;
  std::ostream* log_;
  DatasetSplit split_;
  EncoderConfig enc_cfg_;
  SplitData test_;
  std::unique_ptr<NoiseLmState> lm_;
  std::vector<NoiseSample> pool_;
  std::unique_ptr<NoiseSource> noise_;
  std::string noise_error_;
  std::map<std::uint64_t, Trained> baselines_;
  std::unique_ptr<EncoderState> shift_model_;
  EnergyVariant shift_variant_ = EnergyVariant::Hidden;
};

}  // namespace

RunReport run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream* log) {
  return Runner(cfg, out, log).run();
}

// ---------------------------------------------------------------------------
// Report aggregation

namespace {

std::vector<std::string> split_csv(const std::string& line, std::size_t max_fields) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (out.size() + 1 < max_fields) {
    const auto comma = line.find(',', pos);
    if (comma == std::string::npos) break;
    out.push_back(line.substr(pos, comma - pos));
    pos = comma + 1;
  }
  out.push_back(line.substr(pos));
  return out;
}

double parse_double(const std::string& s, const std::string& where) {
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw std::runtime_error(where + ": bad number '" + s + "'");
  return v;
}

struct Stats {
  double mean = 0.0, std = 0.0;
};

Stats mean_std(const std::vector<double>& v) {
  Stats s;
  if (v.empty()) return s;
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

}  // namespace

std::vector<CellResult> read_results_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "method,fit_source,seed,status,accuracy,ece,error")
    throw std::runtime_error(path.string() + ":1: unexpected header");
  std::vector<CellResult> out;
  for (std::size_t ln = 2; std::getline(is, line); ++ln) {
    const std::string where = path.string() + ":" + std::to_string(ln);
    const auto f = split_csv(line, 7);
    if (f.size() != 7) throw std::runtime_error(where + ": expected 7 fields");
    CellResult c;
    c.method = f[0];
    c.seed = static_cast<std::uint64_t>(parse_double(f[2], where));
    c.ok = f[3] == "ok";
    if (c.ok) {
      c.accuracy = parse_double(f[4], where);
      c.ece = parse_double(f[5], where);
    }
    c.error = f[6];
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<SummaryRow> summarize(const std::vector<CellResult>& cells) {
  std::vector<std::string> order;
  for (const auto& c : cells)
    if (std::find(order.begin(), order.end(), c.method) == order.end()) order.push_back(c.method);
  std::vector<SummaryRow> rows;
  for (const auto& m : order) {
    SummaryRow row{m, std::string(fit_source(m))};
    std::vector<double> acc, ec;
    for (const auto& c : cells) {
      if (c.method != m) continue;
      if (c.ok) {
        acc.push_back(c.accuracy);
        ec.push_back(c.ece);
      } else {
        ++row.n_failed;
      }
    }
    row.n_ok = acc.size();
    const Stats a = mean_std(acc), e = mean_std(ec);
    row.acc_mean = a.mean;
    row.acc_std = a.std;
    row.ece_mean = e.mean;
    row.ece_std = e.std;
    rows.push_back(row);
  }
  return rows;
}

std::string render_summary(const std::vector<SummaryRow>& rows) {
  auto fixed = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return std::string(buf);
  };
  auto pad = [](std::string s, std::size_t w) {
    s.resize(std::max(s.size(), w), ' ');
    return s;
  };
  std::string out = pad("method", 18) + pad("fit", 7) + pad("n", 5) + pad("test accuracy", 19) + "test ECE\n";
  for (const auto& r : rows) {
    out += pad(r.method, 18) + pad(r.fit_source.empty() ? "-" : r.fit_source, 7) + pad(std::to_string(r.n_ok), 5);
    if (r.n_ok == 0) {
      out += "failed";
    } else {
      out += pad(fixed(r.acc_mean) + " ± " + fixed(r.acc_std), 20) + fixed(r.ece_mean) + " ± " + fixed(r.ece_std);
    }
    if (r.n_failed > 0) out += "  (" + std::to_string(r.n_failed) + " failed)";
    out += '\n';
  }
  return out;
}

std::vector<SummaryRow> write_report(const std::filesystem::path& out) {
  const auto cells = read_results_csv(out / "results.csv");
  const auto rows = summarize(cells);
  {
    std::ofstream os(out / "summary.csv", std::ios::binary);
    os << "method,fit_source,n_ok,n_failed,acc_mean,acc_std,ece_mean,ece_std\n";
    for (const auto& r : rows)
      os << r.method << ',' << r.fit_source << ',' << r.n_ok << ',' << r.n_failed << ',' << fmt(r.acc_mean) << ','
         << fmt(r.acc_std) << ',' << fmt(r.ece_mean) << ',' << fmt(r.ece_std) << '\n';
  }
  {
    std::ofstream os(out / "summary.txt", std::ios::binary);
    os << render_summary(rows);
    for (const auto& c : cells)
      if (!c.ok) os << "failed: " << c.method << " seed " << c.seed << ": " << c.error << '\n';
  }
  // Trade-off points copied verbatim from the trajectory logs.
  std::ofstream os(out / "tradeoff.csv", std::ios::binary);
  os << "method,seed,step,dev_acc,dev_ece\n";
  for (const auto& c : cells) {
    if (!c.ok || !(c.method == "baseline" || is_ebm_method(c.method))) continue;
    const auto path = out / ("trajectory_" + cell_stem(c.method, c.seed) + ".csv");
    std::ifstream is(path);
    if (!is) throw std::runtime_error("missing trajectory " + path.string());
    std::string line;
    std::getline(is, line);
    for (std::size_t ln = 2; std::getline(is, line); ++ln) {
      const auto f = split_csv(line, 6);
      if (f.size() != 6) throw std::runtime_error(path.string() + ":" + std::to_string(ln) + ": expected 6 fields");
      os << c.method << ',' << c.seed << ',' << f[0] << ',' << f[4] << ',' << f[5] << '\n';
    }
  }
  return rows;
}

}  // namespace ebmcal

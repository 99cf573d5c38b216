#include "ebmcal/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "ebmcal/rng.hpp"

namespace ebmcal {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab(std::size_t n_content) {
  tokens_ = {"<pad>", "<bos>", "<eos>", "<sep>", "<mask>"};
  for (std::size_t k = 0; k < n_content; ++k) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "w%02zu", k);
    tokens_.emplace_back(buf);
  }
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= size()) throw DataError("token id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocab::id(std::string_view token) const {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i] == token) return static_cast<int>(i);
  }
  throw DataError("unknown token '" + std::string(token) + "'");
}

TokenSeq Vocab::encode(std::string_view text) const {
  TokenSeq out;
  std::istringstream is{std::string(text)};
  std::string tok;
  while (is >> tok) out.push_back(id(tok));
  return out;
}

std::string Vocab::decode(std::span<const int> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

std::string_view to_string(TaskKind k) { return k == TaskKind::Markov ? "markov" : "unigram"; }

TaskKind task_kind_from_string(std::string_view s) {
  if (s == "markov") return TaskKind::Markov;
  if (s == "unigram") return TaskKind::Unigram;
  throw DataError("unknown task kind '" + std::string(s) + "' (expected markov or unigram)");
}

// ---------------------------------------------------------------------------
// TaskSpec / generative parameters

void TaskSpec::validate() const {
  if (n_classes < 2) throw DataError("task: n_classes must be >= 2");
  if (vocab_size < n_classes) throw DataError("task: vocab_size must be >= n_classes");
  if (min_len < 1 || max_len < min_len) throw DataError("task: need 1 <= min_len <= max_len");
  if (!(overlap >= 0.0 && overlap <= 1.0)) throw DataError("task: overlap must lie in [0, 1]");
  if (n_train < 0 || n_dev_pool < 0) throw DataError("task: example counts must be nonnegative");
}

namespace {

// Token k belongs to class block k * C / V.
int block_of(int k, const TaskSpec& spec) { return k * spec.n_classes / spec.vocab_size; }

std::vector<double> normalised(std::vector<double> w) {
  double s = 0.0;
  for (double v : w) s += v;
  for (auto& v : w) v /= s;
  return w;
}

// One mixture row: class-specific weights on block y, shared weights on all tokens.
std::vector<double> mixture_row(const TaskSpec& spec, int y, Rng& class_rng, Rng& shared_rng) {
  const auto V = static_cast<std::size_t>(spec.vocab_size);
  std::vector<double> q(V, 0.0), s(V);
  for (std::size_t k = 0; k < V; ++k) {
    const double w = class_rng.uniform(0.5, 1.5);
    if (block_of(static_cast<int>(k), spec) == y) q[k] = w;
  }
  for (auto& v : s) v = shared_rng.uniform(0.5, 1.5);
  q = normalised(std::move(q));
  s = normalised(std::move(s));
  std::vector<double> row(V);
  for (std::size_t k = 0; k < V; ++k) row[k] = (1.0 - spec.overlap) * q[k] + spec.overlap * s[k];
  return row;
}

}  // namespace

GenerativeParams build_generative_params(const TaskSpec& spec) {
  spec.validate();
  GenerativeParams p;
  const auto C = static_cast<std::size_t>(spec.n_classes);
  const auto V = static_cast<std::size_t>(spec.vocab_size);
  p.prior.assign(C, 1.0 / static_cast<double>(C));
  for (std::size_t y = 0; y < C; ++y) {
    // The shared component is drawn from the same stream for every class.
    Rng class_rng(derive_seed({spec.seed, hash_name("class"), y}));
    Rng shared_rng(derive_seed({spec.seed, hash_name("shared")}));
    p.initial.push_back(mixture_row(spec, static_cast<int>(y), class_rng, shared_rng));
    if (spec.kind == TaskKind::Markov) {
      std::vector<std::vector<double>> rows;
      for (std::size_t prev = 0; prev < V; ++prev) rows.push_back(mixture_row(spec, static_cast<int>(y), class_rng, shared_rng));
      p.transition.push_back(std::move(rows));
    }
  }
  return p;
}

Task make_task(const TaskSpec& spec) { return Task{spec, build_generative_params(spec)}; }

Example sample_example(const Task& task, std::uint64_t seed) {
  const auto& spec = task.spec;
  Rng rng(seed);
  Example ex;
  ex.label = static_cast<int>(rng.categorical(task.params.prior));
  const auto y = static_cast<std::size_t>(ex.label);
  const int len = spec.min_len + static_cast<int>(rng.uniform_index(static_cast<std::size_t>(spec.max_len - spec.min_len + 1)));
  std::size_t prev = rng.categorical(task.params.initial[y]);
  ex.tokens.push_back(Vocab::kNumSpecials + static_cast<int>(prev));
  for (int t = 1; t < len; ++t) {
    const auto& row = spec.kind == TaskKind::Markov ? task.params.transition[y][prev] : task.params.initial[y];
    prev = rng.categorical(row);
    ex.tokens.push_back(Vocab::kNumSpecials + static_cast<int>(prev));
  }
  return ex;
}

DatasetSplit generate_task(const TaskSpec& spec) {
  DatasetSplit split;
  split.task = make_task(spec);
  split.seed = spec.seed;
  const auto total = static_cast<std::size_t>(spec.n_train + spec.n_dev_pool);
  const std::size_t n_dev = static_cast<std::size_t>(spec.n_dev_pool + 1) / 2;
  for (std::size_t i = 0; i < total; ++i) {
    Example ex = sample_example(split.task, derive_seed({spec.seed, hash_name("example"), i}));
    if (i < static_cast<std::size_t>(spec.n_train)) {
      split.train.push_back(std::move(ex));
    } else if (i < static_cast<std::size_t>(spec.n_train) + n_dev) {
      split.dev.push_back(std::move(ex));
    } else {
      split.test.push_back(std::move(ex));
    }
  }
  return split;
}

namespace {

std::vector<double> class_log_joint(const Task& task, std::span<const int> x) {
  const auto& spec = task.spec;
  if (x.empty()) throw DataError("true_posterior: empty sequence");
  const Vocab vocab = task.vocab();
  for (int id : x) {
    if (!vocab.is_content(id)) throw DataError("true_posterior: token " + std::to_string(id) + " is not a content token");
  }
  const auto C = static_cast<std::size_t>(spec.n_classes);
  std::vector<double> lj(C);
  for (std::size_t y = 0; y < C; ++y) {
    auto idx = [](int id) { return static_cast<std::size_t>(id - Vocab::kNumSpecials); };
    double l = std::log(task.params.prior[y]) + std::log(task.params.initial[y][idx(x[0])]);
    for (std::size_t t = 1; t < x.size(); ++t) {
      const double p = spec.kind == TaskKind::Markov ? task.params.transition[y][idx(x[t - 1])][idx(x[t])]
                                                     : task.params.initial[y][idx(x[t])];
      l += std::log(p);
    }
    lj[y] = l;
  }
  return lj;
}

double lse(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (m == -std::numeric_limits<double>::infinity()) return m;
  double z = 0.0;
  for (double a : v) z += std::exp(a - m);
  return m + std::log(z);
}

}  // namespace

std::vector<double> true_posterior(const Task& task, std::span<const int> x) {
  const auto lj = class_log_joint(task, x);
  const double z = lse(lj);
  if (!std::isfinite(z)) throw DataError("true_posterior: sequence has zero probability under every class");
  std::vector<double> post(lj.size());
  for (std::size_t y = 0; y < lj.size(); ++y) post[y] = std::exp(lj[y] - z);
  return post;
}

double true_log_marginal(const Task& task, std::span<const int> x) { return lse(class_log_joint(task, x)); }

// ---------------------------------------------------------------------------
// JSONL persistence

namespace {

json spec_to_json(const TaskSpec& s) {
  return json{{"n_classes", s.n_classes}, {"vocab_size", s.vocab_size}, {"min_len", s.min_len},
              {"max_len", s.max_len},     {"kind", to_string(s.kind)},   {"overlap", s.overlap},
              {"n_train", s.n_train},     {"n_dev_pool", s.n_dev_pool},  {"seed", s.seed}};
}

TaskSpec spec_from_json(const json& j) {
  TaskSpec s;
  s.n_classes = j.at("n_classes").get<int>();
  s.vocab_size = j.at("vocab_size").get<int>();
  s.min_len = j.at("min_len").get<int>();
  s.max_len = j.at("max_len").get<int>();
  s.kind = task_kind_from_string(j.at("kind").get<std::string>());
  s.overlap = j.at("overlap").get<double>();
  s.n_train = j.at("n_train").get<int>();
  s.n_dev_pool = j.at("n_dev_pool").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

}  // namespace

void save_split(const std::filesystem::path& path, const DatasetSplit& split) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  json header{{"format", "ebmcal-dataset"},
              {"version", kDatasetFormatVersion},
              {"seed", split.seed},
              {"task", spec_to_json(split.task.spec)},
              {"params",
               {{"prior", split.task.params.prior},
                {"initial", split.task.params.initial},
                {"transition", split.task.params.transition}}},
              {"counts", {{"train", split.train.size()}, {"dev", split.dev.size()}, {"test", split.test.size()}}}};
  os << header.dump() << '\n';
  for (const auto* part : {&split.train, &split.dev, &split.test}) {
    for (const auto& ex : *part) os << json{{"label", ex.label}, {"tokens", ex.tokens}}.dump() << '\n';
  }
  if (!os) throw DataError("write failed for " + path.string());
}

DatasetSplit load_split(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  const std::string where = path.string() + ":";
  std::string line;
  std::size_t line_no = 0;
  auto parse = [&](const std::string& text) {
    try {
      return json::parse(text);
    } catch (const json::exception& e) {
      throw DataError(where + std::to_string(line_no) + ": malformed JSON (" + e.what() + ")");
    }
  };
  if (!std::getline(is, line)) throw DataError(where + "1: empty file, expected header");
  ++line_no;
  DatasetSplit split;
  std::size_t counts[3];
  try {
    json h = parse(line);
    if (h.at("format").get<std::string>() != "ebmcal-dataset") throw DataError(where + "1: not an ebmcal dataset");
    const int version = h.at("version").get<int>();
    if (version != kDatasetFormatVersion) {
      throw DataError(where + "1: dataset version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kDatasetFormatVersion) + ")");
    }
    split.seed = h.at("seed").get<std::uint64_t>();
    split.task.spec = spec_from_json(h.at("task"));
    const auto& p = h.at("params");
    split.task.params.prior = p.at("prior").get<std::vector<double>>();
    split.task.params.initial = p.at("initial").get<std::vector<std::vector<double>>>();
    split.task.params.transition = p.at("transition").get<std::vector<std::vector<std::vector<double>>>>();
    counts[0] = h.at("counts").at("train").get<std::size_t>();
    counts[1] = h.at("counts").at("dev").get<std::size_t>();
    counts[2] = h.at("counts").at("test").get<std::size_t>();
  } catch (const json::exception& e) {
    throw DataError(where + "1: bad header (" + e.what() + ")");
  }
  const std::size_t expected = counts[0] + counts[1] + counts[2];
  for (int part = 0; part < 3; ++part) {
    auto& dest = part == 0 ? split.train : part == 1 ? split.dev : split.test;
    for (std::size_t i = 0; i < counts[part]; ++i) {
      if (!std::getline(is, line)) {
        throw DataError(where + std::to_string(line_no + 1) + ": file truncated, expected " + std::to_string(expected) +
                        " examples but found " + std::to_string(line_no - 1));
      }
      ++line_no;
      json j = parse(line);
      try {
        dest.push_back(Example{j.at("tokens").get<TokenSeq>(), j.at("label").get<int>()});
      } catch (const json::exception& e) {
        throw DataError(where + std::to_string(line_no) + ": bad example (" + e.what() + ")");
      }
    }
  }
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty()) throw DataError(where + std::to_string(line_no) + ": unexpected trailing content");
  }
  return split;
}

}  // namespace ebmcal

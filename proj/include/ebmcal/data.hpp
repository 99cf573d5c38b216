#pragma once

// Synthetic classification tasks with exactly computable Bayes posteriors.
//
// Each class y emits sequences from a mixture
//     p_y = (1 - overlap) * q_y + overlap * s
// where q_y is supported only on class y's block of content tokens and s is
// shared by all classes. overlap = 0 gives disjoint class vocabularies,
// overlap = 1 makes the classes indistinguishable. For Markov tasks the
// mixture is applied row-wise to the transition matrices.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ebmcal {

using TokenSeq = std::vector<int>;

struct Example {
  TokenSeq tokens;
  int label = 0;

  bool operator==(const Example&) const = default;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Special ids occupy [0, 5); content tokens follow densely.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kSep = 3;
  static constexpr int kMask = 4;
  static constexpr int kNumSpecials = 5;

  explicit Vocab(std::size_t n_content);

  std::size_t size() const { return tokens_.size(); }
  std::size_t content_size() const { return tokens_.size() - kNumSpecials; }
  bool is_special(int id) const { return id >= 0 && id < kNumSpecials; }
  bool is_content(int id) const { return id >= kNumSpecials && static_cast<std::size_t>(id) < size(); }
  int content_id(std::size_t k) const { return kNumSpecials + static_cast<int>(k); }

  const std::string& token(int id) const;
  int id(std::string_view token) const;

  // Whitespace tokenisation over the vocabulary.
  TokenSeq encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

 private:
  std::vector<std::string> tokens_;
};

enum class TaskKind { Unigram, Markov };

std::string_view to_string(TaskKind k);
TaskKind task_kind_from_string(std::string_view s);

struct TaskSpec {
  int n_classes = 2;
  int vocab_size = 64;  // content tokens, specials excluded
  int min_len = 8;
  int max_len = 16;
  TaskKind kind = TaskKind::Markov;
  double overlap = 0.5;
  int n_train = 2000;
  int n_dev_pool = 400;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const TaskSpec&) const = default;
};

// Exact generative parameters, indexed by content index (vocab id - 5).
struct GenerativeParams {
  std::vector<double> prior;                                 // [C]
  std::vector<std::vector<double>> initial;                  // [C][V]
  std::vector<std::vector<std::vector<double>>> transition;  // [C][V][V]; empty for unigram tasks

  bool operator==(const GenerativeParams&) const = default;
};

struct Task {
  TaskSpec spec;
  GenerativeParams params;

  Vocab vocab() const { return Vocab(static_cast<std::size_t>(spec.vocab_size)); }
  bool operator==(const Task&) const = default;
};

struct DatasetSplit {
  Task task;
  std::vector<Example> train;
  std::vector<Example> dev;
  std::vector<Example> test;
  std::uint64_t seed = 0;

  bool operator==(const DatasetSplit&) const = default;
};

GenerativeParams build_generative_params(const TaskSpec& spec);
Task make_task(const TaskSpec& spec);

// Draws train + dev-pool examples; the dev pool is halved into dev and test.
DatasetSplit generate_task(const TaskSpec& spec);

Example sample_example(const Task& task, std::uint64_t seed);

// Exact P*(y | x). Throws DataError for non-content tokens or sequences
// impossible under every class.
std::vector<double> true_posterior(const Task& task, std::span<const int> x);

// Sum over classes of log pi_y + log P(x | y), i.e. log P*(x).
double true_log_marginal(const Task& task, std::span<const int> x);

inline constexpr int kDatasetFormatVersion = 1;

// JSONL: a header object (format, version, seed, task spec, generative
// params, split counts) followed by one {"label","tokens"} object per example
// in train, dev, test order.
void save_split(const std::filesystem::path& path, const DatasetSplit& split);
DatasetSplit load_split(const std::filesystem::path& path);

}  // namespace ebmcal

#pragma once

// Noise distribution P_N: a small causal transformer LM that completes a
// masked copy of a training input.
//
// Sequences are laid out as BOS x^m SEP x EOS. The LM predicts over content
// tokens plus EOS only, so generated payloads never contain specials.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "ebmcal/checkpoint.hpp"
#include "ebmcal/data.hpp"
#include "ebmcal/noise_source.hpp"
#include "ebmcal/rng.hpp"
#include "ebmcal/transformer.hpp"

namespace ebmcal {

class NoiseError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct MaskSpec {
  double ratio = 0.4;
  int mask_token_id = Vocab::kMask;

  void validate() const;
};

// Each token replaced by mask_token_id independently with probability ratio.
TokenSeq mask_input(std::span<const int> x, const MaskSpec& spec, Rng& rng);

struct NoiseLmConfig {
  std::size_t vocab_size = 69;  // input vocabulary, specials included
  std::size_t max_seq_len = 16;  // longest conditioning input x
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t ff_mult = 4;

  void validate() const;
  // Room for BOS, x^m, SEP and a 2|x| completion.
  StackConfig stack() const;
  // Content tokens plus EOS.
  std::size_t output_size() const { return vocab_size - Vocab::kNumSpecials + 1; }
  std::size_t max_generation(std::size_t input_len) const { return 2 * input_len; }
  bool operator==(const NoiseLmConfig&) const = default;
};

// Output index <-> token id: content id 5+i is index i, EOS is the last index.
int output_token(const NoiseLmConfig& cfg, std::size_t index);
std::size_t output_index(const NoiseLmConfig& cfg, int token);

struct NoiseLmState {
  NoiseLmConfig config;
  TransformerStack stack;
  Tensor out_w, out_b;  // [d, output_size], [output_size]

  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  NoiseLmState clone() const;
};

NoiseLmState init_noise_lm(const NoiseLmConfig& cfg, std::uint64_t seed);

// One conditioning / completion pair.
struct LmPair {
  TokenSeq masked;
  TokenSeq target;
};

// Mean per-token cross-entropy over every target token and the closing EOS.
Tensor lm_loss(const NoiseLmState& lm, std::span<const LmPair> pairs);

// Row t holds the output logits after seq[0..t], for an arbitrary id sequence.
std::vector<std::vector<double>> next_token_logits(const NoiseLmState& lm, std::span<const int> seq);

// Teacher-forced sum of log P(x_t | BOS x^m SEP x_<t) over the tokens of x
// (EOS excluded). top_k > 0 scores under the top-k renormalised distribution
// (-inf when a token falls outside the top k); 0 uses the full softmax.
double score_log_prob(const NoiseLmState& lm, std::span<const int> masked, std::span<const int> x,
                      std::size_t top_k = 0);
std::vector<double> score_log_probs(const NoiseLmState& lm, std::span<const LmPair> pairs, std::size_t top_k = 0);

// exp of the mean per-token NLL, EOS included.
double perplexity(const NoiseLmState& lm, std::span<const LmPair> pairs);

// Fraction of target tokens (EOS excluded) that are the argmax prediction.
double teacher_forced_accuracy(const NoiseLmState& lm, std::span<const LmPair> pairs);

struct LmSchedule {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double heldout_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct LmTrainLog {
  // heldout_perplexity[0] is measured before training, then one per epoch.
  std::vector<double> heldout_perplexity;
  std::vector<double> train_loss;  // mean over each epoch's steps
};

// Trains on (mask(x), x) pairs with fresh masks every epoch. A held-out slice
// of the corpus with fixed masks tracks perplexity.
LmTrainLog finetune_mlm(NoiseLmState& lm, std::span<const TokenSeq> corpus, const MaskSpec& spec,
                        const LmSchedule& schedule);

struct NoiseSample {
  TokenSeq tokens;
  double log_prob = 0.0;       // top-k renormalised, payload tokens only
  double full_log_prob = 0.0;  // full softmax, payload tokens only
  std::size_t source_index = 0;
  std::uint64_t seed = 0;
  TokenSeq masked;

  bool operator==(const NoiseSample&) const = default;
};

struct NoiseRequest {
  std::size_t source_index = 0;
  TokenSeq tokens;
  std::uint64_t seed = 0;  // drives both masking and sampling
};

// Masks x, then samples a completion token by token from the top-k
// renormalised distribution until EOS or 2|x| tokens. Requests are decoded in
// lockstep with cached keys and values; each result depends only on its own
// request.
std::vector<NoiseSample> generate_noise(const NoiseLmState& lm, std::span<const NoiseRequest> requests,
                                        const MaskSpec& spec, std::size_t k);
NoiseSample generate_noise(const NoiseLmState& lm, std::span<const int> x, const MaskSpec& spec, std::size_t k,
                           Rng& rng);
// As generate_noise with request tokens taken as the already-masked input;
// the seed drives sampling only.
std::vector<NoiseSample> complete_masked(const NoiseLmState& lm, std::span<const NoiseRequest> requests,
                                         std::size_t k);

// JSONL, one {source_index, tokens, log_prob, full_log_prob, seed} per line.
void write_noise_cache(const std::filesystem::path& path, std::span<const NoiseSample> samples);
std::vector<NoiseSample> read_noise_cache(const std::filesystem::path& path);

void save_noise_lm(const std::filesystem::path& stem, const NoiseLmState& lm);
NoiseLmState load_noise_lm(const std::filesystem::path& stem);

// Fresh samples for every draw. Empty completions are redrawn with a derived
// seed; NoiseError after 64 empty draws for one slot.
class LmNoiseSource : public NoiseSource {
 public:
  LmNoiseSource(const NoiseLmState& lm, std::span<const Example> train, MaskSpec spec, std::size_t k);
  std::vector<TokenSeq> draw(std::span<const std::size_t> train_indices, int K, std::uint64_t step_seed) override;

 private:
  const NoiseLmState& lm_;
  std::span<const Example> train_;
  MaskSpec spec_;
  std::size_t k_;
};

// Draws from a fixed pool of nonempty samples per training example. When the
// pool holds exactly K samples for an example all of them are used.
class PooledNoiseSource : public NoiseSource {
 public:
  PooledNoiseSource(std::span<const NoiseSample> pool, std::size_t n_train);
  std::vector<TokenSeq> draw(std::span<const std::size_t> train_indices, int K, std::uint64_t step_seed) override;
  std::size_t pool_size(std::size_t train_index) const { return pool_[train_index].size(); }

 private:
  std::vector<std::vector<TokenSeq>> pool_;
};

// per_example nonempty samples per training example, seeded by
// (seed, example index, j), with the same redraw rule as LmNoiseSource.
std::vector<NoiseSample> build_noise_pool(const NoiseLmState& lm, std::span<const Example> train, const MaskSpec& spec,
                                          std::size_t k, std::size_t per_example, std::uint64_t seed);

}  // namespace ebmcal

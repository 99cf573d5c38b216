#pragma once

// Transformer text classifier: enc(x) is the final hidden state of a CLS
// token prepended to x. Two heads read it: the classifier f_CLS (logits over
// classes) and the scalar energy head g_S.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ebmcal/checkpoint.hpp"
#include "ebmcal/data.hpp"
#include "ebmcal/tensor.hpp"
#include "ebmcal/transformer.hpp"

namespace ebmcal {

class EncoderError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class HeadKind { Linear, Mlp };

std::string_view to_string(HeadKind k);
HeadKind head_kind_from_string(std::string_view s);

struct EncoderConfig {
  std::size_t vocab_size = 69;  // specials + 64 content tokens
  std::size_t max_seq_len = 32;  // content tokens, CLS excluded
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t n_classes = 2;
  std::size_t ff_mult = 4;
  double dropout = 0.1;
  HeadKind head = HeadKind::Linear;
  int cls_id = Vocab::kBos;

  void validate() const;
  StackConfig stack() const;
  bool operator==(const EncoderConfig&) const = default;
};

struct EncoderState {
  EncoderConfig config;
  TransformerStack stack;
  Tensor head_w1, head_b1;  // MLP head hidden layer; empty for Linear
  Tensor cls_w, cls_b;      // [d, C], [C]
  Tensor scalar_w, scalar_b;  // [d, 1], [1]

  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  // Deep copy with fresh leaf tensors.
  EncoderState clone() const;
};

EncoderState init_encoder(const EncoderConfig& cfg, std::uint64_t seed);

struct ForwardOptions {
  Rng* dropout_rng = nullptr;  // non-null enables dropout (training mode)
};

struct EncoderOutput {
  Tensor pooled;  // [B, d]
  Tensor logits;  // [B, C]
  Tensor scalar;  // [B], g_S(enc(x))
};

// Throws EncoderError for empty/overlong sequences or out-of-range ids.
void validate_input(const EncoderConfig& cfg, std::span<const int> x);

EncoderOutput encoder_forward(const EncoderState& state, std::span<const TokenSeq> batch,
                              const ForwardOptions& opts = {});

std::vector<double> encode(const EncoderState& state, std::span<const int> x);
std::vector<double> logits(const EncoderState& state, std::span<const int> x);
std::vector<double> posterior(const EncoderState& state, std::span<const int> x);

// Evaluation-mode logits for many sequences, computed in chunks.
std::vector<std::vector<double>> batch_logits(const EncoderState& state, std::span<const TokenSeq> xs,
                                              std::size_t chunk = 64);

// Mean over rows of -log softmax(logits)[label].
Tensor ce_loss(const Tensor& logits, std::span<const int> labels);
double ce_loss(const EncoderState& state, std::span<const Example> batch);

// Writes <stem>.ebmc (parameters) and <stem>.json (config).
void save_encoder(const std::filesystem::path& stem, const EncoderState& state);
EncoderState load_encoder(const std::filesystem::path& stem);

}  // namespace ebmcal

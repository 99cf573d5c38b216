#pragma once

// Pre-LayerNorm transformer stack shared by the classifier encoder
// (bidirectional) and the noise language model (causal).

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ebmcal/checkpoint.hpp"
#include "ebmcal/tensor.hpp"

namespace ebmcal {

class Rng;

struct StackConfig {
  std::size_t vocab_size = 0;
  std::size_t max_positions = 0;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t ff_mult = 4;
};

struct BlockParams {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;
};

struct TransformerStack {
  Tensor tok_emb;  // [vocab, d]
  Tensor pos_emb;  // [max_positions, d]
  std::vector<BlockParams> blocks;
  Tensor lnf_g, lnf_b;

  void append_named(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

// Glorot-uniform weight matrices (including embeddings), zero biases, unit
// LayerNorm gains. Each tensor draws from its own stream seeded by
// derive_seed({seed, hash_name(full_name)}), so adding a tensor never shifts
// the initial values of the others.
Tensor glorot(const std::string& name, std::size_t fan_in, std::size_t fan_out, std::uint64_t seed);
TransformerStack init_stack(const StackConfig& cfg, const std::string& prefix, std::uint64_t seed);

// Several token sequences packed row-wise into one [N, d] activation matrix.
struct PackedBatch {
  std::vector<int> ids;
  std::vector<int> positions;
  std::vector<Segment> segments;
};

PackedBatch pack(std::span<const std::vector<int>> seqs, int prefix_token = -1);

// Final-LayerNormed hidden states [N, d]. Dropout applies when rng != nullptr
// and p > 0.
Tensor run_stack(const TransformerStack& stack, const StackConfig& cfg, const PackedBatch& batch, bool causal,
                 double dropout_p, Rng* rng);

}  // namespace ebmcal

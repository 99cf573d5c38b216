#include "ebmcal/transformer.hpp"

#include <cmath>

#include "ebmcal/rng.hpp"

namespace ebmcal {

Tensor glorot(const std::string& name, std::size_t fan_in, std::size_t fan_out, std::uint64_t seed) {
  Rng rng(derive_seed({seed, hash_name(name)}));
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> w(fan_in * fan_out);
  for (auto& v : w) v = rng.uniform(-a, a);
  return Tensor({fan_in, fan_out}, std::move(w), true);
}

namespace {

Tensor zeros(std::size_t n) { return Tensor({n}, 0.0, true); }
Tensor ones(std::size_t n) { return Tensor({n}, 1.0, true); }

}  // namespace

TransformerStack init_stack(const StackConfig& cfg, const std::string& prefix, std::uint64_t seed) {
  const std::size_t d = cfg.d_model, f = cfg.d_model * cfg.ff_mult;
  TransformerStack s;
  s.tok_emb = glorot(prefix + "tok_emb", cfg.vocab_size, d, seed);
  s.pos_emb = glorot(prefix + "pos_emb", cfg.max_positions, d, seed);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = prefix + "block" + std::to_string(l) + ".";
    BlockParams b;
    b.ln1_g = ones(d);
    b.ln1_b = zeros(d);
    b.wq = glorot(p + "wq", d, d, seed);
    b.bq = zeros(d);
    b.wk = glorot(p + "wk", d, d, seed);
    b.bk = zeros(d);
    b.wv = glorot(p + "wv", d, d, seed);
    b.bv = zeros(d);
    b.wo = glorot(p + "wo", d, d, seed);
    b.bo = zeros(d);
    b.ln2_g = ones(d);
    b.ln2_b = zeros(d);
    b.w1 = glorot(p + "w1", d, f, seed);
    b.b1 = zeros(f);
    b.w2 = glorot(p + "w2", f, d, seed);
    b.b2 = zeros(d);
    s.blocks.push_back(std::move(b));
  }
  s.lnf_g = ones(d);
  s.lnf_b = zeros(d);
  return s;
}

void TransformerStack::append_named(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + "tok_emb", tok_emb});
  out.push_back({prefix + "pos_emb", pos_emb});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const std::string p = prefix + "block" + std::to_string(l) + ".";
    const auto& b = blocks[l];
    for (const auto& [n, t] : std::initializer_list<std::pair<const char*, const Tensor*>>{
             {"ln1_g", &b.ln1_g}, {"ln1_b", &b.ln1_b}, {"wq", &b.wq}, {"bq", &b.bq}, {"wk", &b.wk},
             {"bk", &b.bk},       {"wv", &b.wv},       {"bv", &b.bv}, {"wo", &b.wo}, {"bo", &b.bo},
             {"ln2_g", &b.ln2_g}, {"ln2_b", &b.ln2_b}, {"w1", &b.w1}, {"b1", &b.b1}, {"w2", &b.w2},
             {"b2", &b.b2}}) {
      out.push_back({p + n, *t});
    }
  }
  out.push_back({prefix + "lnf_g", lnf_g});
  out.push_back({prefix + "lnf_b", lnf_b});
}

PackedBatch pack(std::span<const std::vector<int>> seqs, int prefix_token) {
  PackedBatch b;
  for (const auto& s : seqs) {
    Segment seg{b.ids.size(), 0};
    int pos = 0;
    if (prefix_token >= 0) {
      b.ids.push_back(prefix_token);
      b.positions.push_back(pos++);
    }
    for (int id : s) {
      b.ids.push_back(id);
      b.positions.push_back(pos++);
    }
    seg.length = b.ids.size() - seg.start;
    b.segments.push_back(seg);
  }
  return b;
}

Tensor run_stack(const TransformerStack& stack, const StackConfig& cfg, const PackedBatch& batch, bool causal,
                 double dropout_p, Rng* rng) {
  const bool drop = rng != nullptr && dropout_p > 0.0;
  auto maybe_drop = [&](const Tensor& t) { return drop ? dropout(t, dropout_p, *rng) : t; };

  Tensor x = add(embedding(stack.tok_emb, batch.ids), embedding(stack.pos_emb, batch.positions));
  x = maybe_drop(x);
  for (const auto& b : stack.blocks) {
    Tensor h = layer_norm(x, b.ln1_g, b.ln1_b);
    Tensor att = attention(linear(h, b.wq, b.bq), linear(h, b.wk, b.bk), linear(h, b.wv, b.bv), batch.segments,
                           cfg.n_heads, causal);
    x = add(x, maybe_drop(linear(att, b.wo, b.bo)));
    Tensor h2 = layer_norm(x, b.ln2_g, b.ln2_b);
    x = add(x, maybe_drop(linear(gelu(linear(h2, b.w1, b.b1)), b.w2, b.b2)));
  }
  return layer_norm(x, stack.lnf_g, stack.lnf_b);
}

}  // namespace ebmcal

#include "ebmcal/noise_lm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "ebmcal/optim.hpp"

namespace ebmcal {

using nlohmann::json;

void MaskSpec::validate() const {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw NoiseError("mask ratio must be in [0, 1]");
  if (mask_token_id < 0) throw NoiseError("mask_token_id must be a vocabulary id");
}

TokenSeq mask_input(std::span<const int> x, const MaskSpec& spec, Rng& rng) {
  spec.validate();
  TokenSeq out(x.begin(), x.end());
  for (auto& t : out)
    if (rng.bernoulli(spec.ratio)) t = spec.mask_token_id;
  return out;
}

void NoiseLmConfig::validate() const {
  if (vocab_size <= static_cast<std::size_t>(Vocab::kNumSpecials))
    throw NoiseError("vocab_size must exceed the " + std::to_string(Vocab::kNumSpecials) + " special tokens");
  if (max_seq_len == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || ff_mult == 0)
    throw NoiseError("noise LM dimensions must be positive");
  if (d_model % n_heads != 0)
    throw NoiseError("d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
}

StackConfig NoiseLmConfig::stack() const {
  return StackConfig{vocab_size, 3 * max_seq_len + 3, d_model, n_layers, n_heads, ff_mult};
}

int output_token(const NoiseLmConfig& cfg, std::size_t index) {
  if (index + 1 == cfg.output_size()) return Vocab::kEos;
  if (index + 1 > cfg.output_size()) throw NoiseError("output index out of range");
  return Vocab::kNumSpecials + static_cast<int>(index);
}

std::size_t output_index(const NoiseLmConfig& cfg, int token) {
  if (token == Vocab::kEos) return cfg.output_size() - 1;
  if (token < Vocab::kNumSpecials || static_cast<std::size_t>(token) >= cfg.vocab_size)
    throw NoiseError("token " + std::to_string(token) + " is not a content token");
  return static_cast<std::size_t>(token - Vocab::kNumSpecials);
}

std::vector<NamedTensor> NoiseLmState::named_parameters() const {
  std::vector<NamedTensor> out;
  stack.append_named("lm.", out);
  out.push_back({"lm.out_w", out_w});
  out.push_back({"lm.out_b", out_b});
  return out;
}

std::vector<Tensor> NoiseLmState::parameters() const {
  std::vector<Tensor> out;
  for (auto& nt : named_parameters()) out.push_back(nt.tensor);
  return out;
}

NoiseLmState NoiseLmState::clone() const {
  NoiseLmState c = init_noise_lm(config, 0);
  auto dst = c.named_parameters();
  restore_into(named_parameters(), dst);
  return c;
}

NoiseLmState init_noise_lm(const NoiseLmConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  NoiseLmState s;
  s.config = cfg;
  s.stack = init_stack(cfg.stack(), "lm.", seed);
  s.out_w = glorot("lm.out_w", cfg.d_model, cfg.output_size(), seed);
  s.out_b = Tensor({cfg.output_size()}, 0.0, true);
  return s;
}

namespace {

void check_pair(const NoiseLmConfig& cfg, std::span<const int> masked, std::span<const int> target) {
  if (masked.empty()) throw NoiseError("empty conditioning input");
  if (masked.size() > cfg.max_seq_len)
    throw NoiseError("conditioning length " + std::to_string(masked.size()) + " exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  if (2 + masked.size() + target.size() > cfg.stack().max_positions)
    throw NoiseError("sequence of " + std::to_string(target.size()) + " tokens is too long to score");
  for (int t : masked)
    if (t != Vocab::kMask && (t < Vocab::kNumSpecials || static_cast<std::size_t>(t) >= cfg.vocab_size))
      throw NoiseError("conditioning token " + std::to_string(t) + " is neither content nor MASK");
  for (int t : target)
    if (t < Vocab::kNumSpecials || static_cast<std::size_t>(t) >= cfg.vocab_size)
      throw NoiseError("target token " + std::to_string(t) + " is not a content token");
}

// Teacher-forced rows: the row at SEP predicts target[0], the row at
// target[i] predicts target[i+1], the last predicts EOS when requested.
struct TeacherForced {
  Tensor log_probs;  // [rows, output_size]
  std::vector<std::size_t> targets;
  std::vector<std::size_t> pair_of_row;
};

TeacherForced teacher_forced(const NoiseLmState& lm, std::span<const LmPair> pairs, bool include_eos) {
  const auto& cfg = lm.config;
  std::vector<TokenSeq> seqs;
  seqs.reserve(pairs.size());
  for (const auto& p : pairs) {
    check_pair(cfg, p.masked, p.target);
    TokenSeq s{Vocab::kBos};
    s.insert(s.end(), p.masked.begin(), p.masked.end());
    s.push_back(Vocab::kSep);
    s.insert(s.end(), p.target.begin(), p.target.end());
    if (!include_eos && !p.target.empty()) s.pop_back();
    seqs.push_back(std::move(s));
  }
  PackedBatch packed = pack(seqs);
  TeacherForced tf;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const std::size_t sep = packed.segments[i].start + pairs[i].masked.size() + 1;
    const std::size_t n = pairs[i].target.size() + (include_eos ? 1 : 0);
    for (std::size_t j = 0; j < n; ++j) {
      rows.push_back(sep + j);
      tf.targets.push_back(j < pairs[i].target.size() ? output_index(cfg, pairs[i].target[j])
                                                      : cfg.output_size() - 1);
      tf.pair_of_row.push_back(i);
    }
  }
  if (rows.empty()) {
    tf.log_probs = Tensor(Shape{0, cfg.output_size()});
    return tf;
  }
  Tensor h = run_stack(lm.stack, cfg.stack(), packed, /*causal=*/true, 0.0, nullptr);
  tf.log_probs = log_softmax(linear(select_rows(h, rows), lm.out_w, lm.out_b), 1);
  return tf;
}

// Indices of the k largest entries, largest first, ties to the lower index.
std::vector<std::size_t> top_k_indices(std::span<const double> v, std::size_t k) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, v.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); });
  idx.resize(k);
  return idx;
}

double log_sum_exp(std::span<const double> v, std::span<const std::size_t> idx) {
  double m = -INFINITY;
  for (auto i : idx) m = std::max(m, v[i]);
  double z = 0.0;
  for (auto i : idx) z += std::exp(v[i] - m);
  return m + std::log(z);
}

// Log-probability of `target` under the top-k renormalised distribution.
double top_k_log_prob(std::span<const double> log_probs, std::size_t target, std::size_t k) {
  const auto idx = top_k_indices(log_probs, k);
  if (std::find(idx.begin(), idx.end(), target) == idx.end()) return -INFINITY;
  return log_probs[target] - log_sum_exp(log_probs, idx);
}

std::span<const double> row(const Tensor& t, std::size_t r) {
  const std::size_t c = t.dim(1);
  return t.data().subspan(r * c, c);
}

void check_k(const NoiseLmConfig& cfg, std::size_t k) {
  if (k < 1) throw NoiseError("top-k needs k >= 1");
  if (k > cfg.output_size())
    throw NoiseError("k = " + std::to_string(k) + " exceeds the LM output vocabulary of " +
                     std::to_string(cfg.output_size()));
}

}  // namespace

Tensor lm_loss(const NoiseLmState& lm, std::span<const LmPair> pairs) {
  if (pairs.empty()) throw NoiseError("empty LM batch");
  TeacherForced tf = teacher_forced(lm, pairs, true);
  std::vector<int> cols(tf.targets.begin(), tf.targets.end());
  return neg(mean(pick(tf.log_probs, cols)));
}

std::vector<std::vector<double>> next_token_logits(const NoiseLmState& lm, std::span<const int> seq) {
  const auto& cfg = lm.config;
  if (seq.empty() || seq.size() > cfg.stack().max_positions) throw NoiseError("sequence length out of range");
  for (int t : seq)
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) throw NoiseError("token outside vocabulary");
  TokenSeq s(seq.begin(), seq.end());
  PackedBatch packed = pack(std::span<const TokenSeq>(&s, 1));
  Tensor lg = linear(run_stack(lm.stack, cfg.stack(), packed, /*causal=*/true, 0.0, nullptr), lm.out_w, lm.out_b);
  std::vector<std::vector<double>> out;
  for (std::size_t r = 0; r < seq.size(); ++r) {
    auto rr = row(lg, r);
    out.emplace_back(rr.begin(), rr.end());
  }
  return out;
}

std::vector<double> score_log_probs(const NoiseLmState& lm, std::span<const LmPair> pairs, std::size_t top_k) {
  if (top_k > 0) check_k(lm.config, top_k);
  // Extended-precision accumulation: with a 64-bit mantissa, sums of up to 2^11 equal terms are exact, so
  // a constant per-token log-prob c over L tokens scores to the correctly rounded L*c.
  std::vector<long double> acc(pairs.size(), 0.0L);
  constexpr std::size_t chunk = 64;
  for (std::size_t i = 0; i < pairs.size(); i += chunk) {
    auto part = pairs.subspan(i, std::min(chunk, pairs.size() - i));
    TeacherForced tf = teacher_forced(lm, part, false);
    for (std::size_t r = 0; r < tf.targets.size(); ++r) {
      auto lp = row(tf.log_probs, r);
      acc[i + tf.pair_of_row[r]] += top_k > 0 ? top_k_log_prob(lp, tf.targets[r], top_k) : lp[tf.targets[r]];
    }
  }
  return {acc.begin(), acc.end()};
}

double score_log_prob(const NoiseLmState& lm, std::span<const int> masked, std::span<const int> x,
                      std::size_t top_k) {
  LmPair p{{masked.begin(), masked.end()}, {x.begin(), x.end()}};
  return score_log_probs(lm, std::span<const LmPair>(&p, 1), top_k)[0];
}

double perplexity(const NoiseLmState& lm, std::span<const LmPair> pairs) {
  if (pairs.empty()) throw NoiseError("perplexity of an empty set");
  double nll = 0.0;
  std::size_t n = 0;
  constexpr std::size_t chunk = 64;
  for (std::size_t i = 0; i < pairs.size(); i += chunk) {
    TeacherForced tf = teacher_forced(lm, pairs.subspan(i, std::min(chunk, pairs.size() - i)), true);
    for (std::size_t r = 0; r < tf.targets.size(); ++r) nll -= row(tf.log_probs, r)[tf.targets[r]];
    n += tf.targets.size();
  }
  return std::exp(nll / static_cast<double>(n));
}

double teacher_forced_accuracy(const NoiseLmState& lm, std::span<const LmPair> pairs) {
  std::size_t hit = 0, n = 0;
  constexpr std::size_t chunk = 64;
  for (std::size_t i = 0; i < pairs.size(); i += chunk) {
    TeacherForced tf = teacher_forced(lm, pairs.subspan(i, std::min(chunk, pairs.size() - i)), false);
    for (std::size_t r = 0; r < tf.targets.size(); ++r) {
      auto lp = row(tf.log_probs, r);
      hit += static_cast<std::size_t>(std::max_element(lp.begin(), lp.end()) - lp.begin()) == tf.targets[r];
    }
    n += tf.targets.size();
  }
  if (n == 0) throw NoiseError("no target tokens to evaluate");
  return static_cast<double>(hit) / static_cast<double>(n);
}

LmTrainLog finetune_mlm(NoiseLmState& lm, std::span<const TokenSeq> corpus, const MaskSpec& spec,
                        const LmSchedule& schedule) {
  spec.validate();
  if (corpus.empty()) throw NoiseError("empty corpus");
  if (schedule.batch_size == 0) throw NoiseError("batch_size must be positive");
  if (!(schedule.heldout_fraction > 0.0 && schedule.heldout_fraction < 1.0))
    throw NoiseError("heldout_fraction must be in (0, 1)");
  for (const auto& x : corpus) check_pair(lm.config, x, x);

  const std::size_t n = corpus.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(derive_seed({schedule.seed, hash_name("lm-heldout-split")}));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[split_rng.uniform_index(i)]);
  const std::size_t n_held = std::max<std::size_t>(1, static_cast<std::size_t>(schedule.heldout_fraction * n));
  std::vector<std::size_t> held(order.end() - static_cast<std::ptrdiff_t>(n_held), order.end());
  std::vector<std::size_t> train(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_held));
  // A single-sequence corpus trains and evaluates on the same sequence.
  if (train.empty()) train = held;

  std::vector<LmPair> held_pairs;
  for (auto i : held) {
    Rng r(derive_seed({schedule.seed, hash_name("lm-heldout-mask"), i}));
    held_pairs.push_back({mask_input(corpus[i], spec, r), corpus[i]});
  }

  LmTrainLog log;
  log.heldout_perplexity.push_back(perplexity(lm, held_pairs));
  std::vector<Tensor> params = lm.parameters();
  AdamState adam = AdamState::for_params(params);
  for (std::size_t e = 0; e < schedule.epochs; ++e) {
    std::vector<std::size_t> perm = train;
    Rng pr(derive_seed({schedule.seed, hash_name("lm-perm"), e}));
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[pr.uniform_index(i)]);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t b = 0; b < perm.size(); b += schedule.batch_size) {
      std::vector<LmPair> batch;
      for (std::size_t j = b; j < std::min(perm.size(), b + schedule.batch_size); ++j) {
        Rng mr(derive_seed({schedule.seed, hash_name("lm-mask"), e, perm[j]}));
        batch.push_back({mask_input(corpus[perm[j]], spec, mr), corpus[perm[j]]});
      }
      Tape tape;
      {
        GradScope scope(tape);
        Tensor loss = lm_loss(lm, batch);
        tape.backward(loss);
        loss_sum += loss.item();
      }
      adam_step(params, adam, schedule.lr);
      zero_grads(params);
      ++steps;
    }
    log.train_loss.push_back(loss_sum / static_cast<double>(steps));
    log.heldout_perplexity.push_back(perplexity(lm, held_pairs));
  }
  return log;
}

namespace {

// Incremental causal decoding with per-sequence key/value caches. Each call
// feeds one token to each listed sequence and returns next-token logits.
class Decoder {
 public:
  Decoder(const NoiseLmState& lm, std::size_t n_seqs)
      : lm_(lm),
        d_(lm.config.d_model),
        heads_(lm.config.n_heads),
        keys_(n_seqs, std::vector<std::vector<double>>(lm.config.n_layers)),
        values_(n_seqs, std::vector<std::vector<double>>(lm.config.n_layers)) {}

  Tensor step(std::span<const std::size_t> seq_ids, std::span<const int> tokens, std::span<const int> positions) {
    const std::size_t n = seq_ids.size();
    Tensor x = add(embedding(lm_.stack.tok_emb, tokens), embedding(lm_.stack.pos_emb, positions));
    for (std::size_t l = 0; l < lm_.stack.blocks.size(); ++l) {
      const auto& b = lm_.stack.blocks[l];
      Tensor h = layer_norm(x, b.ln1_g, b.ln1_b);
      Tensor q = linear(h, b.wq, b.bq), k = linear(h, b.wk, b.bk), v = linear(h, b.wv, b.bv);
      std::vector<double> att(n * d_, 0.0);
      for (std::size_t r = 0; r < n; ++r) {
        auto& kc = keys_[seq_ids[r]][l];
        auto& vc = values_[seq_ids[r]][l];
        kc.insert(kc.end(), k.data().begin() + static_cast<std::ptrdiff_t>(r * d_),
                  k.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * d_));
        vc.insert(vc.end(), v.data().begin() + static_cast<std::ptrdiff_t>(r * d_),
                  v.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * d_));
        attend(q.data().data() + r * d_, kc, vc, att.data() + r * d_);
      }
      x = add(x, linear(Tensor({n, d_}, std::move(att)), b.wo, b.bo));
      Tensor h2 = layer_norm(x, b.ln2_g, b.ln2_b);
      x = add(x, linear(gelu(linear(h2, b.w1, b.b1)), b.w2, b.b2));
    }
    return linear(layer_norm(x, lm_.stack.lnf_g, lm_.stack.lnf_b), lm_.out_w, lm_.out_b);
  }

 private:
  void attend(const double* q, const std::vector<double>& kc, const std::vector<double>& vc, double* out) const {
    const std::size_t len = kc.size() / d_, dh = d_ / heads_;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> p(len);
    for (std::size_t h = 0; h < heads_; ++h) {
      const std::size_t c0 = h * dh;
      double m = -INFINITY;
      for (std::size_t j = 0; j < len; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) acc += q[c0 + c] * kc[j * d_ + c0 + c];
        p[j] = acc * sc;
        m = std::max(m, p[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) z += p[j] = std::exp(p[j] - m);
      for (std::size_t j = 0; j < len; ++j) {
        const double w = p[j] / z;
        for (std::size_t c = 0; c < dh; ++c) out[c0 + c] += w * vc[j * d_ + c0 + c];
      }
    }
  }

  const NoiseLmState& lm_;
  std::size_t d_, heads_;
  std::vector<std::vector<std::vector<double>>> keys_, values_;  // [seq][layer] flat rows
};

struct Generation {
  TokenSeq prompt;
  std::size_t fed = 0;
  std::size_t max_len = 0;
  bool done = false;
  Rng rng;
  NoiseSample sample;
};

}  // namespace

namespace {

std::vector<NoiseSample> decode(const NoiseLmState& lm, std::span<const NoiseRequest> requests, const MaskSpec* spec,
                                std::size_t k) {
  const auto& cfg = lm.config;
  check_k(cfg, k);
  std::vector<Generation> gens;
  gens.reserve(requests.size());
  for (const auto& rq : requests) {
    if (rq.tokens.empty()) throw NoiseError("cannot generate noise for an empty input");
    check_pair(cfg, rq.tokens, {});
    Generation g{{}, 0, cfg.max_generation(rq.tokens.size()), false, Rng(rq.seed), {}};
    g.sample.source_index = rq.source_index;
    g.sample.seed = rq.seed;
    g.sample.masked = spec ? mask_input(rq.tokens, *spec, g.rng) : rq.tokens;
    g.prompt.push_back(Vocab::kBos);
    g.prompt.insert(g.prompt.end(), g.sample.masked.begin(), g.sample.masked.end());
    g.prompt.push_back(Vocab::kSep);
    gens.push_back(std::move(g));
  }

  Decoder dec(lm, gens.size());
  const std::size_t eos = cfg.output_size() - 1;
  std::vector<double> lp(cfg.output_size()), weights;
  for (;;) {
    std::vector<std::size_t> ids;
    std::vector<int> toks, pos;
    for (std::size_t i = 0; i < gens.size(); ++i) {
      auto& g = gens[i];
      if (g.done) continue;
      ids.push_back(i);
      toks.push_back(g.fed < g.prompt.size() ? g.prompt[g.fed] : g.sample.tokens.back());
      pos.push_back(static_cast<int>(g.fed));
    }
    if (ids.empty()) break;
    Tensor logits = dec.step(ids, toks, pos);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      auto& g = gens[ids[r]];
      if (++g.fed < g.prompt.size()) continue;
      auto lg = row(logits, r);
      double mx = -INFINITY, z = 0.0;
      for (double v : lg) mx = std::max(mx, v);
      for (double v : lg) z += std::exp(v - mx);
      const double lse = mx + std::log(z);
      for (std::size_t c = 0; c < lg.size(); ++c) lp[c] = lg[c] - lse;
      const auto top = top_k_indices(lp, k);
      const double top_lse = log_sum_exp(lp, top);
      weights.clear();
      for (auto c : top) weights.push_back(std::exp(lp[c] - top_lse));
      const std::size_t pick_idx = top[g.rng.categorical(weights)];
      if (pick_idx == eos) {
        g.done = true;
        continue;
      }
      g.sample.tokens.push_back(output_token(cfg, pick_idx));
      g.sample.log_prob += lp[pick_idx] - top_lse;
      g.sample.full_log_prob += lp[pick_idx];
      if (g.sample.tokens.size() >= g.max_len) g.done = true;
    }
  }
  std::vector<NoiseSample> out;
  out.reserve(gens.size());
  for (auto& g : gens) out.push_back(std::move(g.sample));
  return out;
}

}  // namespace

std::vector<NoiseSample> generate_noise(const NoiseLmState& lm, std::span<const NoiseRequest> requests,
                                        const MaskSpec& spec, std::size_t k) {
  spec.validate();
  return decode(lm, requests, &spec, k);
}

std::vector<NoiseSample> complete_masked(const NoiseLmState& lm, std::span<const NoiseRequest> requests,
                                         std::size_t k) {
  return decode(lm, requests, nullptr, k);
}

NoiseSample generate_noise(const NoiseLmState& lm, std::span<const int> x, const MaskSpec& spec, std::size_t k,
                           Rng& rng) {
  NoiseRequest rq{0, {x.begin(), x.end()}, rng.next()};
  return generate_noise(lm, std::span<const NoiseRequest>(&rq, 1), spec, k)[0];
}

void write_noise_cache(const std::filesystem::path& path, std::span<const NoiseSample> samples) {
  std::ofstream os(path);
  if (!os) throw NoiseError("cannot write " + path.string());
  for (const auto& s : samples) {
    json j = json::object();
    j["source_index"] = s.source_index;
    j["tokens"] = s.tokens;
    j["log_prob"] = s.log_prob;
    j["full_log_prob"] = s.full_log_prob;
    j["seed"] = s.seed;
    j["masked"] = s.masked;
    os << j.dump() << '\n';
  }
}

std::vector<NoiseSample> read_noise_cache(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw NoiseError("cannot read " + path.string());
  std::vector<NoiseSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      NoiseSample s;
      s.source_index = j.at("source_index").get<std::size_t>();
      s.tokens = j.at("tokens").get<TokenSeq>();
      s.log_prob = j.at("log_prob").get<double>();
      s.full_log_prob = j.value("full_log_prob", s.log_prob);
      s.seed = j.at("seed").get<std::uint64_t>();
      s.masked = j.value("masked", TokenSeq{});
      out.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw NoiseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

namespace {

std::filesystem::path with_ext(std::filesystem::path p, const char* ext) { return p += ext; }

}  // namespace

void save_noise_lm(const std::filesystem::path& stem, const NoiseLmState& lm) {
  save_checkpoint(with_ext(stem, ".ebmc"), lm.named_parameters());
  std::ofstream os(with_ext(stem, ".json"));
  if (!os) throw CheckpointError("cannot write " + with_ext(stem, ".json").string());
  const auto& c = lm.config;
  os << json{{"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"d_model", c.d_model},
             {"n_layers", c.n_layers},     {"n_heads", c.n_heads},         {"ff_mult", c.ff_mult}}
            .dump(2)
     << '\n';
}

NoiseLmState load_noise_lm(const std::filesystem::path& stem) {
  std::ifstream is(with_ext(stem, ".json"));
  if (!is) throw CheckpointError("cannot read " + with_ext(stem, ".json").string());
  NoiseLmConfig c;
  try {
    json j = json::parse(is);
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.ff_mult = j.at("ff_mult").get<std::size_t>();
  } catch (const json::exception& e) {
    throw CheckpointError(with_ext(stem, ".json").string() + ": " + e.what());
  }
  NoiseLmState s = init_noise_lm(c, 0);
  auto dst = s.named_parameters();
  restore_into(load_checkpoint(with_ext(stem, ".ebmc")), dst);
  return s;
}

namespace {

constexpr int kMaxRedraws = 64;

// One nonempty sample per slot; slot i is (source_index, base seed parts).
std::vector<NoiseSample> generate_nonempty(const NoiseLmState& lm, std::span<const Example> train,
                                           const std::vector<std::pair<std::size_t, std::uint64_t>>& slots,
                                           const MaskSpec& spec, std::size_t k) {
  std::vector<NoiseSample> out(slots.size());
  std::vector<std::size_t> pending(slots.size());
  std::iota(pending.begin(), pending.end(), 0);
  for (int attempt = 0; !pending.empty(); ++attempt) {
    if (attempt == kMaxRedraws)
      throw NoiseError("noise LM produced " + std::to_string(kMaxRedraws) + " empty completions for example " +
                       std::to_string(slots[pending[0]].first));
    std::vector<NoiseRequest> reqs;
    for (auto s : pending) {
      const auto [idx, base] = slots[s];
      if (idx >= train.size()) throw NoiseError("train index " + std::to_string(idx) + " out of range");
      reqs.push_back({idx, train[idx].tokens, attempt == 0 ? base : derive_seed({base, static_cast<std::uint64_t>(attempt)})});
    }
    auto gen = generate_noise(lm, reqs, spec, k);
    std::vector<std::size_t> still;
    for (std::size_t i = 0; i < pending.size(); ++i) {
      if (gen[i].tokens.empty()) {
        still.push_back(pending[i]);
      } else {
        out[pending[i]] = std::move(gen[i]);
      }
    }
    pending = std::move(still);
  }
  return out;
}

}  // namespace

LmNoiseSource::LmNoiseSource(const NoiseLmState& lm, std::span<const Example> train, MaskSpec spec, std::size_t k)
    : lm_(lm), train_(train), spec_(spec), k_(k) {
  spec_.validate();
  check_k(lm.config, k);
}

std::vector<TokenSeq> LmNoiseSource::draw(std::span<const std::size_t> train_indices, int K,
                                          std::uint64_t step_seed) {
  if (K < 1) throw NoiseError("K must be >= 1");
  std::vector<std::pair<std::size_t, std::uint64_t>> slots;
  for (auto idx : train_indices)
    for (int j = 0; j < K; ++j) slots.emplace_back(idx, derive_seed({step_seed, idx, static_cast<std::uint64_t>(j)}));
  std::vector<TokenSeq> out;
  for (auto& s : generate_nonempty(lm_, train_, slots, spec_, k_)) out.push_back(std::move(s.tokens));
  return out;
}

std::vector<NoiseSample> build_noise_pool(const NoiseLmState& lm, std::span<const Example> train, const MaskSpec& spec,
                                          std::size_t k, std::size_t per_example, std::uint64_t seed) {
  check_k(lm.config, k);
  if (per_example == 0) throw NoiseError("noise pool needs at least one sample per example");
  std::vector<NoiseSample> out;
  constexpr std::size_t chunk = 512;
  std::vector<std::pair<std::size_t, std::uint64_t>> slots;
  auto flush = [&] {
    for (auto& s : generate_nonempty(lm, train, slots, spec, k)) out.push_back(std::move(s));
    slots.clear();
  };
  for (std::size_t i = 0; i < train.size(); ++i) {
    for (std::size_t j = 0; j < per_example; ++j) slots.emplace_back(i, derive_seed({seed, i, j}));
    if (slots.size() >= chunk) flush();
  }
  if (!slots.empty()) flush();
  return out;
}

PooledNoiseSource::PooledNoiseSource(std::span<const NoiseSample> pool, std::size_t n_train) : pool_(n_train) {
  for (const auto& s : pool) {
    if (s.source_index >= n_train)
      throw NoiseError("pooled sample refers to example " + std::to_string(s.source_index) + " of " +
                       std::to_string(n_train));
    if (s.tokens.empty()) throw NoiseError("pooled sample for example " + std::to_string(s.source_index) + " is empty");
    pool_[s.source_index].push_back(s.tokens);
  }
}

std::vector<TokenSeq> PooledNoiseSource::draw(std::span<const std::size_t> train_indices, int K,
                                              std::uint64_t step_seed) {
  if (K < 1) throw NoiseError("K must be >= 1");
  std::vector<TokenSeq> out;
  for (auto idx : train_indices) {
    if (idx >= pool_.size() || pool_[idx].empty())
      throw NoiseError("no pooled noise for example " + std::to_string(idx));
    const auto& p = pool_[idx];
    if (p.size() == static_cast<std::size_t>(K)) {
      out.insert(out.end(), p.begin(), p.end());
      continue;
    }
    Rng r(derive_seed({step_seed, idx}));
    for (int j = 0; j < K; ++j) out.push_back(p[r.uniform_index(p.size())]);
  }
  return out;
}

}  // namespace ebmcal

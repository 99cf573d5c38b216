#include "ebmcal/encoder.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

namespace ebmcal {

using nlohmann::json;

std::string_view to_string(HeadKind k) { return k == HeadKind::Linear ? "linear" : "mlp"; }

HeadKind head_kind_from_string(std::string_view s) {
  if (s == "linear") return HeadKind::Linear;
  if (s == "mlp") return HeadKind::Mlp;
  throw EncoderError("unknown head kind '" + std::string(s) + "' (expected linear or mlp)");
}

void EncoderConfig::validate() const {
  if (vocab_size == 0 || max_seq_len == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || ff_mult == 0)
    throw EncoderError("encoder dimensions must be positive");
  if (d_model % n_heads != 0)
    throw EncoderError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                       std::to_string(n_heads));
  if (n_classes < 2) throw EncoderError("n_classes must be >= 2");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw EncoderError("dropout must be in [0, 1)");
  if (cls_id < 0 || static_cast<std::size_t>(cls_id) >= vocab_size) throw EncoderError("cls_id out of range");
}

StackConfig EncoderConfig::stack() const {
  return StackConfig{vocab_size, max_seq_len + 1, d_model, n_layers, n_heads, ff_mult};
}

std::vector<NamedTensor> EncoderState::named_parameters() const {
  std::vector<NamedTensor> out;
  stack.append_named("enc.", out);
  if (config.head == HeadKind::Mlp) {
    out.push_back({"head.w1", head_w1});
    out.push_back({"head.b1", head_b1});
  }
  out.push_back({"head.cls_w", cls_w});
  out.push_back({"head.cls_b", cls_b});
  out.push_back({"head.scalar_w", scalar_w});
  out.push_back({"head.scalar_b", scalar_b});
  return out;
}

std::vector<Tensor> EncoderState::parameters() const {
  std::vector<Tensor> out;
  for (auto& nt : named_parameters()) out.push_back(nt.tensor);
  return out;
}

EncoderState EncoderState::clone() const {
  EncoderState c = init_encoder(config, 0);
  auto dst = c.named_parameters();
  restore_into(named_parameters(), dst);
  return c;
}

EncoderState init_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  EncoderState s;
  s.config = cfg;
  s.stack = init_stack(cfg.stack(), "enc.", seed);
  const std::size_t d = cfg.d_model, c = cfg.n_classes;
  if (cfg.head == HeadKind::Mlp) {
    s.head_w1 = glorot("head.w1", d, d, seed);
    s.head_b1 = Tensor({d}, 0.0, true);
  }
  s.cls_w = glorot("head.cls_w", d, c, seed);
  s.cls_b = Tensor({c}, 0.0, true);
  s.scalar_w = glorot("head.scalar_w", d, 1, seed);
  s.scalar_b = Tensor({1}, 0.0, true);
  return s;
}

void validate_input(const EncoderConfig& cfg, std::span<const int> x) {
  if (x.empty()) throw EncoderError("empty input sequence");
  if (x.size() > cfg.max_seq_len)
    throw EncoderError("sequence length " + std::to_string(x.size()) + " exceeds max_seq_len " +
                       std::to_string(cfg.max_seq_len));
  for (int id : x)
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
      throw EncoderError("token id " + std::to_string(id) + " outside vocabulary of size " +
                         std::to_string(cfg.vocab_size));
}

EncoderOutput encoder_forward(const EncoderState& state, std::span<const TokenSeq> batch, const ForwardOptions& opts) {
  if (batch.empty()) throw EncoderError("empty batch");
  const auto& cfg = state.config;
  for (const auto& x : batch) validate_input(cfg, x);

  PackedBatch packed = pack(batch, cfg.cls_id);
  Tensor h = run_stack(state.stack, cfg.stack(), packed, /*causal=*/false, cfg.dropout, opts.dropout_rng);
  std::vector<std::size_t> cls_rows;
  for (const auto& seg : packed.segments) cls_rows.push_back(seg.start);

  EncoderOutput out;
  out.pooled = select_rows(h, cls_rows);
  Tensor feat = out.pooled;
  if (cfg.head == HeadKind::Mlp) feat = gelu(linear(feat, state.head_w1, state.head_b1));
  out.logits = linear(feat, state.cls_w, state.cls_b);
  out.scalar = reshape(linear(out.pooled, state.scalar_w, state.scalar_b), {batch.size()});
  return out;
}

namespace {

std::vector<double> single_row(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

EncoderOutput forward_one(const EncoderState& state, std::span<const int> x) {
  TokenSeq seq(x.begin(), x.end());
  return encoder_forward(state, std::span<const TokenSeq>(&seq, 1));
}

}  // namespace

std::vector<double> encode(const EncoderState& state, std::span<const int> x) {
  return single_row(forward_one(state, x).pooled);
}

std::vector<double> logits(const EncoderState& state, std::span<const int> x) {
  return single_row(forward_one(state, x).logits);
}

std::vector<double> posterior(const EncoderState& state, std::span<const int> x) {
  return single_row(softmax(forward_one(state, x).logits, 1));
}

std::vector<std::vector<double>> batch_logits(const EncoderState& state, std::span<const TokenSeq> xs,
                                              std::size_t chunk) {
  std::vector<std::vector<double>> out;
  out.reserve(xs.size());
  const std::size_t c = state.config.n_classes;
  for (std::size_t i = 0; i < xs.size(); i += chunk) {
    auto part = xs.subspan(i, std::min(chunk, xs.size() - i));
    Tensor lg = encoder_forward(state, part).logits;
    for (std::size_t r = 0; r < part.size(); ++r)
      out.emplace_back(lg.data().begin() + static_cast<std::ptrdiff_t>(r * c),
                       lg.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
  }
  return out;
}

Tensor ce_loss(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw ShapeError("ce_loss: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  if (labels.empty()) throw EncoderError("ce_loss: empty batch");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= logits.dim(1))
      throw EncoderError("label " + std::to_string(y) + " outside [0, " + std::to_string(logits.dim(1)) + ")");
  return neg(mean(pick(log_softmax(logits, 1), labels)));
}

double ce_loss(const EncoderState& state, std::span<const Example> batch) {
  std::vector<TokenSeq> xs;
  std::vector<int> ys;
  for (const auto& ex : batch) {
    xs.push_back(ex.tokens);
    ys.push_back(ex.label);
  }
  for (int y : ys)
    if (y < 0 || static_cast<std::size_t>(y) >= state.config.n_classes)
      throw EncoderError("label " + std::to_string(y) + " outside [0, " + std::to_string(state.config.n_classes) +
                         ")");
  return ce_loss(encoder_forward(state, xs).logits, ys).item();
}

namespace {

json config_json(const EncoderConfig& c) {
  return json{{"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"d_model", c.d_model},
              {"n_layers", c.n_layers},     {"n_heads", c.n_heads},         {"n_classes", c.n_classes},
              {"ff_mult", c.ff_mult},       {"dropout", c.dropout},         {"head", to_string(c.head)},
              {"cls_id", c.cls_id}};
}

EncoderConfig config_from_json(const json& j) {
  EncoderConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_classes = j.at("n_classes").get<std::size_t>();
  c.ff_mult = j.at("ff_mult").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.head = head_kind_from_string(j.at("head").get<std::string>());
  c.cls_id = j.at("cls_id").get<int>();
  c.validate();
  return c;
}

std::filesystem::path with_ext(std::filesystem::path p, const char* ext) { return p += ext; }

}  // namespace

void save_encoder(const std::filesystem::path& stem, const EncoderState& state) {
  save_checkpoint(with_ext(stem, ".ebmc"), state.named_parameters());
  std::ofstream os(with_ext(stem, ".json"));
  if (!os) throw CheckpointError("cannot write " + with_ext(stem, ".json").string());
  os << config_json(state.config).dump(2) << '\n';
}

EncoderState load_encoder(const std::filesystem::path& stem) {
  std::ifstream is(with_ext(stem, ".json"));
  if (!is) throw CheckpointError("cannot read " + with_ext(stem, ".json").string());
  EncoderConfig cfg;
  try {
    cfg = config_from_json(json::parse(is));
  } catch (const json::exception& e) {
    throw CheckpointError(with_ext(stem, ".json").string() + ": " + e.what());
  }
  EncoderState s = init_encoder(cfg, 0);
  auto dst = s.named_parameters();
  restore_into(load_checkpoint(with_ext(stem, ".ebmc")), dst);
  return s;
}

}  // namespace ebmcal

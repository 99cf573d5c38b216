#include "ebmcal/energy.hpp"

#include <cmath>
#include <string>

namespace ebmcal {

std::string_view to_string(EnergyVariant v) {
  switch (v) {
    case EnergyVariant::Scalar:
      return "scalar";
    case EnergyVariant::Hidden:
      return "hidden";
    case EnergyVariant::SharpHidden:
      return "sharp_hidden";
  }
  return "?";
}

EnergyVariant energy_variant_from_string(std::string_view s) {
  if (s == "scalar") return EnergyVariant::Scalar;
  if (s == "hidden") return EnergyVariant::Hidden;
  if (s == "sharp_hidden") return EnergyVariant::SharpHidden;
  throw NceError("unknown energy variant '" + std::string(s) + "' (expected scalar, hidden or sharp_hidden)");
}

void NceConfig::validate() const {
  if (K < 1) throw NceError("K must be >= 1, got " + std::to_string(K));
}

Tensor energy_hat(EnergyVariant v, const EncoderOutput& out) {
  switch (v) {
    case EnergyVariant::Scalar:
      return out.scalar;
    case EnergyVariant::Hidden:
      return neg(logsumexp(out.logits, 1));
    case EnergyVariant::SharpHidden:
      return neg(max(out.logits, 1));
  }
  throw NceError("bad energy variant");
}

double energy_hat(EnergyVariant v, const EncoderState& state, std::span<const int> x) {
  TokenSeq seq(x.begin(), x.end());
  return energy_hat(v, encoder_forward(state, std::span<const TokenSeq>(&seq, 1))).item();
}

double residual_energy(double e_hat, double log_pn) {
  if (!std::isfinite(log_pn)) throw NceError("log P_N must be finite");
  return e_hat - log_pn;
}

double residual_energy(EnergyVariant v, const EncoderState& state, std::span<const int> x, double log_pn) {
  if (!std::isfinite(log_pn)) throw NceError("log P_N must be finite");
  return residual_energy(energy_hat(v, state, x), log_pn);
}

namespace {

void check_ratio(std::size_t n_data, std::size_t n_noise, int K) {
  if (K < 1) throw NceError("K must be >= 1, got " + std::to_string(K));
  if (n_data == 0) throw NceError("empty data batch");
  if (n_noise != static_cast<std::size_t>(K) * n_data)
    throw NceError("noise batch has " + std::to_string(n_noise) + " samples, expected K * " + std::to_string(n_data) +
                   " = " + std::to_string(static_cast<std::size_t>(K) * n_data));
}

void check_vector(const Tensor& t, const char* what) {
  if (t.rank() != 1) throw ShapeError(std::string(what) + " energies must be a vector, got " + shape_str(t.shape()));
}

// Per-row log(exp(-E) + K P_N) - subtrahend, with the pair stacked as a
// two-column matrix so the sum is a genuine logsumexp.
Tensor log_denominator(const Tensor& r, std::span<const double> log_pn, double log_k) {
  const std::size_t n = r.dim(0);
  if (log_pn.size() != n) throw NceError("log P_N count does not match the batch");
  std::vector<double> c(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(log_pn[i])) throw NceError("log P_N must be finite");
    c[i] = log_k + log_pn[i];
  }
  Tensor stacked = concat({reshape(neg(r), {n, 1}), Tensor({n, 1}, std::move(c))}, 1);
  return logsumexp(stacked, 1);
}

}  // namespace

Tensor nce_simplified(const Tensor& e_data, const Tensor& e_noise, int K) {
  check_vector(e_data, "data");
  check_vector(e_noise, "noise");
  check_ratio(e_data.dim(0), e_noise.dim(0), K);
  const double log_k = std::log(static_cast<double>(K));
  Tensor data_term = mean(softplus(add_scalar(e_data, log_k)));
  Tensor noise_term = mean(softplus(add_scalar(neg(e_noise), -log_k)));
  return add(data_term, scale(noise_term, static_cast<double>(K)));
}

Tensor nce_general(const Tensor& r_data, const Tensor& r_noise, std::span<const double> log_pn_data,
                   std::span<const double> log_pn_noise, int K) {
  check_vector(r_data, "data");
  check_vector(r_noise, "noise");
  check_ratio(r_data.dim(0), r_noise.dim(0), K);
  const double log_k = std::log(static_cast<double>(K));
  // -log(P~ / (P~ + K P_N)) = log(P~ + K P_N) + E
  Tensor data_term = mean(add(log_denominator(r_data, log_pn_data, log_k), r_data));
  // -log(K P_N / (P~ + K P_N)) = log(P~ + K P_N) - log K - log P_N
  std::vector<double> c(log_pn_noise.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = log_k + log_pn_noise[i];
  Tensor noise_term = mean(sub(log_denominator(r_noise, log_pn_noise, log_k), Tensor::vector(std::move(c))));
  return add(data_term, scale(noise_term, static_cast<double>(K)));
}

namespace {

// Ê for data rows then noise rows from a single packed forward pass.
std::pair<Tensor, Tensor> split_energies(const EncoderState& state, std::span<const TokenSeq> data,
                                         std::span<const TokenSeq> noise, EnergyVariant v) {
  std::vector<TokenSeq> all(data.begin(), data.end());
  all.insert(all.end(), noise.begin(), noise.end());
  Tensor e = energy_hat(v, encoder_forward(state, all));
  std::vector<std::size_t> di(data.size()), ni(noise.size());
  for (std::size_t i = 0; i < di.size(); ++i) di[i] = i;
  for (std::size_t i = 0; i < ni.size(); ++i) ni[i] = data.size() + i;
  return {reshape(select_rows(reshape(e, {all.size(), 1}), di), {di.size()}),
          reshape(select_rows(reshape(e, {all.size(), 1}), ni), {ni.size()})};
}

}  // namespace

double nce_loss_simplified(const EncoderState& state, std::span<const TokenSeq> data, std::span<const TokenSeq> noise,
                           const NceConfig& cfg) {
  cfg.validate();
  check_ratio(data.size(), noise.size(), cfg.K);
  auto [ed, en] = split_energies(state, data, noise, cfg.variant);
  return nce_simplified(ed, en, cfg.K).item();
}

double nce_loss_general(const EncoderState& state, std::span<const TokenSeq> data, std::span<const TokenSeq> noise,
                        std::span<const double> log_pn_data, std::span<const double> log_pn_noise,
                        const NceConfig& cfg) {
  cfg.validate();
  check_ratio(data.size(), noise.size(), cfg.K);
  if (log_pn_data.size() != data.size() || log_pn_noise.size() != noise.size())
    throw NceError("log P_N values must align with the data and noise samples");
  auto [ed, en] = split_energies(state, data, noise, cfg.variant);
  auto residual = [](const Tensor& e, std::span<const double> lp) {
    for (double v : lp)
      if (!std::isfinite(v)) throw NceError("log P_N must be finite");
    return sub(e, Tensor::vector({lp.begin(), lp.end()}));
  };
  return nce_general(residual(ed, log_pn_data), residual(en, log_pn_noise), log_pn_data, log_pn_noise, cfg.K).item();
}

JointLoss joint_loss(const EncoderState& state, std::span<const Example> data, std::span<const TokenSeq> noise,
                     const NceConfig& cfg, const ForwardOptions& opts) {
  cfg.validate();
  check_ratio(data.size(), noise.size(), cfg.K);
  const std::size_t nd = data.size(), nn = noise.size();
  std::vector<TokenSeq> all;
  all.reserve(nd + nn);
  std::vector<int> labels;
  for (const auto& ex : data) {
    all.push_back(ex.tokens);
    labels.push_back(ex.label);
  }
  all.insert(all.end(), noise.begin(), noise.end());

  EncoderOutput out = encoder_forward(state, all, opts);
  std::vector<std::size_t> di(nd), ni(nn);
  for (std::size_t i = 0; i < nd; ++i) di[i] = i;
  for (std::size_t i = 0; i < nn; ++i) ni[i] = nd + i;

  JointLoss jl;
  jl.ce = ce_loss(select_rows(out.logits, di), labels);
  Tensor e = reshape(energy_hat(cfg.variant, out), {nd + nn, 1});
  jl.nce = nce_simplified(reshape(select_rows(e, di), {nd}), reshape(select_rows(e, ni), {nn}), cfg.K);
  jl.joint = add(jl.ce, jl.nce);
  return jl;
}

}  // namespace ebmcal

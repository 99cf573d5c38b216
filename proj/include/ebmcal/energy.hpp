#pragma once

// Energy functions over the encoder and the noise-contrastive objectives.
//
// Ê(x) is one of
//   Scalar:      g_S(enc(x))
//   Hidden:      -logsumexp_y logits[y]
//   SharpHidden: -max_y logits[y]
// and the residual energy against the noise distribution is
// E(x) = Ê(x) - log P_N(x), with unnormalised density exp(-E(x)).

#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "ebmcal/data.hpp"
#include "ebmcal/encoder.hpp"
#include "ebmcal/tensor.hpp"

namespace ebmcal {

class NceError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class EnergyVariant { Scalar, Hidden, SharpHidden };

std::string_view to_string(EnergyVariant v);
EnergyVariant energy_variant_from_string(std::string_view s);

struct NceConfig {
  int K = 8;
  EnergyVariant variant = EnergyVariant::Hidden;

  void validate() const;
};

struct LossBreakdown {
  double ce = 0.0;
  double nce = 0.0;
  double joint = 0.0;
};

// Ê for every row of a forward pass, shape [B].
Tensor energy_hat(EnergyVariant v, const EncoderOutput& out);
double energy_hat(EnergyVariant v, const EncoderState& state, std::span<const int> x);

// Ê - log_pn; throws NceError when log_pn is not finite.
double residual_energy(double e_hat, double log_pn);
double residual_energy(EnergyVariant v, const EncoderState& state, std::span<const int> x, double log_pn);

// mean_data softplus(Ê+ + ln K) + K * mean_noise softplus(-Ê- - ln K).
// Requires |e_noise| == K * |e_data|.
Tensor nce_simplified(const Tensor& e_data, const Tensor& e_noise, int K);

// The general objective on residual energies E, evaluated literally:
// per data sample  -log(P~ / (P~ + K P_N)),  per noise sample
// -log(K P_N / (P~ + K P_N)), with P~ = exp(-E) and every sum taken as a
// logsumexp. Noise terms are weighted by K as in the simplified form.
Tensor nce_general(const Tensor& r_data, const Tensor& r_noise, std::span<const double> log_pn_data,
                   std::span<const double> log_pn_noise, int K);

double nce_loss_simplified(const EncoderState& state, std::span<const TokenSeq> data,
                           std::span<const TokenSeq> noise, const NceConfig& cfg);
double nce_loss_general(const EncoderState& state, std::span<const TokenSeq> data, std::span<const TokenSeq> noise,
                        std::span<const double> log_pn_data, std::span<const double> log_pn_noise,
                        const NceConfig& cfg);

// CE on the data examples plus the simplified NCE term, from one packed
// forward pass over data followed by noise.
struct JointLoss {
  Tensor ce;
  Tensor nce;
  Tensor joint;

  LossBreakdown values() const { return {ce.item(), nce.item(), joint.item()}; }
};

JointLoss joint_loss(const EncoderState& state, std::span<const Example> data, std::span<const TokenSeq> noise,
                     const NceConfig& cfg, const ForwardOptions& opts = {});

}  // namespace ebmcal

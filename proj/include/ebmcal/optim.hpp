#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ebmcal/tensor.hpp"

namespace ebmcal {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  // Zeroed moments sized to match `params`.
  static AdamState for_params(std::span<const Tensor> params);
};

// One Adam update using each parameter's accumulated gradient (a parameter
// without a gradient buffer is treated as having zero gradient).
void adam_step(std::span<Tensor> params, AdamState& state, double lr, const AdamHyper& hp = {});

// Same update with gradients supplied explicitly, one buffer per parameter.
void adam_step(std::span<Tensor> params, std::span<const std::vector<double>> grads, AdamState& state,
               double lr, const AdamHyper& hp = {});

void zero_grads(std::span<Tensor> params);

}  // namespace ebmcal

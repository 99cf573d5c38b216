#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ebmcal/data.hpp"

namespace ebmcal {

// Supplier of contrastive negatives for NCE training.
class NoiseSource {
 public:
  virtual ~NoiseSource() = default;

  // K sequences per entry of `train_indices`, grouped by entry: result[i*K + j]
  // belongs to train_indices[i]. Must be a pure function of the arguments.
  virtual std::vector<TokenSeq> draw(std::span<const std::size_t> train_indices, int K, std::uint64_t step_seed) = 0;
};

}  // namespace ebmcal

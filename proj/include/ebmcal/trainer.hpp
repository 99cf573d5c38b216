#pragma once

// Minibatch Adam training of the classifier with optional NCE joint loss,
// periodic dev evaluation and best-checkpoint selection.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "ebmcal/data.hpp"
#include "ebmcal/encoder.hpp"
#include "ebmcal/energy.hpp"
#include "ebmcal/noise_source.hpp"

namespace ebmcal {

struct TrainSchedule {
  std::size_t steps = 1000;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::size_t eval_interval = 100;  // also evaluated after the final step
  std::uint64_t seed = 0;
};

struct TrainRecord {
  std::size_t step = 0;
  // Mean training losses over the steps since the previous record.
  double ce = 0.0;
  double nce = 0.0;
  double joint = 0.0;
  double dev_acc = 0.0;
  double dev_ece = 0.0;  // 20 bins
  double dev_nll = 0.0;
};

struct TrainLog {
  std::vector<TrainRecord> records;
  std::size_t best_step = 0;  // 0 when no evaluation happened
  double best_dev_acc = 0.0;
};

struct DevMetrics {
  double accuracy = 0.0;
  double ece = 0.0;
  double nll = 0.0;
};

DevMetrics evaluate_split(const EncoderState& state, std::span<const Example> set, int ece_bins = 20);

// Trains in place and leaves `state` at the best evaluated checkpoint (highest
// dev accuracy, ties to lower dev NLL, then to the earlier step). Without
// `nce` the objective is cross-entropy alone and `noise` may be null.
TrainLog train_joint(EncoderState& state, std::span<const Example> train, std::span<const Example> dev,
                     NoiseSource* noise, const std::optional<NceConfig>& nce, const TrainSchedule& schedule);

// Columns: step, ce, nce, joint, dev_acc, dev_ece.
void write_train_log_csv(const std::filesystem::path& path, const TrainLog& log);

}  // namespace ebmcal

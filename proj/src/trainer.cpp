#include "ebmcal/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "ebmcal/calibration.hpp"
#include "ebmcal/format.hpp"
#include "ebmcal/optim.hpp"
#include "ebmcal/rng.hpp"

namespace ebmcal {

DevMetrics evaluate_split(const EncoderState& state, std::span<const Example> set, int ece_bins) {
  if (set.empty()) throw EncoderError("cannot evaluate an empty split");
  std::vector<TokenSeq> xs;
  std::vector<int> ys;
  for (const auto& ex : set) {
    xs.push_back(ex.tokens);
    ys.push_back(ex.label);
  }
  const Matrix lg = batch_logits(state, xs);
  Matrix post;
  double nll = 0.0;
  for (std::size_t i = 0; i < lg.size(); ++i) {
    const auto& l = lg[i];
    const double mx = *std::max_element(l.begin(), l.end());
    double z = 0.0;
    for (double v : l) z += std::exp(v - mx);
    std::vector<double> p;
    for (double v : l) p.push_back(std::exp(v - mx) / z);
    nll += mx + std::log(z) - l[static_cast<std::size_t>(ys[i])];
    post.push_back(std::move(p));
  }
  DevMetrics m;
  m.accuracy = accuracy(post, ys);
  m.ece = ece(make_records(post, ys), ece_bins);
  m.nll = nll / static_cast<double>(set.size());
  return m;
}

namespace {

std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.data().begin(), p.data().end());
  return out;
}

void restore(std::vector<Tensor>& params, const std::vector<std::vector<double>>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i) std::copy(snap[i].begin(), snap[i].end(), params[i].mutable_data().begin());
}

}  // namespace

TrainLog train_joint(EncoderState& state, std::span<const Example> train, std::span<const Example> dev,
                     NoiseSource* noise, const std::optional<NceConfig>& nce, const TrainSchedule& schedule) {
  TrainLog log;
  if (schedule.steps == 0) return log;
  if (train.empty() || dev.empty()) throw EncoderError("training needs nonempty train and dev splits");
  if (schedule.batch_size == 0 || schedule.eval_interval == 0)
    throw EncoderError("batch_size and eval_interval must be positive");
  if (std::all_of(train.begin(), train.end(), [&](const Example& e) { return e.label == train[0].label; }))
    throw EncoderError("training set contains a single class");
  if (nce) {
    nce->validate();
    if (noise == nullptr) throw NceError("NCE training needs a noise source");
  }

  std::vector<Tensor> params = state.parameters();
  AdamState adam = AdamState::for_params(params);
  std::vector<std::size_t> perm;
  std::size_t cursor = 0, epoch = 0;
  double ce_sum = 0.0, nce_sum = 0.0, joint_sum = 0.0;
  std::size_t since = 0;
  std::vector<std::vector<double>> best;
  double best_nll = INFINITY;

  for (std::size_t step = 1; step <= schedule.steps; ++step) {
    std::vector<std::size_t> idx;
    while (idx.size() < std::min(schedule.batch_size, train.size())) {
      if (cursor == perm.size()) {
        perm.resize(train.size());
        std::iota(perm.begin(), perm.end(), 0);
        Rng pr(derive_seed({schedule.seed, hash_name("perm"), epoch++}));
        for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[pr.uniform_index(i)]);
        cursor = 0;
        // Batches never straddle epochs.
        if (!idx.empty()) break;
      }
      idx.push_back(perm[cursor++]);
    }
    std::vector<Example> batch;
    for (auto i : idx) batch.push_back(train[i]);

    Rng drop(derive_seed({schedule.seed, hash_name("dropout"), step}));
    ForwardOptions opts{&drop};
    Tape tape;
    {
      GradScope scope(tape);
      if (nce) {
        const auto negatives = noise->draw(idx, nce->K, derive_seed({schedule.seed, hash_name("noise"), step}));
        JointLoss jl = joint_loss(state, batch, negatives, *nce, opts);
        tape.backward(jl.joint);
        ce_sum += jl.ce.item();
        nce_sum += jl.nce.item();
        joint_sum += jl.joint.item();
      } else {
        std::vector<TokenSeq> xs;
        std::vector<int> ys;
        for (const auto& ex : batch) {
          xs.push_back(ex.tokens);
          ys.push_back(ex.label);
        }
        Tensor loss = ce_loss(encoder_forward(state, xs, opts).logits, ys);
        tape.backward(loss);
        ce_sum += loss.item();
        joint_sum += loss.item();
      }
    }
    adam_step(params, adam, schedule.lr);
    zero_grads(params);
    ++since;

    if (step % schedule.eval_interval == 0 || step == schedule.steps) {
      const DevMetrics m = evaluate_split(state, dev);
      const double n = static_cast<double>(since);
      log.records.push_back({step, ce_sum / n, nce_sum / n, joint_sum / n, m.accuracy, m.ece, m.nll});
      ce_sum = nce_sum = joint_sum = 0.0;
      since = 0;
      if (best.empty() || m.accuracy > log.best_dev_acc || (m.accuracy == log.best_dev_acc && m.nll < best_nll)) {
        best = snapshot(params);
        log.best_step = step;
        log.best_dev_acc = m.accuracy;
        best_nll = m.nll;
      }
    }
  }
  restore(params, best);
  return log;
}

void write_train_log_csv(const std::filesystem::path& path, const TrainLog& log) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "step,ce,nce,joint,dev_acc,dev_ece\n";
  for (const auto& r : log.records)
    os << r.step << ',' << fmt(r.ce) << ',' << fmt(r.nce) << ',' << fmt(r.joint) << ',' << fmt(r.dev_acc) << ','
       << fmt(r.dev_ece) << '\n';
}

}  // namespace ebmcal

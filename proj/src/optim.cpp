#include "ebmcal/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace ebmcal {

AdamState AdamState::for_params(std::span<const Tensor> params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.size(), 0.0);
    s.v.emplace_back(p.size(), 0.0);
  }
  return s;
}

namespace {

void check_dims(std::span<Tensor> params, const AdamState& state, double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("adam_step: learning rate must be positive");
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_step: state holds " + std::to_string(state.m.size()) + " moments for " +
                     std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].size() || state.v[i].size() != params[i].size()) {
      throw ShapeError("adam_step: moment size mismatch for parameter " + std::to_string(i) + " of shape " +
                       shape_str(params[i].shape()));
    }
  }
}

void update_one(std::span<double> w, std::span<const double> g, std::vector<double>& m, std::vector<double>& v,
                double lr, double bc1, double bc2, const AdamHyper& hp) {
  for (std::size_t j = 0; j < w.size(); ++j) {
    const double gj = g.empty() ? 0.0 : g[j];
    m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * gj;
    v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * gj * gj;
    const double mhat = m[j] / bc1;
    const double vhat = v[j] / bc2;
    w[j] -= lr * mhat / (std::sqrt(vhat) + hp.eps);
  }
}

}  // namespace

void adam_step(std::span<Tensor> params, AdamState& state, double lr, const AdamHyper& hp) {
  check_dims(params, state, lr);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(hp.beta1, t);
  const double bc2 = 1.0 - std::pow(hp.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    update_one(params[i].mutable_data(), params[i].grad(), state.m[i], state.v[i], lr, bc1, bc2, hp);
  }
}

void adam_step(std::span<Tensor> params, std::span<const std::vector<double>> grads, AdamState& state, double lr,
               const AdamHyper& hp) {
  check_dims(params, state, lr);
  if (grads.size() != params.size()) {
    throw ShapeError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].size()) {
      throw ShapeError("adam_step: gradient " + std::to_string(i) + " has " + std::to_string(grads[i].size()) +
                       " entries, parameter has " + std::to_string(params[i].size()));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(hp.beta1, t);
  const double bc2 = 1.0 - std::pow(hp.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    update_one(params[i].mutable_data(), grads[i], state.m[i], state.v[i], lr, bc1, bc2, hp);
  }
}

void zero_grads(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace ebmcal

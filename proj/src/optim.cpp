#include "mvi2p/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

namespace mvi2p {

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               double lr) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size() ||
      params.size() != state.second_moment.size()) {
    throw std::invalid_argument("adam_step: size mismatch (params " +
                                std::to_string(params.size()) + ", grads " +
                                std::to_string(grads.size()) + ", state " +
                                std::to_string(state.first_moment.size()) + ")");
  }
  if (!(lr > 0.0)) throw std::invalid_argument("adam_step: learning rate must be positive");

  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g * g;
    params[i] -= lr * (m / c1) / (std::sqrt(v / c2) + state.epsilon);
  }
}

Adam::Adam(std::vector<Tensor> params) : params_(std::move(params)) {
  states_.reserve(params_.size());
  for (const auto& p : params_) states_.emplace_back(p.numel());
}

void Adam::step(double lr) {
  std::vector<double> zeros;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (p.has_grad()) {
      adam_step(p.mutable_data(), p.grad(), states_[i], lr);
    } else {
      zeros.assign(p.numel(), 0.0);
      adam_step(p.mutable_data(), zeros, states_[i], lr);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void LrSchedule::validate() const {
  if (!(base_rate > 0.0)) throw std::invalid_argument("lr schedule: base rate must be positive");
  if (!(decay_factor > 0.0)) throw std::invalid_argument("lr schedule: decay factor must be positive");
  for (std::size_t i = 1; i < decay_epochs.size(); ++i) {
    if (decay_epochs[i] <= decay_epochs[i - 1]) {
      throw std::invalid_argument("lr schedule: decay epochs must be strictly increasing");
    }
  }
}

double lr_at(const LrSchedule& schedule, int epoch) {
  if (epoch < 0) throw std::invalid_argument("lr_at: negative epoch");
  double rate = schedule.base_rate;
  for (int e : schedule.decay_epochs) {
    if (e <= epoch) rate *= schedule.decay_factor;
  }
  return rate;
}

}  // namespace mvi2p

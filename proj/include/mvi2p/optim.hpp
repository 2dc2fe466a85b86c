#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mvi2p/tensor.hpp"

namespace mvi2p {

struct AdamState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::int64_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  explicit AdamState(std::size_t size = 0) : first_moment(size, 0.0), second_moment(size, 0.0) {}
};

/// One bias-corrected Adam update of `params` in place.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               double lr);

/// Adam over a fixed parameter list. Parameters without an accumulated
/// gradient are updated as if their gradient were zero.
class Adam {
 public:
  explicit Adam(std::vector<Tensor> params);

  void step(double lr);
  void zero_grad();

  const std::vector<AdamState>& states() const { return states_; }

 private:
  std::vector<Tensor> params_;
  std::vector<AdamState> states_;
};

/// Piecewise-constant step decay: base_rate * decay_factor^(#decay epochs <= epoch).
struct LrSchedule {
  double base_rate = 3e-4;
  std::vector<int> decay_epochs{40, 70};
  double decay_factor = 0.1;

  void validate() const;
};

double lr_at(const LrSchedule& schedule, int epoch);

}  // namespace mvi2p

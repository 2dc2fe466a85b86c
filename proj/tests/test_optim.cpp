#include <doctest.h>

#include <cmath>
#include <vector>

#include "mvi2p/ops.hpp"
#include "mvi2p/optim.hpp"

using namespace mvi2p;

namespace {

// Textbook Adam written out in closed form per step, independent of AdamState.
struct ReferenceAdam {
  double m = 0.0, v = 0.0;
  int t = 0;
  double step(double param, double g, double lr) {
    ++t;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, t));
    const double vhat = v / (1.0 - std::pow(0.999, t));
    return param - lr * mhat / (std::sqrt(vhat) + 1e-8);
  }
};

}  // namespace

TEST_CASE("zero gradient leaves parameters unchanged") {
  std::vector<double> p{0.5, -2.0};
  AdamState s(2);
  adam_step(p, std::vector<double>{0.0, 0.0}, s, 3e-4);
  CHECK(p == std::vector<double>{0.5, -2.0});
  CHECK(s.step_count == 1);
}

TEST_CASE("first step from zero with unit gradient") {
  std::vector<double> p{0.0};
  AdamState s(1);
  adam_step(p, std::vector<double>{1.0}, s, 3e-4);
  // bias correction makes the first move lr * g / (|g| + eps)
  CHECK(std::abs(p[0] - (-3e-4 / (1.0 + 1e-8))) <= 1e-15);
  CHECK(std::abs(p[0] + 3.0e-4) <= 1e-9);
}

TEST_CASE("matches a reference implementation over a varying gradient sequence") {
  std::vector<double> p{0.3};
  AdamState s(1);
  ReferenceAdam ref;
  double q = 0.3;
  for (int i = 0; i < 40; ++i) {
    const double g = std::sin(0.7 * i) + 0.2;
    const double lr = i < 20 ? 1e-2 : 1e-3;
    adam_step(p, std::vector<double>{g}, s, lr);
    q = ref.step(q, g, lr);
    CHECK(std::abs(p[0] - q) <= 1e-14);
  }
  CHECK(s.step_count == 40);
}

TEST_CASE("repeated identical gradients move against the gradient sign") {
  std::vector<double> p{1.0, 1.0};
  AdamState s(2);
  double prev0 = p[0], prev1 = p[1];
  for (int i = 0; i < 2; ++i) {
    adam_step(p, std::vector<double>{0.7, -0.2}, s, 1e-3);
    CHECK(p[0] < prev0);
    CHECK(p[1] > prev1);
    prev0 = p[0];
    prev1 = p[1];
  }
}

TEST_CASE("adam rejects bad arguments") {
  std::vector<double> p{0.0, 0.0};
  AdamState s(2);
  CHECK_THROWS_AS(adam_step(p, std::vector<double>{1.0}, s, 1e-3), std::invalid_argument);
  CHECK_THROWS_AS(adam_step(p, std::vector<double>{1.0, 1.0}, s, 0.0), std::invalid_argument);
}

TEST_CASE("optimizer minimizes a quadratic and treats missing grads as zero") {
  Tensor x = Tensor::vector({3.0, -2.0}, true);
  Tensor idle = Tensor::vector({1.0}, true);
  Adam opt({x, idle});
  for (int i = 0; i < 500; ++i) {
    opt.zero_grad();
    sum(mul(x, x)).backward();
    opt.step(5e-2);
  }
  CHECK(std::abs(x[0]) < 1e-2);
  CHECK(std::abs(x[1]) < 1e-2);
  CHECK(idle[0] == 1.0);
  CHECK(opt.states()[1].step_count == 500);
}

TEST_CASE("step decay schedule") {
  LrSchedule s;
  CHECK(lr_at(s, 0) == doctest::Approx(3e-4).epsilon(1e-12));
  CHECK(lr_at(s, 39) == doctest::Approx(3e-4).epsilon(1e-12));
  CHECK(lr_at(s, 40) == doctest::Approx(3e-5).epsilon(1e-12));
  CHECK(lr_at(s, 70) == doctest::Approx(3e-6).epsilon(1e-12));
  CHECK(lr_at(s, 119) == doctest::Approx(3e-6).epsilon(1e-12));
  CHECK_THROWS(lr_at(s, -1));
  s.decay_epochs = {10, 10};
  CHECK_THROWS(s.validate());
}

TEST_CASE("schedule is piecewise constant and non-increasing") {
  LrSchedule s{1.0, {3, 5, 9}, 0.5};
  double prev = lr_at(s, 0);
  for (int e = 1; e < 15; ++e) {
    int passed = 0;
    for (int d : s.decay_epochs) passed += d <= e;
    CHECK(lr_at(s, e) == std::pow(0.5, passed));
    CHECK(lr_at(s, e) <= prev);
    prev = lr_at(s, e);
  }
}

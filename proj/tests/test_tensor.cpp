#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "mvi2p/ops.hpp"
#include "mvi2p/tensor.hpp"

using namespace mvi2p;

TEST_CASE("shapes and element access") {
  Tensor t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  CHECK(t.dim() == 2);
  CHECK(t.size(1) == 3);
  CHECK(t.numel() == 6);
  CHECK(t[4] == 5.0);
  CHECK(shape_str(t.shape()) == "[2,3]");
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), std::invalid_argument);
  CHECK_THROWS(Tensor::scalar(1.0).size(0));
}

TEST_CASE("fan-out accumulates gradients") {
  Tensor x = Tensor::vector({3.0}, true);
  Tensor y = add(mul(x, x), x);  // x^2 + x
  sum(y).backward();
  CHECK(x.grad()[0] == doctest::Approx(7.0));
}

TEST_CASE("a consumed graph cannot be differentiated twice") {
  Tensor x = Tensor::vector({1.0, 2.0}, true);
  Tensor loss = sum(mul(x, x));
  loss.backward();
  CHECK_THROWS_AS(loss.backward(), std::logic_error);
}

TEST_CASE("backward needs a tracked scalar") {
  Tensor x = Tensor::vector({1.0, 2.0}, true);
  CHECK_THROWS_AS(mul(x, x).backward(), std::logic_error);
  CHECK_THROWS_AS(Tensor::scalar(2.0).backward(), std::logic_error);
}

TEST_CASE("detach cuts the tape and clone copies storage") {
  Tensor x = Tensor::vector({2.0}, true);
  Tensor d = x.detach();
  CHECK_FALSE(d.requires_grad());
  Tensor loss = sum(add(mul(x, d), x));  // d treated as a constant
  loss.backward();
  CHECK(x.grad()[0] == doctest::Approx(3.0));
  Tensor c = x.clone();
  CHECK_FALSE(c.same_storage(x));
  c.mutable_data()[0] = 9.0;
  CHECK(x[0] == 2.0);
}

TEST_CASE("untracked inputs record no graph") {
  Tensor a = Tensor::vector({1.0, 2.0});
  Tensor b = add(a, a);
  CHECK_FALSE(b.requires_grad());
  CHECK(b.node()->inputs.empty());
}

TEST_CASE("elementwise domain errors") {
  Tensor a = Tensor::vector({1.0, -1.0});
  CHECK_THROWS_AS(log(a), std::domain_error);
  CHECK_THROWS_AS(div(a, Tensor::vector({1.0, 0.0})), std::domain_error);
  CHECK_THROWS_AS(add(a, Tensor::vector({1.0, 2.0, 3.0})), std::invalid_argument);
}

TEST_CASE("direct and im2col convolution agree") {
  Tensor x({2, 3, 9, 6}, 0.0);
  Tensor k({4, 3, 3, 3}, 0.0);
  for (std::size_t i = 0; i < x.numel(); ++i) x.mutable_data()[i] = std::sin(0.37 * double(i));
  for (std::size_t i = 0; i < k.numel(); ++i) k.mutable_data()[i] = std::cos(0.11 * double(i));
  for (std::size_t stride : {1u, 2u}) {
    const Tensor a = conv2d(x, k, stride, 1, ConvAlgorithm::Direct);
    const Tensor b = conv2d(x, k, stride, 1, ConvAlgorithm::Im2col);
    REQUIRE(a.shape() == b.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-10);
  }
}

TEST_CASE("convolution hand example and shape rules") {
  // 1x3x3 ones with a 3x3 kernel of ones, pad 1: corner 4, edge 6, centre 9.
  Tensor x({1, 3, 3}, 1.0);
  Tensor k({1, 1, 3, 3}, 1.0);
  Tensor y = conv2d(x, k, 1, 1);
  CHECK(y.shape() == Shape{1, 3, 3});
  CHECK(y[0] == 4.0);
  CHECK(y[1] == 6.0);
  CHECK(y[4] == 9.0);
  CHECK_THROWS_AS(conv2d(x, Tensor({1, 1, 2, 2}, 1.0), 1, 0), std::invalid_argument);
  CHECK_THROWS_AS(conv2d(Tensor({1, 6, 6}, 1.0), k, 2, 0), std::invalid_argument);
  CHECK(conv2d(Tensor({1, 8, 4}, 1.0), k, 2, 1).shape() == Shape{1, 4, 2});
}

TEST_CASE("softmax rows sum to one and survive large logits") {
  Tensor x({2, 3}, std::vector<double>{1000, 1001, 1002, -5, 0, 5});
  Tensor p = softmax(x, 1);
  for (std::size_t r = 0; r < 2; ++r) {
    CHECK(p[r * 3] + p[r * 3 + 1] + p[r * 3 + 2] == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(std::isfinite(p[2]));
}

TEST_CASE("smoothed cross-entropy against a direct evaluation") {
  Tensor logits({1, 3}, std::vector<double>{2.0, 0.5, -1.0});
  const std::vector<int> y{0};
  const double z = std::exp(2.0) + std::exp(0.5) + std::exp(-1.0);
  const double lp[3] = {2.0 - std::log(z), 0.5 - std::log(z), -1.0 - std::log(z)};
  const double eps = 0.1;
  const double expected = -((1 - eps + eps / 3) * lp[0] + eps / 3 * lp[1] + eps / 3 * lp[2]);
  CHECK(smoothed_cross_entropy(logits, y, eps).item() == doctest::Approx(expected).epsilon(1e-12));
  CHECK_THROWS(smoothed_cross_entropy(logits, std::vector<int>{3}, eps));
}

TEST_CASE("GeM pooling reduces to average at p=1 and clamps tiny inputs") {
  Tensor x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 6});
  CHECK(gem_pool(x, 1.0).item() == doctest::Approx(3.0));
  CHECK(gem_pool(x, 3.0).item() ==
        doctest::Approx(std::cbrt((1.0 + 8.0 + 27.0 + 216.0) / 4.0)));
  Tensor zeros({1, 1, 2, 2}, 0.0);
  CHECK(gem_pool(zeros, 3.0).item() == doctest::Approx(1e-6));
  CHECK_THROWS(gem_pool(Tensor({1, 1, 1, 1}, -1.0), 3.0));
}

TEST_CASE("batch norm modes") {
  BatchNormState s(1);
  Tensor x({4, 1}, std::vector<double>{1, 2, 3, 4});
  Tensor y = batch_norm(x, s, BatchNormMode::Train);
  // biased variance 1.25 normalizes; unbiased 5/3 feeds the running estimate
  CHECK(y[0] == doctest::Approx(-1.5 / std::sqrt(1.25 + 1e-5)));
  CHECK(s.running_mean[0] == doctest::Approx(0.25));
  CHECK(s.running_var[0] == doctest::Approx(0.9 + 0.1 * 5.0 / 3.0));
  const auto before = s.running_mean;
  batch_norm(x, s, BatchNormMode::TrainNoUpdate);
  CHECK(s.running_mean == before);
  Tensor e = batch_norm(Tensor({1, 1}, std::vector<double>{2.0}), s, BatchNormMode::Eval);
  CHECK(e[0] == doctest::Approx((2.0 - 0.25) / std::sqrt(s.running_var[0] + 1e-5)));
  CHECK_THROWS(batch_norm(Tensor({1, 1}, 1.0), s, BatchNormMode::Train));
}

TEST_CASE("max_normalize counts degenerate rows") {
  std::size_t degenerate = 0;
  Tensor x({2, 3}, std::vector<double>{0, 0, 0, 1, 4, 2});
  Tensor y = max_normalize(x, &degenerate);
  CHECK(degenerate == 1);
  CHECK(y[0] == 0.0);
  CHECK(y[4] == 1.0);
  CHECK(y[3] == 0.25);
}

TEST_CASE("row distance has zero gradient at coincident rows") {
  Tensor a({1, 2}, std::vector<double>{1, 1}, true);
  Tensor b({1, 2}, std::vector<double>{1, 1}, true);
  Tensor d = row_l2_distance(a, b);
  CHECK(d.item() == 0.0);
  sum(d).backward();
  for (const Tensor* t : {&a, &b}) {
    for (double g : t->grad()) CHECK(g == 0.0);
  }
}

#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mvi2p/model.hpp"
#include "mvi2p/multiview.hpp"
#include "mvi2p/ops.hpp"

namespace gradcheck {

using namespace mvi2p;

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

Tensor uniform(const Shape& shape, Rng& rng, double lo, double hi, bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(shape, std::move(v), requires_grad);
}

Tensor signed_away_from_zero(const Shape& shape, Rng& rng, double margin, bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * (margin + rng.uniform());
  return Tensor(shape, std::move(v), requires_grad);
}

namespace {

double evaluate(const Function& f, const std::vector<Tensor>& inputs, const Tensor& projection) {
  Tensor out = f(inputs);
  if (out.numel() == 1) return out.item();
  double acc = 0.0;
  for (std::size_t i = 0; i < out.numel(); ++i) acc += out[i] * projection[i];
  return acc;
}

}  // namespace

double check(const Function& f, const std::vector<Tensor>& inputs, Rng& rng, double h) {
  Tensor probe = f(inputs);
  Tensor projection = uniform(probe.shape(), rng, -1.0, 1.0, false);

  for (auto t : inputs) t.zero_grad();
  Tensor out = f(inputs);
  Tensor loss = out.numel() == 1 ? reshape(out, Shape{}) : sum(mul(out, projection));
  loss.backward();

  double worst = 0.0;
  for (auto t : inputs) {
    if (!t.requires_grad()) continue;
    const std::vector<double> analytic =
        t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                     : std::vector<double>(t.numel(), 0.0);
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = evaluate(f, inputs, projection);
      data[i] = saved - h;
      const double down = evaluate(f, inputs, projection);
      data[i] = saved;
      worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

std::vector<OpCase> op_cases() {
  std::vector<OpCase> cases;
  auto add_case = [&](std::string name, std::function<double(Rng&)> trial) {
    cases.push_back({std::move(name), std::move(trial)});
  };

  add_case("add", [](Rng& r) {
    return check([](const auto& in) { return add(in[0], in[1]); },
                 {uniform({3, 4}, r, -2, 2), uniform({3, 4}, r, -2, 2)}, r);
  });
  add_case("add_scalar_broadcast", [](Rng& r) {
    return check([](const auto& in) { return add(in[0], in[1]); },
                 {uniform({2, 3}, r, -2, 2), uniform({1}, r, -2, 2)}, r);
  });
  add_case("sub", [](Rng& r) {
    return check([](const auto& in) { return sub(in[0], in[1]); },
                 {uniform({5}, r, -2, 2), uniform({5}, r, -2, 2)}, r);
  });
  add_case("mul", [](Rng& r) {
    return check([](const auto& in) { return mul(in[0], in[1]); },
                 {uniform({2, 5}, r, -2, 2), uniform({2, 5}, r, -2, 2)}, r);
  });
  add_case("div", [](Rng& r) {
    return check([](const auto& in) { return div(in[0], in[1]); },
                 {uniform({6}, r, -2, 2), signed_away_from_zero({6}, r, 0.5)}, r);
  });
  add_case("relu", [](Rng& r) {
    return check([](const auto& in) { return relu(in[0]); }, {signed_away_from_zero({8}, r, 0.01)},
                 r);
  });
  add_case("pow", [](Rng& r) {
    const double e = r.uniform(0.5, 3.5);
    return check([e](const auto& in) { return pow(in[0], e); }, {uniform({6}, r, 0.2, 2.0)}, r);
  });
  add_case("exp", [](Rng& r) {
    return check([](const auto& in) { return exp(in[0]); }, {uniform({6}, r, -2, 2)}, r);
  });
  add_case("log", [](Rng& r) {
    return check([](const auto& in) { return log(in[0]); }, {uniform({6}, r, 0.2, 3.0)}, r);
  });
  add_case("neg", [](Rng& r) {
    return check([](const auto& in) { return neg(in[0]); }, {uniform({4}, r, -2, 2)}, r);
  });
  add_case("scale", [](Rng& r) {
    const double s = r.uniform(-3, 3);
    return check([s](const auto& in) { return scale(in[0], s); }, {uniform({4}, r, -2, 2)}, r);
  });
  add_case("sum", [](Rng& r) {
    return check([](const auto& in) { return sum(in[0]); }, {uniform({3, 3}, r, -2, 2)}, r);
  });
  add_case("mean", [](Rng& r) {
    return check([](const auto& in) { return mean(in[0]); }, {uniform({2, 5}, r, -2, 2)}, r);
  });
  add_case("reshape", [](Rng& r) {
    return check([](const auto& in) { return reshape(in[0], Shape{3, 2}); },
                 {uniform({2, 3}, r, -2, 2)}, r);
  });
  for (auto algo : {ConvAlgorithm::Direct, ConvAlgorithm::Im2col}) {
    const std::string tag = algo == ConvAlgorithm::Direct ? "direct" : "im2col";
    add_case("conv2d_" + tag, [algo](Rng& r) {
      const std::size_t stride = r.bernoulli(0.5) ? 1 : 2;
      const std::size_t pad = r.index(2);
      return check(
          [=](const auto& in) { return conv2d(in[0], in[1], stride, pad, algo); },
          {uniform({2, 2, 5, 5}, r, -1, 1), uniform({3, 2, 3, 3}, r, -1, 1)}, r);
    });
  }
  add_case("conv2d_unbatched", [](Rng& r) {
    return check([](const auto& in) { return conv2d(in[0], in[1], 1, 1); },
                 {uniform({2, 4, 3}, r, -1, 1), uniform({2, 2, 3, 3}, r, -1, 1)}, r);
  });
  add_case("linear", [](Rng& r) {
    return check([](const auto& in) { return linear(in[0], in[1]); },
                 {uniform({3, 4}, r, -1, 1), uniform({5, 4}, r, -1, 1)}, r);
  });
  add_case("batch_norm_vectors", [](Rng& r) {
    BatchNormState state(3);
    return check(
        [&state](const auto& in) {
          state.gamma = in[1];
          state.beta = in[2];
          return batch_norm(in[0], state, BatchNormMode::TrainNoUpdate);
        },
        {uniform({5, 3}, r, -2, 2), uniform({3}, r, 0.5, 1.5), uniform({3}, r, -1, 1)}, r);
  });
  add_case("batch_norm_maps", [](Rng& r) {
    BatchNormState state(2);
    return check(
        [&state](const auto& in) {
          state.gamma = in[1];
          state.beta = in[2];
          return batch_norm(in[0], state, BatchNormMode::Train);
        },
        {uniform({3, 2, 2, 2}, r, -2, 2), uniform({2}, r, 0.5, 1.5), uniform({2}, r, -1, 1)}, r);
  });
  add_case("batch_norm_eval", [](Rng& r) {
    BatchNormState state(2);
    state.running_mean = {r.uniform(-1, 1), r.uniform(-1, 1)};
    state.running_var = {r.uniform(0.5, 2), r.uniform(0.5, 2)};
    return check(
        [&state](const auto& in) {
          state.gamma = in[1];
          state.beta = in[2];
          return batch_norm(in[0], state, BatchNormMode::Eval);
        },
        {uniform({1, 2}, r, -2, 2), uniform({2}, r, 0.5, 1.5), uniform({2}, r, -1, 1)}, r);
  });
  add_case("softmax", [](Rng& r) {
    const std::size_t axis = r.index(2);
    return check([axis](const auto& in) { return softmax(in[0], axis); },
                 {uniform({3, 4}, r, -3, 3)}, r);
  });
  add_case("smoothed_cross_entropy", [](Rng& r) {
    std::vector<int> labels{static_cast<int>(r.index(5)), static_cast<int>(r.index(5)),
                            static_cast<int>(r.index(5))};
    const double eps = r.uniform(0.0, 0.3);
    return check(
        [labels, eps](const auto& in) { return smoothed_cross_entropy(in[0], labels, eps); },
        {uniform({3, 5}, r, -3, 3)}, r);
  });
  add_case("gem_pool", [](Rng& r) {
    const double p = r.uniform(1.0, 4.0);
    return check([p](const auto& in) { return gem_pool(in[0], p); },
                 {uniform({2, 3, 2, 2}, r, 0.1, 2.0)}, r);
  });
  add_case("index_select", [](Rng& r) {
    std::vector<std::size_t> idx{r.index(4), r.index(4), r.index(4), r.index(4), r.index(4)};
    return check([idx](const auto& in) { return index_select(in[0], idx); },
                 {uniform({4, 3}, r, -2, 2)}, r);
  });
  add_case("pick", [](Rng& r) {
    std::vector<int> cols{static_cast<int>(r.index(4)), static_cast<int>(r.index(4)),
                          static_cast<int>(r.index(4))};
    return check([cols](const auto& in) { return pick(in[0], cols); },
                 {uniform({3, 4}, r, -2, 2)}, r);
  });
  add_case("channel_weighted_sum", [](Rng& r) {
    return check([](const auto& in) { return channel_weighted_sum(in[0], in[1]); },
                 {uniform({2, 3, 2, 2}, r, 0, 2), uniform({2, 3}, r, -1, 1)}, r);
  });
  add_case("max_normalize", [](Rng& r) {
    return check([](const auto& in) { return max_normalize(in[0]); },
                 {uniform({2, 6}, r, 0.1, 2.0)}, r);
  });
  add_case("spatial_gate", [](Rng& r) {
    return check([](const auto& in) { return spatial_gate(in[0], in[1]); },
                 {uniform({2, 2, 3}, r, 0, 1), uniform({2, 3, 2, 3}, r, 0, 2)}, r);
  });
  add_case("scale_rows", [](Rng& r) {
    std::vector<double> w{r.uniform(-1, 1), r.uniform(-1, 1), r.uniform(-1, 1)};
    return check([w](const auto& in) { return scale_rows(in[0], w); },
                 {uniform({3, 2, 2}, r, -2, 2)}, r);
  });
  add_case("group_sum", [](Rng& r) {
    const std::vector<std::vector<std::size_t>> groups{{0, 2}, {1, 3, 4}};
    return check([groups](const auto& in) { return group_sum(in[0], groups); },
                 {uniform({5, 2, 2}, r, -2, 2)}, r);
  });
  add_case("row_l2_distance", [](Rng& r) {
    return check([](const auto& in) { return row_l2_distance(in[0], in[1]); },
                 {uniform({3, 4}, r, -2, 2), uniform({3, 4}, r, -2, 2)}, r);
  });
  return cases;
}

double composed_objective_check(std::uint64_t seed, const std::string& variant_text) {
  Rng rng(seed);
  constexpr std::size_t kIds = 3, kViews = 4, kC = 8, kH = 4, kW = 2;
  const std::size_t n = kIds * kViews;
  std::vector<int> labels;
  for (std::size_t i = 0; i < kIds; ++i)
    for (std::size_t m = 0; m < kViews; ++m) labels.push_back(static_cast<int>(i));
  const auto groups = group_views(labels, kViews, kViews);

  BatchNormState neck_state(kC);
  ClassifierHead head, head2;
  const std::vector<Tensor> inputs{
      uniform({n, kC, kH, kW}, rng, 0.05, 2.0),  // backbone maps, nonnegative
      uniform({kIds, kC}, rng, -1.0, 1.0),       // W
      uniform({kIds, kC}, rng, -1.0, 1.0),       // W2
      uniform({kC}, rng, 0.5, 1.5),              // neck gamma
      uniform({kC}, rng, -0.5, 0.5),             // neck beta
  };

  ObjectiveOptions options;
  options.variant = parse_variant(variant_text);
  options.lambda = 0.5;  // large enough that the distillation term carries weight
  options.neck_mode = BatchNormMode::TrainNoUpdate;

  auto run = [&](const std::vector<Tensor>& in, const ObjectiveOptions& opt) {
    head.weight = in[1];
    head2.weight = in[2];
    neck_state.gamma = in[3];
    neck_state.beta = in[4];
    return compute_objective(in[0], labels, groups, ObjectiveModules{neck_state, head, head2},
                             opt);
  };

  const Objective reference = run(inputs, options);
  const std::vector<double> frozen_weights = reference.weights;
  const Tensor frozen_teacher = reference.teacher;
  if (variant_flags(options.variant).integrate) {
    options.frozen_weights = &frozen_weights;
    options.frozen_teacher = &frozen_teacher;
  }
  return check([&](const std::vector<Tensor>& in) { return run(in, options).total; }, inputs, rng);
}

}  // namespace gradcheck

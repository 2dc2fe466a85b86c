#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "mvi2p/tensor.hpp"

namespace mvi2p {

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

enum class ElementwiseOp { Add, Sub, Mul, Div, Relu, Pow, Exp, Log, Neg };

/// Applies `op` per element. Binary ops need equal shapes or a one-element
/// `b` (scalar broadcast). For Pow, `b` is a scalar exponent held constant.
Tensor elementwise(ElementwiseOp op, const Tensor& a, const std::optional<Tensor>& b = std::nullopt);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);
Tensor pow(const Tensor& a, double exponent);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double factor);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

enum class ConvAlgorithm { Direct, Im2col };

/// Cross-correlation. `input` is [C_in,H,W] or batched [N,C_in,H,W];
/// `kernel` is [C_out,C_in,kh,kw] with odd kh, kw. No bias.
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t pad,
              ConvAlgorithm algorithm = ConvAlgorithm::Im2col);

/// out[n,k] = sum_c weight[k,c] * x[n,c]. No bias.
Tensor linear(const Tensor& x, const Tensor& weight);

struct BatchNormState {
  Tensor gamma;  // learnable scale, [C]
  Tensor beta;   // learnable shift, [C]
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  explicit BatchNormState(std::size_t channels = 0);
  std::size_t channels() const { return running_mean.size(); }
};

enum class BatchNormMode {
  Train,            // batch statistics, running stats updated
  TrainNoUpdate,    // batch statistics, running stats untouched
  Eval              // running statistics
};

/// Per-channel normalization of [N,C] or [N,C,H,W] over every axis but C.
Tensor batch_norm(const Tensor& x, BatchNormState& state, BatchNormMode mode);

/// Exp-normalize along `axis` with max subtraction.
Tensor softmax(const Tensor& x, std::size_t axis);

/// Mean over rows of cross-entropy against the smoothed target
/// q_k = (1 - eps) [k == y] + eps / K, computed from logits [N,K].
Tensor smoothed_cross_entropy(const Tensor& logits, std::span<const int> labels, double epsilon);

/// Per-channel generalized mean over the spatial axes of [N,C,H,W] -> [N,C].
/// Inputs below `floor` are clamped to it so the 1/p root stays differentiable.
Tensor gem_pool(const Tensor& x, double p, double floor = 1e-6);

// ---------------------------------------------------------------------------
// Indexing and the pieces the multi-view branch is assembled from
// ---------------------------------------------------------------------------

/// Rows of `x` (axis 0) in the given order; repeated indices accumulate grads.
Tensor index_select(const Tensor& x, std::span<const std::size_t> indices);

/// out[n] = x[n, column[n]] for x [N,K].
Tensor pick(const Tensor& x, std::span<const int> column);

/// out[n,h,w] = sum_c theta[n,c] * F[n,c,h,w].
Tensor channel_weighted_sum(const Tensor& maps, const Tensor& theta);

/// Divides each row of [N,...] by its maximum. Rows whose maximum is <= 0
/// map to all zeros and increment `*degenerate` when it is given.
Tensor max_normalize(const Tensor& x, std::size_t* degenerate = nullptr);

/// out[n,c,h,w] = gate[n,h,w] * F[n,c,h,w].
Tensor spatial_gate(const Tensor& gate, const Tensor& maps);

/// out[n,...] = weights[n] * x[n,...] with `weights` held constant.
Tensor scale_rows(const Tensor& x, std::span<const double> weights);

/// out[g,...] = sum over n in groups[g] of x[n,...].
Tensor group_sum(const Tensor& x, const std::vector<std::vector<std::size_t>>& groups);

/// out[n] = ||a[n] - b[n]||_2 for [N,C] inputs. The gradient at zero distance is 0.
Tensor row_l2_distance(const Tensor& a, const Tensor& b);

}  // namespace mvi2p

#include "mvi2p/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>

#include "gemm.hpp"

namespace mvi2p {

namespace {

using detail::Node;

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                              shape_str(b));
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.dim() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got shape " + shape_str(t.shape()));
  }
}

Node& in_node(Node& self, std::size_t i) { return *self.inputs[i]; }

// Broadcast-aware binary kernel. `b` must match `a` or hold one element.
template <class Fwd, class GradA, class GradB>
Tensor binary(const char* tag, const Tensor& a, const Tensor& b, Fwd fwd, GradA grad_a,
              GradB grad_b) {
  const bool bcast = b.numel() == 1 && a.shape() != b.shape();
  if (!bcast && a.shape() != b.shape()) shape_error(tag, a.shape(), b.shape());
  const std::size_t n = a.numel();
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[bcast ? 0 : i]);
  return Tensor::make_result(a.shape(), std::move(out), tag, {a, b}, [=](Node& self) {
    Node& na = in_node(self, 0);
    Node& nb = in_node(self, 1);
    const auto& g = self.grad;
    if (na.requires_grad) {
      auto& ga = na.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        ga[i] += grad_a(g[i], na.data[i], nb.data[bcast ? 0 : i], self.data[i]);
      }
    }
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        gb[bcast ? 0 : i] += grad_b(g[i], na.data[i], nb.data[bcast ? 0 : i], self.data[i]);
      }
    }
  });
}

template <class Fwd, class Grad>
Tensor unary(const char* tag, const Tensor& a, Fwd fwd, Grad grad) {
  const std::size_t n = a.numel();
  auto av = a.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i]);
  return Tensor::make_result(a.shape(), std::move(out), tag, {a}, [=](Node& self) {
    Node& na = in_node(self, 0);
    auto& ga = na.grad_buffer();
    for (std::size_t i = 0; i < n; ++i) ga[i] += grad(self.grad[i], na.data[i], self.data[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double) { return g; },
      [](double g, double, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double) { return g; },
      [](double g, double, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y, double) { return g * y; },
      [](double g, double x, double, double) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data()) {
    if (v == 0.0) throw std::domain_error("div: division by zero");
  }
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double, double y, double) { return g / y; },
      [](double g, double x, double y, double) { return -g * x / (y * y); });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double g, double x, double) { return x > 0.0 ? g : 0.0; });
}

Tensor pow(const Tensor& a, double exponent) {
  const bool integral = exponent == std::floor(exponent);
  for (double v : a.data()) {
    if (v < 0.0 && !integral) throw std::domain_error("pow: negative base with fractional exponent");
    if (v == 0.0 && exponent < 0.0) throw std::domain_error("pow: zero base with negative exponent");
  }
  return unary(
      "pow", a, [exponent](double x) { return std::pow(x, exponent); },
      [exponent](double g, double x, double) {
        return exponent == 0.0 ? 0.0 : g * exponent * std::pow(x, exponent - 1.0);
      });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); },
      [](double g, double, double y) { return g * y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) throw std::domain_error("log: non-positive input");
  }
  return unary(
      "log", a, [](double x) { return std::log(x); },
      [](double g, double x, double) { return g / x; });
}

Tensor neg(const Tensor& a) {
  return unary(
      "neg", a, [](double x) { return -x; }, [](double g, double, double) { return -g; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return factor * x; },
      [factor](double g, double, double) { return factor * g; });
}

Tensor elementwise(ElementwiseOp op, const Tensor& a, const std::optional<Tensor>& b) {
  auto need_b = [&]() -> const Tensor& {
    if (!b) throw std::invalid_argument("elementwise: binary op needs a second operand");
    return *b;
  };
  switch (op) {
    case ElementwiseOp::Add: return add(a, need_b());
    case ElementwiseOp::Sub: return sub(a, need_b());
    case ElementwiseOp::Mul: return mul(a, need_b());
    case ElementwiseOp::Div: return div(a, need_b());
    case ElementwiseOp::Relu: return relu(a);
    case ElementwiseOp::Pow: {
      const Tensor& e = need_b();
      if (e.numel() != 1) throw std::invalid_argument("elementwise: pow exponent must be a scalar");
      return pow(a, e[0]);
    }
    case ElementwiseOp::Exp: return exp(a);
    case ElementwiseOp::Log: return log(a);
    case ElementwiseOp::Neg: return neg(a);
  }
  throw std::invalid_argument("elementwise: unknown op");
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::make_result(Shape{}, {s}, "sum", {a}, [](Node& self) {
    auto& ga = in_node(self, 0).grad_buffer();
    for (auto& v : ga) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) shape_error("reshape", a.shape(), shape);
  std::vector<double> out(a.data().begin(), a.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), "reshape", {a}, [](Node& self) {
    auto& ga = in_node(self, 0).grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

namespace {

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t out_area() const { return ho * wo; }
};

std::size_t conv_out_extent(const char* axis, std::size_t in, std::size_t k, std::size_t stride,
                            std::size_t pad) {
  if (in + 2 * pad < k) {
    throw std::invalid_argument(std::string("conv2d: kernel larger than padded ") + axis);
  }
  const std::size_t span = in + 2 * pad - k;
  // A remainder larger than the padding would leave real input pixels
  // outside every window.
  if (span % stride > pad) {
    throw std::invalid_argument(std::string("conv2d: non-integral output ") + axis + " (" +
                                std::to_string(in) + "+2*" + std::to_string(pad) + "-" +
                                std::to_string(k) + ") / " + std::to_string(stride));
  }
  return span / stride + 1;
}

void im2col(const ConvGeometry& g, const double* x, double* col) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = col + ((c * g.kh + ki) * g.kw + kj) * g.out_area();
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<long>(g.h) &&
                                iw < static_cast<long>(g.w);
            row[oh * g.wo + ow] = inside ? x[(c * g.h + ih) * g.w + iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const double* col, double* dx) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = col + ((c * g.kh + ki) * g.kw + kj) * g.out_area();
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
            if (iw < 0 || iw >= static_cast<long>(g.w)) continue;
            dx[(c * g.h + ih) * g.w + iw] += row[oh * g.wo + ow];
          }
        }
      }
    }
  }
}

template <class Visit>
void for_each_tap(const ConvGeometry& g, Visit visit) {
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t co = 0; co < g.cout; ++co)
      for (std::size_t oh = 0; oh < g.ho; ++oh)
        for (std::size_t ow = 0; ow < g.wo; ++ow)
          for (std::size_t ci = 0; ci < g.cin; ++ci)
            for (std::size_t ki = 0; ki < g.kh; ++ki) {
              const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
              if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
              for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
                if (iw < 0 || iw >= static_cast<long>(g.w)) continue;
                const std::size_t o = ((n * g.cout + co) * g.ho + oh) * g.wo + ow;
                const std::size_t x = ((n * g.cin + ci) * g.h + ih) * g.w + iw;
                const std::size_t k = ((co * g.cin + ci) * g.kh + ki) * g.kw + kj;
                visit(o, x, k);
              }
            }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t pad,
              ConvAlgorithm algorithm) {
  const bool batched = input.dim() == 4;
  if (!batched && input.dim() != 3) {
    throw std::invalid_argument("conv2d: input must be [C,H,W] or [N,C,H,W], got " +
                                shape_str(input.shape()));
  }
  require_rank("conv2d kernel", kernel, 4);
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");

  ConvGeometry g{};
  const auto& is = input.shape();
  g.n = batched ? is[0] : 1;
  g.cin = is[batched ? 1 : 0];
  g.h = is[batched ? 2 : 1];
  g.w = is[batched ? 3 : 2];
  g.cout = kernel.size(0);
  g.kh = kernel.size(2);
  g.kw = kernel.size(3);
  g.stride = stride;
  g.pad = pad;
  if (kernel.size(1) != g.cin) shape_error("conv2d", input.shape(), kernel.shape());
  if (g.kh % 2 == 0 || g.kw % 2 == 0) {
    throw std::invalid_argument("conv2d: kernel extents must be odd, got " +
                                shape_str(kernel.shape()));
  }
  g.ho = conv_out_extent("height", g.h, g.kh, stride, pad);
  g.wo = conv_out_extent("width", g.w, g.kw, stride, pad);

  Shape out_shape = batched ? Shape{g.n, g.cout, g.ho, g.wo} : Shape{g.cout, g.ho, g.wo};
  std::vector<double> out(g.n * g.cout * g.out_area(), 0.0);
  const double* x = input.data().data();
  const double* k = kernel.data().data();

  if (algorithm == ConvAlgorithm::Direct) {
    for_each_tap(g, [&](std::size_t o, std::size_t xi, std::size_t ki) { out[o] += k[ki] * x[xi]; });
    return Tensor::make_result(std::move(out_shape), std::move(out), "conv2d", {input, kernel},
                               [g](Node& self) {
                                 Node& nx = in_node(self, 0);
                                 Node& nk = in_node(self, 1);
                                 const auto& go = self.grad;
                                 if (nx.requires_grad) {
                                   auto& gx = nx.grad_buffer();
                                   for_each_tap(g, [&](std::size_t o, std::size_t xi, std::size_t ki) {
                                     gx[xi] += nk.data[ki] * go[o];
                                   });
                                 }
                                 if (nk.requires_grad) {
                                   auto& gk = nk.grad_buffer();
                                   for_each_tap(g, [&](std::size_t o, std::size_t xi, std::size_t ki) {
                                     gk[ki] += nx.data[xi] * go[o];
                                   });
                                 }
                               });
  }

  const std::size_t col_size = g.patch() * g.out_area();
  std::vector<double> cols(g.n * col_size);
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(g, x + n * g.cin * g.h * g.w, cols.data() + n * col_size);
    detail::gemm_nn(g.cout, g.out_area(), g.patch(), k, cols.data() + n * col_size,
                    out.data() + n * g.cout * g.out_area());
  }
  return Tensor::make_result(
      std::move(out_shape), std::move(out), "conv2d", {input, kernel},
      [g, col_size, cols = std::move(cols)](Node& self) {
        Node& nx = in_node(self, 0);
        Node& nk = in_node(self, 1);
        const double* go = self.grad.data();
        if (nk.requires_grad) {
          auto& gk = nk.grad_buffer();
          for (std::size_t n = 0; n < g.n; ++n) {
            detail::gemm_nt(g.cout, g.patch(), g.out_area(), go + n * g.cout * g.out_area(),
                            cols.data() + n * col_size, gk.data());
          }
        }
        if (nx.requires_grad) {
          auto& gx = nx.grad_buffer();
          std::vector<double> dcol(col_size);
          for (std::size_t n = 0; n < g.n; ++n) {
            std::fill(dcol.begin(), dcol.end(), 0.0);
            detail::gemm_tn(g.patch(), g.out_area(), g.cout, nk.data.data(),
                            go + n * g.cout * g.out_area(), dcol.data());
            col2im(g, dcol.data(), gx.data() + n * g.cin * g.h * g.w);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& weight) {
  require_rank("linear input", x, 2);
  require_rank("linear weight", weight, 2);
  const std::size_t n = x.size(0), c = x.size(1), k = weight.size(0);
  if (weight.size(1) != c) shape_error("linear", x.shape(), weight.shape());
  std::vector<double> out(n * k, 0.0);
  detail::gemm_nt(n, k, c, x.data().data(), weight.data().data(), out.data());
  return Tensor::make_result(Shape{n, k}, std::move(out), "linear", {x, weight},
                             [n, c, k](Node& self) {
                               Node& nx = in_node(self, 0);
                               Node& nw = in_node(self, 1);
                               if (nx.requires_grad) {
                                 detail::gemm_nn(n, c, k, self.grad.data(), nw.data.data(),
                                                 nx.grad_buffer().data());
                               }
                               if (nw.requires_grad) {
                                 detail::gemm_tn(k, c, n, self.grad.data(), nx.data.data(),
                                                 nw.grad_buffer().data());
                               }
                             });
}

// ---------------------------------------------------------------------------
// batch_norm
// ---------------------------------------------------------------------------

BatchNormState::BatchNormState(std::size_t channels)
    : gamma(Shape{channels}, 1.0, true),
      beta(Shape{channels}, 0.0, true),
      running_mean(channels, 0.0),
      running_var(channels, 1.0) {}

Tensor batch_norm(const Tensor& x, BatchNormState& state, BatchNormMode mode) {
  if (x.dim() < 2) {
    throw std::invalid_argument("batch_norm: expected [N,C,...], got " + shape_str(x.shape()));
  }
  const std::size_t n = x.size(0), c = x.size(1);
  if (c != state.channels()) {
    throw std::invalid_argument("batch_norm: input has " + std::to_string(c) +
                                " channels, state has " + std::to_string(state.channels()));
  }
  const std::size_t inner = x.numel() / (n * c);
  const std::size_t count = n * inner;
  const bool batch_stats = mode != BatchNormMode::Eval;
  if (batch_stats && n < 2) {
    throw std::invalid_argument("batch_norm: training mode needs a batch of at least 2, got " +
                                std::to_string(n));
  }

  auto xv = x.data();
  std::vector<double> mean(c), invstd(c);
  if (batch_stats) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < inner; ++i) s += xv[(b * c + ch) * inner + i];
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < inner; ++i) {
          const double d = xv[(b * c + ch) * inner + i] - mu;
          ss += d * d;
        }
      const double var = ss / static_cast<double>(count);
      mean[ch] = mu;
      invstd[ch] = 1.0 / std::sqrt(var + state.epsilon);
      if (mode == BatchNormMode::Train) {
        const double unbiased = ss / static_cast<double>(count - 1);
        state.running_mean[ch] = (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * mu;
        state.running_var[ch] =
            (1.0 - state.momentum) * state.running_var[ch] + state.momentum * unbiased;
      }
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = state.running_mean[ch];
      invstd[ch] = 1.0 / std::sqrt(state.running_var[ch] + state.epsilon);
    }
  }

  auto gv = state.gamma.data();
  auto bv = state.beta.data();
  std::vector<double> xhat(x.numel()), out(x.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (b * c + ch) * inner + i;
        xhat[idx] = (xv[idx] - mean[ch]) * invstd[ch];
        out[idx] = gv[ch] * xhat[idx] + bv[ch];
      }

  return Tensor::make_result(
      x.shape(), std::move(out), "batch_norm", {x, state.gamma, state.beta},
      [n, c, inner, count, batch_stats, invstd = std::move(invstd),
       xhat = std::move(xhat)](Node& self) {
        Node& nx = in_node(self, 0);
        Node& ng = in_node(self, 1);
        Node& nb = in_node(self, 2);
        const auto& g = self.grad;
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t idx = (b * c + ch) * inner + i;
              sum_g += g[idx];
              sum_gx += g[idx] * xhat[idx];
            }
          if (ng.requires_grad) ng.grad_buffer()[ch] += sum_gx;
          if (nb.requires_grad) nb.grad_buffer()[ch] += sum_g;
          if (!nx.requires_grad) continue;
          auto& gx = nx.grad_buffer();
          const double gamma = ng.data[ch];
          const double scale_c = gamma * invstd[ch];
          const double m = static_cast<double>(count);
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t idx = (b * c + ch) * inner + i;
              if (batch_stats) {
                gx[idx] += scale_c * (g[idx] - sum_g / m - xhat[idx] * sum_gx / m);
              } else {
                gx[idx] += scale_c * g[idx];
              }
            }
        }
      });
}

// ---------------------------------------------------------------------------
// softmax / losses / pooling
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.dim()) {
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) + " out of range for " +
                                shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.size(i);
  for (std::size_t i = axis + 1; i < x.dim(); ++i) inner *= x.size(i);
  const std::size_t len = x.size(axis);
  auto xv = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        out[base + j * inner] = std::exp(xv[base + j * inner] - mx);
        z += out[base + j * inner];
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  return Tensor::make_result(x.shape(), std::move(out), "softmax", {x},
                             [outer, inner, len](Node& self) {
                               auto& gx = in_node(self, 0).grad_buffer();
                               const auto& y = self.data;
                               const auto& g = self.grad;
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t in = 0; in < inner; ++in) {
                                   const std::size_t base = o * len * inner + in;
                                   double dot = 0.0;
                                   for (std::size_t j = 0; j < len; ++j)
                                     dot += g[base + j * inner] * y[base + j * inner];
                                   for (std::size_t j = 0; j < len; ++j) {
                                     const std::size_t i = base + j * inner;
                                     gx[i] += y[i] * (g[i] - dot);
                                   }
                                 }
                             });
}

Tensor smoothed_cross_entropy(const Tensor& logits, std::span<const int> labels, double epsilon) {
  require_rank("smoothed_cross_entropy", logits, 2);
  const std::size_t n = logits.size(0), k = logits.size(1);
  if (labels.size() != n) {
    throw std::invalid_argument("smoothed_cross_entropy: " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(n) + " rows");
  }
  if (epsilon < 0.0 || epsilon >= 1.0) {
    throw std::invalid_argument("smoothed_cross_entropy: epsilon must lie in [0,1)");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw std::out_of_range("smoothed_cross_entropy: label " + std::to_string(y) +
                              " outside [0," + std::to_string(k) + ")");
    }
  }
  auto xv = logits.data();
  std::vector<double> probs(n * k);
  double loss = 0.0;
  const double off = epsilon / static_cast<double>(k);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv.data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) {
      const double logp = row[j] - lse;
      probs[r * k + j] = std::exp(logp);
      const double q = off + (static_cast<int>(j) == labels[r] ? 1.0 - epsilon : 0.0);
      loss -= q * logp;
    }
  }
  loss /= static_cast<double>(n);
  std::vector<int> ys(labels.begin(), labels.end());
  return Tensor::make_result(
      Shape{}, {loss}, "smoothed_cross_entropy", {logits},
      [n, k, off, epsilon, ys = std::move(ys), probs = std::move(probs)](Node& self) {
        auto& gx = in_node(self, 0).grad_buffer();
        const double g = self.grad[0] / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < k; ++j) {
            const double q = off + (static_cast<int>(j) == ys[r] ? 1.0 - epsilon : 0.0);
            gx[r * k + j] += g * (probs[r * k + j] - q);
          }
      });
}

Tensor gem_pool(const Tensor& x, double p, double floor) {
  require_rank("gem_pool", x, 4);
  if (p < 1.0) throw std::invalid_argument("gem_pool: p must be >= 1");
  const std::size_t n = x.size(0), c = x.size(1), area = x.size(2) * x.size(3);
  auto xv = x.data();
  for (double v : xv) {
    if (v < 0.0) throw std::invalid_argument("gem_pool: feature map has negative values");
  }
  std::vector<double> out(n * c);
  for (std::size_t r = 0; r < n * c; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < area; ++i) s += std::pow(std::max(xv[r * area + i], floor), p);
    out[r] = std::pow(s / static_cast<double>(area), 1.0 / p);
  }
  return Tensor::make_result(Shape{n, c}, std::move(out), "gem_pool", {x},
                             [n, c, area, p, floor](Node& self) {
                               Node& nx = in_node(self, 0);
                               auto& gx = nx.grad_buffer();
                               for (std::size_t r = 0; r < n * c; ++r) {
                                 const double y = self.data[r];
                                 const double coef = self.grad[r] * std::pow(y, 1.0 - p) /
                                                     static_cast<double>(area);
                                 for (std::size_t i = 0; i < area; ++i) {
                                   const double v = nx.data[r * area + i];
                                   if (v >= floor) gx[r * area + i] += coef * std::pow(v, p - 1.0);
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// Indexing and multi-view helpers
// ---------------------------------------------------------------------------

Tensor index_select(const Tensor& x, std::span<const std::size_t> indices) {
  if (x.dim() < 1) throw std::invalid_argument("index_select: scalar input");
  const std::size_t rows = x.size(0);
  const std::size_t width = rows ? x.numel() / rows : 0;
  for (auto i : indices) {
    if (i >= rows) {
      throw std::out_of_range("index_select: row " + std::to_string(i) + " of " +
                              std::to_string(rows));
    }
  }
  Shape shape = x.shape();
  shape[0] = indices.size();
  std::vector<double> out(indices.size() * width);
  auto xv = x.data();
  for (std::size_t r = 0; r < indices.size(); ++r)
    std::copy_n(xv.begin() + indices[r] * width, width, out.begin() + r * width);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return Tensor::make_result(std::move(shape), std::move(out), "index_select", {x},
                             [width, idx = std::move(idx)](Node& self) {
                               auto& gx = in_node(self, 0).grad_buffer();
                               for (std::size_t r = 0; r < idx.size(); ++r)
                                 for (std::size_t j = 0; j < width; ++j)
                                   gx[idx[r] * width + j] += self.grad[r * width + j];
                             });
}

Tensor pick(const Tensor& x, std::span<const int> column) {
  require_rank("pick", x, 2);
  const std::size_t n = x.size(0), k = x.size(1);
  if (column.size() != n) throw std::invalid_argument("pick: one column per row required");
  std::vector<double> out(n);
  std::vector<std::size_t> flat(n);
  for (std::size_t r = 0; r < n; ++r) {
    if (column[r] < 0 || static_cast<std::size_t>(column[r]) >= k) {
      throw std::out_of_range("pick: column " + std::to_string(column[r]) + " of " +
                              std::to_string(k));
    }
    flat[r] = r * k + static_cast<std::size_t>(column[r]);
    out[r] = x[flat[r]];
  }
  return Tensor::make_result(Shape{n}, std::move(out), "pick", {x},
                             [flat = std::move(flat)](Node& self) {
                               auto& gx = in_node(self, 0).grad_buffer();
                               for (std::size_t r = 0; r < flat.size(); ++r)
                                 gx[flat[r]] += self.grad[r];
                             });
}

Tensor channel_weighted_sum(const Tensor& maps, const Tensor& theta) {
  require_rank("channel_weighted_sum maps", maps, 4);
  require_rank("channel_weighted_sum theta", theta, 2);
  const std::size_t n = maps.size(0), c = maps.size(1), h = maps.size(2), w = maps.size(3);
  if (theta.size(0) != n || theta.size(1) != c) {
    shape_error("channel_weighted_sum", maps.shape(), theta.shape());
  }
  const std::size_t area = h * w;
  auto fv = maps.data();
  auto tv = theta.data();
  std::vector<double> out(n * area, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double t = tv[b * c + ch];
      const double* f = fv.data() + (b * c + ch) * area;
      for (std::size_t i = 0; i < area; ++i) out[b * area + i] += t * f[i];
    }
  return Tensor::make_result(Shape{n, h, w}, std::move(out), "channel_weighted_sum",
                             {maps, theta}, [n, c, area](Node& self) {
                               Node& nf = in_node(self, 0);
                               Node& nt = in_node(self, 1);
                               const auto& g = self.grad;
                               for (std::size_t b = 0; b < n; ++b)
                                 for (std::size_t ch = 0; ch < c; ++ch) {
                                   const std::size_t base = (b * c + ch) * area;
                                   if (nf.requires_grad) {
                                     auto& gf = nf.grad_buffer();
                                     const double t = nt.data[b * c + ch];
                                     for (std::size_t i = 0; i < area; ++i)
                                       gf[base + i] += t * g[b * area + i];
                                   }
                                   if (nt.requires_grad) {
                                     double s = 0.0;
                                     for (std::size_t i = 0; i < area; ++i)
                                       s += g[b * area + i] * nf.data[base + i];
                                     nt.grad_buffer()[b * c + ch] += s;
                                   }
                                 }
                             });
}

Tensor max_normalize(const Tensor& x, std::size_t* degenerate) {
  if (x.dim() < 1 || x.size(0) == 0) throw std::invalid_argument("max_normalize: empty input");
  const std::size_t n = x.size(0);
  const std::size_t width = x.numel() / n;
  auto xv = x.data();
  std::vector<double> out(x.numel(), 0.0);
  std::vector<double> row_max(n, 0.0);
  std::vector<std::size_t> arg(n, 0);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv.data() + r * width;
    const auto it = std::max_element(row, row + width);
    arg[r] = static_cast<std::size_t>(it - row);
    row_max[r] = *it;
    if (row_max[r] <= 0.0) {
      row_max[r] = 0.0;
      if (degenerate) ++*degenerate;
      continue;
    }
    for (std::size_t i = 0; i < width; ++i) out[r * width + i] = row[i] / row_max[r];
  }
  return Tensor::make_result(x.shape(), std::move(out), "max_normalize", {x},
                             [n, width, row_max = std::move(row_max),
                              arg = std::move(arg)](Node& self) {
                               Node& nx = in_node(self, 0);
                               auto& gx = nx.grad_buffer();
                               for (std::size_t r = 0; r < n; ++r) {
                                 const double m = row_max[r];
                                 if (m == 0.0) continue;
                                 double dot = 0.0;
                                 for (std::size_t i = 0; i < width; ++i) {
                                   const double g = self.grad[r * width + i];
                                   gx[r * width + i] += g / m;
                                   dot += g * nx.data[r * width + i];
                                 }
                                 gx[r * width + arg[r]] -= dot / (m * m);
                               }
                             });
}

Tensor spatial_gate(const Tensor& gate, const Tensor& maps) {
  require_rank("spatial_gate gate", gate, 3);
  require_rank("spatial_gate maps", maps, 4);
  const std::size_t n = maps.size(0), c = maps.size(1), area = maps.size(2) * maps.size(3);
  if (gate.size(0) != n || gate.size(1) != maps.size(2) || gate.size(2) != maps.size(3)) {
    shape_error("spatial_gate", gate.shape(), maps.shape());
  }
  auto av = gate.data();
  auto fv = maps.data();
  std::vector<double> out(maps.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < area; ++i) {
        const std::size_t idx = (b * c + ch) * area + i;
        out[idx] = av[b * area + i] * fv[idx];
      }
  return Tensor::make_result(maps.shape(), std::move(out), "spatial_gate", {gate, maps},
                             [n, c, area](Node& self) {
                               Node& na = in_node(self, 0);
                               Node& nf = in_node(self, 1);
                               const auto& g = self.grad;
                               for (std::size_t b = 0; b < n; ++b)
                                 for (std::size_t ch = 0; ch < c; ++ch)
                                   for (std::size_t i = 0; i < area; ++i) {
                                     const std::size_t idx = (b * c + ch) * area + i;
                                     if (na.requires_grad)
                                       na.grad_buffer()[b * area + i] += g[idx] * nf.data[idx];
                                     if (nf.requires_grad)
                                       nf.grad_buffer()[idx] += g[idx] * na.data[b * area + i];
                                   }
                             });
}

Tensor scale_rows(const Tensor& x, std::span<const double> weights) {
  if (x.dim() < 1 || weights.size() != x.size(0)) {
    throw std::invalid_argument("scale_rows: need one weight per row of " + shape_str(x.shape()));
  }
  const std::size_t width = x.size(0) ? x.numel() / x.size(0) : 0;
  auto xv = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < weights.size(); ++r)
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] = weights[r] * xv[r * width + j];
  std::vector<double> w(weights.begin(), weights.end());
  return Tensor::make_result(x.shape(), std::move(out), "scale_rows", {x},
                             [width, w = std::move(w)](Node& self) {
                               auto& gx = in_node(self, 0).grad_buffer();
                               for (std::size_t r = 0; r < w.size(); ++r)
                                 for (std::size_t j = 0; j < width; ++j)
                                   gx[r * width + j] += w[r] * self.grad[r * width + j];
                             });
}

Tensor group_sum(const Tensor& x, const std::vector<std::vector<std::size_t>>& groups) {
  if (x.dim() < 1) throw std::invalid_argument("group_sum: scalar input");
  const std::size_t rows = x.size(0);
  const std::size_t width = rows ? x.numel() / rows : 0;
  for (const auto& grp : groups)
    for (auto i : grp)
      if (i >= rows) throw std::out_of_range("group_sum: row index out of range");
  Shape shape = x.shape();
  shape[0] = groups.size();
  std::vector<double> out(groups.size() * width, 0.0);
  auto xv = x.data();
  for (std::size_t gi = 0; gi < groups.size(); ++gi)
    for (auto r : groups[gi])
      for (std::size_t j = 0; j < width; ++j) out[gi * width + j] += xv[r * width + j];
  return Tensor::make_result(std::move(shape), std::move(out), "group_sum", {x},
                             [width, groups](Node& self) {
                               auto& gx = in_node(self, 0).grad_buffer();
                               for (std::size_t gi = 0; gi < groups.size(); ++gi)
                                 for (auto r : groups[gi])
                                   for (std::size_t j = 0; j < width; ++j)
                                     gx[r * width + j] += self.grad[gi * width + j];
                             });
}

Tensor row_l2_distance(const Tensor& a, const Tensor& b) {
  require_rank("row_l2_distance", a, 2);
  if (a.shape() != b.shape()) shape_error("row_l2_distance", a.shape(), b.shape());
  const std::size_t n = a.size(0), c = a.size(1);
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = av[r * c + j] - bv[r * c + j];
      s += d * d;
    }
    out[r] = std::sqrt(s);
  }
  return Tensor::make_result(Shape{n}, std::move(out), "row_l2_distance", {a, b},
                             [n, c](Node& self) {
                               Node& na = in_node(self, 0);
                               Node& nb = in_node(self, 1);
                               for (std::size_t r = 0; r < n; ++r) {
                                 const double dist = self.data[r];
                                 if (dist == 0.0) continue;
                                 const double g = self.grad[r] / dist;
                                 for (std::size_t j = 0; j < c; ++j) {
                                   const double d = na.data[r * c + j] - nb.data[r * c + j];
                                   if (na.requires_grad) na.grad_buffer()[r * c + j] += g * d;
                                   if (nb.requires_grad) nb.grad_buffer()[r * c + j] -= g * d;
                                 }
                               }
                             });
}

}  // namespace mvi2p

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "zapnet/autograd.hpp"
#include "zapnet/errors.hpp"
#include "zapnet/tensor.hpp"

namespace zapnet {

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
MatrixMap<T> as_matrix(T* data, std::size_t rows, std::size_t cols) {
  return MatrixMap<T>(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <typename T>
ConstMatrixMap<T> as_matrix(const T* data, std::size_t rows, std::size_t cols) {
  return ConstMatrixMap<T>(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kh, kw, stride, pad;
  std::size_t out_h, out_w;
  std::size_t patch() const { return channels * kh * kw; }
  std::size_t positions() const { return out_h * out_w; }
};

// Position-major patches of one sample:
// cols[oy*out_w + ox][(c*kh + i)*kw + j] = x[c][oy*s + i - pad][ox*s + j - pad]
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
  const std::size_t k = g.patch();
  if (g.pad == 0 && g.stride == 1) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy)
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        T* __restrict row = cols + (oy * g.out_w + ox) * k;
        for (std::size_t c = 0; c < g.channels; ++c)
          for (std::size_t i = 0; i < g.kh; ++i) {
            const T* __restrict src = x + (c * g.height + oy + i) * g.width + ox;
            for (std::size_t j = 0; j < g.kw; ++j) *row++ = src[j];
          }
      }
    return;
  }
  for (std::size_t oy = 0; oy < g.out_h; ++oy)
    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
      T* row = cols + (oy * g.out_w + ox) * k;
      for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t i = 0; i < g.kh; ++i) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                          static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + (c * g.kh + i) * g.kw;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(dst, dst + g.kw, T{0});
            continue;
          }
          const T* src = x + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t j = 0; j < g.kw; ++j) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                            static_cast<std::ptrdiff_t>(g.pad);
            dst[j] = ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)
                         ? src[static_cast<std::size_t>(ix)]
                         : T{0};
          }
        }
    }
}

// Adjoint of im2col: scatter-adds patch gradients back onto the input.
template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* x) {
  const std::size_t k = g.patch();
  if (g.pad == 0 && g.stride == 1) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy)
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        const T* __restrict row = cols + (oy * g.out_w + ox) * k;
        for (std::size_t c = 0; c < g.channels; ++c)
          for (std::size_t i = 0; i < g.kh; ++i) {
            T* __restrict dst = x + (c * g.height + oy + i) * g.width + ox;
            for (std::size_t j = 0; j < g.kw; ++j) dst[j] += *row++;
          }
      }
    return;
  }
  for (std::size_t oy = 0; oy < g.out_h; ++oy)
    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
      const T* row = cols + (oy * g.out_w + ox) * k;
      for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t i = 0; i < g.kh; ++i) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          const T* src = row + (c * g.kh + i) * g.kw;
          T* dst = x + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t j = 0; j < g.kw; ++j) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width))
              dst[static_cast<std::size_t>(ix)] += src[j];
          }
        }
    }
}

}  // namespace detail

/// Output spatial size of a convolution; zero when the kernel does not fit.
inline std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride,
                                 std::size_t pad) {
  const std::size_t padded = in + 2 * pad;
  if (padded < kernel || stride == 0) return 0;
  return (padded - kernel) / stride + 1;
}

/// Cross-correlation of an NCHW input with an OIHW weight plus per-channel bias.
template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var weight, Var bias, std::size_t stride = 1,
           std::size_t padding = 0) {
  const auto& xs = tape.shape(input);
  const auto& ws = tape.shape(weight);
  const auto& bs = tape.shape(bias);
  if (xs.size() != 4 || ws.size() != 4) {
    throw ShapeError("conv2d expects NCHW input and OIHW weight, got " + shape_str(xs) + " and " +
                     shape_str(ws));
  }
  if (xs[1] != ws[1]) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(xs) + ", weight " +
                     shape_str(ws));
  }
  if (bs.size() != 1 || bs[0] != ws[0]) throw ShapeError("conv2d bias must have shape [O]");

  detail::ConvGeometry g{xs[1], xs[2], xs[3], ws[2], ws[3], stride, padding, 0, 0};
  g.out_h = conv_out_size(g.height, g.kh, stride, padding);
  g.out_w = conv_out_size(g.width, g.kw, stride, padding);
  if (g.out_h == 0 || g.out_w == 0) {
    throw ShapeError("conv2d output would be empty for input " + shape_str(xs));
  }

  const std::size_t batch = xs[0], out_c = ws[0], k = g.patch(), p = g.positions();
  const std::size_t in_size = g.channels * g.height * g.width;
  // Patches of the whole batch stacked into one [N*P x K] matrix so each
  // direction is a single large product.
  auto cols = std::make_shared<std::vector<T>>(batch * p * k);
  const T* x = tape.value(input).data().data();
  for (std::size_t n = 0; n < batch; ++n) detail::im2col(g, x + n * in_size, cols->data() + n * p * k);

  const auto w = detail::as_matrix(tape.value(weight).data().data(), out_c, k);
  const T* b = tape.value(bias).data().data();
  detail::RowMatrix<T> yt = detail::as_matrix(static_cast<const T*>(cols->data()), batch * p, k) *
                            w.transpose();
  Tensor<T> out(Shape{batch, out_c, g.out_h, g.out_w});
  T* y = out.data().data();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t o = 0; o < out_c; ++o) {
      T* dst = y + (n * out_c + o) * p;
      for (std::size_t q = 0; q < p; ++q) dst[q] = yt(static_cast<Eigen::Index>(n * p + q), static_cast<Eigen::Index>(o)) + b[o];
    }

  // Patches are only needed for the weight gradient.
  if (!tape.requires_grad(weight)) cols.reset();

  return tape.record(
      "conv2d", std::move(out), {input, weight, bias},
      [=](Tape<T>& t, const Tensor<T>&, const std::vector<T>& gy) {
        if (t.requires_grad(bias)) {
          auto& gb = t.grad(bias);
          for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t o = 0; o < out_c; ++o) {
              const T* src = gy.data() + (n * out_c + o) * p;
              T acc{0};
              for (std::size_t q = 0; q < p; ++q) acc += src[q];
              gb[o] += acc;
            }
        }
        if (!t.requires_grad(weight) && !t.requires_grad(input)) return;
        // gy^T as [N*P x O]
        detail::RowMatrix<T> gyt(static_cast<Eigen::Index>(batch * p), static_cast<Eigen::Index>(out_c));
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t o = 0; o < out_c; ++o) {
            const T* src = gy.data() + (n * out_c + o) * p;
            for (std::size_t q = 0; q < p; ++q) gyt(static_cast<Eigen::Index>(n * p + q), static_cast<Eigen::Index>(o)) = src[q];
          }
        if (t.requires_grad(weight)) {
          // dW[O x K] += gy^T' * cols
          const auto colm = detail::as_matrix(static_cast<const T*>(cols->data()), batch * p, k);
          detail::as_matrix(t.grad(weight).data(), out_c, k).noalias() += gyt.transpose() * colm;
        }
        if (t.requires_grad(input)) {
          const auto wm = detail::as_matrix(t.value(weight).data().data(), out_c, k);
          detail::RowMatrix<T> dcols = gyt * wm;
          auto& gx = t.grad(input);
          for (std::size_t n = 0; n < batch; ++n)
            detail::col2im(g, dcols.data() + n * p * k, gx.data() + n * in_size);
        }
      });
}

/// Per-(sample, channel) normalization over spatial positions with biased
/// variance; no affine parameters.
template <typename T>
Var instance_norm(Tape<T>& tape, Var input, T eps = T(1e-5)) {
  const auto& xs = tape.shape(input);
  if (xs.size() != 4) throw ShapeError("instance_norm expects NCHW input");
  const std::size_t groups = xs[0] * xs[1], hw = xs[2] * xs[3];
  Tensor<T> out(xs);
  auto inv_std = std::make_shared<std::vector<T>>(groups);
  const T* x = tape.value(input).data().data();
  T* y = out.data().data();
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const T* xg = x + gi * hw;
    T mean{0};
    for (std::size_t i = 0; i < hw; ++i) mean += xg[i];
    mean /= static_cast<T>(hw);
    T var{0};
    for (std::size_t i = 0; i < hw; ++i) var += (xg[i] - mean) * (xg[i] - mean);
    var /= static_cast<T>(hw);
    const T rstd = T{1} / std::sqrt(var + eps);
    (*inv_std)[gi] = rstd;
    for (std::size_t i = 0; i < hw; ++i) y[gi * hw + i] = (xg[i] - mean) * rstd;
  }
  return tape.record(
      "instance_norm", std::move(out), {input},
      [=](Tape<T>& t, const Tensor<T>& yt, const std::vector<T>& gy) {
        // dx = rstd * (dy - mean(dy) - y * mean(dy * y))
        const T* yv = yt.data().data();
        auto& gx = t.grad(input);
        for (std::size_t gi = 0; gi < groups; ++gi) {
          const T* yg = yv + gi * hw;
          const T* dg = gy.data() + gi * hw;
          T mean_dy{0}, mean_dyy{0};
          for (std::size_t i = 0; i < hw; ++i) {
            mean_dy += dg[i];
            mean_dyy += dg[i] * yg[i];
          }
          mean_dy /= static_cast<T>(hw);
          mean_dyy /= static_cast<T>(hw);
          const T rstd = (*inv_std)[gi];
          for (std::size_t i = 0; i < hw; ++i)
            gx[gi * hw + i] += rstd * (dg[i] - mean_dy - yg[i] * mean_dyy);
        }
      });
}


template <typename T>
Var relu(Tape<T>& tape, Var input) {
  Tensor<T> out = tape.value(input);
  T* __restrict y = out.data().data();
  for (std::size_t i = 0; i < out.numel(); ++i) y[i] = std::max(y[i], T{0});
  return tape.record("relu", std::move(out), {input},
                     [input](Tape<T>& t, const Tensor<T>& yt, const std::vector<T>& gy) {
                       const T* __restrict yv = yt.data().data();
                       const T* __restrict g = gy.data();
                       T* __restrict gx = t.grad(input).data();
                       for (std::size_t i = 0; i < gy.size(); ++i)
                         gx[i] += yv[i] > T{0} ? g[i] : T{0};
                     });
}

/// Non-overlapping 2x2 max pooling; odd trailing rows/columns are dropped.
/// Ties resolve to the first maximum in row-major window order.
template <typename T>
Var maxpool2x2(Tape<T>& tape, Var input) {
  const auto& xs = tape.shape(input);
  if (xs.size() != 4) throw ShapeError("maxpool2x2 expects NCHW input");
  if (xs[2] < 2 || xs[3] < 2) {
    throw ShapeError("maxpool2x2 needs spatial dims >= 2, got " + shape_str(xs));
  }
  const std::size_t planes = xs[0] * xs[1], h = xs[2], w = xs[3], oh = h / 2, ow = w / 2;
  Tensor<T> out(Shape{xs[0], xs[1], oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  const T* x = tape.value(input).data().data();
  T* y = out.data().data();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* xp = x + pl * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        // Candidates in row-major window order; ties keep the earlier one.
        const std::size_t i0 = (2 * oy) * w + 2 * ox, i1 = i0 + 1, i2 = i0 + w, i3 = i2 + 1;
        std::size_t best = i0;
        best = xp[i1] > xp[best] ? i1 : best;
        best = xp[i2] > xp[best] ? i2 : best;
        best = xp[i3] > xp[best] ? i3 : best;
        const std::size_t o = (pl * oh + oy) * ow + ox;
        y[o] = xp[best];
        (*argmax)[o] = pl * h * w + best;
      }
  }
  return tape.record("maxpool2x2", std::move(out), {input},
                     [input, argmax](Tape<T>& t, const Tensor<T>&, const std::vector<T>& gy) {
                       auto& gx = t.grad(input);
                       for (std::size_t o = 0; o < gy.size(); ++o) gx[(*argmax)[o]] += gy[o];
                     });
}

/// Reshapes [N, ...] to [N, prod(...)]; data is shared row-major layout.
template <typename T>
Var flatten(Tape<T>& tape, Var input) {
  const auto& xs = tape.shape(input);
  if (xs.empty()) throw ShapeError("flatten of rank-0 tensor");
  const std::size_t n = xs[0];
  const std::size_t f = tape.value(input).numel() / n;
  Tensor<T> out(Shape{n, f}, tape.value(input).storage());
  return tape.record("flatten", std::move(out), {input},
                     [input](Tape<T>& t, const Tensor<T>&, const std::vector<T>& gy) {
                       auto& gx = t.grad(input);
                       for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
                     });
}

/// y[N x C] = x[N x F] * W^T + b with W of shape [C x F].
template <typename T>
Var linear(Tape<T>& tape, Var input, Var weight, Var bias) {
  const auto& xs = tape.shape(input);
  const auto& ws = tape.shape(weight);
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1]) {
    throw ShapeError("linear shape mismatch: input " + shape_str(xs) + ", weight " + shape_str(ws));
  }
  if (tape.shape(bias) != Shape{ws[0]}) throw ShapeError("linear bias must have shape [C]");
  const std::size_t n = xs[0], f = xs[1], c = ws[0];
  Tensor<T> out(Shape{n, c});
  const T* x = tape.value(input).data().data();
  const T* w = tape.value(weight).data().data();
  const T* b = tape.value(bias).data().data();
  auto y = detail::as_matrix(out.data().data(), n, c);
  y.noalias() = detail::as_matrix(x, n, f) * detail::as_matrix(w, c, f).transpose();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) += b[j];
  return tape.record(
      "linear", std::move(out), {input, weight, bias},
      [=](Tape<T>& t, const Tensor<T>&, const std::vector<T>& gy) {
        const auto g = detail::as_matrix(gy.data(), n, c);
        if (t.requires_grad(bias)) {
          auto& gb = t.grad(bias);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) gb[j] += gy[i * c + j];
        }
        if (t.requires_grad(weight)) {
          // dW[C x F] += gy^T * x
          detail::as_matrix(t.grad(weight).data(), c, f).noalias() +=
              g.transpose() * detail::as_matrix(t.value(input).data().data(), n, f);
        }
        if (t.requires_grad(input)) {
          // dx[N x F] += gy * W
          detail::as_matrix(t.grad(input).data(), n, f).noalias() +=
              g * detail::as_matrix(t.value(weight).data().data(), c, f);
        }
      });
}

/// Mean over the batch of -log softmax(logits)[label], using log-sum-exp
/// stabilization.
template <typename T>
Var cross_entropy(Tape<T>& tape, Var logits, std::span<const std::size_t> labels) {
  const auto& ls = tape.shape(logits);
  if (ls.size() != 2) throw ShapeError("cross_entropy expects [N x C] logits");
  const std::size_t n = ls[0], c = ls[1];
  if (labels.size() != n) throw ShapeError("cross_entropy: label count does not match batch");
  for (std::size_t lab : labels) {
    if (lab >= c) {
      throw ShapeError("cross_entropy: label " + std::to_string(lab) + " out of range for " +
                       std::to_string(c) + " classes");
    }
  }
  const T* z = tape.value(logits).data().data();
  auto probs = std::make_shared<std::vector<T>>(n * c);
  T total{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T* zi = z + i * c;
    const T mx = *std::max_element(zi, zi + c);
    T se{0};
    for (std::size_t j = 0; j < c; ++j) se += std::exp(zi[j] - mx);
    const T lse = mx + std::log(se);
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(zi[j] - lse);
    total += lse - zi[labels[i]];
  }
  std::vector<std::size_t> labs(labels.begin(), labels.end());
  return tape.record("cross_entropy", Tensor<T>::scalar(total / static_cast<T>(n)), {logits},
                     [=](Tape<T>& t, const Tensor<T>&, const std::vector<T>& gy) {
                       auto& gz = t.grad(logits);
                       const T s = gy[0] / static_cast<T>(n);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < c; ++j) {
                           const T onehot = j == labs[i] ? T{1} : T{0};
                           gz[i * c + j] += s * ((*probs)[i * c + j] - onehot);
                         }
                     });
}

/// Per-row cross-entropy values (no tape); used for evaluation and probes.
template <typename T>
std::vector<double> cross_entropy_rows(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw ShapeError("cross_entropy_rows: label count does not match batch");
  for (std::size_t lab : labels)
    if (lab >= c) throw ShapeError("cross_entropy_rows: label " + std::to_string(lab) + " out of range");
  std::vector<double> out(n);
  const T* z = logits.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const T* zi = z + i * c;
    const T mx = *std::max_element(zi, zi + c);
    T se{0};
    for (std::size_t j = 0; j < c; ++j) se += std::exp(zi[j] - mx);
    out[i] = static_cast<double>(mx + std::log(se) - zi[labels[i]]);
  }
  return out;
}

}  // namespace zapnet

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "recnet/error.hpp"
#include "recnet/parallel.hpp"
#include "recnet/tensor.hpp"

namespace recnet {

// ---------------------------------------------------------------------------
// Convolution (stride 1, zero padding, cross-correlation orientation)
// ---------------------------------------------------------------------------

struct Padding {
  std::size_t h = 0;
  std::size_t w = 0;

  /// Padding that preserves spatial size; only defined for odd kernels.
  static Padding same(const KernelShape &k) {
    if (k.kh % 2 == 0 || k.kw % 2 == 0)
      throw ConfigError("same padding requires an odd kernel, got " + std::to_string(k.kh) + "x" +
                        std::to_string(k.kw));
    return {(k.kh - 1) / 2, (k.kw - 1) / 2};
  }
};

inline Shape4 conv2d_output_shape(const Shape4 &x, const KernelShape &k, Padding pad) {
  if (x.c != k.in)
    throw ShapeError("conv2d: input has " + std::to_string(x.c) + " channels, kernel expects " +
                     std::to_string(k.in));
  if (x.h + 2 * pad.h < k.kh || x.w + 2 * pad.w < k.kw)
    throw ShapeError("conv2d: kernel " + k.str() + " larger than padded input " + x.str());
  return {x.n, k.out, x.h + 2 * pad.h - k.kh + 1, x.w + 2 * pad.w - k.kw + 1};
}

namespace detail {

// Valid output column range [lo, hi) for kernel column kx: input column ox + kx - pad
// must land inside [0, in_w).
inline std::pair<std::size_t, std::size_t> tap_range(std::size_t out_len, std::size_t in_len,
                                                     std::size_t k, std::size_t pad) {
  const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(pad);
  const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
  const std::ptrdiff_t hi =
      std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(out_len),
                               static_cast<std::ptrdiff_t>(in_len) - shift);
  if (hi <= lo)
    return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

} // namespace detail

/// y[n,o] = bias[o] + sum_i sum_(ky,kx) w[o,i,ky,kx] * x[n,i,oy+ky-ph,ox+kx-pw]
template <typename T>
Tensor4<T> conv2d_forward(const Tensor4<T> &x, const ConvKernel<T> &w, std::span<const T> bias,
                          Padding pad) {
  const Shape4 xs = x.shape();
  const KernelShape ks = w.shape();
  const Shape4 ys = conv2d_output_shape(xs, ks, pad);
  if (!bias.empty() && bias.size() != ks.out)
    throw ShapeError("conv2d: bias of length " + std::to_string(bias.size()) + " for " +
                     std::to_string(ks.out) + " output channels");
  Tensor4<T> y(ys);
  parallel_for(ys.n * ys.c, [&](std::size_t job) {
    const std::size_t n = job / ys.c, o = job % ys.c;
    T *out = y.data() + y.offset(n, o, 0, 0);
    if (!bias.empty())
      std::fill_n(out, ys.plane(), bias[o]);
    for (std::size_t i = 0; i < ks.in; ++i) {
      const T *in = x.data() + x.offset(n, i, 0, 0);
      for (std::size_t ky = 0; ky < ks.kh; ++ky) {
        const auto [ylo, yhi] = detail::tap_range(ys.h, xs.h, ky, pad.h);
        for (std::size_t kx = 0; kx < ks.kw; ++kx) {
          const auto [xlo, xhi] = detail::tap_range(ys.w, xs.w, kx, pad.w);
          const auto shift = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad.w);
          const T wv = w.at(o, i, ky, kx);
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const T *row = in + (oy + ky - pad.h) * xs.w + shift;
            T *orow = out + oy * ys.w;
            for (std::size_t ox = xlo; ox < xhi; ++ox)
              orow[ox] += wv * row[ox];
          }
        }
      }
    }
  });
  return y;
}

template <typename T>
Tensor4<T> conv2d_forward(const Tensor4<T> &x, const ConvKernel<T> &w, Padding pad) {
  return conv2d_forward(x, w, std::span<const T>{}, pad);
}

/// Gradient of the conv input.
template <typename T>
Tensor4<T> conv2d_backward_input(const Shape4 &xs, const ConvKernel<T> &w,
                                 const Tensor4<T> &grad_out, Padding pad) {
  const KernelShape ks = w.shape();
  const Shape4 ys = conv2d_output_shape(xs, ks, pad);
  if (grad_out.shape() != ys)
    throw ShapeError("conv2d_backward: grad_out " + grad_out.shape().str() + " but forward output " +
                     ys.str());
  Tensor4<T> gx(xs);
  parallel_for(xs.n * xs.c, [&](std::size_t job) {
    const std::size_t n = job / xs.c, i = job % xs.c;
    T *gin = gx.data() + gx.offset(n, i, 0, 0);
    for (std::size_t o = 0; o < ks.out; ++o) {
      const T *g = grad_out.data() + grad_out.offset(n, o, 0, 0);
      for (std::size_t ky = 0; ky < ks.kh; ++ky) {
        const auto [ylo, yhi] = detail::tap_range(ys.h, xs.h, ky, pad.h);
        for (std::size_t kx = 0; kx < ks.kw; ++kx) {
          const auto [xlo, xhi] = detail::tap_range(ys.w, xs.w, kx, pad.w);
          const auto shift = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad.w);
          const T wv = w.at(o, i, ky, kx);
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            T *row = gin + (oy + ky - pad.h) * xs.w + shift;
            const T *grow = g + oy * ys.w;
            for (std::size_t ox = xlo; ox < xhi; ++ox)
              row[ox] += wv * grow[ox];
          }
        }
      }
    }
  });
  return gx;
}

/// Adds d(loss)/d(w) into `grad_w` (additive, so shared kernels can be accumulated over uses).
template <typename T>
void conv2d_accumulate_weight_grad(const Tensor4<T> &x, const Tensor4<T> &grad_out,
                                   const KernelShape &ks, Padding pad, std::span<T> grad_w) {
  const Shape4 xs = x.shape();
  const Shape4 ys = conv2d_output_shape(xs, ks, pad);
  if (grad_out.shape() != ys)
    throw ShapeError("conv2d_backward: grad_out " + grad_out.shape().str() + " but forward output " +
                     ys.str());
  if (grad_w.size() != ks.size())
    throw ShapeError("conv2d_backward: weight gradient buffer has wrong size");
  parallel_for(ks.out, [&](std::size_t o) {
    for (std::size_t i = 0; i < ks.in; ++i)
      for (std::size_t ky = 0; ky < ks.kh; ++ky) {
        const auto [ylo, yhi] = detail::tap_range(ys.h, xs.h, ky, pad.h);
        for (std::size_t kx = 0; kx < ks.kw; ++kx) {
          const auto [xlo, xhi] = detail::tap_range(ys.w, xs.w, kx, pad.w);
          const auto shift = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad.w);
          T acc = 0;
          for (std::size_t n = 0; n < xs.n; ++n) {
            const T *in = x.data() + x.offset(n, i, 0, 0);
            const T *g = grad_out.data() + grad_out.offset(n, o, 0, 0);
            for (std::size_t oy = ylo; oy < yhi; ++oy) {
              const T *row = in + (oy + ky - pad.h) * xs.w + shift;
              const T *grow = g + oy * ys.w;
              for (std::size_t ox = xlo; ox < xhi; ++ox)
                acc += grow[ox] * row[ox];
            }
          }
          grad_w[((o * ks.in + i) * ks.kh + ky) * ks.kw + kx] += acc;
        }
      }
  });
}

/// Adds the per-channel sum of `grad_out` into `grad_bias`.
template <typename T>
void accumulate_channel_sums(const Tensor4<T> &grad_out, std::span<T> grad_bias) {
  const Shape4 s = grad_out.shape();
  if (grad_bias.size() != s.c)
    throw ShapeError("bias gradient: expected " + std::to_string(s.c) + " channels");
  for (std::size_t c = 0; c < s.c; ++c) {
    T acc = 0;
    for (std::size_t n = 0; n < s.n; ++n)
      for (T v : grad_out.plane(n, c))
        acc += v;
    grad_bias[c] += acc;
  }
}

template <typename T> struct ConvGrads {
  Tensor4<T> grad_x;
  std::vector<T> grad_w;
  std::vector<T> grad_bias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T> &x, const ConvKernel<T> &w,
                             const Tensor4<T> &grad_out, Padding pad) {
  ConvGrads<T> g;
  g.grad_x = conv2d_backward_input(x.shape(), w, grad_out, pad);
  g.grad_w.assign(w.size(), T(0));
  conv2d_accumulate_weight_grad(x, grad_out, w.shape(), pad, std::span<T>(g.grad_w));
  g.grad_bias.assign(w.shape().out, T(0));
  accumulate_channel_sums(grad_out, std::span<T>(g.grad_bias));
  return g;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

enum class BnMode { Train, Eval };

template <typename T> struct BnState {
  ParamVec<T> gamma;
  ParamVec<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.9);
  BnMode mode = BnMode::Train;

  BnState() = default;
  explicit BnState(std::size_t channels)
      : gamma(channels, T(1)), beta(channels, T(0)), running_mean(channels, T(0)),
        running_var(channels, T(1)) {}

  std::size_t channels() const { return gamma.size(); }
};

template <typename T> struct BnCache {
  Tensor4<T> x_hat;
  std::vector<T> inv_std;
  BnMode mode = BnMode::Train;
};

/// Normalizes `x` per channel using channels [offset, offset + x.c) of `s`, so one state can
/// cover a wider concatenated tensor that is processed slice by slice.
template <typename T>
Tensor4<T> batchnorm_forward(const Tensor4<T> &x, BnState<T> &s, BnCache<T> *cache = nullptr,
                             std::size_t offset = 0) {
  const Shape4 xs = x.shape();
  if (offset + xs.c > s.channels())
    throw ShapeError("batchnorm: " + std::to_string(xs.c) + " channels at offset " +
                     std::to_string(offset) + " exceed state width " +
                     std::to_string(s.channels()));
  const std::size_t m = xs.n * xs.plane();
  if (s.mode == BnMode::Train && m < 2)
    throw ConfigError("batchnorm: train mode needs at least 2 values per channel, got " +
                      std::to_string(m));
  Tensor4<T> y(xs);
  Tensor4<T> x_hat(xs);
  std::vector<T> inv_std(xs.c);
  for (std::size_t c = 0; c < xs.c; ++c) {
    const std::size_t sc = offset + c;
    T mean, var;
    if (s.mode == BnMode::Train) {
      T acc = 0;
      for (std::size_t n = 0; n < xs.n; ++n)
        for (T v : x.plane(n, c))
          acc += v;
      mean = acc / static_cast<T>(m);
      T sq = 0;
      for (std::size_t n = 0; n < xs.n; ++n)
        for (T v : x.plane(n, c))
          sq += (v - mean) * (v - mean);
      var = sq / static_cast<T>(m);
      s.running_mean[sc] = s.momentum * s.running_mean[sc] + (T(1) - s.momentum) * mean;
      s.running_var[sc] = s.momentum * s.running_var[sc] + (T(1) - s.momentum) * var;
    } else {
      mean = s.running_mean[sc];
      var = s.running_var[sc];
    }
    const T is = T(1) / std::sqrt(var + s.eps);
    inv_std[c] = is;
    const T g = s.gamma.value[sc], b = s.beta.value[sc];
    for (std::size_t n = 0; n < xs.n; ++n) {
      auto in = x.plane(n, c);
      auto xh = x_hat.plane(n, c);
      auto out = y.plane(n, c);
      for (std::size_t p = 0; p < in.size(); ++p) {
        xh[p] = (in[p] - mean) * is;
        out[p] = g * xh[p] + b;
      }
    }
  }
  if (cache) {
    cache->x_hat = std::move(x_hat);
    cache->inv_std = std::move(inv_std);
    cache->mode = s.mode;
  }
  return y;
}

template <typename T> struct BnGrads {
  Tensor4<T> grad_x;
  std::vector<T> grad_gamma;
  std::vector<T> grad_beta;
};

/// Reverse mode of batchnorm_forward. In train mode the batch statistics are treated as
/// functions of x; in eval mode only the affine path contributes.
template <typename T>
BnGrads<T> batchnorm_backward(const Tensor4<T> &grad_out, const BnState<T> &s,
                              const BnCache<T> &cache, std::size_t offset = 0) {
  const Shape4 xs = grad_out.shape();
  if (cache.x_hat.shape() != xs)
    throw ShapeError("batchnorm_backward: grad_out " + xs.str() + " vs cached " +
                     cache.x_hat.shape().str());
  const T m = static_cast<T>(xs.n * xs.plane());
  BnGrads<T> g{Tensor4<T>(xs), std::vector<T>(xs.c, T(0)), std::vector<T>(xs.c, T(0))};
  for (std::size_t c = 0; c < xs.c; ++c) {
    T sum_g = 0, sum_gx = 0;
    for (std::size_t n = 0; n < xs.n; ++n) {
      auto go = grad_out.plane(n, c);
      auto xh = cache.x_hat.plane(n, c);
      for (std::size_t p = 0; p < go.size(); ++p) {
        sum_g += go[p];
        sum_gx += go[p] * xh[p];
      }
    }
    g.grad_beta[c] = sum_g;
    g.grad_gamma[c] = sum_gx;
    const T scale = s.gamma.value[offset + c] * cache.inv_std[c];
    for (std::size_t n = 0; n < xs.n; ++n) {
      auto go = grad_out.plane(n, c);
      auto xh = cache.x_hat.plane(n, c);
      auto gx = g.grad_x.plane(n, c);
      if (cache.mode == BnMode::Train) {
        for (std::size_t p = 0; p < go.size(); ++p)
          gx[p] = scale * (go[p] - (sum_g + xh[p] * sum_gx) / m);
      } else {
        for (std::size_t p = 0; p < go.size(); ++p)
          gx[p] = scale * go[p];
      }
    }
  }
  return g;
}

/// Backward that also adds the affine gradients into the state's gradient buffers.
template <typename T>
Tensor4<T> batchnorm_backward_accumulate(const Tensor4<T> &grad_out, BnState<T> &s,
                                         const BnCache<T> &cache, std::size_t offset = 0) {
  BnGrads<T> g = batchnorm_backward(grad_out, s, cache, offset);
  for (std::size_t c = 0; c < g.grad_gamma.size(); ++c) {
    s.gamma.grad[offset + c] += g.grad_gamma[c];
    s.beta.grad[offset + c] += g.grad_beta[c];
  }
  return std::move(g.grad_x);
}

// ---------------------------------------------------------------------------
// Elementwise and pooling
// ---------------------------------------------------------------------------

template <typename T> Tensor4<T> relu(const Tensor4<T> &x) {
  Tensor4<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

template <typename T> void relu_inplace(Tensor4<T> &x) {
  for (T &v : x.values())
    v = v > T(0) ? v : T(0);
}

/// Masks grad_out where x <= 0 (subgradient 0 at exactly 0). `x` may be either the
/// pre-activation or the ReLU output; both have the same positive support.
template <typename T> Tensor4<T> relu_backward(const Tensor4<T> &x, const Tensor4<T> &grad_out) {
  if (x.shape() != grad_out.shape())
    throw ShapeError("relu_backward: " + x.shape().str() + " vs " + grad_out.shape().str());
  Tensor4<T> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    g[i] = x[i] > T(0) ? grad_out[i] : T(0);
  return g;
}

template <typename T> struct MaxPoolResult {
  Tensor4<T> out;
  std::vector<std::uint32_t> argmax; // flat input index per output element
};

/// Non-overlapping 2x2 max pooling; ties go to the first element in row-major scan order.
template <typename T> MaxPoolResult<T> maxpool2(const Tensor4<T> &x) {
  const Shape4 xs = x.shape();
  if (xs.h % 2 != 0 || xs.w % 2 != 0)
    throw ShapeError("maxpool2: spatial dims must be even, got " + xs.str());
  const Shape4 ys{xs.n, xs.c, xs.h / 2, xs.w / 2};
  MaxPoolResult<T> r{Tensor4<T>(ys), std::vector<std::uint32_t>(ys.size())};
  std::size_t k = 0;
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t c = 0; c < xs.c; ++c)
      for (std::size_t oy = 0; oy < ys.h; ++oy)
        for (std::size_t ox = 0; ox < ys.w; ++ox, ++k) {
          std::size_t best = x.offset(n, c, 2 * oy, 2 * ox);
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = x.offset(n, c, 2 * oy + dy, 2 * ox + dx);
              if (x[idx] > x[best])
                best = idx;
            }
          r.out[k] = x[best];
          r.argmax[k] = static_cast<std::uint32_t>(best);
        }
  return r;
}

template <typename T>
Tensor4<T> maxpool2_backward(const Shape4 &input_shape, std::span<const std::uint32_t> argmax,
                             const Tensor4<T> &grad_out) {
  if (argmax.size() != grad_out.size())
    throw ShapeError("maxpool2_backward: argmax/grad_out size mismatch");
  Tensor4<T> g(input_shape);
  for (std::size_t k = 0; k < grad_out.size(); ++k)
    g[argmax[k]] += grad_out[k];
  return g;
}

template <typename T> Tensor4<T> avgpool_global(const Tensor4<T> &x) {
  const Shape4 xs = x.shape();
  Tensor4<T> y({xs.n, xs.c, 1, 1});
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t c = 0; c < xs.c; ++c) {
      T acc = 0;
      for (T v : x.plane(n, c))
        acc += v;
      y.at(n, c, 0, 0) = acc / static_cast<T>(xs.plane());
    }
  return y;
}

template <typename T>
Tensor4<T> avgpool_global_backward(const Shape4 &input_shape, const Tensor4<T> &grad_out) {
  if (grad_out.shape() != Shape4{input_shape.n, input_shape.c, 1, 1})
    throw ShapeError("avgpool_global_backward: grad_out " + grad_out.shape().str());
  Tensor4<T> g(input_shape);
  const T inv = T(1) / static_cast<T>(input_shape.plane());
  for (std::size_t n = 0; n < input_shape.n; ++n)
    for (std::size_t c = 0; c < input_shape.c; ++c) {
      const T v = grad_out.at(n, c, 0, 0) * inv;
      for (T &e : g.plane(n, c))
        e = v;
    }
  return g;
}

// ---------------------------------------------------------------------------
// Fully connected classifier
// ---------------------------------------------------------------------------

/// Row-major (out, in) weight matrix plus bias.
template <typename T> struct LinearParams {
  std::size_t out = 0;
  std::size_t in = 0;
  ParamVec<T> weight;
  ParamVec<T> bias;

  LinearParams() = default;
  LinearParams(std::size_t out_features, std::size_t in_features)
      : out(out_features), in(in_features), weight(out_features * in_features),
        bias(out_features) {}
};

/// x is flattened to (N, C*H*W); result is (N, out, 1, 1).
template <typename T> Tensor4<T> linear_forward(const Tensor4<T> &x, const LinearParams<T> &p) {
  const Shape4 xs = x.shape();
  const std::size_t f = xs.c * xs.plane();
  if (f != p.in)
    throw ShapeError("linear: " + std::to_string(f) + " input features, weights expect " +
                     std::to_string(p.in));
  Tensor4<T> y({xs.n, p.out, 1, 1});
  for (std::size_t n = 0; n < xs.n; ++n) {
    const T *row = x.data() + n * f;
    for (std::size_t o = 0; o < p.out; ++o) {
      T acc = p.bias.value[o];
      const T *w = p.weight.value.data() + o * p.in;
      for (std::size_t i = 0; i < f; ++i)
        acc += w[i] * row[i];
      y.at(n, o, 0, 0) = acc;
    }
  }
  return y;
}

template <typename T> struct LinearGrads {
  Tensor4<T> grad_x;
  std::vector<T> grad_w;
  std::vector<T> grad_b;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor4<T> &x, const LinearParams<T> &p,
                               const Tensor4<T> &grad_out) {
  const Shape4 xs = x.shape();
  const std::size_t f = xs.c * xs.plane();
  if (f != p.in || grad_out.shape() != Shape4{xs.n, p.out, 1, 1})
    throw ShapeError("linear_backward: incompatible shapes " + xs.str() + " / " +
                     grad_out.shape().str());
  LinearGrads<T> g{Tensor4<T>(xs), std::vector<T>(p.out * p.in, T(0)),
                   std::vector<T>(p.out, T(0))};
  for (std::size_t n = 0; n < xs.n; ++n) {
    const T *row = x.data() + n * f;
    T *grow = g.grad_x.data() + n * f;
    for (std::size_t o = 0; o < p.out; ++o) {
      const T go = grad_out.at(n, o, 0, 0);
      g.grad_b[o] += go;
      const T *w = p.weight.value.data() + o * p.in;
      T *gw = g.grad_w.data() + o * p.in;
      for (std::size_t i = 0; i < f; ++i) {
        gw[i] += go * row[i];
        grow[i] += go * w[i];
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

template <typename T> struct LossResult {
  T loss = 0;              // mean over the batch
  Tensor4<T> grad_logits;  // d(mean loss)/d(logits)
  std::size_t correct = 0; // top-1 hits, first index wins ties
};

template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor4<T> &logits, std::span<const std::uint8_t> labels) {
  const Shape4 s = logits.shape();
  const std::size_t k = s.c * s.plane();
  if (labels.size() != s.n)
    throw ShapeError("cross entropy: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(s.n));
  LossResult<T> r{T(0), Tensor4<T>(s), 0};
  for (std::size_t n = 0; n < s.n; ++n) {
    if (labels[n] >= k)
      throw ShapeError("cross entropy: label " + std::to_string(labels[n]) + " >= classes " +
                       std::to_string(k));
    const T *z = logits.data() + n * k;
    T *g = r.grad_logits.data() + n * k;
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (z[c] > z[best])
        best = c;
    if (best == labels[n])
      ++r.correct;
    const T zmax = z[best];
    T denom = 0;
    for (std::size_t c = 0; c < k; ++c)
      denom += std::exp(z[c] - zmax);
    const T log_denom = std::log(denom);
    r.loss += log_denom - (z[labels[n]] - zmax);
    for (std::size_t c = 0; c < k; ++c)
      g[c] = std::exp(z[c] - zmax - log_denom) / static_cast<T>(s.n);
    g[labels[n]] -= T(1) / static_cast<T>(s.n);
  }
  r.loss /= static_cast<T>(s.n);
  return r;
}

} // namespace recnet

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <type_traits>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "recnet/error.hpp"
#include "recnet/init.hpp"
#include "recnet/ops.hpp"
#include "recnet/tensor.hpp"

namespace recnet {

/// Non-linearity applied at each recurrence step.
///
///  - Relu:           h_i = relu(x_i * Wx + h_{i-1} * Wh + b)
///  - SharedBnRelu:   h_i = relu(BN(x_i * Wx + h_{i-1} * Wh)), one BN for all steps
///  - SeparateBnRelu: h_i = relu(BN_i(x_i * Wx + h_{i-1} * Wh)), one BN per step
///  - Linear:         h_i = x_i * Wx + h_{i-1} * Wh + b, followed by a single BN + ReLU
///                    over the concatenated output
enum class CrcVariant { Relu, SharedBnRelu, SeparateBnRelu, Linear };

inline std::string_view to_string(CrcVariant v) {
  switch (v) {
  case CrcVariant::Relu:
    return "relu";
  case CrcVariant::SharedBnRelu:
    return "shared-bn";
  case CrcVariant::SeparateBnRelu:
    return "separate-bn";
  case CrcVariant::Linear:
    return "linear";
  }
  return "?";
}

inline CrcVariant parse_variant(std::string_view s) {
  if (s == "relu")
    return CrcVariant::Relu;
  if (s == "shared-bn")
    return CrcVariant::SharedBnRelu;
  if (s == "separate-bn")
    return CrcVariant::SeparateBnRelu;
  if (s == "linear")
    return CrcVariant::Linear;
  throw ConfigError("unknown CRC variant '" + std::string(s) +
                    "' (expected relu, shared-bn, separate-bn or linear)");
}

constexpr bool variant_has_bias(CrcVariant v) {
  return v == CrcVariant::Relu || v == CrcVariant::Linear;
}

/// Weights and hyper-parameters of one CRC(S_in, S_out, d) layer. Input channels are
/// d * S_in and output channels d * S_out; Wx and Wh are shared across the d steps.
template <typename T> struct CrcParams {
  std::size_t s_in = 0;
  std::size_t s_out = 0;
  std::size_t d = 0;
  std::size_t k_x = 3;
  std::size_t k_h = 3;
  CrcVariant variant = CrcVariant::SeparateBnRelu;

  ConvKernel<T> w_x;
  ConvKernel<T> w_h;
  ParamVec<T> bias;                   // Relu and Linear only
  std::vector<BnState<T>> step_bn;    // d states (separate) or 1 (shared)
  std::optional<BnState<T>> out_bn;   // Linear only, over d * S_out channels

  /// Zero-initialized layer; use `init_crc` for random weights.
  static CrcParams make(std::size_t s_in, std::size_t s_out, std::size_t d, CrcVariant variant,
                        std::size_t k_x = 3, std::size_t k_h = 3) {
    if (s_in == 0 || s_out == 0)
      throw ConfigError("CRC: segment widths must be positive");
    if (d == 0)
      throw ConfigError("CRC: segment count d must be positive");
    if (k_x % 2 == 0 || k_h % 2 == 0)
      throw ConfigError("CRC: kernel sizes must be odd, got " + std::to_string(k_x) + "/" +
                        std::to_string(k_h));
    CrcParams p;
    p.s_in = s_in;
    p.s_out = s_out;
    p.d = d;
    p.k_x = k_x;
    p.k_h = k_h;
    p.variant = variant;
    p.w_x = ConvKernel<T>({s_out, s_in, k_x, k_x});
    p.w_h = ConvKernel<T>({s_out, s_out, k_h, k_h});
    if (variant_has_bias(variant))
      p.bias = ParamVec<T>(s_out);
    if (variant == CrcVariant::SeparateBnRelu)
      p.step_bn.assign(d, BnState<T>(s_out));
    if (variant == CrcVariant::SharedBnRelu)
      p.step_bn.assign(1, BnState<T>(s_out));
    if (variant == CrcVariant::Linear)
      p.out_bn.emplace(d * s_out);
    return p;
  }

  std::size_t channels_in() const { return d * s_in; }
  std::size_t channels_out() const { return d * s_out; }

  BnState<T> &bn_for_step(std::size_t i) {
    return step_bn.size() == 1 ? step_bn.front() : step_bn[i];
  }

  void set_mode(BnMode m) {
    for (auto &bn : step_bn)
      bn.mode = m;
    if (out_bn)
      out_bn->mode = m;
  }

  void zero_grad() {
    w_x.zero_grad();
    w_h.zero_grad();
    bias.zero_grad();
    for (auto &bn : step_bn) {
      bn.gamma.zero_grad();
      bn.beta.zero_grad();
    }
    if (out_bn) {
      out_bn->gamma.zero_grad();
      out_bn->beta.zero_grad();
    }
  }

  std::size_t trainable_count() const {
    std::size_t n = w_x.size() + w_h.size() + bias.size();
    for (const auto &bn : step_bn)
      n += 2 * bn.channels();
    if (out_bn)
      n += 2 * out_bn->channels();
    return n;
  }
};

template <typename T> void init_crc(CrcParams<T> &p, Rng &rng) {
  he_normal(p.w_x.values(), p.s_in * p.k_x * p.k_x, rng);
  he_normal(p.w_h.values(), p.s_out * p.k_h * p.k_h, rng);
}

/// What the forward pass returns.
///  - Full:   the layer output (Linear variant includes its output BN + ReLU)
///  - Hidden: the raw hidden sequence h_0..h_{d-1} (differs from Full only for Linear)
enum class CrcOutput { Full, Hidden };

/// How segments interact.
///  - Recurrent:     h_i depends on h_{i-1} through Wh
///  - GroupedShared: each segment goes through Wx then Wh independently (no history)
enum class CrcTopology { Recurrent, GroupedShared };

template <typename T> struct CrcCache {
  CrcOutput output = CrcOutput::Full;
  CrcTopology topology = CrcTopology::Recurrent;
  Shape4 input_shape{};
  std::vector<Tensor4<T>> x;      // input segments
  std::vector<Tensor4<T>> mid;    // x_i * Wx (grouped-shared only)
  std::vector<Tensor4<T>> hidden; // h_i after the step non-linearity
  std::vector<BnCache<T>> step_bn;
  std::vector<BnCache<T>> out_bn;
  std::vector<Tensor4<T>> out;    // output-stage result per segment (Linear, Full)
};

namespace detail {

template <typename T> void add_bias(Tensor4<T> &z, const std::vector<T> &b) {
  const Shape4 s = z.shape();
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (T &v : z.plane(n, c))
        v += b[c];
}

inline void check_crc_input(const Shape4 &xs, std::size_t channels_in) {
  if (xs.c != channels_in)
    throw ShapeError("CRC: input has " + std::to_string(xs.c) + " channels, layer expects d*S_in = " +
                     std::to_string(channels_in));
}

} // namespace detail

/// Runs the layer step by step and hands each finished output segment to `on_step(i, y_i)`.
/// Steps are processed strictly in order 0..d-1.
template <typename T, typename OnStep>
void crc_run(const Tensor4<T> &x, CrcParams<T> &p, CrcCache<T> *cache, CrcOutput output,
             CrcTopology topology, OnStep &&on_step) {
  detail::check_crc_input(x.shape(), p.channels_in());
  const Padding pad_x = Padding::same(p.w_x.shape());
  const Padding pad_h = Padding::same(p.w_h.shape());
  if (cache) {
    *cache = CrcCache<T>{};
    cache->output = output;
    cache->topology = topology;
    cache->input_shape = x.shape();
  }
  Tensor4<T> prev;
  for (std::size_t i = 0; i < p.d; ++i) {
    Tensor4<T> xi = slice_channels(x, i * p.s_in, p.s_in);
    Tensor4<T> z = conv2d_forward(xi, p.w_x, pad_x);
    if (topology == CrcTopology::Recurrent) {
      if (i > 0)
        z += conv2d_forward(prev, p.w_h, pad_h);
    } else {
      Tensor4<T> u = std::move(z);
      z = conv2d_forward(u, p.w_h, pad_h);
      if (cache)
        cache->mid.push_back(std::move(u));
    }
    if (variant_has_bias(p.variant))
      detail::add_bias(z, p.bias.value);

    Tensor4<T> h;
    switch (p.variant) {
    case CrcVariant::Relu:
      h = relu(z);
      break;
    case CrcVariant::SharedBnRelu:
    case CrcVariant::SeparateBnRelu: {
      BnCache<T> bc;
      h = batchnorm_forward(z, p.bn_for_step(i), cache ? &bc : nullptr);
      relu_inplace(h);
      if (cache)
        cache->step_bn.push_back(std::move(bc));
      break;
    }
    case CrcVariant::Linear:
      h = std::move(z);
      break;
    }

    // The output BN is per channel, so normalizing segment i against channels
    // [i*S_out, (i+1)*S_out) of the state equals normalizing the concatenation.
    if (p.variant == CrcVariant::Linear && output == CrcOutput::Full) {
      BnCache<T> bc;
      Tensor4<T> y = batchnorm_forward(h, *p.out_bn, cache ? &bc : nullptr, i * p.s_out);
      relu_inplace(y);
      on_step(i, static_cast<const Tensor4<T> &>(y));
      if (cache) {
        cache->out_bn.push_back(std::move(bc));
        cache->out.push_back(std::move(y));
      }
    } else {
      on_step(i, static_cast<const Tensor4<T> &>(h));
    }

    if (cache)
      cache->x.push_back(std::move(xi));
    if (topology == CrcTopology::Recurrent) {
      if (cache) {
        cache->hidden.push_back(std::move(h));
        prev = cache->hidden.back();
      } else {
        prev = std::move(h);
      }
    } else if (cache) {
      cache->hidden.push_back(std::move(h));
    }
  }
}

namespace detail {
template <typename T>
Tensor4<T> crc_collect(const Tensor4<T> &x, CrcParams<T> &p, CrcCache<T> *cache, CrcOutput output,
                       CrcTopology topology) {
  const Shape4 xs = x.shape();
  Tensor4<T> y({xs.n, p.channels_out(), xs.h, xs.w});
  crc_run(x, p, cache, output, topology,
          [&](std::size_t i, const Tensor4<T> &yi) { assign_channels(y, yi, i * p.s_out); });
  return y;
}
} // namespace detail

/// Layer output: the channel-wise concatenation of the d output segments.
template <typename T>
Tensor4<T> crc_forward(const Tensor4<T> &x, CrcParams<T> &p, CrcCache<T> *cache = nullptr) {
  return detail::crc_collect(x, p, cache, CrcOutput::Full, CrcTopology::Recurrent);
}

/// Concatenated hidden sequence (for Linear: before the output BN + ReLU).
template <typename T>
Tensor4<T> crc_hidden(const Tensor4<T> &x, CrcParams<T> &p, CrcCache<T> *cache = nullptr) {
  return detail::crc_collect(x, p, cache, CrcOutput::Hidden, CrcTopology::Recurrent);
}

/// Non-recurrent control: h_i = sigma_i((x_i * Wx) * Wh), same parameters as the CRC layer.
template <typename T>
Tensor4<T> grouped_shared_forward(const Tensor4<T> &x, CrcParams<T> &p,
                                  std::type_identity_t<CrcCache<T>> *cache = nullptr,
                                  CrcOutput output = CrcOutput::Full) {
  return detail::crc_collect(x, p, cache, output, CrcTopology::GroupedShared);
}

/// Backpropagation through the d steps. Parameter gradients are added into `p`;
/// returns the gradient with respect to the layer input.
template <typename T>
Tensor4<T> crc_backward(const Tensor4<T> &grad_out, CrcParams<T> &p, const CrcCache<T> &cache) {
  const Shape4 xs = cache.input_shape;
  const Shape4 ys{xs.n, p.channels_out(), xs.h, xs.w};
  if (grad_out.shape() != ys)
    throw ShapeError("crc_backward: grad_out " + grad_out.shape().str() + " but output is " +
                     ys.str());
  if (cache.x.size() != p.d)
    throw ConfigError("crc_backward: cache does not hold a forward pass of this layer");
  const Padding pad_x = Padding::same(p.w_x.shape());
  const Padding pad_h = Padding::same(p.w_h.shape());
  const bool recurrent = cache.topology == CrcTopology::Recurrent;
  const bool output_stage = p.variant == CrcVariant::Linear && cache.output == CrcOutput::Full;

  Tensor4<T> grad_x(xs);
  Tensor4<T> carry;
  for (std::size_t step = p.d; step-- > 0;) {
    Tensor4<T> g = slice_channels(grad_out, step * p.s_out, p.s_out);
    if (output_stage) {
      g = relu_backward(cache.out[step], g);
      g = batchnorm_backward_accumulate(g, *p.out_bn, cache.out_bn[step], step * p.s_out);
    }
    if (recurrent && step + 1 < p.d)
      g += carry;

    switch (p.variant) {
    case CrcVariant::Relu:
      g = relu_backward(cache.hidden[step], g);
      break;
    case CrcVariant::SharedBnRelu:
    case CrcVariant::SeparateBnRelu:
      g = relu_backward(cache.hidden[step], g);
      g = batchnorm_backward_accumulate(g, p.bn_for_step(step), cache.step_bn[step]);
      break;
    case CrcVariant::Linear:
      break;
    }
    if (variant_has_bias(p.variant))
      accumulate_channel_sums(g, std::span<T>(p.bias.grad));

    Tensor4<T> gx;
    if (recurrent) {
      conv2d_accumulate_weight_grad(cache.x[step], g, p.w_x.shape(), pad_x, p.w_x.grad());
      gx = conv2d_backward_input(cache.x[step].shape(), p.w_x, g, pad_x);
      if (step > 0) {
        conv2d_accumulate_weight_grad(cache.hidden[step - 1], g, p.w_h.shape(), pad_h,
                                      p.w_h.grad());
        carry = conv2d_backward_input(cache.hidden[step - 1].shape(), p.w_h, g, pad_h);
      }
    } else {
      conv2d_accumulate_weight_grad(cache.mid[step], g, p.w_h.shape(), pad_h, p.w_h.grad());
      Tensor4<T> gu = conv2d_backward_input(cache.mid[step].shape(), p.w_h, g, pad_h);
      conv2d_accumulate_weight_grad(cache.x[step], gu, p.w_x.shape(), pad_x, p.w_x.grad());
      gx = conv2d_backward_input(cache.x[step].shape(), p.w_x, gu, pad_x);
    }
    assign_channels(grad_x, gx, step * p.s_in);
  }
  return grad_x;
}

// ---------------------------------------------------------------------------
// Unrolled linear recursion
// ---------------------------------------------------------------------------

/// Kernel equivalent to applying `first` and then `second` (both cross-correlations on an
/// unbounded domain): out = second.out, in = first.in, side = k_first + k_second - 1.
template <typename T>
ConvKernel<T> compose_kernels(const ConvKernel<T> &first, const ConvKernel<T> &second) {
  const KernelShape a = first.shape(), b = second.shape();
  if (b.in != a.out)
    throw ShapeError("compose_kernels: " + b.str() + " cannot follow " + a.str());
  ConvKernel<T> k({b.out, a.in, a.kh + b.kh - 1, a.kw + b.kw - 1});
  for (std::size_t q = 0; q < b.out; ++q)
    for (std::size_t o = 0; o < b.in; ++o)
      for (std::size_t vy = 0; vy < b.kh; ++vy)
        for (std::size_t vx = 0; vx < b.kw; ++vx) {
          const T bv = second.at(q, o, vy, vx);
          for (std::size_t c = 0; c < a.in; ++c)
            for (std::size_t uy = 0; uy < a.kh; ++uy)
              for (std::size_t ux = 0; ux < a.kw; ++ux)
                k.at(q, c, uy + vy, ux + vx) += bv * first.at(o, c, uy, ux);
        }
  return k;
}

/// Hidden sequence of a Linear-variant layer computed without the recurrence: every h_i is
/// a sum of the input segments convolved with composed kernels Wx then Wh^(i-j), plus a
/// per-channel constant obtained by pushing b through the spatial sums of Wh. Matches
/// `crc_hidden` exactly wherever zero padding of intermediate states is not reached.
template <typename T> Tensor4<T> crc_linear_unrolled(const Tensor4<T> &x, const CrcParams<T> &p) {
  if (p.variant != CrcVariant::Linear)
    throw ConfigError("crc_linear_unrolled: requires the linear variant, got " +
                      std::string(to_string(p.variant)));
  detail::check_crc_input(x.shape(), p.channels_in());
  const Shape4 xs = x.shape();

  std::vector<ConvKernel<T>> composed;
  composed.reserve(p.d);
  composed.push_back(p.w_x);
  for (std::size_t m = 1; m < p.d; ++m)
    composed.push_back(compose_kernels(composed.back(), p.w_h));

  // Spatial sums of Wh act on constant fields as an S_out x S_out matrix.
  const std::size_t s = p.s_out;
  std::vector<T> hsum(s * s, T(0));
  for (std::size_t q = 0; q < s; ++q)
    for (std::size_t o = 0; o < s; ++o)
      for (std::size_t v = 0; v < p.k_h * p.k_h; ++v)
        hsum[q * s + o] += p.w_h.values()[(q * s + o) * p.k_h * p.k_h + v];
  std::vector<T> term = p.bias.value; // Wh^j applied to b, starting at j = 0
  std::vector<T> bias_total = term;

  std::vector<Tensor4<T>> segments;
  segments.reserve(p.d);
  for (std::size_t j = 0; j < p.d; ++j)
    segments.push_back(slice_channels(x, j * p.s_in, p.s_in));

  Tensor4<T> y({xs.n, p.channels_out(), xs.h, xs.w});
  for (std::size_t i = 0; i < p.d; ++i) {
    if (i > 0) {
      std::vector<T> next(s, T(0));
      for (std::size_t q = 0; q < s; ++q)
        for (std::size_t o = 0; o < s; ++o)
          next[q] += hsum[q * s + o] * term[o];
      term = std::move(next);
      for (std::size_t q = 0; q < s; ++q)
        bias_total[q] += term[q];
    }
    Tensor4<T> hi = conv2d_forward(segments[i], composed[0], std::span<const T>(bias_total),
                                   Padding::same(composed[0].shape()));
    for (std::size_t j = 0; j < i; ++j) {
      const ConvKernel<T> &k = composed[i - j];
      hi += conv2d_forward(segments[j], k, Padding::same(k.shape()));
    }
    assign_channels(y, hi, i * p.s_out);
  }
  return y;
}

} // namespace recnet

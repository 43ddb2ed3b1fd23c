// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <utility>

#include "recnet/crc.hpp"
#include "recnet/ops.hpp"

namespace recnet {

/// TB(C_in, C_out): 1x1 convolution (no bias, BN's beta subsumes it) + BN + ReLU.
template <typename T> struct TransitionBlock {
  ConvKernel<T> a;
  BnState<T> bn;

  static TransitionBlock make(std::size_t c_in, std::size_t c_out) {
    if (c_in == 0 || c_out == 0)
      throw ConfigError("TB: channel counts must be positive");
    return {ConvKernel<T>({c_out, c_in, 1, 1}), BnState<T>(c_out)};
  }

  std::size_t c_in() const { return a.shape().in; }
  std::size_t c_out() const { return a.shape().out; }
};

enum class RecMode {
  Naive, // concatenate h_0..h_{d-1}, then one 1x1 convolution
  Merged // accumulate A_i * h_i step by step; never materializes the concatenation
};

/// Rec(S_in, S_out, C_out, d) = {CRC(S_in, S_out, d), TB(d * S_out, C_out)}.
template <typename T> struct RecModule {
  CrcParams<T> crc;
  TransitionBlock<T> tb;
  RecMode mode = RecMode::Merged;

  static RecModule make(std::size_t s_in, std::size_t s_out, std::size_t c_out, std::size_t d,
                        CrcVariant variant = CrcVariant::SeparateBnRelu, std::size_t k_x = 3,
                        std::size_t k_h = 3) {
    RecModule m;
    m.crc = CrcParams<T>::make(s_in, s_out, d, variant, k_x, k_h);
    m.tb = TransitionBlock<T>::make(d * s_out, c_out);
    return m;
  }

  std::size_t channels_in() const { return crc.channels_in(); }
  std::size_t channels_out() const { return tb.c_out(); }

  void set_mode(BnMode m) {
    crc.set_mode(m);
    tb.bn.mode = m;
  }

  void zero_grad() {
    crc.zero_grad();
    tb.a.zero_grad();
    tb.bn.gamma.zero_grad();
    tb.bn.beta.zero_grad();
  }

  std::size_t trainable_count() const {
    return crc.trainable_count() + tb.a.size() + 2 * tb.bn.channels();
  }

  /// Widest transient activation (in channels) between the CRC and the TB output.
  std::size_t peak_intermediate_channels(RecMode m) const {
    return m == RecMode::Naive ? crc.channels_out() : crc.s_out + tb.c_out();
  }
};

template <typename T> void init_rec(RecModule<T> &m, Rng &rng) {
  init_crc(m.crc, rng);
  he_normal(m.tb.a.values(), m.tb.c_in(), rng);
}

template <typename T> struct RecCache {
  RecMode mode = RecMode::Naive;
  CrcCache<T> crc;
  Tensor4<T> concat; // naive only
  BnCache<T> bn;
  Tensor4<T> out;
};

namespace detail {

// acc[n, q] += sum_o A[q, col0 + o] * h[n, o]
template <typename T>
void pointwise_accumulate(Tensor4<T> &acc, const Tensor4<T> &h, const ConvKernel<T> &a,
                          std::size_t col0) {
  const Shape4 hs = h.shape();
  const std::size_t cols = a.shape().in;
  for (std::size_t n = 0; n < hs.n; ++n)
    for (std::size_t q = 0; q < acc.shape().c; ++q) {
      T *out = acc.data() + acc.offset(n, q, 0, 0);
      for (std::size_t o = 0; o < hs.c; ++o) {
        const T w = a.values()[q * cols + col0 + o];
        const T *in = h.data() + h.offset(n, o, 0, 0);
        for (std::size_t p = 0; p < hs.plane(); ++p)
          out[p] += w * in[p];
      }
    }
}

template <typename T>
void check_rec(const RecModule<T> &m, const Shape4 &xs) {
  if (m.tb.c_in() != m.crc.channels_out())
    throw ShapeError("Rec: TB expects " + std::to_string(m.tb.c_in()) + " channels, CRC emits " +
                     std::to_string(m.crc.channels_out()));
  if (xs.c != m.crc.channels_in())
    throw ShapeError("Rec: input has " + std::to_string(xs.c) + " channels, module expects " +
                     std::to_string(m.crc.channels_in()));
}

template <typename T>
Tensor4<T> rec_finish(Tensor4<T> pre, RecModule<T> &m, RecCache<T> *cache) {
  Tensor4<T> y = batchnorm_forward(pre, m.tb.bn, cache ? &cache->bn : nullptr);
  relu_inplace(y);
  if (cache)
    cache->out = y;
  return y;
}

} // namespace detail

/// y = relu(bn(concat(h_0..h_{d-1}) * A)).
template <typename T>
Tensor4<T> rec_forward_naive(const Tensor4<T> &x, RecModule<T> &m, RecCache<T> *cache = nullptr) {
  detail::check_rec(m, x.shape());
  if (cache)
    cache->mode = RecMode::Naive;
  Tensor4<T> h = crc_forward(x, m.crc, cache ? &cache->crc : nullptr);
  Tensor4<T> pre = conv2d_forward(h, m.tb.a, Padding{});
  if (cache)
    cache->concat = std::move(h);
  return detail::rec_finish(std::move(pre), m, cache);
}

/// y = relu(bn(sum_i A_i * h_i)), accumulated in step order 0..d-1.
template <typename T>
Tensor4<T> rec_forward_merged(const Tensor4<T> &x, RecModule<T> &m, RecCache<T> *cache = nullptr) {
  detail::check_rec(m, x.shape());
  if (cache)
    cache->mode = RecMode::Merged;
  const Shape4 xs = x.shape();
  Tensor4<T> acc({xs.n, m.tb.c_out(), xs.h, xs.w});
  crc_run(x, m.crc, cache ? &cache->crc : nullptr, CrcOutput::Full, CrcTopology::Recurrent,
          [&](std::size_t i, const Tensor4<T> &hi) {
            detail::pointwise_accumulate(acc, hi, m.tb.a, i * m.crc.s_out);
          });
  return detail::rec_finish(std::move(acc), m, cache);
}

template <typename T>
Tensor4<T> rec_forward(const Tensor4<T> &x, RecModule<T> &m, RecCache<T> *cache = nullptr) {
  return m.mode == RecMode::Naive ? rec_forward_naive(x, m, cache)
                                  : rec_forward_merged(x, m, cache);
}

/// Gradient w.r.t. the module input; parameter gradients are added into `m`.
template <typename T>
Tensor4<T> rec_backward(const Tensor4<T> &grad_out, RecModule<T> &m, const RecCache<T> &cache) {
  if (grad_out.shape() != cache.out.shape())
    throw ShapeError("rec_backward: grad_out " + grad_out.shape().str() + " but output is " +
                     cache.out.shape().str());
  Tensor4<T> g = relu_backward(cache.out, grad_out);
  g = batchnorm_backward_accumulate(g, m.tb.bn, cache.bn);

  const CrcParams<T> &crc = m.crc;
  if (cache.mode == RecMode::Naive) {
    conv2d_accumulate_weight_grad(cache.concat, g, m.tb.a.shape(), Padding{}, m.tb.a.grad());
    Tensor4<T> gh = conv2d_backward_input(cache.concat.shape(), m.tb.a, g, Padding{});
    return crc_backward(gh, m.crc, cache.crc);
  }

  const Shape4 gs = g.shape();
  const std::size_t cols = m.tb.c_in();
  const bool staged = crc.variant == CrcVariant::Linear;
  Tensor4<T> gh({gs.n, cols, gs.h, gs.w});
  auto grad_a = m.tb.a.grad();
  for (std::size_t i = 0; i < crc.d; ++i) {
    const Tensor4<T> &hi = staged ? cache.crc.out[i] : cache.crc.hidden[i];
    const std::size_t col0 = i * crc.s_out;
    for (std::size_t q = 0; q < gs.c; ++q)
      for (std::size_t o = 0; o < crc.s_out; ++o) {
        const T w = m.tb.a.values()[q * cols + col0 + o];
        T acc = 0;
        for (std::size_t n = 0; n < gs.n; ++n) {
          const T *gp = g.data() + g.offset(n, q, 0, 0);
          const T *hp = hi.data() + hi.offset(n, o, 0, 0);
          T *ghp = gh.data() + gh.offset(n, col0 + o, 0, 0);
          for (std::size_t p = 0; p < gs.plane(); ++p) {
            acc += gp[p] * hp[p];
            ghp[p] += w * gp[p];
          }
        }
        grad_a[q * cols + col0 + o] += acc;
      }
  }
  return crc_backward(gh, m.crc, cache.crc);
}

} // namespace recnet

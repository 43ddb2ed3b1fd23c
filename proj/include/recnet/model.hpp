// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "recnet/crc.hpp"
#include "recnet/error.hpp"
#include "recnet/init.hpp"
#include "recnet/ops.hpp"
#include "recnet/rec_module.hpp"
#include "recnet/tensor.hpp"

namespace recnet {

/// RecNet(e, S1, S2, S3, d1, d2, d3) plus head and layer options.
struct RecNetConfig {
  std::size_t e = 4;
  std::array<std::size_t, 3> s{8, 16, 32};
  std::array<std::size_t, 3> d{10, 10, 10};
  std::size_t n_classes = 10;
  CrcVariant variant = CrcVariant::SeparateBnRelu;
  std::size_t k_x = 3;
  std::size_t k_h = 3;
  std::size_t in_channels = 3;
  std::size_t in_h = 32;
  std::size_t in_w = 32;

  static constexpr std::array<std::string_view, 7> kFieldNames{"e",  "S1", "S2", "S3",
                                                               "d1", "d2", "d3"};

  /// Parses "e,S1,S2,S3,d1,d2,d3". Other fields keep their defaults.
  static RecNetConfig parse(std::string_view text) {
    std::vector<std::string_view> parts;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = text.find(',', start);
      parts.push_back(text.substr(start, comma - start));
      if (comma == std::string_view::npos)
        break;
      start = comma + 1;
    }
    if (parts.size() != kFieldNames.size())
      throw ConfigError("architecture must have 7 comma-separated fields e,S1,S2,S3,d1,d2,d3; got " +
                        std::to_string(parts.size()) + " in '" + std::string(text) + "'");
    std::array<std::size_t, 7> v{};
    for (std::size_t i = 0; i < parts.size(); ++i) {
      std::string_view p = parts[i];
      while (!p.empty() && p.front() == ' ')
        p.remove_prefix(1);
      while (!p.empty() && p.back() == ' ')
        p.remove_suffix(1);
      const auto [end, ec] = std::from_chars(p.data(), p.data() + p.size(), v[i]);
      if (p.empty() || ec != std::errc{} || end != p.data() + p.size() || v[i] == 0)
        throw ConfigError("field " + std::string(kFieldNames[i]) +
                          ": expected a positive integer, got '" + std::string(p) + "'");
    }
    RecNetConfig c;
    c.e = v[0];
    c.s = {v[1], v[2], v[3]};
    c.d = {v[4], v[5], v[6]};
    c.validate();
    return c;
  }

  std::string tuple() const {
    std::ostringstream os;
    os << e << ',' << s[0] << ',' << s[1] << ',' << s[2] << ',' << d[0] << ',' << d[1] << ','
       << d[2];
    return os.str();
  }

  void validate() const {
    auto positive = [](std::size_t v, std::string_view name) {
      if (v == 0)
        throw ConfigError("field " + std::string(name) + ": must be positive");
    };
    positive(e, "e");
    for (std::size_t i = 0; i < 3; ++i) {
      positive(s[i], kFieldNames[1 + i]);
      positive(d[i], kFieldNames[4 + i]);
    }
    positive(n_classes, "classes");
    if (n_classes > 256)
      throw ConfigError("classes: at most 256 supported (labels are bytes), got " +
                        std::to_string(n_classes));
    for (auto [k, name] : {std::pair{k_x, "k_x"}, std::pair{k_h, "k_h"}})
      if (k != 1 && k != 3)
        throw ConfigError(std::string(name) + ": must be 1 or 3, got " + std::to_string(k));
    positive(in_channels, "input channels");
    if (in_h == 0 || in_w == 0 || in_h % 4 != 0 || in_w % 4 != 0)
      throw ConfigError("input size must be a positive multiple of 4, got " +
                        std::to_string(in_h) + "x" + std::to_string(in_w));
  }

  std::size_t stage_width(std::size_t i) const { return s[i] * d[i]; }
  std::size_t s_out(std::size_t i) const { return e * s[i]; }
};

/// "RecNet-<depth>-<width>" with depth = 2 * (d1 + d2 + d3) and width = e * max(S_i * d_i).
inline std::string acronym(const RecNetConfig &c) {
  const std::size_t depth = 2 * (c.d[0] + c.d[1] + c.d[2]);
  const std::size_t width =
      c.e * std::max({c.stage_width(0), c.stage_width(1), c.stage_width(2)});
  return "RecNet-" + std::to_string(depth) + "-" + std::to_string(width);
}

// ---------------------------------------------------------------------------
// Accounting
// ---------------------------------------------------------------------------

enum class ParamConvention {
  FormulaOnly,  // convolution weights and the classifier (weights + bias)
  WithBn,       // + BN affine parameters
  WithBnAndBias // + CRC biases; equals the trainable scalars of a built model
};

inline std::string_view to_string(ParamConvention c) {
  switch (c) {
  case ParamConvention::FormulaOnly:
    return "formula-only";
  case ParamConvention::WithBn:
    return "with-bn";
  case ParamConvention::WithBnAndBias:
    return "with-bn-and-bias";
  }
  return "?";
}

inline ParamConvention parse_convention(std::string_view s) {
  if (s == "formula-only")
    return ParamConvention::FormulaOnly;
  if (s == "with-bn")
    return ParamConvention::WithBn;
  if (s == "with-bn-and-bias")
    return ParamConvention::WithBnAndBias;
  throw ConfigError("unknown parameter convention '" + std::string(s) +
                    "' (formula-only, with-bn, with-bn-and-bias)");
}

struct LedgerRow {
  std::string layer;
  std::size_t out_channels = 0;
  std::size_t out_h = 0;
  std::size_t out_w = 0;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

struct Ledger {
  std::vector<LedgerRow> rows;
  std::uint64_t total_params = 0;
  std::uint64_t total_flops = 0;
};

/// Parameters of one CRC layer under a convention.
inline std::uint64_t crc_param_count(std::size_t s_in, std::size_t s_out, std::size_t d,
                                     std::size_t k_x, std::size_t k_h, CrcVariant v,
                                     ParamConvention conv) {
  std::uint64_t n = k_x * k_x * s_in * s_out + k_h * k_h * s_out * s_out;
  if (conv == ParamConvention::FormulaOnly)
    return n;
  switch (v) {
  case CrcVariant::SeparateBnRelu:
  case CrcVariant::Linear:
    n += 2 * d * s_out;
    break;
  case CrcVariant::SharedBnRelu:
    n += 2 * s_out;
    break;
  case CrcVariant::Relu:
    break;
  }
  if (conv == ParamConvention::WithBnAndBias && variant_has_bias(v))
    n += s_out;
  return n;
}

/// Dense k x k convolution between the same channel counts, for comparison.
inline std::uint64_t dense_conv_params(std::size_t c_in, std::size_t c_out, std::size_t k) {
  return std::uint64_t(c_in) * c_out * k * k;
}

/// H*W*(k_x^2*C_in + k_h^2*C_out)*C_out/d convolution FLOPs plus 2*H*W*C_out additions.
inline std::uint64_t crc_flops(std::size_t h, std::size_t w, std::size_t s_in, std::size_t s_out,
                               std::size_t d, std::size_t k_x, std::size_t k_h) {
  const std::uint64_t hw = std::uint64_t(h) * w;
  const std::uint64_t c_in = d * s_in, c_out = d * s_out;
  return hw * (k_x * k_x * c_in + k_h * k_h * c_out) * s_out + 2 * hw * c_out;
}

/// Per-layer ledger in network order. FLOPs count one per multiply-add for the stem, the
/// transition blocks and the classifier; BN, ReLU and pooling are counted as zero.
inline Ledger describe(const RecNetConfig &c,
                       ParamConvention conv = ParamConvention::WithBnAndBias) {
  c.validate();
  const bool bn = conv != ParamConvention::FormulaOnly;
  Ledger l;
  std::size_t h = c.in_h, w = c.in_w;
  auto add = [&](std::string name, std::size_t ch, std::uint64_t params, std::uint64_t flops) {
    l.rows.push_back({std::move(name), ch, h, w, params, flops});
    l.total_params += params;
    l.total_flops += flops;
  };
  auto fmt = [](auto... v) {
    std::ostringstream os;
    std::size_t i = 0;
    ((os << (i++ ? ", " : "") << v), ...);
    return os.str();
  };

  const std::size_t stem = c.stage_width(0);
  add("CONV (3x3) + BN + ReLU", stem, 9ull * c.in_channels * stem + (bn ? 2 * stem : 0),
      std::uint64_t(h) * w * 9 * c.in_channels * stem);
  for (std::size_t i = 0; i < 3; ++i) {
    if (i > 0) {
      h /= 2;
      w /= 2;
      add("Max Pooling (2x2)", c.stage_width(i), 0, 0);
    }
    const std::size_t so = c.s_out(i), wide = c.d[i] * so;
    for (std::size_t j = 0; j < 2; ++j) {
      add("CRC (" + fmt(c.s[i], so, c.d[i]) + ")", wide,
          crc_param_count(c.s[i], so, c.d[i], c.k_x, c.k_h, c.variant, conv),
          crc_flops(h, w, c.s[i], so, c.d[i], c.k_x, c.k_h));
      const std::size_t out = (j == 0 || i == 2) ? c.stage_width(i) : c.stage_width(i + 1);
      add("TB (" + fmt(wide, out) + ")", out, std::uint64_t(wide) * out + (bn ? 2 * out : 0),
          std::uint64_t(h) * w * wide * out);
    }
  }
  const std::size_t feat = c.stage_width(2);
  const std::string pool = std::to_string(h) + "x" + std::to_string(w);
  h = w = 1;
  add("Average Pooling (" + pool + ")", feat, 0, 0);
  add("Linear (" + fmt(feat, c.n_classes) + ")", c.n_classes,
      std::uint64_t(feat + 1) * c.n_classes, std::uint64_t(feat) * c.n_classes);
  return l;
}

inline void write_ledger_csv(std::ostream &os, const Ledger &l) {
  os << "layer,out_channels,out_h,out_w,params,flops\n";
  for (const auto &r : l.rows)
    os << '"' << r.layer << "\"," << r.out_channels << ',' << r.out_h << ',' << r.out_w << ','
       << r.params << ',' << r.flops << '\n';
  os << "total,,,," << l.total_params << ',' << l.total_flops << '\n';
}

inline void write_ledger_text(std::ostream &os, const Ledger &l) {
  std::size_t name_w = 5;
  for (const auto &r : l.rows)
    name_w = std::max(name_w, r.layer.size());
  auto line = [&](std::string_view a, std::string_view b, std::string_view c, std::string_view d,
                  std::string_view e) {
    os << std::left << std::setw(int(name_w) + 2) << a << std::right << std::setw(10) << b
       << std::setw(10) << c << std::setw(14) << d << std::setw(16) << e << '\n';
  };
  line("Layer", "Channels", "Size", "Params", "FLOPs");
  for (const auto &r : l.rows)
    line(r.layer, std::to_string(r.out_channels),
         std::to_string(r.out_h) + "x" + std::to_string(r.out_w), std::to_string(r.params),
         std::to_string(r.flops));
  line("Total", "", "", std::to_string(l.total_params), std::to_string(l.total_flops));
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <typename T> struct ParamRef {
  std::string name;
  std::vector<std::size_t> dims;
  std::span<T> value;
  std::span<T> grad;
  bool decay = false; // conv and linear weights only
};

template <typename T> struct BufferRef {
  std::string name;
  std::vector<std::size_t> dims;
  std::span<T> value;
};

template <typename T> struct ModelCache {
  Tensor4<T> input;
  BnCache<T> stem_bn;
  Tensor4<T> stem_out;
  std::array<RecCache<T>, 6> rec;
  std::array<Shape4, 2> pool_in{};
  std::array<std::vector<std::uint32_t>, 2> pool_argmax;
  Shape4 head_in{};
  Tensor4<T> features;
};

template <typename T> struct RecNetModel {
  RecNetConfig cfg;
  ConvKernel<T> stem;
  BnState<T> stem_bn;
  std::vector<RecModule<T>> modules; // stage-major: two per stage
  LinearParams<T> fc;

  static RecNetModel build(const RecNetConfig &c) {
    c.validate();
    RecNetModel m;
    m.cfg = c;
    const std::size_t stem_w = c.stage_width(0);
    m.stem = ConvKernel<T>({stem_w, c.in_channels, 3, 3});
    m.stem_bn = BnState<T>(stem_w);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        const std::size_t out = (j == 0 || i == 2) ? c.stage_width(i) : c.stage_width(i + 1);
        m.modules.push_back(
            RecModule<T>::make(c.s[i], c.s_out(i), out, c.d[i], c.variant, c.k_x, c.k_h));
      }
    m.fc = LinearParams<T>(c.n_classes, c.stage_width(2));
    return m;
  }

  void set_mode(BnMode mode) {
    stem_bn.mode = mode;
    for (auto &r : modules)
      r.set_mode(mode);
  }

  void set_rec_mode(RecMode mode) {
    for (auto &r : modules)
      r.mode = mode;
  }

  void zero_grad() {
    stem.zero_grad();
    stem_bn.gamma.zero_grad();
    stem_bn.beta.zero_grad();
    for (auto &r : modules)
      r.zero_grad();
    fc.weight.zero_grad();
    fc.bias.zero_grad();
  }

  std::size_t trainable_count() const {
    std::size_t n = stem.size() + 2 * stem_bn.channels() + fc.weight.size() + fc.bias.size();
    for (const auto &r : modules)
      n += r.trainable_count();
    return n;
  }

  /// Calls `fn(ParamRef<T>)` for every trainable tensor in a fixed order.
  template <typename F> void visit_params(F &&fn) {
    auto kernel = [&](const std::string &name, ConvKernel<T> &k) {
      const KernelShape s = k.shape();
      fn(ParamRef<T>{name, {s.out, s.in, s.kh, s.kw}, k.values(), k.grad(), true});
    };
    auto vec = [&](const std::string &name, ParamVec<T> &p, bool decay) {
      fn(ParamRef<T>{name, {p.size()}, p.value, p.grad, decay});
    };
    auto bn = [&](const std::string &prefix, BnState<T> &b) {
      vec(prefix + ".gamma", b.gamma, false);
      vec(prefix + ".beta", b.beta, false);
    };
    kernel("stem.conv.weight", stem);
    bn("stem.bn", stem_bn);
    for (std::size_t k = 0; k < modules.size(); ++k) {
      auto &r = modules[k];
      const std::string p = module_prefix(k);
      kernel(p + ".crc.w_x", r.crc.w_x);
      kernel(p + ".crc.w_h", r.crc.w_h);
      if (r.crc.bias.size())
        vec(p + ".crc.bias", r.crc.bias, false);
      for (std::size_t i = 0; i < r.crc.step_bn.size(); ++i)
        bn(p + ".crc.bn" + std::to_string(i), r.crc.step_bn[i]);
      if (r.crc.out_bn)
        bn(p + ".crc.out_bn", *r.crc.out_bn);
      kernel(p + ".tb.conv.weight", r.tb.a);
      bn(p + ".tb.bn", r.tb.bn);
    }
    fn(ParamRef<T>{"fc.weight", {fc.out, fc.in}, fc.weight.value, fc.weight.grad, true});
    vec("fc.bias", fc.bias, false);
  }

  /// Calls `fn(BufferRef<T>)` for every BN running statistic.
  template <typename F> void visit_buffers(F &&fn) {
    auto bn = [&](const std::string &prefix, BnState<T> &b) {
      fn(BufferRef<T>{prefix + ".running_mean", {b.channels()}, b.running_mean});
      fn(BufferRef<T>{prefix + ".running_var", {b.channels()}, b.running_var});
    };
    bn("stem.bn", stem_bn);
    for (std::size_t k = 0; k < modules.size(); ++k) {
      auto &r = modules[k];
      const std::string p = module_prefix(k);
      for (std::size_t i = 0; i < r.crc.step_bn.size(); ++i)
        bn(p + ".crc.bn" + std::to_string(i), r.crc.step_bn[i]);
      if (r.crc.out_bn)
        bn(p + ".crc.out_bn", *r.crc.out_bn);
      bn(p + ".tb.bn", r.tb.bn);
    }
  }

  static std::string module_prefix(std::size_t k) {
    return "stage" + std::to_string(k / 2 + 1) + ".rec" + std::to_string(k % 2 + 1);
  }
};

/// He-normal convolution weights, Uniform(+-1/sqrt(fan_in)) classifier weights, zero biases,
/// unit BN.
template <typename T> void init_model(RecNetModel<T> &m, Rng &rng) {
  he_normal(m.stem.values(), m.cfg.in_channels * 9, rng);
  for (auto &r : m.modules)
    init_rec(r, rng);
  const double bound = 1.0 / std::sqrt(double(m.fc.in));
  fill_uniform(std::span<T>(m.fc.weight.value), -bound, bound, rng);
  std::fill(m.fc.bias.value.begin(), m.fc.bias.value.end(), T(0));
}

/// (N, C, H, W) images to (N, n_classes, 1, 1) logits.
template <typename T>
Tensor4<T> model_forward(const Tensor4<T> &x, RecNetModel<T> &m, ModelCache<T> *cache = nullptr) {
  const RecNetConfig &c = m.cfg;
  const Shape4 xs = x.shape();
  if (xs.c != c.in_channels || xs.h != c.in_h || xs.w != c.in_w)
    throw ShapeError("model: expected (N, " + std::to_string(c.in_channels) + ", " +
                     std::to_string(c.in_h) + ", " + std::to_string(c.in_w) + ") input, got " +
                     xs.str());
  if (cache)
    cache->input = x;
  Tensor4<T> a = conv2d_forward(x, m.stem, Padding{1, 1});
  a = batchnorm_forward(a, m.stem_bn, cache ? &cache->stem_bn : nullptr);
  relu_inplace(a);
  if (cache)
    cache->stem_out = a;
  for (std::size_t k = 0; k < m.modules.size(); ++k) {
    if (k == 2 || k == 4) {
      const std::size_t p = k / 2 - 1;
      auto pooled = maxpool2(a);
      if (cache) {
        cache->pool_in[p] = a.shape();
        cache->pool_argmax[p] = std::move(pooled.argmax);
      }
      a = std::move(pooled.out);
    }
    a = rec_forward(a, m.modules[k], cache ? &cache->rec[k] : nullptr);
  }
  if (cache)
    cache->head_in = a.shape();
  Tensor4<T> f = avgpool_global(a);
  Tensor4<T> logits = linear_forward(f, m.fc);
  if (cache)
    cache->features = std::move(f);
  return logits;
}

/// Backpropagates d(loss)/d(logits); parameter gradients are added into `m`.
template <typename T>
void model_backward(const Tensor4<T> &grad_logits, RecNetModel<T> &m, const ModelCache<T> &cache) {
  const auto lg = linear_backward(cache.features, m.fc, grad_logits);
  for (std::size_t i = 0; i < lg.grad_w.size(); ++i)
    m.fc.weight.grad[i] += lg.grad_w[i];
  for (std::size_t i = 0; i < lg.grad_b.size(); ++i)
    m.fc.bias.grad[i] += lg.grad_b[i];
  Tensor4<T> g = avgpool_global_backward(cache.head_in, lg.grad_x);
  for (std::size_t k = m.modules.size(); k-- > 0;) {
    g = rec_backward(g, m.modules[k], cache.rec[k]);
    if (k == 2 || k == 4) {
      const std::size_t p = k / 2 - 1;
      g = maxpool2_backward(cache.pool_in[p], std::span<const std::uint32_t>(cache.pool_argmax[p]),
                            g);
    }
  }
  g = relu_backward(cache.stem_out, g);
  g = batchnorm_backward_accumulate(g, m.stem_bn, cache.stem_bn);
  conv2d_accumulate_weight_grad(cache.input, g, m.stem.shape(), Padding{1, 1}, m.stem.grad());
}

} // namespace recnet

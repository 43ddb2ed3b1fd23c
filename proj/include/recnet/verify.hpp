// SPDX-License-Identifier: Apache-2.0
//
// Self-check suites run by `recnet verify`. Everything here runs in double precision.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "recnet/crc.hpp"
#include "recnet/model.hpp"
#include "recnet/ops.hpp"
#include "recnet/rec_module.hpp"

namespace recnet {

struct PropertyResult {
  std::string name;
  bool pass = true;
  double observed = 0;  // max error, or the measured quantity
  double tolerance = 0; // bound on `observed` (0 means exact)
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<PropertyResult> properties;
  bool pass() const {
    return std::all_of(properties.begin(), properties.end(),
                       [](const PropertyResult &p) { return p.pass; });
  }
};

namespace vdetail {

using Tensor = Tensor4<double>;

inline void randomize(std::span<double> v, Rng &rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  for (double &x : v)
    x = d(rng);
}

inline Tensor random_tensor(Shape4 s, Rng &rng) {
  Tensor t(s);
  randomize(t.values(), rng);
  return t;
}

inline double dot(const Tensor &a, const Tensor &b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    s += a[i] * b[i];
  return s;
}

inline double max_diff(const Tensor &a, const Tensor &b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

struct FdStat {
  double max_rel = 0;
  std::size_t checked = 0;
  std::size_t kinks = 0;
};

/// Central differences (step h) against `analytic`; coordinates whose h and h/2 estimates
/// disagree are counted as kinks and skipped.
inline void fd_check(FdStat &st, std::span<double> vars, std::span<const double> analytic,
                     const std::function<double()> &loss, double h = 1e-4) {
  auto rel = [](double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3});
  };
  for (std::size_t k = 0; k < vars.size(); ++k) {
    const double saved = vars[k];
    auto central = [&](double step) {
      vars[k] = saved + step;
      const double p = loss();
      vars[k] = saved - step;
      const double m = loss();
      vars[k] = saved;
      return (p - m) / (2 * step);
    };
    const double n1 = central(h), n2 = central(h / 2);
    if (rel(n1, n2) > 1e-5) {
      ++st.kinks;
      continue;
    }
    st.max_rel = std::max(st.max_rel, rel(analytic[k], n1));
    ++st.checked;
  }
}

inline CrcParams<double> random_crc(Rng &rng, std::size_t s_in, std::size_t s_out, std::size_t d,
                                    CrcVariant v, std::size_t kx = 3, std::size_t kh = 3) {
  auto p = CrcParams<double>::make(s_in, s_out, d, v, kx, kh);
  randomize(p.w_x.values(), rng, 0.5);
  randomize(p.w_h.values(), rng, 0.5);
  randomize(p.bias.value, rng, 0.5);
  for (auto &bn : p.step_bn) {
    randomize(bn.gamma.value, rng);
    randomize(bn.beta.value, rng);
  }
  if (p.out_bn) {
    randomize(p.out_bn->gamma.value, rng);
    randomize(p.out_bn->beta.value, rng);
  }
  return p;
}

inline constexpr CrcVariant kVariants[] = {CrcVariant::Relu, CrcVariant::SharedBnRelu,
                                           CrcVariant::SeparateBnRelu, CrcVariant::Linear};

inline PropertyResult fd_property(const std::string &name, const FdStat &st, double tol = 1e-5) {
  PropertyResult r{name, st.max_rel < tol && st.checked > 0, st.max_rel, tol, ""};
  r.detail = std::to_string(st.checked) + " coordinates, " + std::to_string(st.kinks) + " kinks";
  return r;
}

} // namespace vdetail

/// Analytic gradients against central finite differences for every differentiable operation
/// and for whole CRC layers and recurrent modules.
inline SuiteReport verify_grad(std::uint64_t seed, std::size_t trials) {
  using namespace vdetail;
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> dim(1, 4), side(2, 6), batch(1, 2), dseg(1, 4);
  auto even = [&] { return 2 * std::uniform_int_distribution<std::size_t>(1, 3)(rng); };
  FdStat conv, bn, relu_s, pool, avg, lin, ce, crc, grouped, rec;

  for (std::size_t t = 0; t < trials; ++t) {
    { // convolution
      const std::size_t k = t % 2 ? 3 : 1;
      auto x = random_tensor({batch(rng), dim(rng), side(rng), side(rng)}, rng);
      ConvKernel<double> w({dim(rng), x.shape().c, k, k});
      randomize(w.values(), rng);
      std::vector<double> b(w.shape().out);
      randomize(b, rng);
      const Padding pad = Padding::same(w.shape());
      const auto r = random_tensor(conv2d_output_shape(x.shape(), w.shape(), pad), rng);
      auto loss = [&] { return dot(conv2d_forward(x, w, std::span<const double>(b), pad), r); };
      const auto g = conv2d_backward(x, w, r, pad);
      fd_check(conv, x.values(), g.grad_x.values(), loss);
      fd_check(conv, w.values(), g.grad_w, loss);
      fd_check(conv, b, g.grad_bias, loss);
    }
    { // batch normalization, train mode
      auto x = random_tensor({2, dim(rng), side(rng), side(rng)}, rng);
      BnState<double> s(x.shape().c);
      randomize(s.gamma.value, rng);
      randomize(s.beta.value, rng);
      const auto r = random_tensor(x.shape(), rng);
      auto loss = [&] {
        auto q = s;
        return dot(batchnorm_forward(x, q), r);
      };
      auto q = s;
      BnCache<double> cache;
      batchnorm_forward(x, q, &cache);
      const auto g = batchnorm_backward(r, q, cache);
      fd_check(bn, x.values(), g.grad_x.values(), loss);
      fd_check(bn, s.gamma.value, g.grad_gamma, loss);
      fd_check(bn, s.beta.value, g.grad_beta, loss);
    }
    { // relu
      auto x = random_tensor({batch(rng), dim(rng), side(rng), side(rng)}, rng);
      const auto r = random_tensor(x.shape(), rng);
      auto loss = [&] { return dot(relu(x), r); };
      fd_check(relu_s, x.values(), relu_backward(x, r).values(), loss);
    }
    { // 2x2 max pooling
      auto x = random_tensor({batch(rng), dim(rng), even(), even()}, rng);
      const auto fwd = maxpool2(x);
      const auto r = random_tensor(fwd.out.shape(), rng);
      auto loss = [&] { return dot(maxpool2(x).out, r); };
      const auto g = maxpool2_backward(x.shape(), std::span<const std::uint32_t>(fwd.argmax), r);
      fd_check(pool, x.values(), g.values(), loss);
    }
    { // global average pooling
      auto x = random_tensor({batch(rng), dim(rng), side(rng), side(rng)}, rng);
      const auto r = random_tensor({x.shape().n, x.shape().c, 1, 1}, rng);
      auto loss = [&] { return dot(avgpool_global(x), r); };
      fd_check(avg, x.values(), avgpool_global_backward(x.shape(), r).values(), loss);
    }
    { // linear
      auto x = random_tensor({batch(rng), dim(rng), 1, 1}, rng);
      LinearParams<double> p(dim(rng), x.shape().c);
      randomize(p.weight.value, rng);
      randomize(p.bias.value, rng);
      const auto r = random_tensor({x.shape().n, p.out, 1, 1}, rng);
      auto loss = [&] { return dot(linear_forward(x, p), r); };
      const auto g = linear_backward(x, p, r);
      fd_check(lin, x.values(), g.grad_x.values(), loss);
      fd_check(lin, p.weight.value, g.grad_w, loss);
      fd_check(lin, p.bias.value, g.grad_b, loss);
    }
    { // softmax cross-entropy
      const std::size_t n = batch(rng) + 1, k = dim(rng) + 1;
      auto z = random_tensor({n, k, 1, 1}, rng);
      std::vector<std::uint8_t> labels(n);
      for (auto &l : labels)
        l = std::uint8_t(std::uniform_int_distribution<std::size_t>(0, k - 1)(rng));
      auto loss = [&] { return softmax_cross_entropy(z, std::span<const std::uint8_t>(labels)).loss; };
      const auto g = softmax_cross_entropy(z, std::span<const std::uint8_t>(labels)).grad_logits;
      fd_check(ce, z.values(), g.values(), loss, 1e-5);
    }
    { // CRC layer (recurrent and grouped-shared)
      const CrcVariant v = kVariants[t % 4];
      const std::size_t d = dseg(rng), s_in = std::min<std::size_t>(2, dim(rng));
      const std::size_t s_out = std::min<std::size_t>(2, dim(rng));
      auto p = random_crc(rng, s_in, s_out, d, v, t % 3 ? 3 : 1, t % 2 ? 3 : 1);
      const std::size_t h = std::min<std::size_t>(side(rng), 4) + 1;
      auto x = random_tensor({2, d * s_in, h, h}, rng);
      const auto r = random_tensor({2, d * s_out, h, h}, rng);
      for (CrcTopology topo : {CrcTopology::Recurrent, CrcTopology::GroupedShared}) {
        FdStat &st = topo == CrcTopology::Recurrent ? crc : grouped;
        auto run = [&](CrcParams<double> &q, CrcCache<double> *c) {
          return topo == CrcTopology::Recurrent ? crc_forward(x, q, c)
                                                : grouped_shared_forward(x, q, c);
        };
        auto loss = [&] {
          auto q = p;
          return dot(run(q, nullptr), r);
        };
        auto q = p;
        CrcCache<double> cache;
        run(q, &cache);
        q.zero_grad();
        const auto gx = crc_backward(r, q, cache);
        fd_check(st, x.values(), gx.values(), loss);
        fd_check(st, p.w_x.values(), q.w_x.grad(), loss);
        fd_check(st, p.w_h.values(), q.w_h.grad(), loss);
        fd_check(st, p.bias.value, q.bias.grad, loss);
        for (std::size_t i = 0; i < p.step_bn.size(); ++i) {
          fd_check(st, p.step_bn[i].gamma.value, q.step_bn[i].gamma.grad, loss);
          fd_check(st, p.step_bn[i].beta.value, q.step_bn[i].beta.grad, loss);
        }
        if (p.out_bn) {
          fd_check(st, p.out_bn->gamma.value, q.out_bn->gamma.grad, loss);
          fd_check(st, p.out_bn->beta.value, q.out_bn->beta.grad, loss);
        }
      }
    }
    { // recurrent module
      const std::size_t d = dseg(rng);
      auto m = RecModule<double>::make(2, 2, dim(rng), d, kVariants[(t + 1) % 4]);
      m.crc = random_crc(rng, 2, 2, d, m.crc.variant);
      randomize(m.tb.a.values(), rng);
      randomize(m.tb.bn.gamma.value, rng);
      randomize(m.tb.bn.beta.value, rng);
      m.mode = t % 2 ? RecMode::Merged : RecMode::Naive;
      auto x = random_tensor({2, 2 * d, 4, 4}, rng);
      const auto r = random_tensor({2, m.channels_out(), 4, 4}, rng);
      auto loss = [&] {
        auto q = m;
        return dot(rec_forward(x, q), r);
      };
      auto q = m;
      RecCache<double> cache;
      rec_forward(x, q, &cache);
      q.zero_grad();
      const auto gx = rec_backward(r, q, cache);
      fd_check(rec, x.values(), gx.values(), loss);
      fd_check(rec, m.tb.a.values(), q.tb.a.grad(), loss);
      fd_check(rec, m.tb.bn.gamma.value, q.tb.bn.gamma.grad, loss);
      fd_check(rec, m.crc.w_x.values(), q.crc.w_x.grad(), loss);
      fd_check(rec, m.crc.w_h.values(), q.crc.w_h.grad(), loss);
    }
  }
  return {"grad",
          {fd_property("conv2d", conv), fd_property("batchnorm", bn), fd_property("relu", relu_s),
           fd_property("maxpool", pool), fd_property("avgpool", avg), fd_property("linear", lin),
           fd_property("softmax_cross_entropy", ce), fd_property("crc", crc),
           fd_property("grouped_shared", grouped), fd_property("rec_module", rec)}};
}

/// Naive and merged recurrent modules: forward within 1e-9, gradients within 1e-8.
inline SuiteReport verify_equiv(std::uint64_t seed, std::size_t trials) {
  using namespace vdetail;
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> dim(1, 4), dseg(1, 8), side(2, 8);
  double fwd = 0, bwd = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t d = dseg(rng), s_in = dim(rng), s_out = dim(rng), h = side(rng);
    auto m = RecModule<double>::make(s_in, s_out, dim(rng), d, kVariants[t % 4]);
    m.crc = random_crc(rng, s_in, s_out, d, m.crc.variant);
    randomize(m.tb.a.values(), rng);
    randomize(m.tb.bn.gamma.value, rng);
    randomize(m.tb.bn.beta.value, rng);
    const auto x = random_tensor({2, d * s_in, h, h}, rng);
    const auto r = random_tensor({2, m.channels_out(), h, h}, rng);
    auto a = m, b = m;
    RecCache<double> ca, cb;
    fwd = std::max(fwd, max_diff(rec_forward_naive(x, a, &ca), rec_forward_merged(x, b, &cb)));
    a.zero_grad();
    b.zero_grad();
    bwd = std::max(bwd, max_diff(rec_backward(r, a, ca), rec_backward(r, b, cb)));
    auto grads = [](RecModule<double> &q) {
      std::vector<double> g;
      for (auto s : {q.tb.a.grad(), q.crc.w_x.grad(), q.crc.w_h.grad()})
        g.insert(g.end(), s.begin(), s.end());
      return g;
    };
    const auto ga = grads(a), gb = grads(b);
    for (std::size_t i = 0; i < ga.size(); ++i)
      bwd = std::max(bwd, std::abs(ga[i] - gb[i]));
  }
  return {"equiv",
          {{"merged_forward", fwd < 1e-9, fwd, 1e-9, std::to_string(trials) + " instances"},
           {"merged_backward", bwd < 1e-8, bwd, 1e-8, std::to_string(trials) + " instances"}}};
}

/// Iterative linear recursion against composed kernels: everywhere on zero-border inputs with
/// zero bias, and on the interior for general inputs.
inline SuiteReport verify_unroll(std::uint64_t seed, std::size_t trials) {
  using namespace vdetail;
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> dim(1, 3), dseg(1, 5);
  double border_err = 0, interior_err = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t d = dseg(rng), kx = t % 2 ? 3 : 1, kh = (t / 2) % 2 ? 3 : 1;
    const std::size_t s_in = dim(rng), s_out = dim(rng);
    auto p = random_crc(rng, s_in, s_out, d, CrcVariant::Linear, kx, kh);
    const std::size_t margin = (d - 1) * (kh / 2) + kx / 2;
    const std::size_t inner = 3, side = inner + 2 * margin;

    auto zb = p;
    std::fill(zb.bias.value.begin(), zb.bias.value.end(), 0.0);
    Tensor x({2, d * s_in, side, side});
    std::normal_distribution<double> nd;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < d * s_in; ++c)
        for (std::size_t y = margin; y < margin + inner; ++y)
          for (std::size_t xx = margin; xx < margin + inner; ++xx)
            x.at(n, c, y, xx) = nd(rng);
    border_err = std::max(border_err, max_diff(crc_linear_unrolled(x, zb), crc_hidden(x, zb)));

    const auto g = random_tensor({2, d * s_in, side, side}, rng);
    const auto a = crc_linear_unrolled(g, p), b = crc_hidden(g, p);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < d * s_out; ++c)
        for (std::size_t y = margin; y < side - margin; ++y)
          for (std::size_t xx = margin; xx < side - margin; ++xx)
            interior_err = std::max(interior_err, std::abs(a.at(n, c, y, xx) - b.at(n, c, y, xx)));
  }
  return {"unroll",
          {{"zero_border_inputs", border_err < 1e-5, border_err, 1e-5,
            "d <= 5, k in {1,3}, bias 0"},
           {"interior_general_inputs", interior_err < 1e-9, interior_err, 1e-9,
            "margin (d-1)*(k_h-1)/2 + (k_x-1)/2"}}};
}

/// Perturbing x_j leaves outputs h_i, i < j, bit-identical.
inline SuiteReport verify_causality(std::uint64_t seed, std::size_t trials) {
  using namespace vdetail;
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> dim(1, 3), dseg(2, 5);
  std::size_t draws = 0, violations = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t d = dseg(rng), s_in = dim(rng), s_out = dim(rng);
    auto p = random_crc(rng, s_in, s_out, d, kVariants[t % 4]);
    const auto x = random_tensor({2, d * s_in, 5, 5}, rng);
    auto p0 = p;
    const auto base = crc_forward(x, p0);
    for (std::size_t j = 1; j < d; ++j) {
      auto xp = x;
      assign_channels(xp, random_tensor({2, s_in, 5, 5}, rng), j * s_in);
      auto pj = p;
      const auto y = crc_forward(xp, pj);
      for (std::size_t i = 0; i < j; ++i, ++draws) {
        const auto a = slice_channels(base, i * s_out, s_out),
                   b = slice_channels(y, i * s_out, s_out);
        if (!std::equal(a.values().begin(), a.values().end(), b.values().begin()))
          ++violations;
      }
    }
  }
  return {"causality",
          {{"later_segments_do_not_reach_earlier_outputs", violations == 0, double(violations), 0,
            std::to_string(draws) + " (i, j, instance) draws"}}};
}

/// A network total that the accounting is expected to reproduce within 5%.
struct ReferenceTotal {
  const char *label;
  const char *tuple;
  std::size_t k_x, k_h;
  std::uint64_t thousands;
};

inline constexpr ReferenceTotal kReferenceTotals[] = {
    {"e=1", "1,8,16,32,10,10,10", 3, 3, 424},
    {"e=2", "2,8,16,32,10,10,10", 3, 3, 824},
    {"e=4", "4,8,16,32,10,10,10", 3, 3, 1769},
    {"e=8", "8,8,16,32,10,10,10", 3, 3, 4239},
    {"Wx 3x3, Wh 1x1", "4,8,16,32,10,10,10", 3, 1, 1425},
    {"Wx 1x1, Wh 3x3", "4,8,16,32,10,10,10", 1, 3, 1683},
    {"Wx 3x3, Wh 3x3", "4,8,16,32,10,10,10", 3, 3, 1769},
    {"RecNet(4,4,8,16,10,10,10)", "4,4,8,16,10,10,10", 3, 3, 471},
    {"RecNet(4,4,8,16,15,15,15)", "4,4,8,16,15,15,15", 3, 3, 863},
    {"RecNet(4,4,8,16,20,20,20)", "4,4,8,16,20,20,20", 3, 3, 1406},
    {"RecNet(4,8,16,32,10,10,10)", "4,8,16,32,10,10,10", 3, 3, 1769},
    {"RecNet(4,8,16,32,15,15,15)", "4,8,16,32,15,15,15", 3, 3, 3306},
    {"RecNet(4,8,16,32,20,20,20)", "4,8,16,32,20,20,20", 3, 3, 5444},
    {"RecNet(4,8,8,8,5,10,15)", "4,8,8,8,5,10,15", 3, 3, 316},
    {"RecNet(4,8,8,8,10,15,20)", "4,8,8,8,10,15,20", 3, 3, 537},
    {"RecNet(4,8,8,8,10,20,30)", "4,8,8,8,10,20,30", 3, 3, 930},
    {"RecNet(4,16,16,16,5,10,15)", "4,16,16,16,5,10,15", 3, 3, 1137},
    {"RecNet(4,16,16,16,10,15,20)", "4,16,16,16,10,15,20", 3, 3, 2028},
    {"RecNet(4,16,16,16,10,20,30)", "4,16,16,16,10,20,30", 3, 3, 3569},
};

/// Relative deviation of the with-bn total from a reference, using whichever of the 10- and
/// 100-class heads is closer.
inline double reference_deviation(const ReferenceTotal &ref, std::uint64_t *best_total = nullptr) {
  double best = 1e300;
  for (std::size_t n : {10u, 100u}) {
    auto c = RecNetConfig::parse(ref.tuple);
    c.k_x = ref.k_x;
    c.k_h = ref.k_h;
    c.n_classes = n;
    const auto total = describe(c, ParamConvention::WithBn).total_params;
    const double dev = std::abs(double(total) - 1000.0 * double(ref.thousands)) /
                       (1000.0 * double(ref.thousands));
    if (dev < best) {
      best = dev;
      if (best_total)
        *best_total = total;
    }
  }
  return best;
}

/// Parameter accounting: single-layer counts exactly, network totals within 5%.
inline SuiteReport verify_counts() {
  SuiteReport r{"counts", {}};
  auto exact = [&](std::string name, std::uint64_t got, std::uint64_t want) {
    const double diff = got > want ? double(got - want) : double(want - got);
    r.properties.push_back({std::move(name), got == want, diff, 0,
                            std::to_string(got) + " vs " + std::to_string(want)});
  };
  exact("crc(160->640, d=10, k=3) with-bn",
        crc_param_count(16, 64, 10, 3, 3, CrcVariant::SeparateBnRelu, ParamConvention::WithBn),
        47360);
  exact("crc(160->640, d=10, k=3) formula-only",
        crc_param_count(16, 64, 10, 3, 3, CrcVariant::SeparateBnRelu, ParamConvention::FormulaOnly),
        46080);
  exact("dense 3x3 conv 160->640", dense_conv_params(160, 640, 3), 921600);
  for (const auto &ref : kReferenceTotals) {
    std::uint64_t total = 0;
    const double dev = reference_deviation(ref, &total);
    r.properties.push_back({std::string("total ") + ref.label, dev <= 0.05, dev, 0.05,
                            std::to_string(total) + " vs " + std::to_string(ref.thousands) +
                                "K (relative deviation)"});
  }
  return r;
}

inline const std::vector<std::string> &suite_names() {
  static const std::vector<std::string> names{"grad", "equiv", "unroll", "causality", "counts"};
  return names;
}

inline SuiteReport run_suite(const std::string &name, std::uint64_t seed, std::size_t trials) {
  if (name == "grad")
    return verify_grad(seed, trials);
  if (name == "equiv")
    return verify_equiv(seed, trials);
  if (name == "unroll")
    return verify_unroll(seed, trials);
  if (name == "causality")
    return verify_causality(seed, trials);
  if (name == "counts")
    return verify_counts();
  throw ConfigError("unknown suite '" + name + "' (grad, equiv, unroll, causality, counts, all)");
}

} // namespace recnet

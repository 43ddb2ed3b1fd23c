// SPDX-License-Identifier: Apache-2.0
//
// Acceptance criteria. One [PASS]/[FAIL] line per criterion; exit status is nonzero if any
// gating criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "recnet/cifar.hpp"
#include "recnet/crc.hpp"
#include "recnet/model.hpp"
#include "recnet/ops.hpp"
#include "recnet/rec_module.hpp"
#include "recnet/trainer.hpp"
#include "support/oracles.hpp"

using namespace recnet;
using recnet::testing::check_gradient;
using recnet::testing::GradCheck;
using recnet::testing::max_abs_diff;
using recnet::testing::random_tensor;
using recnet::testing::reference_conv;
using recnet::testing::weighted_sum;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(int id, const std::string &title, bool pass, const std::string &detail) {
  std::printf("[%s] %2d %s: %s\n", pass ? "PASS" : "FAIL", id, title.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass)
    ++failures;
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

constexpr CrcVariant kVariants[] = {CrcVariant::Relu, CrcVariant::SharedBnRelu,
                                    CrcVariant::SeparateBnRelu, CrcVariant::Linear};

void fill(std::span<double> v, std::mt19937_64 &rng, double scale = 1.0) {
  recnet::testing::fill_random(v, rng, scale);
}

CrcParams<double> random_crc(std::mt19937_64 &rng, std::size_t s_in, std::size_t s_out,
                             std::size_t d, CrcVariant v, std::size_t kx = 3, std::size_t kh = 3) {
  auto p = CrcParams<double>::make(s_in, s_out, d, v, kx, kh);
  fill(p.w_x.values(), rng, 0.5);
  fill(p.w_h.values(), rng, 0.5);
  fill(p.bias.value, rng, 0.5);
  for (auto &bn : p.step_bn) {
    fill(bn.gamma.value, rng);
    fill(bn.beta.value, rng);
  }
  if (p.out_bn) {
    fill(p.out_bn->gamma.value, rng);
    fill(p.out_bn->beta.value, rng);
  }
  return p;
}

Tensor4<double> segment(const Tensor4<double> &x, std::size_t i, std::size_t width) {
  return slice_channels(x, i * width, width);
}

// --------------------------------------------------------------------------------------------

void exact_counts() {
  const auto p = CrcParams<float>::make(16, 64, 10, CrcVariant::SeparateBnRelu, 3, 3);
  const std::uint64_t formula = p.w_x.size() + p.w_h.size();
  const std::uint64_t with_bn = p.trainable_count();
  const std::uint64_t ledger_bn =
      crc_param_count(16, 64, 10, 3, 3, CrcVariant::SeparateBnRelu, ParamConvention::WithBn);
  const std::uint64_t ledger_formula =
      crc_param_count(16, 64, 10, 3, 3, CrcVariant::SeparateBnRelu, ParamConvention::FormulaOnly);
  const std::uint64_t dense = dense_conv_params(160, 640, 3);
  const bool pass = with_bn == 47360 && ledger_bn == 47360 && formula == 46080 &&
                    ledger_formula == 46080 && dense == 921600 && 3 * 3 * 160 * 640 == 921600;
  report(1, "exact parameter counts", pass,
         "CRC(16,64,10) with-bn " + std::to_string(with_bn) + "/" + std::to_string(ledger_bn) +
             " (want 47360), formula-only " + std::to_string(formula) + "/" +
             std::to_string(ledger_formula) + " (want 46080), dense " + std::to_string(dense) +
             " (want 921600)");
}

struct Reference {
  const char *label;
  const char *tuple;
  std::size_t kx, kh;
  double total;
};

const Reference kTotals[] = {
    {"e=1", "1,8,16,32,10,10,10", 3, 3, 424e3},
    {"e=2", "2,8,16,32,10,10,10", 3, 3, 824e3},
    {"e=4", "4,8,16,32,10,10,10", 3, 3, 1769e3},
    {"e=8", "8,8,16,32,10,10,10", 3, 3, 4239e3},
    {"3x3/1x1", "4,8,16,32,10,10,10", 3, 1, 1425e3},
    {"1x1/3x3", "4,8,16,32,10,10,10", 1, 3, 1683e3},
    {"3x3/3x3", "4,8,16,32,10,10,10", 3, 3, 1769e3},
    {"RecNet-60-640", "4,4,8,16,10,10,10", 3, 3, 471e3},
    {"RecNet-90-960", "4,4,8,16,15,15,15", 3, 3, 863e3},
    {"RecNet-120-1280", "4,4,8,16,20,20,20", 3, 3, 1406e3},
    {"RecNet-60-1280", "4,8,16,32,10,10,10", 3, 3, 1769e3},
    {"RecNet-90-1920", "4,8,16,32,15,15,15", 3, 3, 3306e3},
    {"RecNet-120-2560", "4,8,16,32,20,20,20", 3, 3, 5444e3},
    {"RecNet-60-480", "4,8,8,8,5,10,15", 3, 3, 316e3},
    {"RecNet-90-640", "4,8,8,8,10,15,20", 3, 3, 537e3},
    {"RecNet-120-960", "4,8,8,8,10,20,30", 3, 3, 930e3},
    {"RecNet-60-960", "4,16,16,16,5,10,15", 3, 3, 1137e3},
    {"RecNet-90-1280", "4,16,16,16,10,15,20", 3, 3, 2028e3},
    {"RecNet-120-1920", "4,16,16,16,10,20,30", 3, 3, 3569e3},
};

void network_totals() {
  constexpr double tol = 0.05;
  std::size_t ok = 0;
  double worst = 0;
  std::string failed;
  bool ledger_matches_model = true;
  for (const auto &ref : kTotals) {
    double best = 1e300;
    for (std::size_t classes : {10u, 100u}) {
      auto c = RecNetConfig::parse(ref.tuple);
      c.k_x = ref.kx;
      c.k_h = ref.kh;
      c.n_classes = classes;
      const double total = double(describe(c, ParamConvention::WithBn).total_params);
      best = std::min(best, std::abs(total - ref.total) / ref.total);
      auto m = RecNetModel<float>::build(c);
      ledger_matches_model = ledger_matches_model &&
                             describe(c, ParamConvention::WithBnAndBias).total_params ==
                                 m.trainable_count();
    }
    worst = std::max(worst, best);
    if (best <= tol)
      ++ok;
    else
      failed += std::string(failed.empty() ? "" : ", ") + ref.label + " " + num(100 * best) + "%";
  }
  const std::size_t n = std::size(kTotals);
  report(2, "network parameter totals within 5%", ok == n && ledger_matches_model,
         std::to_string(ok) + "/" + std::to_string(n) + " rows within 5% (worst " +
             num(100 * worst) + "%)" + (failed.empty() ? "" : "; outside: " + failed) +
             "; ledger equals built model: " + (ledger_matches_model ? "yes" : "no"));
}

void acronyms() {
  std::size_t ok = 0, rows = 0;
  std::string bad;
  for (const auto &ref : kTotals) {
    const std::string label = ref.label;
    if (label.rfind("RecNet-", 0) != 0)
      continue;
    ++rows;
    const std::string got = acronym(RecNetConfig::parse(ref.tuple));
    if (got == label)
      ++ok;
    else
      bad += " " + got + "!=" + label;
  }
  report(3, "acronyms", ok == 12 && rows == 12,
         std::to_string(ok) + "/" + std::to_string(rows) + " match" + bad);
}

// --------------------------------------------------------------------------------------------

struct GradTally {
  double worst = 0;
  std::size_t instances = 0, checked = 0;
  void add(const GradCheck &g) {
    worst = std::max(worst, g.max_rel_error);
    checked += g.checked;
  }
};

void gradient_suite() {
  constexpr double tol = 1e-5;
  constexpr std::size_t trials = 20;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> nb(1, 2), ch(1, 4), sp(2, 6), dd(1, 4);
  auto even = [&] { return 2 * std::uniform_int_distribution<std::size_t>(1, 3)(rng); };
  std::vector<std::pair<std::string, GradTally>> ops{
      {"conv", {}},   {"bn", {}},    {"relu", {}},         {"maxpool", {}}, {"avgpool", {}},
      {"linear", {}}, {"ce", {}},    {"crc", {}},          {"grouped", {}}, {"rec", {}}};
  auto tally = [&](std::size_t i) -> GradTally & { return ops[i].second; };

  for (std::size_t t = 0; t < trials; ++t) {
    {
      const std::size_t k = t % 2 ? 3 : 1;
      auto x = random_tensor({nb(rng), ch(rng), sp(rng), sp(rng)}, rng);
      ConvKernel<double> w({ch(rng), x.shape().c, k, k});
      fill(w.values(), rng);
      std::vector<double> b(w.shape().out);
      fill(b, rng);
      const auto r = random_tensor({x.shape().n, w.shape().out, x.shape().h, x.shape().w}, rng);
      auto loss = [&] { return weighted_sum(reference_conv(x, w, k / 2, b), r); };
      const auto g = conv2d_backward(x, w, r, Padding::same(w.shape()));
      auto &s = tally(0);
      s.add(check_gradient(x.values(), g.grad_x.values(), loss));
      s.add(check_gradient(w.values(), g.grad_w, loss));
      s.add(check_gradient(b, g.grad_bias, loss));
      ++s.instances;
    }
    {
      auto x = random_tensor({2, ch(rng), sp(rng), sp(rng)}, rng);
      BnState<double> s(x.shape().c);
      fill(s.gamma.value, rng);
      fill(s.beta.value, rng);
      const auto r = random_tensor(x.shape(), rng);
      auto loss = [&] {
        auto q = s;
        return weighted_sum(batchnorm_forward(x, q), r);
      };
      auto q = s;
      BnCache<double> cache;
      batchnorm_forward(x, q, &cache);
      const auto g = batchnorm_backward(r, q, cache);
      auto &st = tally(1);
      st.add(check_gradient(x.values(), g.grad_x.values(), loss));
      st.add(check_gradient(s.gamma.value, g.grad_gamma, loss));
      st.add(check_gradient(s.beta.value, g.grad_beta, loss));
      ++st.instances;
    }
    {
      auto x = random_tensor({nb(rng), ch(rng), sp(rng), sp(rng)}, rng);
      const auto r = random_tensor(x.shape(), rng);
      auto loss = [&] {
        double acc = 0;
        for (std::size_t i = 0; i < x.size(); ++i)
          acc += std::max(x[i], 0.0) * r[i];
        return acc;
      };
      tally(2).add(check_gradient(x.values(), relu_backward(x, r).values(), loss));
      ++tally(2).instances;
    }
    {
      auto x = random_tensor({nb(rng), ch(rng), even(), even()}, rng);
      const auto fwd = maxpool2(x);
      const auto r = random_tensor(fwd.out.shape(), rng);
      auto loss = [&] {
        double acc = 0;
        for (std::size_t n = 0; n < x.shape().n; ++n)
          for (std::size_t c = 0; c < x.shape().c; ++c)
            for (std::size_t y = 0; y < x.shape().h / 2; ++y)
              for (std::size_t w = 0; w < x.shape().w / 2; ++w)
                acc += r.at(n, c, y, w) *
                       std::max({x.at(n, c, 2 * y, 2 * w), x.at(n, c, 2 * y, 2 * w + 1),
                                 x.at(n, c, 2 * y + 1, 2 * w), x.at(n, c, 2 * y + 1, 2 * w + 1)});
        return acc;
      };
      const auto g = maxpool2_backward(x.shape(), std::span<const std::uint32_t>(fwd.argmax), r);
      tally(3).add(check_gradient(x.values(), g.values(), loss));
      ++tally(3).instances;
    }
    {
      auto x = random_tensor({nb(rng), ch(rng), sp(rng), sp(rng)}, rng);
      const auto r = random_tensor({x.shape().n, x.shape().c, 1, 1}, rng);
      auto loss = [&] {
        double acc = 0;
        for (std::size_t n = 0; n < x.shape().n; ++n)
          for (std::size_t c = 0; c < x.shape().c; ++c) {
            double m = 0;
            for (double v : x.plane(n, c))
              m += v;
            acc += r.at(n, c, 0, 0) * m / double(x.shape().plane());
          }
        return acc;
      };
      tally(4).add(check_gradient(x.values(), avgpool_global_backward(x.shape(), r).values(), loss));
      ++tally(4).instances;
    }
    {
      auto x = random_tensor({nb(rng), ch(rng), 1, 1}, rng);
      LinearParams<double> p(ch(rng), x.shape().c);
      fill(p.weight.value, rng);
      fill(p.bias.value, rng);
      const auto r = random_tensor({x.shape().n, p.out, 1, 1}, rng);
      auto loss = [&] {
        double acc = 0;
        for (std::size_t n = 0; n < x.shape().n; ++n)
          for (std::size_t o = 0; o < p.out; ++o) {
            double y = p.bias.value[o];
            for (std::size_t i = 0; i < p.in; ++i)
              y += p.weight.value[o * p.in + i] * x[n * p.in + i];
            acc += r.at(n, o, 0, 0) * y;
          }
        return acc;
      };
      const auto g = linear_backward(x, p, r);
      auto &s = tally(5);
      s.add(check_gradient(x.values(), g.grad_x.values(), loss));
      s.add(check_gradient(p.weight.value, g.grad_w, loss));
      s.add(check_gradient(p.bias.value, g.grad_b, loss));
      ++s.instances;
    }
    {
      const std::size_t n = nb(rng) + 1, k = ch(rng) + 1;
      auto z = random_tensor({n, k, 1, 1}, rng);
      std::vector<std::uint8_t> labels(n);
      for (auto &l : labels)
        l = std::uint8_t(std::uniform_int_distribution<std::size_t>(0, k - 1)(rng));
      auto loss = [&] {
        double acc = 0;
        for (std::size_t i = 0; i < n; ++i) {
          double mx = -1e300, s = 0;
          for (std::size_t j = 0; j < k; ++j)
            mx = std::max(mx, z.at(i, j, 0, 0));
          for (std::size_t j = 0; j < k; ++j)
            s += std::exp(z.at(i, j, 0, 0) - mx);
          acc += std::log(s) + mx - z.at(i, labels[i], 0, 0);
        }
        return acc / double(n);
      };
      const auto g = softmax_cross_entropy(z, std::span<const std::uint8_t>(labels)).grad_logits;
      tally(6).add(check_gradient(z.values(), g.values(), loss, 1e-5));
      ++tally(6).instances;
    }
    {
      const std::size_t d = dd(rng), s_in = std::min<std::size_t>(ch(rng), 2);
      const std::size_t s_out = std::min<std::size_t>(ch(rng), 2), h = std::min<std::size_t>(sp(rng), 5);
      auto p = random_crc(rng, s_in, s_out, d, kVariants[t % 4], t % 3 ? 3 : 1, t % 2 ? 3 : 1);
      const auto x0 = random_tensor({2, d * s_in, h, h}, rng);
      const auto r = random_tensor({2, d * s_out, h, h}, rng);
      for (bool recurrent : {true, false}) {
        auto x = x0;
        auto run = [&](CrcParams<double> &q, CrcCache<double> *c) {
          return recurrent ? crc_forward(x, q, c) : grouped_shared_forward(x, q, c);
        };
        auto loss = [&] {
          auto q = p;
          return weighted_sum(run(q, nullptr), r);
        };
        auto q = p;
        CrcCache<double> cache;
        run(q, &cache);
        q.zero_grad();
        const auto gx = crc_backward(r, q, cache);
        auto &s = tally(recurrent ? 7 : 8);
        s.add(check_gradient(x.values(), gx.values(), loss));
        s.add(check_gradient(p.w_x.values(), q.w_x.grad(), loss));
        s.add(check_gradient(p.w_h.values(), q.w_h.grad(), loss));
        s.add(check_gradient(p.bias.value, q.bias.grad, loss));
        for (std::size_t i = 0; i < p.step_bn.size(); ++i) {
          s.add(check_gradient(p.step_bn[i].gamma.value, q.step_bn[i].gamma.grad, loss));
          s.add(check_gradient(p.step_bn[i].beta.value, q.step_bn[i].beta.grad, loss));
        }
        if (p.out_bn) {
          s.add(check_gradient(p.out_bn->gamma.value, q.out_bn->gamma.grad, loss));
          s.add(check_gradient(p.out_bn->beta.value, q.out_bn->beta.grad, loss));
        }
        ++s.instances;
      }
    }
    {
      const std::size_t d = dd(rng);
      auto m = RecModule<double>::make(2, 2, ch(rng), d, kVariants[(t + 1) % 4]);
      m.crc = random_crc(rng, 2, 2, d, m.crc.variant);
      fill(m.tb.a.values(), rng);
      fill(m.tb.bn.gamma.value, rng);
      fill(m.tb.bn.beta.value, rng);
      m.mode = t % 2 ? RecMode::Merged : RecMode::Naive;
      auto x = random_tensor({2, 2 * d, 4, 4}, rng);
      const auto r = random_tensor({2, m.channels_out(), 4, 4}, rng);
      auto loss = [&] {
        auto q = m;
        return weighted_sum(rec_forward(x, q), r);
      };
      auto q = m;
      RecCache<double> cache;
      rec_forward(x, q, &cache);
      q.zero_grad();
      const auto gx = rec_backward(r, q, cache);
      auto &s = tally(9);
      s.add(check_gradient(x.values(), gx.values(), loss));
      s.add(check_gradient(m.tb.a.values(), q.tb.a.grad(), loss));
      s.add(check_gradient(m.tb.bn.gamma.value, q.tb.bn.gamma.grad, loss));
      s.add(check_gradient(m.tb.bn.beta.value, q.tb.bn.beta.grad, loss));
      s.add(check_gradient(m.crc.w_x.values(), q.crc.w_x.grad(), loss));
      s.add(check_gradient(m.crc.w_h.values(), q.crc.w_h.grad(), loss));
      ++s.instances;
    }
  }
  const double secs = seconds_since(t0);
  bool pass = secs < 120;
  double worst = 0;
  std::string worst_op;
  std::size_t checked = 0;
  for (const auto &[name, s] : ops) {
    pass = pass && s.instances >= 20 && s.checked > 0 && s.worst < tol;
    checked += s.checked;
    if (s.worst >= worst) {
      worst = s.worst;
      worst_op = name;
    }
  }
  report(4, "gradient check (64-bit, rel < 1e-5)", pass,
         std::to_string(ops.size()) + " ops x " + std::to_string(trials) + " instances, " +
             std::to_string(checked) + " coordinates, max rel " + num(worst) + " (" + worst_op +
             "), " + num(secs) + " s (limit 120 s)");
}

// --------------------------------------------------------------------------------------------

void naive_vs_merged() {
  constexpr std::size_t instances = 60;
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> ch(1, 4), dd(1, 8), sp(2, 8);
  double fwd = 0, bwd = 0;
  std::size_t max_d = 0;
  for (std::size_t t = 0; t < instances; ++t) {
    const std::size_t d = t < 8 ? t + 1 : dd(rng), s_in = ch(rng), s_out = ch(rng), h = sp(rng);
    max_d = std::max(max_d, d);
    auto m = RecModule<double>::make(s_in, s_out, ch(rng), d, kVariants[t % 4]);
    m.crc = random_crc(rng, s_in, s_out, d, m.crc.variant);
    fill(m.tb.a.values(), rng);
    fill(m.tb.bn.gamma.value, rng);
    fill(m.tb.bn.beta.value, rng);
    const auto x = random_tensor({2, d * s_in, h, h}, rng);
    const auto r = random_tensor({2, m.channels_out(), h, h}, rng);
    auto a = m, b = m;
    RecCache<double> ca, cb;
    fwd = std::max(fwd, max_abs_diff(rec_forward_naive(x, a, &ca), rec_forward_merged(x, b, &cb)));
    a.zero_grad();
    b.zero_grad();
    bwd = std::max(bwd, max_abs_diff(rec_backward(r, a, ca), rec_backward(r, b, cb)));
    auto cmp = [&](std::span<const double> u, std::span<const double> v) {
      for (std::size_t i = 0; i < u.size(); ++i)
        bwd = std::max(bwd, std::abs(u[i] - v[i]));
    };
    cmp(a.tb.a.grad(), b.tb.a.grad());
    cmp(a.tb.bn.gamma.grad, b.tb.bn.gamma.grad);
    cmp(a.crc.w_x.grad(), b.crc.w_x.grad());
    cmp(a.crc.w_h.grad(), b.crc.w_h.grad());
    cmp(a.crc.bias.grad, b.crc.bias.grad);
  }
  report(5, "naive vs merged Rec module", fwd < 1e-9 && bwd < 1e-8,
         std::to_string(instances) + " instances, d <= " + std::to_string(max_d) +
             ", forward max " + num(fwd) + " (< 1e-9), backward max " + num(bwd) + " (< 1e-8)");
}

// Direct linear recursion h_i = x_i * Wx + h_{i-1} * Wh + b with the reference convolution.
Tensor4<double> reference_linear_hidden(const Tensor4<double> &x, const CrcParams<double> &p) {
  const Shape4 xs = x.shape();
  Tensor4<double> out({xs.n, p.d * p.s_out, xs.h, xs.w});
  Tensor4<double> h;
  for (std::size_t i = 0; i < p.d; ++i) {
    auto hi = reference_conv(segment(x, i, p.s_in), p.w_x, p.k_x / 2, p.bias.value);
    if (i > 0)
      hi += reference_conv(h, p.w_h, p.k_h / 2);
    assign_channels(out, hi, i * p.s_out);
    h = hi;
  }
  return out;
}

void unrolled_form() {
  constexpr std::size_t instances = 40;
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> ch(1, 3), dd(1, 5);
  double zero_border = 0, interior = 0, oracle = 0;
  for (std::size_t t = 0; t < instances; ++t) {
    const std::size_t d = t < 5 ? t + 1 : dd(rng), kx = t % 2 ? 3 : 1, kh = (t / 2) % 2 ? 3 : 1;
    const std::size_t s_in = ch(rng), s_out = ch(rng);
    auto p = random_crc(rng, s_in, s_out, d, CrcVariant::Linear, kx, kh);
    const std::size_t margin = (d - 1) * (kh / 2) + kx / 2, inner = 3, side = inner + 2 * margin;

    auto z = p;
    std::fill(z.bias.value.begin(), z.bias.value.end(), 0.0);
    Tensor4<double> x({2, d * s_in, side, side});
    std::normal_distribution<double> nd;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < d * s_in; ++c)
        for (std::size_t y = margin; y < margin + inner; ++y)
          for (std::size_t w = margin; w < margin + inner; ++w)
            x.at(n, c, y, w) = nd(rng);
    const auto unrolled = crc_linear_unrolled(x, z);
    zero_border = std::max(zero_border, max_abs_diff(unrolled, reference_linear_hidden(x, z)));
    oracle = std::max(oracle, max_abs_diff(crc_hidden(x, z), reference_linear_hidden(x, z)));

    const auto g = random_tensor({2, d * s_in, side, side}, rng);
    const auto a = crc_linear_unrolled(g, p), b = reference_linear_hidden(g, p);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < d * s_out; ++c)
        for (std::size_t y = margin; y < side - margin; ++y)
          for (std::size_t w = margin; w < side - margin; ++w)
            interior = std::max(interior, std::abs(a.at(n, c, y, w) - b.at(n, c, y, w)));
  }
  report(6, "unrolled composed-kernel form", zero_border < 1e-5 && interior < 1e-9 && oracle < 1e-9,
         std::to_string(instances) + " instances, d <= 5, k in {1,3}: zero-border max " +
             num(zero_border) + " (< 1e-5), interior max " + num(interior) +
             " (< 1e-9), recursion vs reference " + num(oracle));
}

void causality() {
  std::mt19937_64 rng(13);
  std::uniform_int_distribution<std::size_t> ch(1, 3), dd(2, 5);
  std::size_t draws = 0, violations = 0;
  for (std::size_t t = 0; draws < 100 || t < 20; ++t) {
    const std::size_t d = dd(rng), s_in = ch(rng), s_out = ch(rng);
    auto p = random_crc(rng, s_in, s_out, d, kVariants[t % 4]);
    const auto x = random_tensor({2, d * s_in, 5, 5}, rng);
    auto p0 = p;
    const auto base = crc_forward(x, p0);
    const std::size_t j = std::uniform_int_distribution<std::size_t>(1, d - 1)(rng);
    auto xp = x;
    assign_channels(xp, random_tensor({2, s_in, 5, 5}, rng), j * s_in);
    auto pj = p;
    const auto y = crc_forward(xp, pj);
    for (std::size_t i = 0; i < j; ++i, ++draws) {
      const auto a = segment(base, i, s_out), b = segment(y, i, s_out);
      if (!std::equal(a.values().begin(), a.values().end(), b.values().begin()))
        ++violations;
    }
  }
  report(7, "causality", violations == 0,
         std::to_string(draws) + " (i, j, instance) draws, " + std::to_string(violations) +
             " outputs changed (want bit-identical)");
}

void recurrent_vs_grouped() {
  // Parameter count of the shared set read by both topologies, by hand.
  const std::size_t s_in = 3, s_out = 5, d = 4;
  const auto p = CrcParams<double>::make(s_in, s_out, d, CrcVariant::SeparateBnRelu);
  const bool counts = p.trainable_count() == 9 * s_in * s_out + 9 * s_out * s_out + 2 * d * s_out;

  double equiv = 0;
  std::mt19937_64 rng(17);
  for (CrcVariant v : {CrcVariant::Relu, CrcVariant::SharedBnRelu}) {
    for (std::size_t t = 0; t < 5; ++t) {
      auto q = random_crc(rng, 2, 3, 4, v);
      const auto x = random_tensor({2, 8, 5, 5}, rng);
      std::vector<std::size_t> perm{0, 1, 2, 3};
      std::shuffle(perm.begin(), perm.end(), rng);
      Tensor4<double> xp(x.shape());
      for (std::size_t i = 0; i < 4; ++i)
        assign_channels(xp, segment(x, perm[i], 2), i * 2);
      auto q1 = q, q2 = q;
      const auto y = grouped_shared_forward(x, q1), yp = grouped_shared_forward(xp, q2);
      for (std::size_t i = 0; i < 4; ++i)
        equiv = std::max(equiv, max_abs_diff(segment(yp, i, 3), segment(y, perm[i], 3)));
    }
  }

  int witness_seed = -1;
  for (int seed = 0; seed < 10 && witness_seed < 0; ++seed) {
    std::mt19937_64 r{std::uint64_t(seed)};
    auto q = random_crc(r, 2, 3, 4, CrcVariant::Relu);
    const auto x = random_tensor({1, 8, 5, 5}, r);
    const std::size_t perm[] = {1, 0, 2, 3};
    Tensor4<double> xp(x.shape());
    for (std::size_t i = 0; i < 4; ++i)
      assign_channels(xp, segment(x, perm[i], 2), i * 2);
    auto q1 = q, q2 = q;
    const auto y = crc_forward(x, q1), yp = crc_forward(xp, q2);
    double diff = 0;
    for (std::size_t i = 0; i < 4; ++i)
      diff = std::max(diff, max_abs_diff(segment(yp, i, 3), segment(y, perm[i], 3)));
    if (diff > 1e-6)
      witness_seed = seed;
  }
  report(8, "recurrent vs grouped-shared control",
         counts && equiv < 1e-12 && witness_seed >= 0,
         std::string("parameter counts equal: ") + (counts ? "yes" : "no") +
             ", grouped permutation error " + num(equiv) + " (< 1e-12), recurrent witness at seed " +
             std::to_string(witness_seed));
}

void schedule() {
  TrainConfig cfg;
  cfg.epochs = 200;
  bool peaks = true;
  for (std::size_t e : {0u, 20u, 60u, 120u})
    peaks = peaks && lr_at(e, cfg) == 0.1;
  const double mid = lr_at(10, cfg);
  const std::size_t bounds[] = {0, 20, 60, 120, 200};
  double worst = 0;
  std::size_t samples = 0;
  std::mt19937_64 rng(19);
  for (std::size_t k = 0; k < 4; ++k) {
    std::uniform_int_distribution<std::size_t> pick(bounds[k], bounds[k + 1] - 1);
    for (std::size_t s = 0; s < 20; ++s, ++samples) {
      const std::size_t e = pick(rng);
      const double t = double(e - bounds[k]) / double(bounds[k + 1] - bounds[k]);
      const double closed = 0.05 * (1 + std::cos(std::numbers::pi * t));
      worst = std::max(worst, std::abs(lr_at(e, cfg) - closed));
    }
  }
  report(9, "learning-rate schedule", peaks && std::abs(mid - 0.05) < 1e-12 && worst < 1e-12,
         std::string("lr=0.1 at {0,20,60,120}: ") + (peaks ? "yes" : "no") + ", lr(10)=" +
             num(mid) + ", closed-form max error " + num(worst) + " over " +
             std::to_string(samples) + " epochs (< 1e-12)");
}

void smoke_training() {
  const auto t0 = Clock::now();
  SyntheticSpec spec;
  spec.n_classes = 2;
  spec.train = 512;
  const auto tr = make_synthetic(spec, Split::Train), te = make_synthetic(spec, Split::Test);
  const auto nz = compute_normalization(tr);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.deterministic = true;
  cfg.seed = 5;
  auto run = [&](std::string &log, TrainResult &res) {
    auto c = RecNetConfig::parse("1,2,2,2,2,2,2");
    c.n_classes = 2;
    auto m = RecNetModel<float>::build(c);
    Rng rng(cfg.seed);
    init_model(m, rng);
    std::ostringstream os;
    write_metrics_header(os);
    TrainHooks<float> hooks;
    hooks.on_epoch = [&](const EpochMetrics &em, RecNetModel<float> &) { write_metrics_row(os, em); };
    res = train(m, tr, te, nz, cfg, hooks);
    log = os.str();
  };
  std::string a, b;
  TrainResult ra, rb;
  run(a, ra);
  run(b, rb);
  double best = 0;
  for (const auto &em : ra.history)
    best = std::max(best, em.train_acc);
  const double init_gap = std::abs(ra.first_batch_loss - std::log(2.0));
  const double secs = seconds_since(t0);
  report(10, "training smoke test", best > 0.9 && init_gap < 0.2 && a == b && secs < 300,
         "RecNet(1,2,2,2,2,2,2), 512 two-class samples, 10 epochs: best train acc " + num(best) +
             " (> 0.9), first loss " + num(ra.first_batch_loss) + " vs ln 2 (gap " +
             num(init_gap) + " < 0.2), logs identical: " + (a == b ? "yes" : "no") + ", " +
             num(secs) + " s (limit 300 s)");
}

} // namespace

int main() {
  exact_counts();
  network_totals();
  acronyms();
  gradient_suite();
  naive_vs_merged();
  unrolled_form();
  causality();
  recurrent_vs_grouped();
  schedule();
  smoke_training();
  std::printf("%d of 10 gating criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}

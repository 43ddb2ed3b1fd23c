// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "recnet/cifar.hpp"
#include "recnet/error.hpp"
#include "recnet/model.hpp"
#include "recnet/ops.hpp"
#include "recnet/parallel.hpp"

namespace recnet {

struct TrainConfig {
  double lr0 = 0.1;
  double weight_decay = 0.0005;
  double momentum = 0.9;
  double dampening = 0.0;
  bool nesterov = true;
  std::size_t batch = 64;
  std::size_t epochs = 200;
  std::vector<std::size_t> restarts{20, 60, 120};
  double eta_min = 0.0;
  std::uint64_t seed = 0;
  bool deterministic = false;
  bool augment = true;

  void validate() const {
    if (batch == 0)
      throw ConfigError("batch size must be positive");
    if (!(lr0 >= 0) || !(weight_decay >= 0) || !(momentum >= 0) || !(eta_min >= 0))
      throw ConfigError("learning rate, weight decay, momentum and eta_min must be non-negative");
    if (nesterov && (momentum <= 0 || dampening != 0))
      throw ConfigError("Nesterov momentum requires momentum > 0 and zero dampening");
    for (std::size_t i = 0; i < restarts.size(); ++i)
      if (restarts[i] == 0 || (i > 0 && restarts[i] <= restarts[i - 1]))
        throw ConfigError("restart epochs must be positive and strictly increasing");
  }
};

/// Cosine annealing with warm restarts, evaluated once per epoch. Restart epochs at or beyond
/// `epochs` are ignored, so the last period always ends at `epochs`.
inline double lr_at(std::size_t epoch, const TrainConfig &cfg) {
  if (epoch >= cfg.epochs)
    throw ConfigError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                      std::to_string(cfg.epochs) + ")");
  std::size_t start = 0, end = cfg.epochs;
  for (std::size_t r : cfg.restarts) {
    if (r >= cfg.epochs)
      break;
    if (r <= epoch)
      start = r;
    else {
      end = r;
      break;
    }
  }
  const double t = double(epoch - start) / double(end - start);
  return cfg.eta_min + 0.5 * (cfg.lr0 - cfg.eta_min) * (1 + std::cos(std::numbers::pi * t));
}

template <typename T> struct SgdState {
  std::vector<std::vector<T>> velocity;
  std::size_t steps = 0;
};

/// g = grad + wd * p (decayed tensors only); v = mu * v + (1 - dampening) * g;
/// p -= lr * (g + mu * v) with Nesterov, else p -= lr * v.
template <typename T>
void sgd_step(std::span<const ParamRef<T>> params, SgdState<T> &state, double lr,
              const TrainConfig &cfg) {
  if (state.velocity.empty())
    for (const auto &p : params)
      state.velocity.emplace_back(p.value.size(), T(0));
  if (state.velocity.size() != params.size())
    throw ShapeError("sgd_step: optimizer state holds " + std::to_string(state.velocity.size()) +
                     " tensors, got " + std::to_string(params.size()));
  const T mu = T(cfg.momentum), wd = T(cfg.weight_decay), step = T(lr);
  const T damp = state.steps == 0 ? T(1) : T(1 - cfg.dampening); // first step seeds v with g
  for (std::size_t k = 0; k < params.size(); ++k) {
    const ParamRef<T> &p = params[k];
    std::vector<T> &v = state.velocity[k];
    if (v.size() != p.value.size() || p.grad.size() != p.value.size())
      throw ShapeError("sgd_step: shape mismatch for " + p.name);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const T g = p.grad[i] + (p.decay ? wd * p.value[i] : T(0));
      v[i] = mu * v[i] + damp * g;
      p.value[i] -= step * (cfg.nesterov ? g + mu * v[i] : v[i]);
    }
  }
  ++state.steps;
}

struct EvalResult {
  double accuracy = 0;
  double loss = 0;
};

/// Top-1 accuracy and mean cross-entropy with BN in eval mode; the model's BN mode is restored.
template <typename T>
EvalResult evaluate(RecNetModel<T> &m, const Dataset &ds, const Normalization &nz,
                    std::size_t batch = 256) {
  if (ds.size() == 0)
    throw ConfigError("evaluate: empty dataset");
  const BnMode prev = m.stem_bn.mode;
  m.set_mode(BnMode::Eval);
  StreamOptions o;
  o.batch = batch;
  o.shuffle = false;
  BatchStream<T> stream(ds, nz, o);
  Batch<T> b;
  double loss_sum = 0;
  std::size_t correct = 0;
  while (stream.next(b)) {
    const auto logits = model_forward(b.x, m);
    const auto r = softmax_cross_entropy(logits, std::span<const std::uint8_t>(b.labels));
    loss_sum += double(r.loss) * double(b.labels.size());
    correct += r.correct;
  }
  m.set_mode(prev);
  return {double(correct) / double(ds.size()), loss_sum / double(ds.size())};
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_acc = 0;
  double test_loss = 0;
  double test_acc = 0;
  double seconds = 0;
};

/// Shortest decimal text that reads back to the same double.
inline std::string format_number(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline void write_metrics_header(std::ostream &os) {
  os << "epoch,lr,train_loss,train_acc,test_loss,test_acc,seconds\n";
}

inline void write_metrics_row(std::ostream &os, const EpochMetrics &m) {
  os << m.epoch << ',' << format_number(m.lr) << ',' << format_number(m.train_loss) << ','
     << format_number(m.train_acc) << ',' << format_number(m.test_loss) << ','
     << format_number(m.test_acc) << ',' << format_number(m.seconds) << '\n';
}

struct TrainResult {
  std::vector<EpochMetrics> history;
  double first_batch_loss = 0; // before any update
};

template <typename T> struct TrainHooks {
  std::function<void(const EpochMetrics &, RecNetModel<T> &)> on_epoch;
};

/// Runs `cfg.epochs` epochs of minibatch SGD. Epoch numbers in the metrics are 1-based. Under
/// the determinism flag, kernels run single-threaded and `seconds` is recorded as 0 so that the
/// metrics log depends only on the inputs.
template <typename T>
TrainResult train(RecNetModel<T> &m, const Dataset &train_ds, const Dataset &test_ds,
                  const Normalization &nz, const TrainConfig &cfg, const TrainHooks<T> &hooks = {}) {
  cfg.validate();
  if (train_ds.size() == 0)
    throw ConfigError("train: empty training split");
  for (const Dataset *ds : {&train_ds, &test_ds})
    for (std::uint8_t l : ds->labels)
      if (l >= m.cfg.n_classes)
        throw ConfigError("train: label " + std::to_string(l) + " but the model has " +
                          std::to_string(m.cfg.n_classes) + " classes");
  struct DeterminismScope {
    bool saved = deterministic();
    explicit DeterminismScope(bool on) { set_deterministic(on || saved); }
    ~DeterminismScope() { set_deterministic(saved); }
  } scope(cfg.deterministic);

  std::vector<ParamRef<T>> params;
  m.visit_params([&](ParamRef<T> p) { params.push_back(std::move(p)); });
  SgdState<T> opt;
  TrainResult result;
  bool first = true;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at(epoch, cfg);
    StreamOptions o;
    o.batch = cfg.batch;
    o.seed = cfg.seed;
    o.shuffle = true;
    o.augment = cfg.augment;
    BatchStream<T> stream(train_ds, nz, o, epoch);
    Batch<T> b;
    m.set_mode(BnMode::Train);
    double loss_sum = 0;
    std::size_t correct = 0, seen = 0, index = 0;
    ModelCache<T> cache;
    while (stream.next(b)) {
      m.zero_grad();
      const auto logits = model_forward(b.x, m, &cache);
      const auto r = softmax_cross_entropy(logits, std::span<const std::uint8_t>(b.labels));
      if (!std::isfinite(double(r.loss)))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                            std::to_string(index + 1));
      if (first) {
        result.first_batch_loss = double(r.loss);
        first = false;
      }
      model_backward(r.grad_logits, m, cache);
      sgd_step<T>(params, opt, lr, cfg);
      loss_sum += double(r.loss) * double(b.labels.size());
      correct += r.correct;
      seen += b.labels.size();
      ++index;
    }
    EpochMetrics em;
    em.epoch = epoch + 1;
    em.lr = lr;
    em.train_loss = loss_sum / double(seen);
    em.train_acc = double(correct) / double(seen);
    if (test_ds.size() > 0) {
      const auto ev = evaluate(m, test_ds, nz);
      em.test_loss = ev.loss;
      em.test_acc = ev.accuracy;
    }
    em.seconds = cfg.deterministic
                     ? 0.0
                     : std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(em);
    if (hooks.on_epoch)
      hooks.on_epoch(em, m);
  }
  return result;
}

} // namespace recnet

// SPDX-License-Identifier: Apache-2.0
//
// recnet: describe, train, eval and verify RecNet models.
//
// Exit codes: 0 success, 1 verification or training failure, 2 usage or configuration error,
// 3 I/O or format error.

#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "recnet/checkpoint.hpp"
#include "recnet/cifar.hpp"
#include "recnet/error.hpp"
#include "recnet/model.hpp"
#include "recnet/trainer.hpp"
#include "recnet/verify.hpp"

namespace fs = std::filesystem;
using namespace recnet;

namespace {

constexpr int kOk = 0, kFailed = 1, kUsage = 2, kIo = 3;

struct ArchOptions {
  std::string arch;
  std::optional<std::size_t> classes;
  std::string variant = "separate-bn";
  std::size_t k_x = 3, k_h = 3;

  void add(CLI::App &cmd) {
    cmd.add_option("arch", arch, "Architecture tuple e,S1,S2,S3,d1,d2,d3")->required();
    cmd.add_option("--classes", classes, "Number of output classes");
    cmd.add_option("--variant", variant, "CRC variant: relu, shared-bn, separate-bn or linear");
    cmd.add_option("--kx", k_x, "Input-to-hidden kernel size (1 or 3)");
    cmd.add_option("--kh", k_h, "Hidden-to-hidden kernel size (1 or 3)");
  }

  RecNetConfig config(std::size_t default_classes) const {
    RecNetConfig c = RecNetConfig::parse(arch);
    c.n_classes = classes.value_or(default_classes);
    c.variant = parse_variant(variant);
    c.k_x = k_x;
    c.k_h = k_h;
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// describe

struct DescribeOptions {
  ArchOptions arch;
  std::string convention = "with-bn-and-bias";
  std::string format = "text";
};

int cmd_describe(const DescribeOptions &o) {
  const RecNetConfig c = o.arch.config(10);
  const Ledger l = describe(c, parse_convention(o.convention));
  if (o.format == "csv") {
    write_ledger_csv(std::cout, l);
    return kOk;
  }
  std::cout << "RecNet(" << c.tuple() << "), " << c.n_classes << " classes, variant "
            << to_string(c.variant) << ", Wx " << c.k_x << 'x' << c.k_x << ", Wh " << c.k_h << 'x'
            << c.k_h << ", convention " << o.convention << "\n\n";
  write_ledger_text(std::cout, l);
  std::cout << "\nparams: " << l.total_params << "\nflops: " << l.total_flops
            << "\nacronym: " << acronym(c) << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  ArchOptions arch;
  std::string data;
  std::string dataset = "cifar10";
  std::string out = "run";
  bool synthetic = false;
  SyntheticSpec synth;
  TrainConfig cfg;
  bool no_augment = false;
  std::string rec_mode = "merged";
};

struct Data {
  Dataset train, test;
  std::string name;
  std::optional<SyntheticSpec> synthetic;
};

Data load_data(bool synthetic, const SyntheticSpec &spec, const std::string &dir,
               const std::string &dataset, bool need_train) {
  Data d;
  if (synthetic) {
    if (need_train)
      d.train = make_synthetic(spec, Split::Train);
    d.test = make_synthetic(spec, Split::Test);
    d.name = "synthetic";
    d.synthetic = spec;
    return d;
  }
  if (dir.empty())
    throw ConfigError("--data is required unless --synthetic is given");
  const DatasetKind kind = parse_dataset(dataset);
  if (need_train)
    d.train = load_dataset(dir, kind, Split::Train);
  d.test = load_dataset(dir, kind, Split::Test);
  d.name = std::string(to_string(kind));
  return d;
}

RecMode parse_rec_mode(const std::string &s) {
  if (s == "merged")
    return RecMode::Merged;
  if (s == "naive")
    return RecMode::Naive;
  throw ConfigError("unknown --rec-mode '" + s + "' (naive, merged)");
}

int cmd_train(TrainOptions o) {
  o.cfg.augment = !o.no_augment;
  o.cfg.validate();
  const RecMode mode = parse_rec_mode(o.rec_mode);
  const Data data = load_data(o.synthetic, o.synth, o.data, o.dataset, true);
  const std::size_t n_classes =
      o.synthetic ? o.synth.n_classes : class_count(parse_dataset(o.dataset));
  const RecNetConfig c = o.arch.config(n_classes);
  if (c.n_classes != n_classes)
    throw ConfigError("--classes " + std::to_string(c.n_classes) + " does not match the " +
                      std::to_string(n_classes) + " classes of " + data.name);

  const Normalization nz = compute_normalization(data.train);
  auto model = RecNetModel<float>::build(c);
  Rng rng(o.cfg.seed);
  init_model(model, rng);
  model.set_rec_mode(mode);

  const fs::path out(o.out);
  fs::create_directories(out);
  const fs::path ckpt = out / "model.rcn", metrics = out / "metrics.csv";
  CheckpointMeta meta{c, 0, o.cfg.seed, data.name, nz, data.synthetic};

  std::ofstream log(metrics, std::ios::trunc);
  if (!log)
    throw FormatError("cannot write " + metrics.string());
  write_metrics_header(log);
  log.flush();

  std::cout << "RecNet(" << c.tuple() << ") " << acronym(c) << ", " << model.trainable_count()
            << " parameters, " << data.train.size() << " train / " << data.test.size()
            << " test images\n";
  save_checkpoint(ckpt, model, meta);

  TrainHooks<float> hooks;
  hooks.on_epoch = [&](const EpochMetrics &em, RecNetModel<float> &m) {
    write_metrics_row(log, em);
    log.flush();
    meta.epoch = em.epoch;
    save_checkpoint(ckpt, m, meta);
    std::cout << "epoch " << em.epoch << '/' << o.cfg.epochs << " lr=" << format_number(em.lr)
              << " train_loss=" << format_number(em.train_loss)
              << " train_acc=" << format_number(em.train_acc)
              << " test_loss=" << format_number(em.test_loss)
              << " test_acc=" << format_number(em.test_acc) << '\n'
              << std::flush;
  };
  if (o.cfg.epochs > 0)
    train(model, data.train, data.test, nz, o.cfg, hooks);
  std::cout << "checkpoint: " << ckpt.string() << "\nmetrics: " << metrics.string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::string ckpt;
  std::string data;
  std::optional<std::string> dataset;
};

int cmd_eval(const EvalOptions &o) {
  Checkpoint ck = load_checkpoint(o.ckpt);
  const CheckpointMeta &meta = ck.meta;
  const bool synthetic = o.data.empty() && meta.synthetic.has_value();
  const std::string dataset = o.dataset.value_or(meta.dataset == "synthetic" ? "cifar10" : meta.dataset);
  const Data data = load_data(synthetic, meta.synthetic.value_or(SyntheticSpec{}), o.data,
                              dataset, false);
  const std::size_t n_classes =
      synthetic ? meta.synthetic->n_classes : class_count(parse_dataset(dataset));
  if (n_classes != meta.config.n_classes)
    throw ConfigError("checkpoint has " + std::to_string(meta.config.n_classes) +
                      " classes but " + data.name + " has " + std::to_string(n_classes));
  const EvalResult r = evaluate(ck.model, data.test, meta.normalization);
  std::cout << "test_acc=" << format_number(r.accuracy) << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// verify

struct VerifyOptions {
  std::string suite = "all";
  std::uint64_t seed = 0;
  std::size_t trials = 20;
};

int cmd_verify(const VerifyOptions &o) {
  if (o.trials == 0)
    throw ConfigError("--trials must be positive");
  std::vector<std::string> suites;
  if (o.suite == "all")
    suites = suite_names();
  else
    suites.push_back(o.suite);
  bool ok = true;
  for (const auto &name : suites) {
    const SuiteReport r = run_suite(name, o.seed, o.trials);
    for (const auto &p : r.properties) {
      std::cout << (p.pass ? "[PASS] " : "[FAIL] ") << r.suite << '/' << p.name
                << " observed=" << format_number(p.observed)
                << " tolerance=" << format_number(p.tolerance);
      if (!p.detail.empty())
        std::cout << " (" << p.detail << ')';
      std::cout << '\n';
    }
    ok = ok && r.pass();
  }
  std::cout << (ok ? "all properties hold\n" : "verification failed\n");
  return ok ? kOk : kFailed;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"RecNet: channel-wise recurrent convolution networks"};
  app.require_subcommand(1);

  DescribeOptions dopt;
  auto *describe_cmd = app.add_subcommand("describe", "Print the parameter and FLOP ledger");
  dopt.arch.add(*describe_cmd);
  describe_cmd->add_option("--convention", dopt.convention,
                           "formula-only, with-bn or with-bn-and-bias");
  describe_cmd->add_option("--format", dopt.format, "text or csv")
      ->check(CLI::IsMember({"text", "csv"}));

  TrainOptions topt;
  std::string restarts = "20,60,120";
  auto *train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint and log");
  topt.arch.add(*train_cmd);
  train_cmd->add_option("--data", topt.data, "Directory holding the CIFAR binary files");
  train_cmd->add_option("--dataset", topt.dataset, "cifar10 or cifar100");
  train_cmd->add_option("--out", topt.out, "Output directory (model.rcn, metrics.csv)");
  train_cmd->add_flag("--synthetic", topt.synthetic, "Use the generated blob dataset");
  train_cmd->add_option("--synthetic-classes", topt.synth.n_classes);
  train_cmd->add_option("--synthetic-train", topt.synth.train);
  train_cmd->add_option("--synthetic-test", topt.synth.test);
  train_cmd->add_option("--synthetic-seed", topt.synth.seed);
  train_cmd->add_option("--synthetic-noise", topt.synth.noise);
  train_cmd->add_option("--epochs", topt.cfg.epochs);
  train_cmd->add_option("--seed", topt.cfg.seed);
  train_cmd->add_option("--batch", topt.cfg.batch);
  train_cmd->add_option("--lr", topt.cfg.lr0);
  train_cmd->add_option("--weight-decay", topt.cfg.weight_decay);
  train_cmd->add_option("--momentum", topt.cfg.momentum);
  train_cmd->add_option("--eta-min", topt.cfg.eta_min);
  train_cmd->add_option("--restarts", restarts, "Comma-separated restart epochs");
  train_cmd->add_flag("--deterministic", topt.cfg.deterministic,
                      "Single-threaded kernels; the seconds column is logged as 0");
  train_cmd->add_flag("--no-augment", topt.no_augment, "Disable crop and flip augmentation");
  train_cmd->add_option("--rec-mode", topt.rec_mode, "naive or merged");

  EvalOptions eopt;
  auto *eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval_cmd->add_option("--ckpt", eopt.ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eopt.data, "Directory holding the CIFAR binary files");
  eval_cmd->add_option("--dataset", eopt.dataset, "cifar10 or cifar100");

  VerifyOptions vopt;
  auto *verify_cmd = app.add_subcommand("verify", "Run the built-in property suites");
  verify_cmd->add_option("--suite", vopt.suite, "grad, equiv, unroll, causality, counts or all");
  verify_cmd->add_option("--seed", vopt.seed);
  verify_cmd->add_option("--trials", vopt.trials);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*describe_cmd)
      return cmd_describe(dopt);
    if (*train_cmd) {
      topt.cfg.restarts.clear();
      for (const auto &r : CLI::detail::split(restarts, ','))
        if (!r.empty())
          topt.cfg.restarts.push_back(std::stoul(r));
      return cmd_train(topt);
    }
    if (*eval_cmd)
      return cmd_eval(eopt);
    if (*verify_cmd)
      return cmd_verify(vopt);
  } catch (const ConfigError &e) {
    std::cerr << "error: " << e.what() << '\n';
    if (*describe_cmd)
      std::cerr << describe_cmd->help();
    return kUsage;
  } catch (const ShapeError &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::invalid_argument &e) {
    std::cerr << "error: malformed number in --restarts\n";
    return kUsage;
  } catch (const FormatError &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const TrainingError &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailed;
  }
  return kUsage;
}

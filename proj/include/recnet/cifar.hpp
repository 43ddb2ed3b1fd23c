// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "recnet/error.hpp"
#include "recnet/init.hpp"
#include "recnet/tensor.hpp"

namespace recnet {

inline constexpr std::size_t kImageSide = 32;
inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageBytes = kImageChannels * kImageSide * kImageSide;

enum class DatasetKind { Cifar10, Cifar100 };
enum class Split { Train, Test };

inline std::string_view to_string(DatasetKind k) {
  return k == DatasetKind::Cifar10 ? "cifar10" : "cifar100";
}

inline DatasetKind parse_dataset(std::string_view s) {
  if (s == "cifar10")
    return DatasetKind::Cifar10;
  if (s == "cifar100")
    return DatasetKind::Cifar100;
  throw ConfigError("unknown dataset '" + std::string(s) + "' (cifar10, cifar100)");
}

inline std::size_t class_count(DatasetKind k) { return k == DatasetKind::Cifar10 ? 10 : 100; }

/// Bytes per record: labels then 1024 R, 1024 G, 1024 B.
inline std::size_t record_bytes(DatasetKind k) {
  return (k == DatasetKind::Cifar10 ? 1 : 2) + kImageBytes;
}

inline std::vector<std::string> split_files(DatasetKind k, Split s) {
  if (k == DatasetKind::Cifar100)
    return {s == Split::Train ? "train.bin" : "test.bin"};
  if (s == Split::Test)
    return {"test_batch.bin"};
  return {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin",
          "data_batch_5.bin"};
}

struct Dataset {
  DatasetKind kind = DatasetKind::Cifar10;
  std::vector<std::uint8_t> pixels; // kImageBytes per image, channel planes
  std::vector<std::uint8_t> labels; // fine labels
  std::vector<std::uint8_t> coarse; // CIFAR-100 only, kept for lossless re-serialization

  std::size_t size() const { return labels.size(); }
  std::size_t n_classes() const { return class_count(kind); }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span<const std::uint8_t>(pixels).subspan(i * kImageBytes, kImageBytes);
  }
};

struct LoadOptions {
  bool strict_counts = false; // require the published 10,000 / 50,000 record counts
};

/// Appends the records of one binary file.
inline void append_records(const std::filesystem::path &path, DatasetKind kind, Dataset &ds) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw FormatError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  const std::size_t rec = record_bytes(kind);
  if (bytes.empty() || bytes.size() % rec != 0)
    throw FormatError(path.string() + ": length " + std::to_string(bytes.size()) +
                      " is not a positive multiple of the " + std::to_string(rec) +
                      "-byte record size");
  const std::size_t n = bytes.size() / rec;
  const std::size_t label_bytes = rec - kImageBytes;
  ds.pixels.reserve(ds.pixels.size() + n * kImageBytes);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t *p = bytes.data() + r * rec;
    const std::uint8_t fine = p[label_bytes - 1];
    if (fine >= class_count(kind))
      throw FormatError(path.string() + ": record " + std::to_string(r) + " has label " +
                        std::to_string(fine) + ", expected < " +
                        std::to_string(class_count(kind)));
    if (kind == DatasetKind::Cifar100) {
      if (p[0] >= 20)
        throw FormatError(path.string() + ": record " + std::to_string(r) + " has coarse label " +
                          std::to_string(p[0]));
      ds.coarse.push_back(p[0]);
    }
    ds.labels.push_back(fine);
    ds.pixels.insert(ds.pixels.end(), p + label_bytes, p + rec);
  }
}

/// Reads a split from `dir` (or its standard extraction subdirectory).
inline Dataset load_dataset(const std::filesystem::path &dir, DatasetKind kind, Split split,
                            LoadOptions opts = {}) {
  if (!std::filesystem::is_directory(dir))
    throw FormatError("data directory " + dir.string() + " does not exist");
  std::filesystem::path root = dir;
  const auto files = split_files(kind, split);
  if (!std::filesystem::exists(root / files.front())) {
    const auto sub =
        dir / (kind == DatasetKind::Cifar10 ? "cifar-10-batches-bin" : "cifar-100-binary");
    if (std::filesystem::exists(sub / files.front()))
      root = sub;
  }
  Dataset ds;
  ds.kind = kind;
  for (const auto &f : files) {
    const std::size_t before = ds.size();
    append_records(root / f, kind, ds);
    if (opts.strict_counts) {
      const std::size_t expect = kind == DatasetKind::Cifar100 && split == Split::Train ? 50000 : 10000;
      if (ds.size() - before != expect)
        throw FormatError((root / f).string() + ": " + std::to_string(ds.size() - before) +
                          " records, expected " + std::to_string(expect));
    }
  }
  return ds;
}

/// Records [begin, begin + count) in the on-disk layout.
inline std::vector<std::uint8_t> serialize_records(const Dataset &ds, std::size_t begin,
                                                   std::size_t count) {
  if (begin + count > ds.size())
    throw ConfigError("serialize_records: range exceeds dataset size");
  std::vector<std::uint8_t> out;
  out.reserve(count * record_bytes(ds.kind));
  for (std::size_t i = begin; i < begin + count; ++i) {
    if (ds.kind == DatasetKind::Cifar100)
      out.push_back(ds.coarse.empty() ? std::uint8_t(ds.labels[i] / 5) : ds.coarse[i]);
    out.push_back(ds.labels[i]);
    const auto img = ds.image(i);
    out.insert(out.end(), img.begin(), img.end());
  }
  return out;
}

inline void write_bytes(const std::filesystem::path &path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char *>(bytes.data()), std::streamsize(bytes.size()));
  if (!out)
    throw FormatError("write failed: " + path.string());
}

/// Writes a split with the standard file names; CIFAR-10 training data is spread over the
/// five batch files as evenly as possible.
inline void write_split(const std::filesystem::path &dir, const Dataset &ds, Split split) {
  std::filesystem::create_directories(dir);
  const auto files = split_files(ds.kind, split);
  const std::size_t k = files.size();
  if (ds.size() < k)
    throw ConfigError("write_split: need at least " + std::to_string(k) + " records, got " +
                      std::to_string(ds.size()));
  std::size_t begin = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t count = ds.size() / k + (f < ds.size() % k ? 1 : 0);
    write_bytes(dir / files[f], serialize_records(ds, begin, count));
    begin += count;
  }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  std::size_t n_classes = 2;
  std::size_t train = 512;
  std::size_t test = 256;
  std::uint64_t seed = 0;
  double noise = 0.1; // per-pixel Gaussian noise, in [0, 1] intensity units
};

/// Gaussian-blob images: a class-specific colour, a bright blob at a class-specific
/// position, and pixel noise. Labels cycle through the classes.
inline Dataset make_synthetic(const SyntheticSpec &spec, Split split) {
  if (spec.n_classes < 2 || spec.n_classes > 100)
    throw ConfigError("synthetic: classes must be in [2, 100], got " +
                      std::to_string(spec.n_classes));
  const std::size_t n = split == Split::Train ? spec.train : spec.test;
  if (n == 0)
    throw ConfigError("synthetic: split size must be positive");
  Dataset ds;
  ds.kind = spec.n_classes <= 10 ? DatasetKind::Cifar10 : DatasetKind::Cifar100;
  ds.pixels.resize(n * kImageBytes);
  Rng rng(spec.seed * 2 + (split == Split::Train ? 0 : 1));
  std::normal_distribution<double> noise(0.0, spec.noise);
  constexpr double two_pi = 2 * std::numbers::pi;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % spec.n_classes;
    ds.labels.push_back(std::uint8_t(c));
    if (ds.kind == DatasetKind::Cifar100)
      ds.coarse.push_back(std::uint8_t(c / 5));
    const double phase = two_pi * double(c) / double(spec.n_classes);
    const double cy = 15.5 + 8 * std::sin(phase), cx = 15.5 + 8 * std::cos(phase);
    for (std::size_t ch = 0; ch < kImageChannels; ++ch) {
      const double base = 0.5 + 0.25 * std::cos(phase + two_pi * double(ch) / 3);
      for (std::size_t y = 0; y < kImageSide; ++y)
        for (std::size_t x = 0; x < kImageSide; ++x) {
          const double r2 = (double(y) - cy) * (double(y) - cy) + (double(x) - cx) * (double(x) - cx);
          const double v = base + 0.3 * std::exp(-r2 / 32.0) + noise(rng);
          ds.pixels[i * kImageBytes + (ch * kImageSide + y) * kImageSide + x] =
              std::uint8_t(std::clamp(std::lround(v * 255.0), 0l, 255l));
        }
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Normalization and augmentation
// ---------------------------------------------------------------------------

struct Normalization {
  std::array<float, kImageChannels> mean{0.f, 0.f, 0.f};
  std::array<float, kImageChannels> std{1.f, 1.f, 1.f};
};

/// Per-channel mean and population standard deviation of pixels scaled to [0, 1], from exact
/// integer sums.
inline Normalization compute_normalization(const Dataset &train) {
  if (train.size() == 0)
    throw ConfigError("normalization: empty training split");
  Normalization nz;
  const std::size_t plane = kImageSide * kImageSide;
  for (std::size_t ch = 0; ch < kImageChannels; ++ch) {
    unsigned __int128 sum = 0, sq = 0;
    for (std::size_t i = 0; i < train.size(); ++i)
      for (std::size_t p = 0; p < plane; ++p) {
        const unsigned v = train.pixels[i * kImageBytes + ch * plane + p];
        sum += v;
        sq += v * v;
      }
    const unsigned __int128 count = train.size() * plane;
    const double var = double(sq * count - sum * sum) / (double(count) * double(count) * 255.0 * 255.0);
    nz.mean[ch] = float(double(sum) / (double(count) * 255.0));
    nz.std[ch] = float(std::max(std::sqrt(var), 1e-8));
  }
  return nz;
}

/// Normalized value of every byte for each channel: (float(v / 255) - mean) / std.
inline std::array<std::array<float, 256>, kImageChannels> normalization_table(const Normalization &nz) {
  std::array<std::array<float, 256>, kImageChannels> t{};
  for (std::size_t ch = 0; ch < kImageChannels; ++ch)
    for (unsigned v = 0; v < 256; ++v)
      t[ch][v] = (float(v / 255.0) - nz.mean[ch]) / nz.std[ch];
  return t;
}

struct AugmentPolicy {
  std::size_t pad = 4;
  double hflip = 0.5;
};

struct AugmentDraw {
  std::size_t oy = 0; // crop offset into the padded image, in [0, 2 * pad]
  std::size_t ox = 0;
  bool flip = false;
};

inline AugmentDraw draw_augment(const AugmentPolicy &p, Rng &rng) {
  std::uniform_int_distribution<std::size_t> off(0, 2 * p.pad);
  std::bernoulli_distribution flip(p.hflip);
  AugmentDraw d;
  d.oy = off(rng);
  d.ox = off(rng);
  d.flip = flip(rng);
  return d;
}

/// Writes the normalized image into `dst` (kImageBytes values, channel planes). With a draw,
/// the image is zero-padded by `pad`, cropped at the drawn offset, then optionally mirrored.
template <typename T>
void prepare_image(std::span<const std::uint8_t> src, const Normalization &nz, std::span<T> dst,
                   const AugmentDraw *draw = nullptr, std::size_t pad = 0) {
  const auto table = normalization_table(nz);
  for (std::size_t ch = 0; ch < kImageChannels; ++ch) {
    for (std::size_t y = 0; y < kImageSide; ++y)
      for (std::size_t x = 0; x < kImageSide; ++x) {
        std::uint8_t v;
        if (draw) {
          const std::size_t col = draw->flip ? kImageSide - 1 - x : x;
          const long sy = long(y + draw->oy) - long(pad), sx = long(col + draw->ox) - long(pad);
          const bool inside = sy >= 0 && sx >= 0 && sy < long(kImageSide) && sx < long(kImageSide);
          v = inside ? src[(ch * kImageSide + std::size_t(sy)) * kImageSide + std::size_t(sx)] : 0;
        } else {
          v = src[(ch * kImageSide + y) * kImageSide + x];
        }
        dst[(ch * kImageSide + y) * kImageSide + x] = T(table[ch][v]);
      }
  }
}

// ---------------------------------------------------------------------------
// Minibatches
// ---------------------------------------------------------------------------

template <typename T> struct Batch {
  Tensor4<T> x;
  std::vector<std::uint8_t> labels;
};

struct StreamOptions {
  std::size_t batch = 64;
  std::uint64_t seed = 0;
  bool shuffle = true;
  bool augment = false;
  AugmentPolicy policy{};
};

/// One pass over a dataset. The order and augmentation draws depend only on (seed, epoch);
/// the final short batch is kept.
template <typename T> class BatchStream {
public:
  BatchStream(const Dataset &ds, const Normalization &nz, StreamOptions opts, std::size_t epoch = 0)
      : ds_(&ds), nz_(nz), opts_(opts), order_(ds.size()),
        rng_(opts.seed ^ (0x9E3779B97F4A7C15ull * (epoch + 1))) {
    if (opts_.batch == 0)
      throw ConfigError("batch size must be positive");
    std::iota(order_.begin(), order_.end(), std::size_t(0));
    if (opts_.shuffle)
      std::shuffle(order_.begin(), order_.end(), rng_);
  }

  std::size_t batches() const { return (order_.size() + opts_.batch - 1) / opts_.batch; }
  const std::vector<std::size_t> &order() const { return order_; }

  bool next(Batch<T> &out) {
    if (pos_ >= order_.size())
      return false;
    const std::size_t n = std::min(opts_.batch, order_.size() - pos_);
    out.x = Tensor4<T>({n, kImageChannels, kImageSide, kImageSide});
    out.labels.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t idx = order_[pos_ + k];
      out.labels[k] = ds_->labels[idx];
      auto dst = out.x.values().subspan(k * kImageBytes, kImageBytes);
      if (opts_.augment) {
        const AugmentDraw d = draw_augment(opts_.policy, rng_);
        prepare_image<T>(ds_->image(idx), nz_, dst, &d, opts_.policy.pad);
      } else {
        prepare_image<T>(ds_->image(idx), nz_, dst);
      }
    }
    pos_ += n;
    return true;
  }

private:
  const Dataset *ds_;
  Normalization nz_;
  StreamOptions opts_;
  std::vector<std::size_t> order_;
  Rng rng_;
  std::size_t pos_ = 0;
};

} // namespace recnet

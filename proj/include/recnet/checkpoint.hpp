// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint layout (little-endian):
//   "RCN1"  u32 tensor_count
//   per tensor: u16 name_len, name, u8 dtype (0 = f32), u8 rank, u32 dims[rank], values
//   u32 json_len, JSON metadata
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "recnet/cifar.hpp"
#include "recnet/error.hpp"
#include "recnet/model.hpp"

namespace recnet {

struct CheckpointMeta {
  RecNetConfig config;
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
  std::string dataset = "cifar10";
  Normalization normalization;
  std::optional<SyntheticSpec> synthetic;
};

struct Checkpoint {
  RecNetModel<float> model;
  CheckpointMeta meta;
};

namespace detail {

class ByteWriter {
public:
  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i)
      u8(std::uint8_t(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i)
      u8(std::uint8_t(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const std::string &s) { bytes.insert(bytes.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> bytes;
};

class ByteReader {
public:
  ByteReader(const std::vector<std::uint8_t> &b, std::string source) : b_(b), src_(std::move(source)) {}
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint16_t u16() {
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i)
      v = std::uint16_t(v | (std::uint16_t(u8()) << (8 * i)));
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= std::uint32_t(u8()) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char *>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n)
      throw FormatError(src_ + ": truncated checkpoint");
  }
  const std::vector<std::uint8_t> &b_;
  std::string src_;
  std::size_t pos_ = 0;
};

struct RawTensor {
  std::vector<std::size_t> dims;
  std::vector<float> values;
};

inline nlohmann::json meta_to_json(const CheckpointMeta &m) {
  const RecNetConfig &c = m.config;
  nlohmann::json j;
  j["format_version"] = 1;
  j["config"] = {{"tuple", c.tuple()},
                 {"e", c.e},
                 {"S", c.s},
                 {"d", c.d},
                 {"n_classes", c.n_classes},
                 {"variant", std::string(to_string(c.variant))},
                 {"k_x", c.k_x},
                 {"k_h", c.k_h},
                 {"in_channels", c.in_channels},
                 {"in_h", c.in_h},
                 {"in_w", c.in_w}};
  j["epoch"] = m.epoch;
  j["seed"] = m.seed;
  j["dataset"] = m.dataset;
  j["normalization"] = {{"mean", m.normalization.mean}, {"std", m.normalization.std}};
  if (m.synthetic)
    j["synthetic"] = {{"classes", m.synthetic->n_classes},
                      {"train", m.synthetic->train},
                      {"test", m.synthetic->test},
                      {"seed", m.synthetic->seed},
                      {"noise", m.synthetic->noise}};
  else
    j["synthetic"] = nullptr;
  return j;
}

inline CheckpointMeta meta_from_json(const nlohmann::json &j) {
  CheckpointMeta m;
  const auto &c = j.at("config");
  m.config = RecNetConfig::parse(c.at("tuple").get<std::string>());
  m.config.n_classes = c.at("n_classes").get<std::size_t>();
  m.config.variant = parse_variant(c.at("variant").get<std::string>());
  m.config.k_x = c.at("k_x").get<std::size_t>();
  m.config.k_h = c.at("k_h").get<std::size_t>();
  m.config.in_channels = c.at("in_channels").get<std::size_t>();
  m.config.in_h = c.at("in_h").get<std::size_t>();
  m.config.in_w = c.at("in_w").get<std::size_t>();
  m.config.validate();
  m.epoch = j.at("epoch").get<std::size_t>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.dataset = j.at("dataset").get<std::string>();
  m.normalization.mean = j.at("normalization").at("mean").get<std::array<float, 3>>();
  m.normalization.std = j.at("normalization").at("std").get<std::array<float, 3>>();
  if (const auto &s = j.at("synthetic"); !s.is_null()) {
    SyntheticSpec spec;
    spec.n_classes = s.at("classes").get<std::size_t>();
    spec.train = s.at("train").get<std::size_t>();
    spec.test = s.at("test").get<std::size_t>();
    spec.seed = s.at("seed").get<std::uint64_t>();
    spec.noise = s.at("noise").get<double>();
    m.synthetic = spec;
  }
  return m;
}

} // namespace detail

/// Serializes parameters, BN running statistics and metadata.
inline std::vector<std::uint8_t> encode_checkpoint(RecNetModel<float> &model,
                                                   const CheckpointMeta &meta) {
  detail::ByteWriter w;
  w.raw("RCN1");
  std::uint32_t count = 0;
  model.visit_params([&](const ParamRef<float> &) { ++count; });
  model.visit_buffers([&](const BufferRef<float> &) { ++count; });
  w.u32(count);
  auto tensor = [&](const std::string &name, const std::vector<std::size_t> &dims,
                    std::span<const float> values) {
    w.u16(std::uint16_t(name.size()));
    w.raw(name);
    w.u8(0);
    w.u8(std::uint8_t(dims.size()));
    for (auto d : dims)
      w.u32(std::uint32_t(d));
    for (float v : values)
      w.f32(v);
  };
  model.visit_params([&](const ParamRef<float> &p) { tensor(p.name, p.dims, p.value); });
  model.visit_buffers([&](const BufferRef<float> &b) { tensor(b.name, b.dims, b.value); });
  const std::string json = detail::meta_to_json(meta).dump();
  w.u32(std::uint32_t(json.size()));
  w.raw(json);
  return std::move(w.bytes);
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t> &bytes,
                                    const std::string &source = "checkpoint") {
  detail::ByteReader r(bytes, source);
  if (bytes.size() < 4 || r.raw(4) != "RCN1")
    throw FormatError(source + ": not a checkpoint (magic bytes are not RCN1)");
  std::map<std::string, detail::RawTensor> tensors;
  const std::uint32_t count = r.u32();
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::string name = r.raw(r.u16());
    const std::uint8_t dtype = r.u8();
    if (dtype != 0)
      throw FormatError(source + ": tensor " + name + " has unsupported dtype " +
                        std::to_string(dtype));
    detail::RawTensor rt;
    std::size_t n = 1;
    for (std::uint8_t k = r.u8(); k > 0; --k) {
      rt.dims.push_back(r.u32());
      n *= rt.dims.back();
    }
    if (n > bytes.size())
      throw FormatError(source + ": tensor " + name + " is larger than the file");
    rt.values.resize(n);
    for (float &v : rt.values)
      v = r.f32();
    tensors[name] = std::move(rt);
  }
  const std::string json = r.raw(r.u32());
  if (!r.done())
    throw FormatError(source + ": trailing bytes after metadata");
  Checkpoint ck;
  try {
    ck.meta = detail::meta_from_json(nlohmann::json::parse(json));
  } catch (const nlohmann::json::exception &e) {
    throw FormatError(source + ": bad metadata: " + e.what());
  }
  ck.model = RecNetModel<float>::build(ck.meta.config);
  std::size_t used = 0;
  auto assign = [&](const std::string &name, const std::vector<std::size_t> &dims,
                    std::span<float> dst) {
    const auto it = tensors.find(name);
    if (it == tensors.end())
      throw FormatError(source + ": missing tensor " + name);
    if (it->second.dims != dims)
      throw FormatError(source + ": tensor " + name + " has the wrong shape");
    std::copy(it->second.values.begin(), it->second.values.end(), dst.begin());
    ++used;
  };
  ck.model.visit_params([&](const ParamRef<float> &p) { assign(p.name, p.dims, p.value); });
  ck.model.visit_buffers([&](const BufferRef<float> &b) { assign(b.name, b.dims, b.value); });
  if (used != tensors.size())
    throw FormatError(source + ": " + std::to_string(tensors.size() - used) +
                      " tensors do not belong to the configured model");
  return ck;
}

/// Writes to a sibling temporary file, then renames it over `path`.
inline void save_checkpoint(const std::filesystem::path &path, RecNetModel<float> &model,
                            const CheckpointMeta &meta) {
  const auto bytes = encode_checkpoint(model, meta);
  auto tmp = path;
  tmp += ".tmp";
  write_bytes(tmp, bytes);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec)
    throw FormatError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw FormatError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

} // namespace recnet

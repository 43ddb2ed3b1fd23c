// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "recnet/error.hpp"

namespace recnet {

/// (batch, channels, rows, cols); row-major with cols fastest.
struct Shape4 {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t size() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  constexpr bool operator==(const Shape4 &) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

/// (out channels, in channels, kernel rows, kernel cols).
struct KernelShape {
  std::size_t out = 0;
  std::size_t in = 0;
  std::size_t kh = 0;
  std::size_t kw = 0;

  constexpr std::size_t size() const { return out * in * kh * kw; }
  constexpr bool operator==(const KernelShape &) const = default;

  std::string str() const {
    return "(" + std::to_string(out) + "," + std::to_string(in) + "," + std::to_string(kh) + "," +
           std::to_string(kw) + ")";
  }
};

/// Dense rank-4 activation tensor with an optional gradient buffer of identical shape.
template <typename T> class Tensor4 {
public:
  using value_type = T;

  Tensor4() = default;

  explicit Tensor4(Shape4 shape, T fill = T(0)) : shape_(shape), data_(shape.size(), fill) {
    check_positive();
  }

  Tensor4(Shape4 shape, std::vector<T> values) : shape_(shape), data_(std::move(values)) {
    check_positive();
    if (data_.size() != shape_.size())
      throw ShapeError("Tensor4: " + std::to_string(data_.size()) + " values for shape " +
                       shape_.str());
  }

  const Shape4 &shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T *data() { return data_.data(); }
  const T *data() const { return data_.data(); }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  T &at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[offset(n, c, y, x)];
  }
  const T &at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[offset(n, c, y, x)];
  }
  T &operator[](std::size_t i) { return data_[i]; }
  const T &operator[](std::size_t i) const { return data_[i]; }

  std::span<T> plane(std::size_t n, std::size_t c) {
    return std::span<T>(data_).subspan(offset(n, c, 0, 0), shape_.plane());
  }
  std::span<const T> plane(std::size_t n, std::size_t c) const {
    return std::span<const T>(data_).subspan(offset(n, c, 0, 0), shape_.plane());
  }

  bool has_grad() const { return !grad_.empty(); }
  std::vector<T> &grad() {
    if (grad_.empty())
      grad_.assign(data_.size(), T(0));
    return grad_;
  }
  const std::vector<T> &grad() const { return grad_; }
  void drop_grad() { grad_.clear(); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

private:
  void check_positive() const {
    if (shape_.n == 0 || shape_.c == 0 || shape_.h == 0 || shape_.w == 0)
      throw ShapeError("Tensor4: all dims must be positive, got " + shape_.str());
  }

  Shape4 shape_{};
  std::vector<T> data_;
  std::vector<T> grad_;
};

/// Convolution weights; the gradient buffer always exists since kernels are trainable.
template <typename T> class ConvKernel {
public:
  using value_type = T;

  ConvKernel() = default;

  explicit ConvKernel(KernelShape shape, T fill = T(0))
      : shape_(shape), data_(shape.size(), fill), grad_(shape.size(), T(0)) {
    if (shape.size() == 0)
      throw ShapeError("ConvKernel: all dims must be positive, got " + shape.str());
  }

  ConvKernel(KernelShape shape, std::vector<T> values) : ConvKernel(shape) {
    if (values.size() != shape.size())
      throw ShapeError("ConvKernel: " + std::to_string(values.size()) + " values for shape " +
                       shape.str());
    data_ = std::move(values);
  }

  const KernelShape &shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::span<T> grad() { return grad_; }
  std::span<const T> grad() const { return grad_; }

  std::size_t offset(std::size_t o, std::size_t i, std::size_t y, std::size_t x) const {
    return ((o * shape_.in + i) * shape_.kh + y) * shape_.kw + x;
  }
  T &at(std::size_t o, std::size_t i, std::size_t y, std::size_t x) {
    return data_[offset(o, i, y, x)];
  }
  const T &at(std::size_t o, std::size_t i, std::size_t y, std::size_t x) const {
    return data_[offset(o, i, y, x)];
  }

  void zero_grad() { std::fill(grad_.begin(), grad_.end(), T(0)); }

private:
  KernelShape shape_{};
  std::vector<T> data_;
  std::vector<T> grad_;
};

/// Trainable vector (bias, BN affine) paired with its gradient.
template <typename T> struct ParamVec {
  std::vector<T> value;
  std::vector<T> grad;

  ParamVec() = default;
  explicit ParamVec(std::size_t n, T fill = T(0)) : value(n, fill), grad(n, T(0)) {}

  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T> void add_into(std::span<T> dst, std::span<const T> src) {
  if (dst.size() != src.size())
    throw ShapeError("add_into: size mismatch " + std::to_string(dst.size()) + " vs " +
                     std::to_string(src.size()));
  for (std::size_t i = 0; i < dst.size(); ++i)
    dst[i] += src[i];
}

/// Copy channels [c0, c0 + count) of every batch item into a new tensor.
template <typename T>
Tensor4<T> slice_channels(const Tensor4<T> &x, std::size_t c0, std::size_t count) {
  const Shape4 s = x.shape();
  if (c0 + count > s.c)
    throw ShapeError("slice_channels: [" + std::to_string(c0) + "," + std::to_string(c0 + count) +
                     ") out of " + std::to_string(s.c) + " channels");
  Tensor4<T> out({s.n, count, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n)
    std::copy_n(x.data() + x.offset(n, c0, 0, 0), count * s.plane(),
                out.data() + out.offset(n, 0, 0, 0));
  return out;
}

/// Write `src` into channels [c0, c0 + src.c) of `dst`.
template <typename T>
void assign_channels(Tensor4<T> &dst, const Tensor4<T> &src, std::size_t c0) {
  const Shape4 d = dst.shape(), s = src.shape();
  if (s.n != d.n || s.h != d.h || s.w != d.w || c0 + s.c > d.c)
    throw ShapeError("assign_channels: " + s.str() + " does not fit into " + d.str() +
                     " at channel " + std::to_string(c0));
  for (std::size_t n = 0; n < s.n; ++n)
    std::copy_n(src.data() + src.offset(n, 0, 0, 0), s.c * s.plane(),
                dst.data() + dst.offset(n, c0, 0, 0));
}

/// Accumulate `src` into channels [c0, c0 + src.c) of `dst`.
template <typename T>
void add_channels(Tensor4<T> &dst, const Tensor4<T> &src, std::size_t c0) {
  const Shape4 d = dst.shape(), s = src.shape();
  if (s.n != d.n || s.h != d.h || s.w != d.w || c0 + s.c > d.c)
    throw ShapeError("add_channels: " + s.str() + " does not fit into " + d.str());
  for (std::size_t n = 0; n < s.n; ++n) {
    const T *in = src.data() + src.offset(n, 0, 0, 0);
    T *out = dst.data() + dst.offset(n, c0, 0, 0);
    for (std::size_t i = 0; i < s.c * s.plane(); ++i)
      out[i] += in[i];
  }
}

template <typename T> Tensor4<T> &operator+=(Tensor4<T> &a, const Tensor4<T> &b) {
  if (a.shape() != b.shape())
    throw ShapeError("tensor add: " + a.shape().str() + " vs " + b.shape().str());
  for (std::size_t i = 0; i < a.size(); ++i)
    a[i] += b[i];
  return a;
}

} // namespace recnet

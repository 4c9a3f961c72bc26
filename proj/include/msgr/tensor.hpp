// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace msgr {

// Dense N-d extents, layout order (N, C, H, W) for image data.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int64_t> extents);
  explicit Shape(std::vector<int64_t> extents);

  static Shape scalar() { return Shape({1}); }

  int rank() const { return static_cast<int>(extents_.size()); }
  int64_t extent(int axis) const { return extents_.at(static_cast<size_t>(axis)); }
  int64_t numel() const;
  const std::vector<int64_t>& extents() const { return extents_; }

  bool operator==(const Shape& other) const { return extents_ == other.extents_; }
  bool operator!=(const Shape& other) const { return !(*this == other); }

  std::string str() const;

 private:
  void validate() const;
  std::vector<int64_t> extents_;
};

// Immutable dense fp64 tensor. Copies share storage; every kernel produces a
// fresh tensor, so sharing is safe across threads once a value exists.
// Kernels reject non-finite results instead of propagating NaN/Inf.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor from(const Shape& shape, std::vector<double> data);
  static Tensor scalar(double value) { return from(Shape::scalar(), {value}); }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return shape_.rank(); }
  int64_t numel() const { return shape_.numel(); }

  const double* data() const { return data_->data(); }
  std::span<const double> span() const { return {data_->data(), data_->size()}; }
  double operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

  // Value of a one-element tensor.
  double scalar_value() const;

  bool same_bits(const Tensor& other) const;

 private:
  Tensor(Shape shape, std::shared_ptr<const std::vector<double>> data)
      : shape_(std::move(shape)), data_(std::move(data)) {}

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
};

enum class EwOp { Add, Sub, Mul, Max };

enum class NormOrder { One, Two, Inf };

std::string norm_order_str(NormOrder p);

// ---- Elementwise kernels. `b` may be a one-element tensor, broadcast over `a`.
Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor emax(const Tensor& a, const Tensor& b);

// ---- Elementwise maps.
Tensor map_abs(const Tensor& a);
Tensor map_relu(const Tensor& a);
Tensor map_exp(const Tensor& a);
Tensor map_log(const Tensor& a);
Tensor map_pow(const Tensor& a, double exponent);
Tensor map_scale(const Tensor& a, double factor);

// ---- Linear algebra (rank 2).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);

// ---- Convolution, cross-correlation convention (no kernel flip).
// input (N,Cin,H,W), kernel (Cout,Cin,kh,kw); output extent
// floor((H + 2*pad - kh)/stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int pad);
// Adjoint of conv2d in its input: grad has the conv output shape, result the
// input shape (in_h, in_w give the spatial extents to reconstruct).
Tensor conv2d_input_grad(const Tensor& grad, const Tensor& kernel, int stride, int pad,
                         int64_t in_h, int64_t in_w);
// Adjoint of conv2d in its kernel: result shape (Cout,Cin,kh,kw).
Tensor conv2d_weight_grad(const Tensor& input, const Tensor& grad, int stride, int pad,
                          int64_t kh, int64_t kw);

// ---- Resampling (rank 4).
Tensor nearest_upsample2x(const Tensor& input);
Tensor block_sum_2x2(const Tensor& input);  // adjoint of nearest_upsample2x

// ---- Reductions / broadcasts used as adjoint pairs.
Tensor spatial_sum(const Tensor& input);                          // (N,C,H,W) -> (N,C)
Tensor spatial_broadcast(const Tensor& input, int64_t h, int64_t w);  // (N,C) -> (N,C,H,W)
Tensor batch_sum(const Tensor& input);                            // (N,C) -> (C)
Tensor batch_broadcast(const Tensor& input, int64_t n);           // (C) -> (N,C)
Tensor row_sum(const Tensor& input);                              // (N,C) -> (N)
Tensor row_broadcast(const Tensor& input, int64_t c);             // (N) -> (N,C)
Tensor row_max(const Tensor& input);                              // (N,C) -> (N)
Tensor sum_all(const Tensor& input);                              // any -> scalar
Tensor broadcast_all(const Tensor& scalar, const Shape& shape);   // scalar -> shape
Tensor reduce_max_all(const Tensor& input);                       // any -> scalar

// ---- Label selection (linear in the tensor argument, labels are fixed ints).
Tensor select_labels(const Tensor& input, std::span<const int32_t> labels);  // (N,C) -> (N)
Tensor scatter_labels(const Tensor& input, std::span<const int32_t> labels,
                      int64_t classes);  // (N) -> (N,classes)

// ---- Concatenation along axis 1 (channels / features), rank 2 or 4.
Tensor concat_dim1(std::span<const Tensor> inputs);
Tensor slice_dim1(const Tensor& input, int64_t offset, int64_t count);
Tensor pad_dim1(const Tensor& input, int64_t before, int64_t after);

// ---- Pooling / norms.
Tensor global_avg_pool(const Tensor& input);  // (N,C,H,W) -> (N,C)
double lp_norm(const Tensor& input, NormOrder p);

// Throws std::runtime_error if any element is NaN or Inf.
void ensure_finite(const Tensor& t, const char* context);

}  // namespace msgr

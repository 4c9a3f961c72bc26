// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#include "msgr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace msgr {

namespace {

[[noreturn]] void fail_invalid(const std::string& what) { throw std::invalid_argument(what); }

void require(bool cond, const std::string& what) {
  if (!cond) fail_invalid(what);
}

Tensor finish(const Shape& shape, std::vector<double> data, const char* context) {
  Tensor out = Tensor::from(shape, std::move(data));
  ensure_finite(out, context);
  return out;
}

}  // namespace

Shape::Shape(std::initializer_list<int64_t> extents) : extents_(extents) { validate(); }
Shape::Shape(std::vector<int64_t> extents) : extents_(std::move(extents)) { validate(); }

void Shape::validate() const {
  require(!extents_.empty(), "shape: rank must be >= 1");
  for (int64_t e : extents_) require(e >= 1, "shape: extents must be >= 1, got " + str());
}

int64_t Shape::numel() const {
  int64_t n = 1;
  for (int64_t e : extents_) n *= e;
  return n;
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < extents_.size(); ++i) {
    if (i) os << ',';
    os << extents_[i];
  }
  os << ')';
  return os.str();
}

Tensor Tensor::zeros(const Shape& shape) {
  return Tensor(shape, std::make_shared<const std::vector<double>>(
                           static_cast<size_t>(shape.numel()), 0.0));
}

Tensor Tensor::full(const Shape& shape, double value) {
  Tensor t(shape, std::make_shared<const std::vector<double>>(
                      static_cast<size_t>(shape.numel()), value));
  ensure_finite(t, "full");
  return t;
}

Tensor Tensor::from(const Shape& shape, std::vector<double> data) {
  require(static_cast<int64_t>(data.size()) == shape.numel(),
          "tensor: data size " + std::to_string(data.size()) + " does not match shape " +
              shape.str());
  return Tensor(shape, std::make_shared<const std::vector<double>>(std::move(data)));
}

double Tensor::scalar_value() const {
  require(defined() && numel() == 1, "scalar_value: tensor must hold exactly one element");
  return (*data_)[0];
}

bool Tensor::same_bits(const Tensor& other) const {
  if (!defined() || !other.defined()) return defined() == other.defined();
  if (shape_ != other.shape_) return false;
  return std::memcmp(data_->data(), other.data_->data(),
                     data_->size() * sizeof(double)) == 0;
}

void ensure_finite(const Tensor& t, const char* context) {
  for (double v : t.span()) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string(context) + ": non-finite value in result tensor " +
                               t.shape().str());
    }
  }
}

std::string norm_order_str(NormOrder p) {
  switch (p) {
    case NormOrder::One: return "1";
    case NormOrder::Two: return "2";
    case NormOrder::Inf: return "inf";
  }
  return "?";
}

Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b) {
  const bool scalar_b = b.numel() == 1 && b.shape() != a.shape();
  require(scalar_b || a.shape() == b.shape(),
          "elementwise: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  const int64_t n = a.numel();
  std::vector<double> out(static_cast<size_t>(n));
  const double* pa = a.data();
  const double* pb = b.data();
  const double bs = scalar_b ? pb[0] : 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double x = pa[i];
    const double y = scalar_b ? bs : pb[i];
    double r = 0.0;
    switch (op) {
      case EwOp::Add: r = x + y; break;
      case EwOp::Sub: r = x - y; break;
      case EwOp::Mul: r = x * y; break;
      case EwOp::Max: r = std::max(x, y); break;
    }
    out[static_cast<size_t>(i)] = r;
  }
  return finish(a.shape(), std::move(out), "elementwise");
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(EwOp::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(EwOp::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(EwOp::Mul, a, b); }
Tensor emax(const Tensor& a, const Tensor& b) { return elementwise(EwOp::Max, a, b); }

namespace {

template <typename F>
Tensor map(const Tensor& a, F f, const char* context) {
  const int64_t n = a.numel();
  std::vector<double> out(static_cast<size_t>(n));
  const double* p = a.data();
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = f(p[i]);
  return finish(a.shape(), std::move(out), context);
}

}  // namespace

Tensor map_abs(const Tensor& a) {
  return map(a, [](double x) { return std::abs(x); }, "abs");
}
Tensor map_relu(const Tensor& a) {
  return map(a, [](double x) { return x > 0.0 ? x : 0.0; }, "relu");
}
Tensor map_exp(const Tensor& a) {
  return map(a, [](double x) { return std::exp(x); }, "exp");
}
Tensor map_log(const Tensor& a) {
  return map(a, [](double x) { return std::log(x); }, "log");
}
Tensor map_pow(const Tensor& a, double e) {
  return map(a, [e](double x) { return std::pow(x, e); }, "pow");
}
Tensor map_scale(const Tensor& a, double f) {
  return map(a, [f](double x) { return x * f; }, "scale");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul: both operands must be rank 2");
  const int64_t m = a.shape().extent(0), k = a.shape().extent(1);
  const int64_t k2 = b.shape().extent(0), n = b.shape().extent(1);
  require(k == k2, "matmul: inner extents differ, " + a.shape().str() + " vs " + b.shape().str());
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  const double* pa = a.data();
  const double* pb = b.data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      if (av == 0.0) continue;
      const double* brow = pb + kk * n;
      double* orow = out.data() + i * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return finish(Shape({m, n}), std::move(out), "matmul");
}

Tensor transpose2d(const Tensor& a) {
  require(a.rank() == 2, "transpose2d: operand must be rank 2");
  const int64_t m = a.shape().extent(0), n = a.shape().extent(1);
  std::vector<double> out(static_cast<size_t>(m * n));
  const double* p = a.data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(j * m + i)] = p[i * n + j];
  return finish(Shape({n, m}), std::move(out), "transpose2d");
}

namespace {

struct ConvDims {
  int64_t n, cin, h, w, cout, kh, kw, oh, ow;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, int stride, int pad) {
  require(input.rank() == 4 && kernel.rank() == 4, "conv2d: input and kernel must be rank 4");
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(pad >= 0, "conv2d: pad must be >= 0");
  ConvDims d{};
  d.n = input.shape().extent(0);
  d.cin = input.shape().extent(1);
  d.h = input.shape().extent(2);
  d.w = input.shape().extent(3);
  d.cout = kernel.shape().extent(0);
  d.kh = kernel.shape().extent(2);
  d.kw = kernel.shape().extent(3);
  require(kernel.shape().extent(1) == d.cin,
          "conv2d: kernel input channels " + std::to_string(kernel.shape().extent(1)) +
              " do not match input channels " + std::to_string(d.cin));
  d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
  d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
  require(d.h + 2 * pad >= d.kh && d.w + 2 * pad >= d.kw,
          "conv2d: kernel larger than padded input");
  return d;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int pad) {
  const ConvDims d = conv_dims(input, kernel, stride, pad);
  std::vector<double> out(static_cast<size_t>(d.n * d.cout * d.oh * d.ow), 0.0);
  const double* pi = input.data();
  const double* pk = kernel.data();
  for (int64_t nn = 0; nn < d.n; ++nn) {
    for (int64_t co = 0; co < d.cout; ++co) {
      for (int64_t oy = 0; oy < d.oh; ++oy) {
        const int64_t iy0 = oy * stride - pad;
        const int64_t ky_lo = std::max<int64_t>(0, -iy0);
        const int64_t ky_hi = std::min<int64_t>(d.kh, d.h - iy0);
        for (int64_t ox = 0; ox < d.ow; ++ox) {
          const int64_t ix0 = ox * stride - pad;
          const int64_t kx_lo = std::max<int64_t>(0, -ix0);
          const int64_t kx_hi = std::min<int64_t>(d.kw, d.w - ix0);
          double acc = 0.0;
          for (int64_t ci = 0; ci < d.cin; ++ci) {
            const double* in_c = pi + ((nn * d.cin + ci) * d.h) * d.w;
            const double* k_c = pk + ((co * d.cin + ci) * d.kh) * d.kw;
            for (int64_t ky = ky_lo; ky < ky_hi; ++ky) {
              const double* in_row = in_c + (iy0 + ky) * d.w + ix0;
              const double* k_row = k_c + ky * d.kw;
              for (int64_t kx = kx_lo; kx < kx_hi; ++kx) acc += in_row[kx] * k_row[kx];
            }
          }
          out[static_cast<size_t>(((nn * d.cout + co) * d.oh + oy) * d.ow + ox)] = acc;
        }
      }
    }
  }
  return finish(Shape({d.n, d.cout, d.oh, d.ow}), std::move(out), "conv2d");
}

Tensor conv2d_input_grad(const Tensor& grad, const Tensor& kernel, int stride, int pad,
                         int64_t in_h, int64_t in_w) {
  require(grad.rank() == 4 && kernel.rank() == 4,
          "conv2d_input_grad: grad and kernel must be rank 4");
  const int64_t n = grad.shape().extent(0);
  const int64_t cout = grad.shape().extent(1);
  const int64_t oh = grad.shape().extent(2);
  const int64_t ow = grad.shape().extent(3);
  require(kernel.shape().extent(0) == cout,
          "conv2d_input_grad: kernel output channels do not match grad channels");
  const int64_t cin = kernel.shape().extent(1);
  const int64_t kh = kernel.shape().extent(2);
  const int64_t kw = kernel.shape().extent(3);
  require(oh == (in_h + 2 * pad - kh) / stride + 1 && ow == (in_w + 2 * pad - kw) / stride + 1,
          "conv2d_input_grad: grad extents inconsistent with stated input extents");
  std::vector<double> out(static_cast<size_t>(n * cin * in_h * in_w), 0.0);
  const double* pg = grad.data();
  const double* pk = kernel.data();
  for (int64_t nn = 0; nn < n; ++nn) {
    for (int64_t co = 0; co < cout; ++co) {
      const double* g_c = pg + ((nn * cout + co) * oh) * ow;
      for (int64_t oy = 0; oy < oh; ++oy) {
        const int64_t iy0 = oy * stride - pad;
        const int64_t ky_lo = std::max<int64_t>(0, -iy0);
        const int64_t ky_hi = std::min<int64_t>(kh, in_h - iy0);
        for (int64_t ox = 0; ox < ow; ++ox) {
          const double g = g_c[oy * ow + ox];
          if (g == 0.0) continue;
          const int64_t ix0 = ox * stride - pad;
          const int64_t kx_lo = std::max<int64_t>(0, -ix0);
          const int64_t kx_hi = std::min<int64_t>(kw, in_w - ix0);
          for (int64_t ci = 0; ci < cin; ++ci) {
            double* out_c = out.data() + ((nn * cin + ci) * in_h) * in_w;
            const double* k_c = pk + ((co * cin + ci) * kh) * kw;
            for (int64_t ky = ky_lo; ky < ky_hi; ++ky) {
              double* out_row = out_c + (iy0 + ky) * in_w + ix0;
              const double* k_row = k_c + ky * kw;
              for (int64_t kx = kx_lo; kx < kx_hi; ++kx) out_row[kx] += g * k_row[kx];
            }
          }
        }
      }
    }
  }
  return finish(Shape({n, cin, in_h, in_w}), std::move(out), "conv2d_input_grad");
}

Tensor conv2d_weight_grad(const Tensor& input, const Tensor& grad, int stride, int pad,
                          int64_t kh, int64_t kw) {
  require(input.rank() == 4 && grad.rank() == 4,
          "conv2d_weight_grad: input and grad must be rank 4");
  const int64_t n = input.shape().extent(0);
  const int64_t cin = input.shape().extent(1);
  const int64_t h = input.shape().extent(2);
  const int64_t w = input.shape().extent(3);
  require(grad.shape().extent(0) == n, "conv2d_weight_grad: batch extents differ");
  const int64_t cout = grad.shape().extent(1);
  const int64_t oh = grad.shape().extent(2);
  const int64_t ow = grad.shape().extent(3);
  require(oh == (h + 2 * pad - kh) / stride + 1 && ow == (w + 2 * pad - kw) / stride + 1,
          "conv2d_weight_grad: grad extents inconsistent with kernel geometry");
  std::vector<double> out(static_cast<size_t>(cout * cin * kh * kw), 0.0);
  const double* pi = input.data();
  const double* pg = grad.data();
  for (int64_t nn = 0; nn < n; ++nn) {
    for (int64_t co = 0; co < cout; ++co) {
      const double* g_c = pg + ((nn * cout + co) * oh) * ow;
      for (int64_t oy = 0; oy < oh; ++oy) {
        const int64_t iy0 = oy * stride - pad;
        const int64_t ky_lo = std::max<int64_t>(0, -iy0);
        const int64_t ky_hi = std::min<int64_t>(kh, h - iy0);
        for (int64_t ox = 0; ox < ow; ++ox) {
          const double g = g_c[oy * ow + ox];
          if (g == 0.0) continue;
          const int64_t ix0 = ox * stride - pad;
          const int64_t kx_lo = std::max<int64_t>(0, -ix0);
          const int64_t kx_hi = std::min<int64_t>(kw, w - ix0);
          for (int64_t ci = 0; ci < cin; ++ci) {
            const double* in_c = pi + ((nn * cin + ci) * h) * w;
            double* out_c = out.data() + ((co * cin + ci) * kh) * kw;
            for (int64_t ky = ky_lo; ky < ky_hi; ++ky) {
              const double* in_row = in_c + (iy0 + ky) * w + ix0;
              double* out_row = out_c + ky * kw;
              for (int64_t kx = kx_lo; kx < kx_hi; ++kx) out_row[kx] += g * in_row[kx];
            }
          }
        }
      }
    }
  }
  return finish(Shape({cout, cin, kh, kw}), std::move(out), "conv2d_weight_grad");
}

Tensor nearest_upsample2x(const Tensor& input) {
  require(input.rank() == 4, "nearest_upsample2x: input must be rank 4");
  const int64_t n = input.shape().extent(0), c = input.shape().extent(1);
  const int64_t h = input.shape().extent(2), w = input.shape().extent(3);
  std::vector<double> out(static_cast<size_t>(n * c * 4 * h * w));
  const double* p = input.data();
  for (int64_t i = 0; i < n * c; ++i) {
    const double* src = p + i * h * w;
    double* dst = out.data() + i * 4 * h * w;
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        const double v = src[y * w + x];
        double* d0 = dst + (2 * y) * (2 * w) + 2 * x;
        double* d1 = d0 + 2 * w;
        d0[0] = v;
        d0[1] = v;
        d1[0] = v;
        d1[1] = v;
      }
    }
  }
  return finish(Shape({n, c, 2 * h, 2 * w}), std::move(out), "nearest_upsample2x");
}

Tensor block_sum_2x2(const Tensor& input) {
  require(input.rank() == 4, "block_sum_2x2: input must be rank 4");
  const int64_t n = input.shape().extent(0), c = input.shape().extent(1);
  const int64_t h = input.shape().extent(2), w = input.shape().extent(3);
  require(h % 2 == 0 && w % 2 == 0, "block_sum_2x2: spatial extents must be even");
  const int64_t oh = h / 2, ow = w / 2;
  std::vector<double> out(static_cast<size_t>(n * c * oh * ow));
  const double* p = input.data();
  for (int64_t i = 0; i < n * c; ++i) {
    const double* src = p + i * h * w;
    double* dst = out.data() + i * oh * ow;
    for (int64_t y = 0; y < oh; ++y) {
      for (int64_t x = 0; x < ow; ++x) {
        const double* s0 = src + (2 * y) * w + 2 * x;
        const double* s1 = s0 + w;
        dst[y * ow + x] = s0[0] + s0[1] + s1[0] + s1[1];
      }
    }
  }
  return finish(Shape({n, c, oh, ow}), std::move(out), "block_sum_2x2");
}

Tensor spatial_sum(const Tensor& input) {
  require(input.rank() == 4, "spatial_sum: input must be rank 4");
  const int64_t n = input.shape().extent(0), c = input.shape().extent(1);
  const int64_t hw = input.shape().extent(2) * input.shape().extent(3);
  std::vector<double> out(static_cast<size_t>(n * c), 0.0);
  const double* p = input.data();
  for (int64_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    const double* src = p + i * hw;
    for (int64_t j = 0; j < hw; ++j) acc += src[j];
    out[static_cast<size_t>(i)] = acc;
  }
  return finish(Shape({n, c}), std::move(out), "spatial_sum");
}

Tensor spatial_broadcast(const Tensor& input, int64_t h, int64_t w) {
  require(input.rank() == 2, "spatial_broadcast: input must be rank 2");
  require(h >= 1 && w >= 1, "spatial_broadcast: extents must be >= 1");
  const int64_t n = input.shape().extent(0), c = input.shape().extent(1);
  std::vector<double> out(static_cast<size_t>(n * c * h * w));
  const double* p = input.data();
  for (int64_t i = 0; i < n * c; ++i) {
    double* dst = out.data() + i * h * w;
    std::fill(dst, dst + h * w, p[i]);
  }
  return finish(Shape({n, c, h, w}), std::move(out), "spatial_broadcast");
}

Tensor batch_sum(const Tensor& input) {
  require(input.rank() == 2, "batch_sum: input must be rank 2");
  const int64_t n = input.shape().extent(0), c = input.shape().extent(1);
  std::vector<double> out(static_cast<size_t>(c), 0.0);
  const double* p = input.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(j)] += p[i * c + j];
  return finish(Shape({c}), std::move(out), "batch_sum");
}

Tensor batch_broadcast(const Tensor& input, int64_t n) {
  require(input.rank() == 1, "batch_broadcast: input must be rank 1");
  require(n >= 1, "batch_broadcast: batch extent must be >= 1");
  const int64_t c = input.shape().extent(0);
  std::vector<double> out(static_cast<size_t>(n * c));
  const double* p = input.data();
  for (int64_t i = 0; i < n; ++i) std::copy(p, p + c, out.data() + i * c);
  return finish(Shape({n, c}), std::move(out), "batch_broadcast");
}

Tensor row_sum(const Tensor& input) {
  require(input.rank() == 2, "row_sum: input must be rank 2");
  const int64_t n = input.shape().extent(0), c = input.shape().extent(1);
  std::vector<double> out(static_cast<size_t>(n), 0.0);
  const double* p = input.data();
  for (int64_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int64_t j = 0; j < c; ++j) acc += p[i * c + j];
    out[static_cast<size_t>(i)] = acc;
  }
  return finish(Shape({n}), std::move(out), "row_sum");
}

Tensor row_broadcast(const Tensor& input, int64_t c) {
  require(input.rank() == 1, "row_broadcast: input must be rank 1");
  require(c >= 1, "row_broadcast: column extent must be >= 1");
  const int64_t n = input.shape().extent(0);
  std::vector<double> out(static_cast<size_t>(n * c));
  const double* p = input.data();
  for (int64_t i = 0; i < n; ++i) std::fill(out.data() + i * c, out.data() + (i + 1) * c, p[i]);
  return finish(Shape({n, c}), std::move(out), "row_broadcast");
}

Tensor row_max(const Tensor& input) {
  require(input.rank() == 2, "row_max: input must be rank 2");
  const int64_t n = input.shape().extent(0), c = input.shape().extent(1);
  std::vector<double> out(static_cast<size_t>(n));
  const double* p = input.data();
  for (int64_t i = 0; i < n; ++i) {
    double best = p[i * c];
    for (int64_t j = 1; j < c; ++j) best = std::max(best, p[i * c + j]);
    out[static_cast<size_t>(i)] = best;
  }
  return finish(Shape({n}), std::move(out), "row_max");
}

Tensor sum_all(const Tensor& input) {
  double acc = 0.0;
  for (double v : input.span()) acc += v;
  return finish(Shape::scalar(), {acc}, "sum_all");
}

Tensor broadcast_all(const Tensor& scalar, const Shape& shape) {
  require(scalar.numel() == 1, "broadcast_all: source must hold exactly one element");
  return Tensor::full(shape, scalar[0]);
}

Tensor reduce_max_all(const Tensor& input) {
  double best = input[0];
  for (double v : input.span()) best = std::max(best, v);
  return finish(Shape::scalar(), {best}, "reduce_max_all");
}

Tensor select_labels(const Tensor& input, std::span<const int32_t> labels) {
  require(input.rank() == 2, "select_labels: input must be rank 2");
  const int64_t n = input.shape().extent(0), c = input.shape().extent(1);
  require(static_cast<int64_t>(labels.size()) == n,
          "select_labels: label count does not match batch extent");
  std::vector<double> out(static_cast<size_t>(n));
  const double* p = input.data();
  for (int64_t i = 0; i < n; ++i) {
    const int32_t lbl = labels[static_cast<size_t>(i)];
    require(lbl >= 0 && lbl < c, "select_labels: label out of range");
    out[static_cast<size_t>(i)] = p[i * c + lbl];
  }
  return finish(Shape({n}), std::move(out), "select_labels");
}

Tensor scatter_labels(const Tensor& input, std::span<const int32_t> labels, int64_t classes) {
  require(input.rank() == 1, "scatter_labels: input must be rank 1");
  const int64_t n = input.shape().extent(0);
  require(static_cast<int64_t>(labels.size()) == n,
          "scatter_labels: label count does not match batch extent");
  require(classes >= 1, "scatter_labels: class count must be >= 1");
  std::vector<double> out(static_cast<size_t>(n * classes), 0.0);
  const double* p = input.data();
  for (int64_t i = 0; i < n; ++i) {
    const int32_t lbl = labels[static_cast<size_t>(i)];
    require(lbl >= 0 && lbl < classes, "scatter_labels: label out of range");
    out[static_cast<size_t>(i * classes + lbl)] = p[i];
  }
  return finish(Shape({n, classes}), std::move(out), "scatter_labels");
}

Tensor concat_dim1(std::span<const Tensor> inputs) {
  require(!inputs.empty(), "concat_dim1: need at least one input");
  const Tensor& first = inputs[0];
  require(first.rank() == 2 || first.rank() == 4, "concat_dim1: inputs must be rank 2 or 4");
  int64_t total_c = 0;
  for (const Tensor& t : inputs) {
    require(t.rank() == first.rank(), "concat_dim1: inputs must share rank");
    require(t.shape().extent(0) == first.shape().extent(0),
            "concat_dim1: inputs must share batch extent");
    if (first.rank() == 4) {
      require(t.shape().extent(2) == first.shape().extent(2) &&
                  t.shape().extent(3) == first.shape().extent(3),
              "concat_dim1: inputs must share spatial extents");
    }
    total_c += t.shape().extent(1);
  }
  const int64_t n = first.shape().extent(0);
  const int64_t inner =
      first.rank() == 4 ? first.shape().extent(2) * first.shape().extent(3) : 1;
  std::vector<double> out(static_cast<size_t>(n * total_c * inner));
  for (int64_t nn = 0; nn < n; ++nn) {
    int64_t co = 0;
    for (const Tensor& t : inputs) {
      const int64_t c = t.shape().extent(1);
      const double* src = t.data() + nn * c * inner;
      double* dst = out.data() + (nn * total_c + co) * inner;
      std::copy(src, src + c * inner, dst);
      co += c;
    }
  }
  Shape shape = first.rank() == 4
                    ? Shape({n, total_c, first.shape().extent(2), first.shape().extent(3)})
                    : Shape({n, total_c});
  return finish(shape, std::move(out), "concat_dim1");
}

Tensor slice_dim1(const Tensor& input, int64_t offset, int64_t count) {
  require(input.rank() == 2 || input.rank() == 4, "slice_dim1: input must be rank 2 or 4");
  const int64_t n = input.shape().extent(0), c = input.shape().extent(1);
  require(offset >= 0 && count >= 1 && offset + count <= c, "slice_dim1: slice out of range");
  const int64_t inner = input.rank() == 4 ? input.shape().extent(2) * input.shape().extent(3) : 1;
  std::vector<double> out(static_cast<size_t>(n * count * inner));
  const double* p = input.data();
  for (int64_t nn = 0; nn < n; ++nn) {
    const double* src = p + (nn * c + offset) * inner;
    std::copy(src, src + count * inner, out.data() + nn * count * inner);
  }
  Shape shape = input.rank() == 4
                    ? Shape({n, count, input.shape().extent(2), input.shape().extent(3)})
                    : Shape({n, count});
  return finish(shape, std::move(out), "slice_dim1");
}

Tensor pad_dim1(const Tensor& input, int64_t before, int64_t after) {
  require(input.rank() == 2 || input.rank() == 4, "pad_dim1: input must be rank 2 or 4");
  require(before >= 0 && after >= 0, "pad_dim1: pad extents must be >= 0");
  const int64_t n = input.shape().extent(0), c = input.shape().extent(1);
  const int64_t inner = input.rank() == 4 ? input.shape().extent(2) * input.shape().extent(3) : 1;
  const int64_t total_c = before + c + after;
  std::vector<double> out(static_cast<size_t>(n * total_c * inner), 0.0);
  const double* p = input.data();
  for (int64_t nn = 0; nn < n; ++nn) {
    const double* src = p + nn * c * inner;
    std::copy(src, src + c * inner, out.data() + (nn * total_c + before) * inner);
  }
  Shape shape = input.rank() == 4
                    ? Shape({n, total_c, input.shape().extent(2), input.shape().extent(3)})
                    : Shape({n, total_c});
  return finish(shape, std::move(out), "pad_dim1");
}

Tensor global_avg_pool(const Tensor& input) {
  require(input.rank() == 4, "global_avg_pool: input must be rank 4");
  const double hw =
      static_cast<double>(input.shape().extent(2) * input.shape().extent(3));
  return map_scale(spatial_sum(input), 1.0 / hw);
}

double lp_norm(const Tensor& input, NormOrder p) {
  double acc = 0.0;
  switch (p) {
    case NormOrder::One:
      for (double v : input.span()) acc += std::abs(v);
      return acc;
    case NormOrder::Two:
      for (double v : input.span()) acc += v * v;
      return std::sqrt(acc);
    case NormOrder::Inf:
      for (double v : input.span()) acc = std::max(acc, std::abs(v));
      return acc;
  }
  return 0.0;
}

}  // namespace msgr

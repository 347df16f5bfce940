#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "usseg/tensor.hpp"

namespace usseg {

enum class Mode { train, infer };

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;

  Tensor& ensure_grad() {
    if (grad.shape() != value.shape()) grad = Tensor(value.shape());
    return grad;
  }
  bool has_grad() const { return grad.shape() == value.shape() && !grad.empty(); }
};

/// Shared handle to a value participating in a recorded computation.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false)
      : node_(std::make_shared<Node>(Node{std::move(value), Tensor{}, requires_grad})) {}

  static Var constant(Tensor value) { return Var(std::move(value), false); }
  static Var leaf(Tensor value) { return Var(std::move(value), true); }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_->has_grad(); }
  const Tensor& grad() const { return node_->grad; }
  Tensor& grad_buffer() const { return node_->ensure_grad(); }
  void zero_grad() const { node_->grad = Tensor(node_->value.shape()); }

  Node* node() const { return node_.get(); }

 private:
  std::shared_ptr<Node> node_;
};

/// Ordered record of differentiable operations. Single-thread use only.
class Tape {
 public:
  struct Entry {
    std::string op;
    std::vector<Var> inputs;
    Var output;
    std::function<void()> backward;
  };

  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }

  void record(std::string op, std::vector<Var> inputs, const Var& output,
              std::function<void()> backward) {
    trace_.push_back(op);
    if (!recording_ || !output.requires_grad()) return;
    entries_.push_back(Entry{std::move(op), std::move(inputs), output, std::move(backward)});
  }

  void backward(const Var& output, const Tensor& seed) {
    if (seed.shape() != output.shape()) {
      throw std::invalid_argument("backward seed shape " + seed.shape().str() +
                                  " does not match output shape " + output.shape().str());
    }
    if (!output.requires_grad()) return;
    Var out = output;
    out.grad_buffer() += seed;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output.has_grad()) it->backward();
    }
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }

  /// Operation names in execution order, recorded even when no gradient is tracked.
  const std::vector<std::string>& trace() const { return trace_; }

  std::map<std::string, int> census() const {
    std::map<std::string, int> counts;
    for (const auto& op : trace_) ++counts[op];
    return counts;
  }

  void clear() {
    entries_.clear();
    trace_.clear();
  }

 private:
  bool recording_;
  std::vector<Entry> entries_;
  std::vector<std::string> trace_;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline Var make_output(Tensor value, std::initializer_list<const Var*> inputs) {
  bool rg = false;
  for (const Var* v : inputs) rg = rg || (v->defined() && v->requires_grad());
  return Var(std::move(value), rg);
}

inline bool wants_grad(const Var& v) { return v.defined() && v.requires_grad(); }

inline void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                                b.shape().str());
  }
}

/// Patch layout shared by convolution and its adjoint.
struct ConvGeometry {
  std::size_t channels, in_h, in_w, kh, kw, stride, pad, out_h, out_w;
  std::size_t rows() const { return channels * kh * kw; }
  std::size_t cols() const { return out_h * out_w; }
};

inline void im2col(const double* img, const ConvGeometry& g, double* cols) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols + ((c * g.kh + ky) * g.kw + kx) * ncols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          double* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = img + (c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.in_w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

inline void col2im(const double* cols, const ConvGeometry& g, double* img) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols + ((c * g.kh + ky) * g.kw + kx) * ncols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
          const double* src = row + oy * g.out_w;
          double* dst = img + (c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.in_w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

inline bool is_pointwise(const ConvGeometry& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

/// Cross-correlation. kernel is (out_ch, in_ch, kh, kw); bias is (1, out_ch, 1, 1) or undefined.
inline Var conv2d(Tape& tape, const Var& input, const Var& kernel, const Var& bias,
                  std::size_t stride = 1, std::size_t padding = 0) {
  const Shape xs = input.shape();
  const Shape ks = kernel.shape();
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  if (ks.c != xs.c) {
    throw std::invalid_argument("conv2d: input " + xs.str() + " incompatible with kernel " +
                                ks.str());
  }
  if (bias.defined() && bias.shape() != Shape{1, ks.n, 1, 1}) {
    throw std::invalid_argument("conv2d: bias " + bias.shape().str() + " incompatible with kernel " +
                                ks.str());
  }
  const long span_h = static_cast<long>(xs.h + 2 * padding) - static_cast<long>(ks.h);
  const long span_w = static_cast<long>(xs.w + 2 * padding) - static_cast<long>(ks.w);
  if (span_h < 0 || span_w < 0 || span_h % static_cast<long>(stride) != 0 ||
      span_w % static_cast<long>(stride) != 0) {
    throw std::invalid_argument("conv2d: non-integral output extent for input " + xs.str() +
                                ", kernel " + ks.str() + ", stride " + std::to_string(stride) +
                                ", padding " + std::to_string(padding));
  }
  const detail::ConvGeometry g{xs.c,
                               xs.h,
                               xs.w,
                               ks.h,
                               ks.w,
                               stride,
                               padding,
                               static_cast<std::size_t>(span_h) / stride + 1,
                               static_cast<std::size_t>(span_w) / stride + 1};
  const Shape os{xs.n, ks.n, g.out_h, g.out_w};
  Tensor out(os);
  const bool pointwise = detail::is_pointwise(g);
  std::vector<double> cols(pointwise ? 0 : g.rows() * g.cols());
  detail::ConstMapMat kmat(kernel.value().ptr(), ks.n, g.rows());
  for (std::size_t n = 0; n < xs.n; ++n) {
    const double* xn = input.value().ptr() + n * xs.c * xs.plane();
    if (!pointwise) detail::im2col(xn, g, cols.data());
    detail::ConstMapMat cmat(pointwise ? xn : cols.data(), g.rows(), g.cols());
    detail::MapMat omat(out.ptr() + n * os.c * os.plane(), os.c, g.cols());
    omat.noalias() = kmat * cmat;
    if (bias.defined()) {
      for (std::size_t c = 0; c < os.c; ++c) omat.row(c).array() += bias.value()[c];
    }
  }
  Var y = detail::make_output(std::move(out), {&input, &kernel, &bias});
  Node* yn = y.node();
  tape.record("conv" + std::to_string(ks.h) + "x" + std::to_string(ks.w), {input, kernel, bias}, y,
              [input, kernel, bias, yn, g, pointwise]() mutable {
                const Shape xs = input.shape();
                const Shape os = yn->value.shape();
                std::vector<double> cols(pointwise ? 0 : g.rows() * g.cols());
                detail::ConstMapMat kmat(kernel.value().ptr(), os.c, g.rows());
                for (std::size_t n = 0; n < xs.n; ++n) {
                  detail::ConstMapMat dout(yn->grad.ptr() + n * os.c * os.plane(), os.c, g.cols());
                  const double* xn = input.value().ptr() + n * xs.c * xs.plane();
                  if (detail::wants_grad(kernel)) {
                    if (!pointwise) detail::im2col(xn, g, cols.data());
                    detail::ConstMapMat cmat(pointwise ? xn : cols.data(), g.rows(), g.cols());
                    detail::MapMat dk(kernel.grad_buffer().ptr(), os.c, g.rows());
                    dk.noalias() += dout * cmat.transpose();
                  }
                  if (detail::wants_grad(bias)) {
                    Tensor& db = bias.grad_buffer();
                    for (std::size_t c = 0; c < os.c; ++c) db[c] += dout.row(c).sum();
                  }
                  if (detail::wants_grad(input)) {
                    double* dxn = input.grad_buffer().ptr() + n * xs.c * xs.plane();
                    if (pointwise) {
                      detail::MapMat dx(dxn, g.rows(), g.cols());
                      dx.noalias() += kmat.transpose() * dout;
                    } else {
                      detail::MapMat dcols(cols.data(), g.rows(), g.cols());
                      dcols.noalias() = kmat.transpose() * dout;
                      detail::col2im(cols.data(), g, dxn);
                    }
                  }
                }
              });
  return y;
}

/// Adjoint of conv2d. kernel is (in_ch, out_ch, kh, kw). Output extent
/// (H-1)*stride - 2*padding + kh + output_padding.
inline Var transposed_conv2d(Tape& tape, const Var& input, const Var& kernel, std::size_t stride,
                             const Var& bias = Var{}, std::size_t padding = 0,
                             std::size_t output_padding = 0) {
  const Shape xs = input.shape();
  const Shape ks = kernel.shape();
  if (stride == 0) throw std::invalid_argument("transposed_conv2d: stride must be positive");
  if (ks.n != xs.c) {
    throw std::invalid_argument("transposed_conv2d: input " + xs.str() +
                                " incompatible with kernel " + ks.str());
  }
  if (output_padding >= stride) {
    throw std::invalid_argument("transposed_conv2d: output_padding must be smaller than stride");
  }
  if (bias.defined() && bias.shape() != Shape{1, ks.c, 1, 1}) {
    throw std::invalid_argument("transposed_conv2d: bias " + bias.shape().str() +
                                " incompatible with kernel " + ks.str());
  }
  const long oh = static_cast<long>((xs.h - 1) * stride + ks.h + output_padding) -
                  static_cast<long>(2 * padding);
  const long ow = static_cast<long>((xs.w - 1) * stride + ks.w + output_padding) -
                  static_cast<long>(2 * padding);
  if (xs.h == 0 || xs.w == 0 || oh <= 0 || ow <= 0) {
    throw std::invalid_argument("transposed_conv2d: empty output for input " + xs.str());
  }
  const detail::ConvGeometry g{ks.c,   static_cast<std::size_t>(oh), static_cast<std::size_t>(ow),
                               ks.h,   ks.w,
                               stride, padding,
                               xs.h,   xs.w};
  const Shape os{xs.n, ks.c, g.in_h, g.in_w};
  Tensor out(os);
  std::vector<double> cols(g.rows() * g.cols());
  detail::ConstMapMat kmat(kernel.value().ptr(), ks.n, g.rows());
  for (std::size_t n = 0; n < xs.n; ++n) {
    detail::ConstMapMat xn(input.value().ptr() + n * xs.c * xs.plane(), xs.c, g.cols());
    detail::MapMat cmat(cols.data(), g.rows(), g.cols());
    cmat.noalias() = kmat.transpose() * xn;
    double* on = out.ptr() + n * os.c * os.plane();
    detail::col2im(cols.data(), g, on);
    if (bias.defined()) {
      for (std::size_t c = 0; c < os.c; ++c) {
        for (std::size_t i = 0; i < os.plane(); ++i) on[c * os.plane() + i] += bias.value()[c];
      }
    }
  }
  Var y = detail::make_output(std::move(out), {&input, &kernel, &bias});
  Node* yn = y.node();
  tape.record("tconv" + std::to_string(ks.h) + "x" + std::to_string(ks.w), {input, kernel, bias},
              y, [input, kernel, bias, yn, g]() mutable {
                const Shape xs = input.shape();
                const Shape os = yn->value.shape();
                std::vector<double> cols(g.rows() * g.cols());
                detail::ConstMapMat kmat(kernel.value().ptr(), xs.c, g.rows());
                for (std::size_t n = 0; n < xs.n; ++n) {
                  const double* dyn = yn->grad.ptr() + n * os.c * os.plane();
                  detail::im2col(dyn, g, cols.data());
                  detail::ConstMapMat cmat(cols.data(), g.rows(), g.cols());
                  if (detail::wants_grad(input)) {
                    detail::MapMat dx(input.grad_buffer().ptr() + n * xs.c * xs.plane(), xs.c,
                                      g.cols());
                    dx.noalias() += kmat * cmat;
                  }
                  if (detail::wants_grad(kernel)) {
                    detail::ConstMapMat xn(input.value().ptr() + n * xs.c * xs.plane(), xs.c,
                                           g.cols());
                    detail::MapMat dk(kernel.grad_buffer().ptr(), xs.c, g.rows());
                    dk.noalias() += xn * cmat.transpose();
                  }
                  if (detail::wants_grad(bias)) {
                    Tensor& db = bias.grad_buffer();
                    for (std::size_t c = 0; c < os.c; ++c) {
                      double s = 0.0;
                      for (std::size_t i = 0; i < os.plane(); ++i) s += dyn[c * os.plane() + i];
                      db[c] += s;
                    }
                  }
                }
              });
  return y;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Flat input index of the selected maximum for every output element.
struct PoolIndices {
  std::vector<std::size_t> source;
};

/// 2x2 stride-2 max pooling. Ties resolve to the row-major earliest element.
inline std::pair<Var, PoolIndices> maxpool2(Tape& tape, const Var& input) {
  const Shape xs = input.shape();
  if (xs.h % 2 != 0 || xs.w % 2 != 0) {
    throw std::invalid_argument("maxpool2: spatial extents must be even, got " + xs.str());
  }
  const Shape os{xs.n, xs.c, xs.h / 2, xs.w / 2};
  Tensor out(os);
  PoolIndices idx;
  idx.source.resize(os.size());
  const Tensor& x = input.value();
  std::size_t o = 0;
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      for (std::size_t oy = 0; oy < os.h; ++oy) {
        for (std::size_t ox = 0; ox < os.w; ++ox, ++o) {
          std::size_t best = x.index(n, c, 2 * oy, 2 * ox);
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t i = x.index(n, c, 2 * oy + dy, 2 * ox + dx);
              if (x[i] > x[best]) best = i;
            }
          }
          out[o] = x[best];
          idx.source[o] = best;
        }
      }
    }
  }
  Var y = detail::make_output(std::move(out), {&input});
  Node* yn = y.node();
  tape.record("maxpool2", {input}, y, [input, yn, src = idx.source]() mutable {
    Tensor& dx = input.grad_buffer();
    for (std::size_t o = 0; o < src.size(); ++o) dx[src[o]] += yn->grad[o];
  });
  return {y, std::move(idx)};
}

/// Global average pooling over H x W.
inline Var spatial_mean(Tape& tape, const Var& input) {
  const Shape xs = input.shape();
  if (xs.plane() == 0) throw std::invalid_argument("spatial_mean: empty spatial extent");
  Tensor out(Shape{xs.n, xs.c, 1, 1});
  const double inv = 1.0 / static_cast<double>(xs.plane());
  for (std::size_t i = 0; i < xs.n * xs.c; ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < xs.plane(); ++p) s += input.value()[i * xs.plane() + p];
    out[i] = s * inv;
  }
  Var y = detail::make_output(std::move(out), {&input});
  Node* yn = y.node();
  tape.record("spatial_mean", {input}, y, [input, yn, inv]() mutable {
    const Shape xs = input.shape();
    Tensor& dx = input.grad_buffer();
    for (std::size_t i = 0; i < xs.n * xs.c; ++i) {
      for (std::size_t p = 0; p < xs.plane(); ++p) dx[i * xs.plane() + p] += yn->grad[i] * inv;
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Running per-channel statistics, shape (1, C, 1, 1) each.
struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;

  BatchNormStats() = default;
  explicit BatchNormStats(std::size_t channels)
      : running_mean(Shape{1, channels, 1, 1}, 0.0), running_var(Shape{1, channels, 1, 1}, 1.0) {}
};

inline Var batchnorm(Tape& tape, const Var& input, const Var& gamma, const Var& beta, Mode mode,
                     BatchNormStats& stats, double momentum = kBatchNormMomentum,
                     double eps = kBatchNormEps) {
  const Shape xs = input.shape();
  const Shape ps{1, xs.c, 1, 1};
  if (gamma.shape() != ps || beta.shape() != ps) {
    throw std::invalid_argument("batchnorm: gamma/beta must be " + ps.str() + " for input " +
                                xs.str());
  }
  if (stats.running_mean.shape() != ps || stats.running_var.shape() != ps) {
    throw std::invalid_argument("batchnorm: running statistics do not match " + ps.str());
  }
  const std::size_t m = xs.n * xs.plane();
  if (m == 0) throw std::invalid_argument("batchnorm: zero-size normalization group");
  const Tensor& x = input.value();
  Tensor out(xs);
  Tensor xhat(xs);
  std::vector<double> inv_std(xs.c);
  for (std::size_t c = 0; c < xs.c; ++c) {
    double mean;
    double var;
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t n = 0; n < xs.n; ++n) {
        const double* p = x.ptr() + x.index(n, c, 0, 0);
        for (std::size_t i = 0; i < xs.plane(); ++i) s += p[i];
      }
      mean = s / static_cast<double>(m);
      double ss = 0.0;
      for (std::size_t n = 0; n < xs.n; ++n) {
        const double* p = x.ptr() + x.index(n, c, 0, 0);
        for (std::size_t i = 0; i < xs.plane(); ++i) ss += (p[i] - mean) * (p[i] - mean);
      }
      var = ss / static_cast<double>(m);
      const double unbiased = m > 1 ? ss / static_cast<double>(m - 1) : var;
      stats.running_mean[c] = (1.0 - momentum) * stats.running_mean[c] + momentum * mean;
      stats.running_var[c] = (1.0 - momentum) * stats.running_var[c] + momentum * unbiased;
    } else {
      mean = stats.running_mean[c];
      var = stats.running_var[c];
    }
    inv_std[c] = 1.0 / std::sqrt(var + eps);
    const double g = gamma.value()[c];
    const double b = beta.value()[c];
    for (std::size_t n = 0; n < xs.n; ++n) {
      const std::size_t base = x.index(n, c, 0, 0);
      for (std::size_t i = 0; i < xs.plane(); ++i) {
        const double h = (x[base + i] - mean) * inv_std[c];
        xhat[base + i] = h;
        out[base + i] = g * h + b;
      }
    }
  }
  Var y = detail::make_output(std::move(out), {&input, &gamma, &beta});
  Node* yn = y.node();
  tape.record("batchnorm", {input, gamma, beta}, y,
              [input, gamma, beta, yn, mode, xhat = std::move(xhat),
               inv_std = std::move(inv_std)]() mutable {
                const Shape xs = input.shape();
                const std::size_t m = xs.n * xs.plane();
                const Tensor& dy = yn->grad;
                for (std::size_t c = 0; c < xs.c; ++c) {
                  double sum_dy = 0.0;
                  double sum_dy_xhat = 0.0;
                  for (std::size_t n = 0; n < xs.n; ++n) {
                    const std::size_t base = dy.index(n, c, 0, 0);
                    for (std::size_t i = 0; i < xs.plane(); ++i) {
                      sum_dy += dy[base + i];
                      sum_dy_xhat += dy[base + i] * xhat[base + i];
                    }
                  }
                  if (detail::wants_grad(gamma)) gamma.grad_buffer()[c] += sum_dy_xhat;
                  if (detail::wants_grad(beta)) beta.grad_buffer()[c] += sum_dy;
                  if (!detail::wants_grad(input)) continue;
                  Tensor& dx = input.grad_buffer();
                  const double g = gamma.value()[c];
                  for (std::size_t n = 0; n < xs.n; ++n) {
                    const std::size_t base = dy.index(n, c, 0, 0);
                    for (std::size_t i = 0; i < xs.plane(); ++i) {
                      if (mode == Mode::train) {
                        const double md = static_cast<double>(m);
                        dx[base + i] += g * inv_std[c] / md *
                                        (md * dy[base + i] - sum_dy - xhat[base + i] * sum_dy_xhat);
                      } else {
                        dx[base + i] += g * inv_std[c] * dy[base + i];
                      }
                    }
                  }
                }
              });
  return y;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

enum class Activation { relu, sigmoid };

inline Var activation(Tape& tape, Activation kind, const Var& input) {
  const Tensor& x = input.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = kind == Activation::relu ? std::max(0.0, x[i]) : 1.0 / (1.0 + std::exp(-x[i]));
  }
  Var y = detail::make_output(std::move(out), {&input});
  Node* yn = y.node();
  tape.record(kind == Activation::relu ? "relu" : "sigmoid", {input}, y,
              [input, yn, kind]() mutable {
                Tensor& dx = input.grad_buffer();
                const Tensor& x = input.value();
                for (std::size_t i = 0; i < dx.size(); ++i) {
                  if (kind == Activation::relu) {
                    if (x[i] > 0.0) dx[i] += yn->grad[i];
                  } else {
                    const double s = yn->value[i];
                    dx[i] += yn->grad[i] * s * (1.0 - s);
                  }
                }
              });
  return y;
}

inline Var relu(Tape& tape, const Var& x) { return activation(tape, Activation::relu, x); }
inline Var sigmoid(Tape& tape, const Var& x) { return activation(tape, Activation::sigmoid, x); }

enum class SoftmaxAxis { channels, spatial };

/// channels: normalize over C at each pixel. spatial: normalize over H*W per (n, c).
inline Var softmax(Tape& tape, const Var& input, SoftmaxAxis axis) {
  const Shape xs = input.shape();
  const Tensor& x = input.value();
  Tensor out(xs);
  // Each group is `count` elements spaced by `stride`, starting at `origin(g)`.
  const std::size_t groups = axis == SoftmaxAxis::channels ? xs.n * xs.plane() : xs.n * xs.c;
  const std::size_t count = axis == SoftmaxAxis::channels ? xs.c : xs.plane();
  const std::size_t stride = axis == SoftmaxAxis::channels ? xs.plane() : 1;
  auto origin = [xs, axis](std::size_t g) {
    if (axis == SoftmaxAxis::spatial) return g * xs.plane();
    const std::size_t n = g / xs.plane();
    return n * xs.c * xs.plane() + g % xs.plane();
  };
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t o = origin(g);
    double mx = x[o];
    for (std::size_t k = 1; k < count; ++k) mx = std::max(mx, x[o + k * stride]);
    double s = 0.0;
    for (std::size_t k = 0; k < count; ++k) {
      const double e = std::exp(x[o + k * stride] - mx);
      out[o + k * stride] = e;
      s += e;
    }
    for (std::size_t k = 0; k < count; ++k) out[o + k * stride] /= s;
  }
  Var y = detail::make_output(std::move(out), {&input});
  Node* yn = y.node();
  tape.record(axis == SoftmaxAxis::channels ? "softmax_channels" : "softmax_spatial", {input}, y,
              [input, yn, groups, count, stride, origin]() mutable {
                Tensor& dx = input.grad_buffer();
                const Tensor& p = yn->value;
                const Tensor& dy = yn->grad;
                for (std::size_t g = 0; g < groups; ++g) {
                  const std::size_t o = origin(g);
                  double dot = 0.0;
                  for (std::size_t k = 0; k < count; ++k) dot += dy[o + k * stride] * p[o + k * stride];
                  for (std::size_t k = 0; k < count; ++k) {
                    const std::size_t i = o + k * stride;
                    dx[i] += p[i] * (dy[i] - dot);
                  }
                }
              });
  return y;
}

enum class Combine { concat_channels, add, mul };

inline Var combine(Tape& tape, Combine kind, const Var& a, const Var& b) {
  const Shape as = a.shape();
  const Shape bs = b.shape();
  if (kind == Combine::concat_channels) {
    if (as.n != bs.n || as.h != bs.h || as.w != bs.w) {
      throw std::invalid_argument("concat: extents differ beyond channels: " + as.str() + " vs " +
                                  bs.str());
    }
    Tensor out(Shape{as.n, as.c + bs.c, as.h, as.w});
    const std::size_t pa = as.c * as.plane();
    const std::size_t pb = bs.c * bs.plane();
    for (std::size_t n = 0; n < as.n; ++n) {
      std::copy_n(a.value().ptr() + n * pa, pa, out.ptr() + n * (pa + pb));
      std::copy_n(b.value().ptr() + n * pb, pb, out.ptr() + n * (pa + pb) + pa);
    }
    Var y = detail::make_output(std::move(out), {&a, &b});
    Node* yn = y.node();
    tape.record("concat", {a, b}, y, [a, b, yn, pa, pb]() mutable {
      const std::size_t batch = a.shape().n;
      for (std::size_t n = 0; n < batch; ++n) {
        const double* src = yn->grad.ptr() + n * (pa + pb);
        if (detail::wants_grad(a)) {
          double* da = a.grad_buffer().ptr() + n * pa;
          for (std::size_t i = 0; i < pa; ++i) da[i] += src[i];
        }
        if (detail::wants_grad(b)) {
          double* db = b.grad_buffer().ptr() + n * pb;
          for (std::size_t i = 0; i < pb; ++i) db[i] += src[pa + i];
        }
      }
    });
    return y;
  }
  detail::require_same_shape(kind == Combine::add ? "add" : "mul", a, b);
  Tensor out(as);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = kind == Combine::add ? a.value()[i] + b.value()[i] : a.value()[i] * b.value()[i];
  }
  Var y = detail::make_output(std::move(out), {&a, &b});
  Node* yn = y.node();
  tape.record(kind == Combine::add ? "add" : "mul", {a, b}, y, [a, b, yn, kind]() mutable {
    const Tensor& dy = yn->grad;
    if (detail::wants_grad(a)) {
      Tensor& da = a.grad_buffer();
      for (std::size_t i = 0; i < dy.size(); ++i) {
        da[i] += kind == Combine::add ? dy[i] : dy[i] * b.value()[i];
      }
    }
    if (detail::wants_grad(b)) {
      Tensor& db = b.grad_buffer();
      for (std::size_t i = 0; i < dy.size(); ++i) {
        db[i] += kind == Combine::add ? dy[i] : dy[i] * a.value()[i];
      }
    }
  });
  return y;
}

inline Var concat(Tape& tape, const Var& a, const Var& b) {
  return combine(tape, Combine::concat_channels, a, b);
}
inline Var add(Tape& tape, const Var& a, const Var& b) { return combine(tape, Combine::add, a, b); }
inline Var mul(Tape& tape, const Var& a, const Var& b) { return combine(tape, Combine::mul, a, b); }

inline Var sub(Tape& tape, const Var& a, const Var& b) {
  detail::require_same_shape("sub", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  Var y = detail::make_output(std::move(out), {&a, &b});
  Node* yn = y.node();
  tape.record("sub", {a, b}, y, [a, b, yn]() mutable {
    const Tensor& dy = yn->grad;
    if (detail::wants_grad(a)) a.grad_buffer() += dy;
    if (detail::wants_grad(b)) {
      Tensor& db = b.grad_buffer();
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
    }
  });
  return y;
}

inline Var div(Tape& tape, const Var& a, const Var& b) {
  detail::require_same_shape("div", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] / b.value()[i];
  Var y = detail::make_output(std::move(out), {&a, &b});
  Node* yn = y.node();
  tape.record("div", {a, b}, y, [a, b, yn]() mutable {
    const Tensor& dy = yn->grad;
    if (detail::wants_grad(a)) {
      Tensor& da = a.grad_buffer();
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] / b.value()[i];
    }
    if (detail::wants_grad(b)) {
      Tensor& db = b.grad_buffer();
      for (std::size_t i = 0; i < dy.size(); ++i) {
        db[i] -= dy[i] * yn->value[i] / b.value()[i];
      }
    }
  });
  return y;
}

/// scale * x + shift.
inline Var affine(Tape& tape, const Var& input, double scale, double shift) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * input.value()[i] + shift;
  Var y = detail::make_output(std::move(out), {&input});
  Node* yn = y.node();
  tape.record("affine", {input}, y, [input, yn, scale]() mutable {
    Tensor& dx = input.grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += scale * yn->grad[i];
  });
  return y;
}

inline Var log(Tape& tape, const Var& input) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(input.value()[i]);
  Var y = detail::make_output(std::move(out), {&input});
  Node* yn = y.node();
  tape.record("log", {input}, y, [input, yn]() mutable {
    Tensor& dx = input.grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += yn->grad[i] / input.value()[i];
  });
  return y;
}

inline Var square(Tape& tape, const Var& input) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = input.value()[i] * input.value()[i];
  Var y = detail::make_output(std::move(out), {&input});
  Node* yn = y.node();
  tape.record("square", {input}, y, [input, yn]() mutable {
    Tensor& dx = input.grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += 2.0 * input.value()[i] * yn->grad[i];
  });
  return y;
}

/// Clamp into [lo, hi]; gradient passes only where the input was inside the interval.
inline Var clamp(Tape& tape, const Var& input, double lo, double hi) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(input.value()[i], lo, hi);
  Var y = detail::make_output(std::move(out), {&input});
  Node* yn = y.node();
  tape.record("clamp", {input}, y, [input, yn, lo, hi]() mutable {
    Tensor& dx = input.grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const double v = input.value()[i];
      if (v >= lo && v <= hi) dx[i] += yn->grad[i];
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// Channel / reduction helpers
// ---------------------------------------------------------------------------

/// Mean over channels; output has one channel.
inline Var channel_mean(Tape& tape, const Var& input) {
  const Shape xs = input.shape();
  if (xs.c == 0) throw std::invalid_argument("channel_mean: no channels");
  Tensor out(Shape{xs.n, 1, xs.h, xs.w});
  const double inv = 1.0 / static_cast<double>(xs.c);
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      const double* src = input.value().ptr() + input.value().index(n, c, 0, 0);
      double* dst = out.ptr() + n * xs.plane();
      for (std::size_t p = 0; p < xs.plane(); ++p) dst[p] += src[p];
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= inv;
  Var y = detail::make_output(std::move(out), {&input});
  Node* yn = y.node();
  tape.record("channel_mean", {input}, y, [input, yn, inv]() mutable {
    const Shape xs = input.shape();
    Tensor& dx = input.grad_buffer();
    for (std::size_t n = 0; n < xs.n; ++n) {
      const double* src = yn->grad.ptr() + n * xs.plane();
      for (std::size_t c = 0; c < xs.c; ++c) {
        double* dst = dx.ptr() + dx.index(n, c, 0, 0);
        for (std::size_t p = 0; p < xs.plane(); ++p) dst[p] += src[p] * inv;
      }
    }
  });
  return y;
}

/// Repeats a single-channel map across `channels` channels.
inline Var broadcast_channels(Tape& tape, const Var& input, std::size_t channels) {
  const Shape xs = input.shape();
  if (xs.c != 1) {
    throw std::invalid_argument("broadcast_channels: expected one channel, got " + xs.str());
  }
  Tensor out(Shape{xs.n, channels, xs.h, xs.w});
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      std::copy_n(input.value().ptr() + n * xs.plane(), xs.plane(), out.ptr() + out.index(n, c, 0, 0));
    }
  }
  Var y = detail::make_output(std::move(out), {&input});
  Node* yn = y.node();
  tape.record("broadcast_channels", {input}, y, [input, yn, channels]() mutable {
    const Shape xs = input.shape();
    Tensor& dx = input.grad_buffer();
    for (std::size_t n = 0; n < xs.n; ++n) {
      for (std::size_t c = 0; c < channels; ++c) {
        const double* src = yn->grad.ptr() + yn->grad.index(n, c, 0, 0);
        for (std::size_t p = 0; p < xs.plane(); ++p) dx[n * xs.plane() + p] += src[p];
      }
    }
  });
  return y;
}

inline Var select_channel(Tape& tape, const Var& input, std::size_t channel) {
  const Shape xs = input.shape();
  if (channel >= xs.c) {
    throw std::invalid_argument("select_channel: channel " + std::to_string(channel) +
                                " out of range for " + xs.str());
  }
  Tensor out(Shape{xs.n, 1, xs.h, xs.w});
  for (std::size_t n = 0; n < xs.n; ++n) {
    std::copy_n(input.value().ptr() + input.value().index(n, channel, 0, 0), xs.plane(),
                out.ptr() + n * xs.plane());
  }
  Var y = detail::make_output(std::move(out), {&input});
  Node* yn = y.node();
  tape.record("select_channel", {input}, y, [input, yn, channel]() mutable {
    const Shape xs = input.shape();
    Tensor& dx = input.grad_buffer();
    for (std::size_t n = 0; n < xs.n; ++n) {
      double* dst = dx.ptr() + dx.index(n, channel, 0, 0);
      for (std::size_t p = 0; p < xs.plane(); ++p) dst[p] += yn->grad[n * xs.plane() + p];
    }
  });
  return y;
}

/// Sum over every element, producing a 1x1x1x1 scalar.
inline Var sum(Tape& tape, const Var& input) {
  Var y = detail::make_output(Tensor::scalar(input.value().sum()), {&input});
  Node* yn = y.node();
  tape.record("sum", {input}, y, [input, yn]() mutable {
    Tensor& dx = input.grad_buffer();
    const double g = yn->grad[0];
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g;
  });
  return y;
}

/// Per-batch-item sum over (C, H, W), producing N x 1 x 1 x 1.
inline Var sum_items(Tape& tape, const Var& input) {
  const Shape xs = input.shape();
  const std::size_t per = xs.c * xs.plane();
  Tensor out(Shape{xs.n, 1, 1, 1});
  for (std::size_t n = 0; n < xs.n; ++n) {
    double s = 0.0;
    for (std::size_t i = 0; i < per; ++i) s += input.value()[n * per + i];
    out[n] = s;
  }
  Var y = detail::make_output(std::move(out), {&input});
  Node* yn = y.node();
  tape.record("sum_items", {input}, y, [input, yn, per]() mutable {
    Tensor& dx = input.grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += yn->grad[i / per];
  });
  return y;
}

/// Convenience: backward from a scalar output with seed 1.
inline void backward(Tape& tape, const Var& scalar) {
  tape.backward(scalar, Tensor(scalar.shape(), 1.0));
}

}  // namespace usseg

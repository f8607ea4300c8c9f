#include "poseroi/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "poseroi/error.hpp"

namespace poseroi {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

MatrixMap as_matrix(Tensor& t, int rows, int cols) { return MatrixMap(t.ptr(), rows, cols); }
ConstMatrixMap as_matrix(const Tensor& t, int rows, int cols) { return ConstMatrixMap(t.ptr(), rows, cols); }

void require_rank(const Var& v, int rank, const char* op, const char* arg) {
  if (v.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) + ", got shape " +
                     to_string(v.shape()));
  }
}

// Geometry of a strided convolution window over one C x H x W map.
struct ConvGeometry {
  int channels, height, width, kernel, stride, padding, out_h, out_w;

  int patch() const { return channels * kernel * kernel; }
  int positions() const { return out_h * out_w; }
};

// cols: (C*k*k) x (out_h*out_w); out-of-range taps read as zero.
Tensor im2col(const Tensor& x, const ConvGeometry& g) {
  Tensor cols({g.patch(), g.positions()}, 0.0);
  double* out = cols.ptr();
  const double* in = x.ptr();
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        double* row = out + static_cast<std::size_t>((c * g.kernel + ky) * g.kernel + kx) * g.positions();
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.height) continue;
          const double* src = in + (static_cast<std::size_t>(c) * g.height + iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.padding + kx;
            if (ix >= 0 && ix < g.width) row[oy * g.out_w + ox] = src[ix];
          }
        }
      }
    }
  }
  return cols;
}

// Adjoint of im2col: scatter-adds columns back into a C x H x W map.
Tensor col2im(const Tensor& cols, const ConvGeometry& g) {
  Tensor x({g.channels, g.height, g.width}, 0.0);
  double* out = x.ptr();
  const double* in = cols.ptr();
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        const double* row = in + static_cast<std::size_t>((c * g.kernel + ky) * g.kernel + kx) * g.positions();
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.height) continue;
          double* dst = out + (static_cast<std::size_t>(c) * g.height + iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.padding + kx;
            if (ix >= 0 && ix < g.width) dst[ix] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
  return x;
}

void check_bias(const Var& bias, int channels, const char* op) {
  if (!bias.defined()) return;
  if (bias.value().rank() != 1 || bias.value().dim(0) != channels) {
    throw ShapeError(std::string(op) + ": bias must have shape [" + std::to_string(channels) + "], got " +
                     to_string(bias.shape()));
  }
}

void add_bias(Tensor& out, const Tensor& bias) {
  const int channels = out.dim(0);
  const std::size_t plane = out.size() / static_cast<std::size_t>(channels);
  for (int c = 0; c < channels; ++c) {
    double* p = out.ptr() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) p[i] += bias[static_cast<std::size_t>(c)];
  }
}

Tensor bias_grad(const Tensor& g) {
  const int channels = g.dim(0);
  const std::size_t plane = g.size() / static_cast<std::size_t>(channels);
  Tensor out({channels}, 0.0);
  for (int c = 0; c < channels; ++c) {
    double s = 0.0;
    const double* p = g.ptr() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) s += p[i];
    out[static_cast<std::size_t>(c)] = s;
  }
  return out;
}

std::vector<Var> with_optional(std::vector<Var> inputs, const Var& maybe) {
  if (maybe.defined()) inputs.push_back(maybe);
  return inputs;
}

}  // namespace

Var conv2d(const Var& input, const Var& weights, const Var& bias, int stride, int padding) {
  require_rank(input, 3, "conv2d", "input");
  require_rank(weights, 4, "conv2d", "weights");
  const Tensor& x = input.value();
  const Tensor& w = weights.value();
  const int cout = w.dim(0);
  const int k = w.dim(2);
  if (w.dim(1) != x.dim(0)) {
    throw ShapeError("conv2d: input channels (dimension 0) is " + std::to_string(x.dim(0)) +
                     " but weights expect " + std::to_string(w.dim(1)));
  }
  if (w.dim(3) != k || k % 2 == 0) {
    throw ShapeError("conv2d: kernel must be square with odd size, got " + to_string(w.shape()));
  }
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (padding < 0) throw ShapeError("conv2d: padding must be >= 0");
  check_bias(bias, cout, "conv2d");
  const int out_h = (x.dim(1) + 2 * padding - k) / stride + 1;
  const int out_w = (x.dim(2) + 2 * padding - k) / stride + 1;
  if (x.dim(1) + 2 * padding < k) throw ShapeError("conv2d: input height smaller than kernel");
  if (x.dim(2) + 2 * padding < k) throw ShapeError("conv2d: input width smaller than kernel");

  const ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), k, stride, padding, out_h, out_w};
  Tensor cols = im2col(x, g);
  Tensor out({cout, out_h, out_w});
  as_matrix(out, cout, g.positions()).noalias() =
      as_matrix(w, cout, g.patch()) * as_matrix(cols, g.patch(), g.positions());
  if (bias.defined()) add_bias(out, bias.value());

  const bool keep_cols = weights.requires_grad();
  return Var::make(std::move(out), with_optional({input, weights}, bias),
                   [g, cout, cols = keep_cols ? std::move(cols) : Tensor()](detail::Node& self) {
                     const Tensor& gout = self.grad;
                     auto& in = *self.inputs[0];
                     auto& wt = *self.inputs[1];
                     const auto gmat = as_matrix(gout, cout, g.positions());
                     if (in.requires_grad) {
                       Tensor dcols({g.patch(), g.positions()});
                       as_matrix(dcols, g.patch(), g.positions()).noalias() =
                           as_matrix(wt.value, cout, g.patch()).transpose() * gmat;
                       accumulate_grad(in, col2im(dcols, g));
                     }
                     if (wt.requires_grad) {
                       Tensor dw(wt.value.shape());
                       as_matrix(dw, cout, g.patch()).noalias() =
                           gmat * as_matrix(cols, g.patch(), g.positions()).transpose();
                       accumulate_grad(wt, std::move(dw));
                     }
                     if (self.inputs.size() > 2) accumulate_grad(*self.inputs[2], bias_grad(gout));
                   });
}

Var conv_transpose2d(const Var& input, const Var& weights, const Var& bias, int stride, int padding) {
  require_rank(input, 3, "conv_transpose2d", "input");
  require_rank(weights, 4, "conv_transpose2d", "weights");
  const Tensor& x = input.value();
  const Tensor& w = weights.value();
  const int cin = w.dim(0);
  const int cout = w.dim(1);
  const int k = w.dim(2);
  if (cin != x.dim(0)) {
    throw ShapeError("conv_transpose2d: input channels (dimension 0) is " + std::to_string(x.dim(0)) +
                     " but weights expect " + std::to_string(cin));
  }
  if (w.dim(3) != k) throw ShapeError("conv_transpose2d: kernel must be square, got " + to_string(w.shape()));
  if (stride < 1) throw ShapeError("conv_transpose2d: stride must be >= 1");
  if (padding < 0) throw ShapeError("conv_transpose2d: padding must be >= 0");
  check_bias(bias, cout, "conv_transpose2d");
  const int out_h = (x.dim(1) - 1) * stride - 2 * padding + k;
  const int out_w = (x.dim(2) - 1) * stride - 2 * padding + k;
  if (out_h < 1 || out_w < 1) throw ShapeError("conv_transpose2d: padding too large for input");

  // The forward pass is the input-gradient path of a conv2d mapping the
  // cout-channel output map back to x's grid.
  const ConvGeometry g{cout, out_h, out_w, k, stride, padding, x.dim(1), x.dim(2)};
  Tensor cols({g.patch(), g.positions()});
  as_matrix(cols, g.patch(), g.positions()).noalias() =
      as_matrix(w, cin, g.patch()).transpose() * as_matrix(x, cin, g.positions());
  Tensor out = col2im(cols, g);
  if (bias.defined()) add_bias(out, bias.value());

  return Var::make(std::move(out), with_optional({input, weights}, bias), [g, cin](detail::Node& self) {
    auto& in = *self.inputs[0];
    auto& wt = *self.inputs[1];
    const Tensor gcols = im2col(self.grad, g);
    const auto gmat = as_matrix(gcols, g.patch(), g.positions());
    if (in.requires_grad) {
      Tensor dx(in.value.shape());
      as_matrix(dx, cin, g.positions()).noalias() = as_matrix(wt.value, cin, g.patch()) * gmat;
      accumulate_grad(in, std::move(dx));
    }
    if (wt.requires_grad) {
      Tensor dw(wt.value.shape());
      as_matrix(dw, cin, g.patch()).noalias() = as_matrix(in.value, cin, g.positions()) * gmat.transpose();
      accumulate_grad(wt, std::move(dw));
    }
    if (self.inputs.size() > 2) accumulate_grad(*self.inputs[2], bias_grad(self.grad));
  });
}

namespace {
thread_local ReluProbe* active_probe = nullptr;
}

ReluProbe::ReluProbe()
    : margin_(std::numeric_limits<double>::infinity()), pattern_(14695981039346656037ull), outer_(active_probe) {
  active_probe = this;
}

ReluProbe::~ReluProbe() { active_probe = outer_; }

void ReluProbe::observe(std::span<const double> inputs) {
  for (double v : inputs) {
    margin_ = std::min(margin_, std::abs(v));
    pattern_ = (pattern_ ^ (v > 0.0 ? 1u : 0u)) * 1099511628211ull;
  }
  if (outer_) outer_->observe(inputs);
}

Var relu(const Var& x) {
  Tensor out = x.value();
  if (active_probe) active_probe->observe(out.data());
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return Var::make(std::move(out), {x}, [](detail::Node& self) {
    auto& in = *self.inputs[0];
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!(in.value[i] > 0.0)) g[i] = 0.0;
    }
    accumulate_grad(in, std::move(g));
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor out = a.value();
  out.accumulate(b.value());
  return Var::make(std::move(out), {a, b}, [](detail::Node& self) {
    accumulate_grad(*self.inputs[0], self.grad);
    accumulate_grad(*self.inputs[1], self.grad);
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  return Var::make(std::move(out), {a}, [s](detail::Node& self) {
    Tensor g = self.grad;
    for (double& v : g.data()) v *= s;
    accumulate_grad(*self.inputs[0], std::move(g));
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return Var::make(std::move(out), {a, b}, [](detail::Node& self) {
    auto& lhs = *self.inputs[0];
    auto& rhs = *self.inputs[1];
    if (lhs.requires_grad) {
      Tensor g = self.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= rhs.value[i];
      accumulate_grad(lhs, std::move(g));
    }
    if (rhs.requires_grad) {
      Tensor g = self.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= lhs.value[i];
      accumulate_grad(rhs, std::move(g));
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul", "lhs");
  require_rank(b, 2, "matmul", "rhs");
  const int m = a.value().dim(0);
  const int k = a.value().dim(1);
  const int n = b.value().dim(1);
  if (b.value().dim(0) != k) {
    throw ShapeError("matmul: inner extents differ (lhs dimension 1 is " + std::to_string(k) +
                     ", rhs dimension 0 is " + std::to_string(b.value().dim(0)) + ")");
  }
  Tensor out({m, n});
  as_matrix(out, m, n).noalias() = as_matrix(a.value(), m, k) * as_matrix(b.value(), k, n);
  return Var::make(std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& lhs = *self.inputs[0];
    auto& rhs = *self.inputs[1];
    const auto g = as_matrix(self.grad, m, n);
    if (lhs.requires_grad) {
      Tensor da({m, k});
      as_matrix(da, m, k).noalias() = g * as_matrix(rhs.value, k, n).transpose();
      accumulate_grad(lhs, std::move(da));
    }
    if (rhs.requires_grad) {
      Tensor db({k, n});
      as_matrix(db, k, n).noalias() = as_matrix(lhs.value, m, k).transpose() * g;
      accumulate_grad(rhs, std::move(db));
    }
  });
}

namespace {

Tensor transposed(const Tensor& t) {
  const int r = t.dim(0);
  const int c = t.dim(1);
  Tensor out({c, r});
  as_matrix(out, c, r) = as_matrix(t, r, c).transpose();
  return out;
}

}  // namespace

Var transpose(const Var& a) {
  require_rank(a, 2, "transpose", "input");
  return Var::make(transposed(a.value()), {a},
                   [](detail::Node& self) { accumulate_grad(*self.inputs[0], transposed(self.grad)); });
}

Var reshape(const Var& a, Shape shape) {
  if (element_count(shape) != a.value().size()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  return Var::make(a.value().reshaped(std::move(shape)), {a}, [](detail::Node& self) {
    auto& in = *self.inputs[0];
    accumulate_grad(in, self.grad.reshaped(in.value.shape()));
  });
}

Var slice_rows(const Var& a, int begin, int end) {
  require_rank(a, 2, "slice_rows", "input");
  const int rows = a.value().dim(0);
  const int cols = a.value().dim(1);
  if (begin < 0 || end > rows || begin >= end) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for dimension 0 of extent " + std::to_string(rows));
  }
  const auto first = a.value().values().begin() + static_cast<std::ptrdiff_t>(begin) * cols;
  std::vector<double> data(first, first + static_cast<std::ptrdiff_t>(end - begin) * cols);
  return Var::make(Tensor({end - begin, cols}, std::move(data)), {a}, [begin, cols](detail::Node& self) {
    auto& in = *self.inputs[0];
    Tensor g(in.value.shape(), 0.0);
    std::copy(self.grad.data().begin(), self.grad.data().end(),
              g.data().begin() + static_cast<std::ptrdiff_t>(begin) * cols);
    accumulate_grad(in, std::move(g));
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const int cols = parts.front().value().dim(1);
  int rows = 0;
  std::vector<double> data;
  for (const Var& p : parts) {
    require_rank(p, 2, "concat_rows", "part");
    if (p.value().dim(1) != cols) {
      throw ShapeError("concat_rows: dimension 1 differs (" + std::to_string(p.value().dim(1)) + " vs " +
                       std::to_string(cols) + ")");
    }
    rows += p.value().dim(0);
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  }
  return Var::make(Tensor({rows, cols}, std::move(data)), parts, [](detail::Node& self) {
    std::size_t offset = 0;
    for (auto& in : self.inputs) {
      const std::size_t n = in->value.size();
      if (in->requires_grad) {
        std::vector<double> g(self.grad.data().begin() + static_cast<std::ptrdiff_t>(offset),
                              self.grad.data().begin() + static_cast<std::ptrdiff_t>(offset + n));
        accumulate_grad(*in, Tensor(in->value.shape(), std::move(g)));
      }
      offset += n;
    }
  });
}

namespace {

// Softmax over consecutive groups of `group` elements, with max subtraction.
Tensor grouped_softmax(const Tensor& logits, std::size_t group) {
  Tensor out = logits;
  const auto n = static_cast<Eigen::Index>(group);
  // Evaluated in an Eigen-owned (aligned) buffer: vectorized exp and sum
  // then split head and tail by size alone, never by where the tensor lives.
  Eigen::ArrayXd e(n);
  for (std::size_t start = 0; start < out.size(); start += group) {
    Eigen::Map<Eigen::ArrayXd> p(out.ptr() + start, n);
    e = (p - p.maxCoeff()).exp();
    p = e / e.sum();
  }
  return out;
}

// d logits = y * (g - <g, y>) per group.
Tensor grouped_softmax_backward(const Tensor& y, const Tensor& g, std::size_t group) {
  Tensor out(y.shape());
  for (std::size_t start = 0; start < y.size(); start += group) {
    double inner = 0.0;
    for (std::size_t i = start; i < start + group; ++i) inner += g[i] * y[i];
    for (std::size_t i = start; i < start + group; ++i) out[i] = y[i] * (g[i] - inner);
  }
  return out;
}

Var grouped_softmax_var(const Var& logits, std::size_t group) {
  Tensor out = grouped_softmax(logits.value(), group);
  Tensor saved = out;
  return Var::make(std::move(out), {logits}, [group, y = std::move(saved)](detail::Node& self) {
    accumulate_grad(*self.inputs[0], grouped_softmax_backward(y, self.grad, group));
  });
}

}  // namespace

Var softmax_rows(const Var& logits) {
  require_rank(logits, 2, "softmax_rows", "logits");
  return grouped_softmax_var(logits, static_cast<std::size_t>(logits.value().dim(1)));
}

Var softmax_spatial(const Var& logits) {
  require_rank(logits, 3, "softmax_spatial", "logits");
  return grouped_softmax_var(logits, static_cast<std::size_t>(logits.value().dim(1)) * logits.value().dim(2));
}

namespace {

// Two-tap linear interpolation weights for one output coordinate.
struct Taps {
  int lo, hi;
  double w_lo, w_hi;
};

std::vector<Taps> upsample_taps(int in_extent, int factor) {
  std::vector<Taps> taps(static_cast<std::size_t>(in_extent) * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
    if (src < 0.0) src = 0.0;
    int lo = static_cast<int>(std::floor(src));
    if (lo > in_extent - 1) lo = in_extent - 1;
    const int hi = std::min(lo + 1, in_extent - 1);
    const double frac = src - lo;
    taps[o] = {lo, hi, 1.0 - frac, frac};
  }
  return taps;
}

}  // namespace

Var bilinear_upsample(const Var& input, int factor) {
  require_rank(input, 3, "bilinear_upsample", "input");
  if (factor < 1) throw ShapeError("bilinear_upsample: factor must be >= 1");
  if (factor == 1) return input;
  const Tensor& x = input.value();
  const int channels = x.dim(0);
  const int h = x.dim(1);
  const int w = x.dim(2);
  auto ty = upsample_taps(h, factor);
  auto tx = upsample_taps(w, factor);
  const int oh = h * factor;
  const int ow = w * factor;
  Tensor out({channels, oh, ow});
  for (int c = 0; c < channels; ++c) {
    for (int oy = 0; oy < oh; ++oy) {
      const Taps& a = ty[static_cast<std::size_t>(oy)];
      for (int ox = 0; ox < ow; ++ox) {
        const Taps& b = tx[static_cast<std::size_t>(ox)];
        out.at(c, oy, ox) = a.w_lo * (b.w_lo * x.at(c, a.lo, b.lo) + b.w_hi * x.at(c, a.lo, b.hi)) +
                            a.w_hi * (b.w_lo * x.at(c, a.hi, b.lo) + b.w_hi * x.at(c, a.hi, b.hi));
      }
    }
  }
  return Var::make(std::move(out), {input},
                   [ty = std::move(ty), tx = std::move(tx), channels, oh, ow](detail::Node& self) {
                     auto& in = *self.inputs[0];
                     Tensor dx(in.value.shape(), 0.0);
                     const Tensor& g = self.grad;
                     for (int c = 0; c < channels; ++c) {
                       for (int oy = 0; oy < oh; ++oy) {
                         const Taps& a = ty[static_cast<std::size_t>(oy)];
                         for (int ox = 0; ox < ow; ++ox) {
                           const Taps& b = tx[static_cast<std::size_t>(ox)];
                           const double v = g.at(c, oy, ox);
                           dx.at(c, a.lo, b.lo) += a.w_lo * b.w_lo * v;
                           dx.at(c, a.lo, b.hi) += a.w_lo * b.w_hi * v;
                           dx.at(c, a.hi, b.lo) += a.w_hi * b.w_lo * v;
                           dx.at(c, a.hi, b.hi) += a.w_hi * b.w_hi * v;
                         }
                       }
                     }
                     accumulate_grad(in, std::move(dx));
                   });
}

Var broadcast_sum_hw(const Var& rows, const Var& cols) {
  require_rank(rows, 2, "broadcast_sum_hw", "rows");
  require_rank(cols, 2, "broadcast_sum_hw", "cols");
  const int c = rows.value().dim(0);
  const int h = rows.value().dim(1);
  const int w = cols.value().dim(1);
  if (cols.value().dim(0) != c) {
    throw ShapeError("broadcast_sum_hw: dimension 0 differs (" + std::to_string(c) + " vs " +
                     std::to_string(cols.value().dim(0)) + ")");
  }
  Tensor out({c, h * w});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        out[static_cast<std::size_t>(ch) * h * w + y * w + x] =
            rows.value()[static_cast<std::size_t>(ch) * h + y] + cols.value()[static_cast<std::size_t>(ch) * w + x];
      }
    }
  }
  return Var::make(std::move(out), {rows, cols}, [c, h, w](detail::Node& self) {
    Tensor gr({c, h}, 0.0);
    Tensor gc({c, w}, 0.0);
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double v = self.grad[static_cast<std::size_t>(ch) * h * w + y * w + x];
          gr[static_cast<std::size_t>(ch) * h + y] += v;
          gc[static_cast<std::size_t>(ch) * w + x] += v;
        }
      }
    }
    accumulate_grad(*self.inputs[0], std::move(gr));
    accumulate_grad(*self.inputs[1], std::move(gc));
  });
}

Var sum(const Var& a) {
  return Var::make(Tensor::scalar(sum(a.value())), {a}, [](detail::Node& self) {
    auto& in = *self.inputs[0];
    accumulate_grad(in, Tensor(in.value.shape(), self.grad[0]));
  });
}

Var weighted_sum(const Var& a, const Tensor& weights) {
  return Var::make(Tensor::scalar(dot(a.value(), weights)), {a}, [weights](detail::Node& self) {
    Tensor g = weights;
    for (double& v : g.data()) v *= self.grad[0];
    accumulate_grad(*self.inputs[0], std::move(g));
  });
}

}  // namespace poseroi

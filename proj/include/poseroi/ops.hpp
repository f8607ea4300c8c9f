#pragma once

#include <cstdint>
#include <span>

#include "poseroi/autograd.hpp"

namespace poseroi {

// Differentiable operators. Feature maps are C x H x W; matrices are rank 2.
// Shape violations raise ShapeError naming the offending dimension.

/// Cross-correlation. weights: Cout x Cin x k x k (k odd); bias: Cout, or an
/// undefined Var for no bias. Output extent floor((H + 2p - k) / s) + 1.
Var conv2d(const Var& input, const Var& weights, const Var& bias, int stride, int padding);

/// Adjoint of conv2d with the same weight tensor, read as Cin x Cout x k x k
/// (input channels first). Output extent (H - 1) * s - 2p + k.
Var conv_transpose2d(const Var& input, const Var& weights, const Var& bias, int stride, int padding = 0);

Var relu(const Var& x);

/// While alive, watches every relu evaluated on this thread: the smallest
/// |input| and a hash of which inputs were positive. Two evaluations with equal
/// patterns took the same linear piece.
class ReluProbe {
 public:
  ReluProbe();
  ~ReluProbe();
  ReluProbe(const ReluProbe&) = delete;
  ReluProbe& operator=(const ReluProbe&) = delete;

  double margin() const { return margin_; }
  std::uint64_t pattern() const { return pattern_; }
  void observe(std::span<const double> inputs);

 private:
  double margin_;
  std::uint64_t pattern_;
  ReluProbe* outer_;
};

Var add(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// Elementwise product.
Var mul(const Var& a, const Var& b);
/// (m x k) * (k x n).
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);
/// Rows [begin, end) of a rank-2 tensor.
Var slice_rows(const Var& a, int begin, int end);
/// Stacks rank-2 tensors with equal column counts on top of each other.
Var concat_rows(const std::vector<Var>& parts);

/// Softmax along the last axis of a rank-2 tensor (one distribution per row).
Var softmax_rows(const Var& logits);
/// Per-channel softmax over all H x W positions of a K x H x W tensor.
Var softmax_spatial(const Var& logits);

/// Half-pixel (align-corners-false) bilinear upsampling of C x H x W by an
/// integer factor. Source coordinates below zero clamp to the first row or
/// column, as in the usual framework convention.
Var bilinear_upsample(const Var& input, int factor);

/// rows C x h and cols C x w -> C x (h*w) with out[c][y*w + x] = rows[c][y] + cols[c][x].
Var broadcast_sum_hw(const Var& rows, const Var& cols);

/// Sum of all elements as a 1-element tensor.
Var sum(const Var& a);
/// sum(a * weights) with constant weights.
Var weighted_sum(const Var& a, const Tensor& weights);

}  // namespace poseroi

#pragma once

#include <cstddef>
#include <random>

#include "apnea/tensor.hpp"

namespace apnea::nn {

enum class Mode { train, eval };

// Convolutional ops work on [N, C, T]; recurrent ops on [N, T, F].

/// Per-channel dilated convolution (cross-correlation) with same-length zero
/// padding of dilation*(k-1)/2 per side. weights: [C, k], k odd.
Var depthwise_conv1d(const Var& x, const Var& weights, std::size_t dilation);

/// 1x1 convolution: y[n,o,t] = bias[o] + sum_i w[o,i] x[n,i,t]. weights: [Cout, Cin], bias: [Cout].
Var pointwise_conv1d(const Var& x, const Var& weights, const Var& bias);

struct BatchNormStats {
  Tensor running_mean; ///< [C]
  Tensor running_var;  ///< [C]
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean(Shape{channels}, 0.0), running_var(Shape{channels}, 1.0) {}
};

/// Batch normalization over the N and T axes of [N, C, T]. Train mode uses
/// the batch statistics (biased variance) and updates the running estimates
/// (unbiased variance); eval mode reads the running estimates only.
/// Throws InputError for a train-mode batch of size 1.
Var batchnorm1d(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats, Mode mode);
Var batchnorm1d_eval(const Var& x, const Var& gamma, const Var& beta, const BatchNormStats& stats);

Var relu(const Var& x);

/// Zeroes whole (sample, channel) rows of [N, C, T] with probability `rate`
/// and scales survivors by 1/(1-rate). Identity in eval mode or at rate 0.
Var spatial_dropout(const Var& x, double rate, Mode mode, std::mt19937_64& rng);

/// Non-overlapping mean over windows of k along T. Throws ShapeError unless k divides T.
Var avg_pool1d(const Var& x, std::size_t k);

Var add(const Var& a, const Var& b);

/// [N, C, T] -> [N, T, C]
Var transpose_ct(const Var& x);

/// Reshape with unchanged element order.
Var reshape(const Var& x, Shape shape);

/// [N, T, Fa] ++ [N, T, Fb] -> [N, T, Fa+Fb]
Var concat_features(const Var& a, const Var& b);

/// [N, T, F] -> [N, len, F] starting at `start`.
Var slice_time(const Var& x, std::size_t start, std::size_t len);

/// Affine map over the last axis: [..., F] x [O, F] + [O] -> [..., O].
Var linear(const Var& x, const Var& weights, const Var& bias);

/// Single-direction LSTM over [N, T, F] with zero initial state. Gate rows of
/// w_ih [4H, F], w_hh [4H, H] and bias [4H] are ordered input, forget, cell,
/// output. `reverse` runs from T-1 down to 0; outputs stay at their own step.
Var lstm(const Var& x, const Var& w_ih, const Var& w_hh, const Var& bias, bool reverse);

/// Mean of w(y) * max(0, 1 - y s)^2 with w(+1) = w_pos, w(-1) = 1.
/// labels: same shape as scores, every entry +1 or -1 (InputError otherwise).
Var weighted_squared_hinge(const Var& scores, const Tensor& labels, double w_pos);

/// sum_i x_i * w_i, a scalar. Handy as a generic loss in gradient checks.
Var dot(const Var& x, const Tensor& w);

} // namespace apnea::nn

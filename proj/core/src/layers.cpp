#include "apnea/layers.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "apnea/errors.hpp"

namespace apnea::nn {

namespace {

void expect_rank(const Var& v, std::size_t rank, const char* op, const char* what) {
  if (v.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                     to_string(v.shape()));
  }
}

bool wants_grad(const Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }

double sigmoid(double x) noexcept { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace

Var depthwise_conv1d(const Var& x, const Var& weights, std::size_t dilation) {
  expect_rank(x, 3, "depthwise_conv1d", "input");
  expect_rank(weights, 2, "depthwise_conv1d", "weights");
  const std::size_t n = x.shape()[0], c = x.shape()[1], t_len = x.shape()[2];
  const std::size_t k = weights.shape()[1];
  if (weights.shape()[0] != c) {
    throw ShapeError("depthwise_conv1d: weights " + to_string(weights.shape()) + " vs " + std::to_string(c) +
                     " channels");
  }
  if (k % 2 == 0) {
    throw SpecError("depthwise_conv1d: kernel size must be odd, got " + std::to_string(k));
  }
  if (dilation == 0) {
    throw SpecError("depthwise_conv1d: dilation must be positive");
  }
  const long pad = static_cast<long>(dilation * (k - 1) / 2);
  const long T = static_cast<long>(t_len);

  Tensor y({n, c, t_len}, 0.0);
  const double* xd = x.value().data();
  const double* wd = weights.value().data();
  double* yd = y.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* xr = xd + (b * c + ch) * t_len;
      double* yr = yd + (b * c + ch) * t_len;
      for (std::size_t j = 0; j < k; ++j) {
        const double wj = wd[ch * k + j];
        const long off = static_cast<long>(dilation * j) - pad;
        const long lo = std::max(0L, -off), hi = std::min(T, T - off);
        for (long t = lo; t < hi; ++t) {
          yr[t] += wj * xr[t + off];
        }
      }
    }
  }

  return make_op(std::move(y), {x, weights}, [n, c, t_len, k, dilation, pad, T](Node& self) {
    const double* gy = self.grad.data();
    const Node& xn = *self.inputs[0];
    const Node& wn = *self.inputs[1];
    const double* xv = xn.value.data();
    const double* wv = wn.value.data();
    double* gx = wants_grad(self, 0) ? self.inputs[0]->grad_buffer().data() : nullptr;
    double* gw = wants_grad(self, 1) ? self.inputs[1]->grad_buffer().data() : nullptr;
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t row = (b * c + ch) * t_len;
        for (std::size_t j = 0; j < k; ++j) {
          const long off = static_cast<long>(dilation * j) - pad;
          const long lo = std::max(0L, -off), hi = std::min(T, T - off);
          if (gx) {
            const double wj = wv[ch * k + j];
            for (long t = lo; t < hi; ++t) {
              gx[row + static_cast<std::size_t>(t + off)] += wj * gy[row + static_cast<std::size_t>(t)];
            }
          }
          if (gw) {
            double acc = 0.0;
            for (long t = lo; t < hi; ++t) {
              acc += gy[row + static_cast<std::size_t>(t)] * xv[row + static_cast<std::size_t>(t + off)];
            }
            gw[ch * k + j] += acc;
          }
        }
      }
    }
  });
}

Var pointwise_conv1d(const Var& x, const Var& weights, const Var& bias) {
  expect_rank(x, 3, "pointwise_conv1d", "input");
  expect_rank(weights, 2, "pointwise_conv1d", "weights");
  const std::size_t n = x.shape()[0], cin = x.shape()[1], t_len = x.shape()[2];
  const std::size_t cout = weights.shape()[0];
  if (weights.shape()[1] != cin || bias.value().size() != cout) {
    throw ShapeError("pointwise_conv1d: input " + to_string(x.shape()) + ", weights " + to_string(weights.shape()) +
                     ", bias " + to_string(bias.shape()));
  }
  Tensor y({n, cout, t_len});
  const double* xd = x.value().data();
  const double* wd = weights.value().data();
  const double* bd = bias.value().data();
  double* yd = y.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t o = 0; o < cout; ++o) {
      double* yr = yd + (b * cout + o) * t_len;
      std::fill(yr, yr + t_len, bd[o]);
      for (std::size_t i = 0; i < cin; ++i) {
        const double w = wd[o * cin + i];
        const double* xr = xd + (b * cin + i) * t_len;
        for (std::size_t t = 0; t < t_len; ++t) {
          yr[t] += w * xr[t];
        }
      }
    }
  }
  return make_op(std::move(y), {x, weights, bias}, [n, cin, cout, t_len](Node& self) {
    const double* gy = self.grad.data();
    const double* xv = self.inputs[0]->value.data();
    const double* wv = self.inputs[1]->value.data();
    if (wants_grad(self, 0)) {
      double* gx = self.inputs[0]->grad_buffer().data();
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t i = 0; i < cin; ++i) {
          double* gxr = gx + (b * cin + i) * t_len;
          for (std::size_t o = 0; o < cout; ++o) {
            const double w = wv[o * cin + i];
            const double* gyr = gy + (b * cout + o) * t_len;
            for (std::size_t t = 0; t < t_len; ++t) {
              gxr[t] += w * gyr[t];
            }
          }
        }
      }
    }
    if (wants_grad(self, 1)) {
      double* gw = self.inputs[1]->grad_buffer().data();
      for (std::size_t o = 0; o < cout; ++o) {
        for (std::size_t i = 0; i < cin; ++i) {
          double acc = 0.0;
          for (std::size_t b = 0; b < n; ++b) {
            const double* gyr = gy + (b * cout + o) * t_len;
            const double* xr = xv + (b * cin + i) * t_len;
            for (std::size_t t = 0; t < t_len; ++t) {
              acc += gyr[t] * xr[t];
            }
          }
          gw[o * cin + i] += acc;
        }
      }
    }
    if (wants_grad(self, 2)) {
      double* gb = self.inputs[2]->grad_buffer().data();
      for (std::size_t o = 0; o < cout; ++o) {
        double acc = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
          const double* gyr = gy + (b * cout + o) * t_len;
          for (std::size_t t = 0; t < t_len; ++t) {
            acc += gyr[t];
          }
        }
        gb[o] += acc;
      }
    }
  });
}

namespace {

/// Shared by both modes: y = gamma * (x - mean) * invstd + beta. The backward
/// closure needs to know whether mean/invstd depend on x (train) or not (eval).
Var batchnorm_apply(const Var& x, const Var& gamma, const Var& beta, std::vector<double> mean,
                    std::vector<double> invstd, bool batch_stats) {
  const std::size_t n = x.shape()[0], c = x.shape()[1], t_len = x.shape()[2];
  Tensor y(x.shape());
  const double* xd = x.value().data();
  const double* gd = gamma.value().data();
  const double* bd = beta.value().data();
  double* yd = y.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double scale = gd[ch] * invstd[ch];
      const double shift = bd[ch] - mean[ch] * scale;
      const double* xr = xd + (b * c + ch) * t_len;
      double* yr = yd + (b * c + ch) * t_len;
      for (std::size_t t = 0; t < t_len; ++t) {
        yr[t] = xr[t] * scale + shift;
      }
    }
  }
  return make_op(std::move(y), {x, gamma, beta},
                 [n, c, t_len, mean = std::move(mean), invstd = std::move(invstd), batch_stats](Node& self) {
                   const double* gy = self.grad.data();
                   const double* xv = self.inputs[0]->value.data();
                   const double* gv = self.inputs[1]->value.data();
                   const double m = static_cast<double>(n * t_len);
                   std::vector<double> sum_gy(c, 0.0), sum_gy_xhat(c, 0.0);
                   for (std::size_t b = 0; b < n; ++b) {
                     for (std::size_t ch = 0; ch < c; ++ch) {
                       const std::size_t row = (b * c + ch) * t_len;
                       double s = 0.0, sx = 0.0;
                       for (std::size_t t = 0; t < t_len; ++t) {
                         const double xhat = (xv[row + t] - mean[ch]) * invstd[ch];
                         s += gy[row + t];
                         sx += gy[row + t] * xhat;
                       }
                       sum_gy[ch] += s;
                       sum_gy_xhat[ch] += sx;
                     }
                   }
                   if (wants_grad(self, 0)) {
                     double* gx = self.inputs[0]->grad_buffer().data();
                     for (std::size_t b = 0; b < n; ++b) {
                       for (std::size_t ch = 0; ch < c; ++ch) {
                         const std::size_t row = (b * c + ch) * t_len;
                         const double k = gv[ch] * invstd[ch];
                         if (batch_stats) {
                           const double mean_gy = sum_gy[ch] / m;
                           const double mean_gy_xhat = sum_gy_xhat[ch] / m;
                           for (std::size_t t = 0; t < t_len; ++t) {
                             const double xhat = (xv[row + t] - mean[ch]) * invstd[ch];
                             gx[row + t] += k * (gy[row + t] - mean_gy - xhat * mean_gy_xhat);
                           }
                         } else {
                           for (std::size_t t = 0; t < t_len; ++t) {
                             gx[row + t] += k * gy[row + t];
                           }
                         }
                       }
                     }
                   }
                   if (wants_grad(self, 1)) {
                     double* gg = self.inputs[1]->grad_buffer().data();
                     for (std::size_t ch = 0; ch < c; ++ch) {
                       gg[ch] += sum_gy_xhat[ch];
                     }
                   }
                   if (wants_grad(self, 2)) {
                     double* gb = self.inputs[2]->grad_buffer().data();
                     for (std::size_t ch = 0; ch < c; ++ch) {
                       gb[ch] += sum_gy[ch];
                     }
                   }
                 });
}

void check_batchnorm_shapes(const Var& x, const Var& gamma, const Var& beta, const BatchNormStats& stats) {
  expect_rank(x, 3, "batchnorm1d", "input");
  const std::size_t c = x.shape()[1];
  if (gamma.value().size() != c || beta.value().size() != c || stats.running_mean.size() != c ||
      stats.running_var.size() != c) {
    throw ShapeError("batchnorm1d: parameters do not match " + std::to_string(c) + " channels");
  }
}

} // namespace

Var batchnorm1d_eval(const Var& x, const Var& gamma, const Var& beta, const BatchNormStats& stats) {
  check_batchnorm_shapes(x, gamma, beta, stats);
  const std::size_t c = x.shape()[1];
  std::vector<double> mean(c), invstd(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    mean[ch] = stats.running_mean[ch];
    invstd[ch] = 1.0 / std::sqrt(stats.running_var[ch] + stats.eps);
  }
  return batchnorm_apply(x, gamma, beta, std::move(mean), std::move(invstd), false);
}

Var batchnorm1d(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats, Mode mode) {
  if (mode == Mode::eval) {
    return batchnorm1d_eval(x, gamma, beta, stats);
  }
  check_batchnorm_shapes(x, gamma, beta, stats);
  const std::size_t n = x.shape()[0], c = x.shape()[1], t_len = x.shape()[2];
  if (n < 2) {
    throw InputError("batchnorm1d: train mode needs a batch of at least 2 instances");
  }
  const double m = static_cast<double>(n * t_len);
  const double* xd = x.value().data();
  std::vector<double> mean(c, 0.0), var(c, 0.0), invstd(c);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* xr = xd + (b * c + ch) * t_len;
      double s = 0.0;
      for (std::size_t t = 0; t < t_len; ++t) {
        s += xr[t];
      }
      mean[ch] += s;
    }
  }
  for (auto& v : mean) {
    v /= m;
  }
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* xr = xd + (b * c + ch) * t_len;
      double s = 0.0;
      for (std::size_t t = 0; t < t_len; ++t) {
        const double d = xr[t] - mean[ch];
        s += d * d;
      }
      var[ch] += s;
    }
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    var[ch] /= m;
    invstd[ch] = 1.0 / std::sqrt(var[ch] + stats.eps);
    stats.running_mean[ch] = (1.0 - stats.momentum) * stats.running_mean[ch] + stats.momentum * mean[ch];
    stats.running_var[ch] =
        (1.0 - stats.momentum) * stats.running_var[ch] + stats.momentum * var[ch] * m / (m - 1.0);
  }
  return batchnorm_apply(x, gamma, beta, std::move(mean), std::move(invstd), true);
}

Var relu(const Var& x) {
  Tensor y(x.shape());
  const double* xd = x.value().data();
  double* yd = y.data();
  for (std::size_t i = 0; i < y.size(); ++i) {
    yd[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  }
  return make_op(std::move(y), {x}, [](Node& self) {
    const double* gy = self.grad.data();
    const double* yv = self.value.data();
    double* gx = self.inputs[0]->grad_buffer().data();
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      if (yv[i] > 0.0) {
        gx[i] += gy[i];
      }
    }
  });
}

Var spatial_dropout(const Var& x, double rate, Mode mode, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw InputError("spatial_dropout: rate must be in [0, 1)");
  }
  if (mode == Mode::eval || rate == 0.0) {
    return x;
  }
  expect_rank(x, 3, "spatial_dropout", "input");
  const std::size_t rows = x.shape()[0] * x.shape()[1], t_len = x.shape()[2];
  const double scale = 1.0 / (1.0 - rate);
  std::bernoulli_distribution keep(1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(rows);
  for (auto& m : *mask) {
    m = keep(rng) ? scale : 0.0;
  }
  Tensor y(x.shape());
  const double* xd = x.value().data();
  double* yd = y.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double m = (*mask)[r];
    for (std::size_t t = 0; t < t_len; ++t) {
      yd[r * t_len + t] = xd[r * t_len + t] * m;
    }
  }
  return make_op(std::move(y), {x}, [mask, rows, t_len](Node& self) {
    const double* gy = self.grad.data();
    double* gx = self.inputs[0]->grad_buffer().data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double m = (*mask)[r];
      if (m == 0.0) {
        continue;
      }
      for (std::size_t t = 0; t < t_len; ++t) {
        gx[r * t_len + t] += gy[r * t_len + t] * m;
      }
    }
  });
}

Var avg_pool1d(const Var& x, std::size_t k) {
  expect_rank(x, 3, "avg_pool1d", "input");
  const std::size_t rows = x.shape()[0] * x.shape()[1], t_len = x.shape()[2];
  if (k == 0 || t_len % k != 0) {
    throw ShapeError("avg_pool1d: pool " + std::to_string(k) + " does not divide length " + std::to_string(t_len));
  }
  const std::size_t out_len = t_len / k;
  const double inv = 1.0 / static_cast<double>(k);
  Tensor y({x.shape()[0], x.shape()[1], out_len});
  const double* xd = x.value().data();
  double* yd = y.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < out_len; ++o) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        s += xd[r * t_len + o * k + j];
      }
      yd[r * out_len + o] = s * inv;
    }
  }
  return make_op(std::move(y), {x}, [rows, t_len, out_len, k, inv](Node& self) {
    const double* gy = self.grad.data();
    double* gx = self.inputs[0]->grad_buffer().data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t o = 0; o < out_len; ++o) {
        const double g = gy[r * out_len + o] * inv;
        for (std::size_t j = 0; j < k; ++j) {
          gx[r * t_len + o * k + j] += g;
        }
      }
    }
  });
}

Var add(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Tensor y = a.value();
  y.add_(b.value());
  return make_op(std::move(y), {a, b}, [](Node& self) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (wants_grad(self, i)) {
        self.inputs[i]->grad_buffer().add_(self.grad);
      }
    }
  });
}

Var transpose_ct(const Var& x) {
  expect_rank(x, 3, "transpose_ct", "input");
  const std::size_t n = x.shape()[0], c = x.shape()[1], t_len = x.shape()[2];
  Tensor y({n, t_len, c});
  const double* xd = x.value().data();
  double* yd = y.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t t = 0; t < t_len; ++t) {
        yd[(b * t_len + t) * c + ch] = xd[(b * c + ch) * t_len + t];
      }
    }
  }
  return make_op(std::move(y), {x}, [n, c, t_len](Node& self) {
    const double* gy = self.grad.data();
    double* gx = self.inputs[0]->grad_buffer().data();
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t t = 0; t < t_len; ++t) {
          gx[(b * c + ch) * t_len + t] += gy[(b * t_len + t) * c + ch];
        }
      }
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  return make_op(std::move(y), {x}, [](Node& self) {
    Tensor& gx = self.inputs[0]->grad_buffer();
    const double* gy = self.grad.data();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      gx[i] += gy[i];
    }
  });
}

Var concat_features(const Var& a, const Var& b) {
  expect_rank(a, 3, "concat_features", "lhs");
  expect_rank(b, 3, "concat_features", "rhs");
  if (a.shape()[0] != b.shape()[0] || a.shape()[1] != b.shape()[1]) {
    throw ShapeError("concat_features: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const std::size_t rows = a.shape()[0] * a.shape()[1], fa = a.shape()[2], fb = b.shape()[2];
  Tensor y({a.shape()[0], a.shape()[1], fa + fb});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.value().data() + r * fa, fa, y.data() + r * (fa + fb));
    std::copy_n(b.value().data() + r * fb, fb, y.data() + r * (fa + fb) + fa);
  }
  return make_op(std::move(y), {a, b}, [rows, fa, fb](Node& self) {
    const double* gy = self.grad.data();
    if (wants_grad(self, 0)) {
      double* ga = self.inputs[0]->grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t f = 0; f < fa; ++f) {
          ga[r * fa + f] += gy[r * (fa + fb) + f];
        }
      }
    }
    if (wants_grad(self, 1)) {
      double* gb = self.inputs[1]->grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t f = 0; f < fb; ++f) {
          gb[r * fb + f] += gy[r * (fa + fb) + fa + f];
        }
      }
    }
  });
}

Var slice_time(const Var& x, std::size_t start, std::size_t len) {
  expect_rank(x, 3, "slice_time", "input");
  const std::size_t n = x.shape()[0], t_len = x.shape()[1], f = x.shape()[2];
  if (start + len > t_len || len == 0) {
    throw ShapeError("slice_time: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") outside length " + std::to_string(t_len));
  }
  Tensor y({n, len, f});
  for (std::size_t b = 0; b < n; ++b) {
    std::copy_n(x.value().data() + (b * t_len + start) * f, len * f, y.data() + b * len * f);
  }
  return make_op(std::move(y), {x}, [n, t_len, f, start, len](Node& self) {
    const double* gy = self.grad.data();
    double* gx = self.inputs[0]->grad_buffer().data();
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t i = 0; i < len * f; ++i) {
        gx[(b * t_len + start) * f + i] += gy[b * len * f + i];
      }
    }
  });
}

Var linear(const Var& x, const Var& weights, const Var& bias) {
  expect_rank(weights, 2, "linear", "weights");
  if (x.value().rank() == 0) {
    throw ShapeError("linear: input must have at least one axis");
  }
  const std::size_t in = x.shape().back();
  const std::size_t out = weights.shape()[0];
  if (weights.shape()[1] != in || bias.value().size() != out) {
    throw ShapeError("linear: input " + to_string(x.shape()) + ", weights " + to_string(weights.shape()) +
                     ", bias " + to_string(bias.shape()));
  }
  const std::size_t rows = x.value().size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out;
  Tensor y(out_shape);
  const double* xd = x.value().data();
  const double* wd = weights.value().data();
  const double* bd = bias.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < out; ++o) {
      double s = bd[o];
      const double* wr = wd + o * in;
      const double* xr = xd + r * in;
      for (std::size_t i = 0; i < in; ++i) {
        s += wr[i] * xr[i];
      }
      y[r * out + o] = s;
    }
  }
  return make_op(std::move(y), {x, weights, bias}, [rows, in, out](Node& self) {
    const double* gy = self.grad.data();
    const double* xv = self.inputs[0]->value.data();
    const double* wv = self.inputs[1]->value.data();
    if (wants_grad(self, 0)) {
      double* gx = self.inputs[0]->grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < out; ++o) {
          const double g = gy[r * out + o];
          for (std::size_t i = 0; i < in; ++i) {
            gx[r * in + i] += g * wv[o * in + i];
          }
        }
      }
    }
    if (wants_grad(self, 1)) {
      double* gw = self.inputs[1]->grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < out; ++o) {
          const double g = gy[r * out + o];
          for (std::size_t i = 0; i < in; ++i) {
            gw[o * in + i] += g * xv[r * in + i];
          }
        }
      }
    }
    if (wants_grad(self, 2)) {
      double* gb = self.inputs[2]->grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < out; ++o) {
          gb[o] += gy[r * out + o];
        }
      }
    }
  });
}

namespace {

struct LstmCache {
  // Per (sample, step, unit): gate activations, cell state and tanh(cell).
  std::vector<double> i, f, g, o, c, tc;
};

} // namespace

Var lstm(const Var& x, const Var& w_ih, const Var& w_hh, const Var& bias, bool reverse) {
  expect_rank(x, 3, "lstm", "input");
  expect_rank(w_ih, 2, "lstm", "w_ih");
  expect_rank(w_hh, 2, "lstm", "w_hh");
  const std::size_t n = x.shape()[0], t_len = x.shape()[1], f_in = x.shape()[2];
  const std::size_t h = w_hh.shape()[1];
  if (w_ih.shape()[0] != 4 * h || w_ih.shape()[1] != f_in || w_hh.shape()[0] != 4 * h || bias.value().size() != 4 * h) {
    throw ShapeError("lstm: input " + to_string(x.shape()) + ", w_ih " + to_string(w_ih.shape()) + ", w_hh " +
                     to_string(w_hh.shape()) + ", bias " + to_string(bias.shape()));
  }
  auto cache = std::make_shared<LstmCache>();
  const std::size_t cells = n * t_len * h;
  for (auto* v : {&cache->i, &cache->f, &cache->g, &cache->o, &cache->c, &cache->tc}) {
    v->assign(cells, 0.0);
  }
  Tensor y({n, t_len, h});
  const double* xd = x.value().data();
  const double* wi = w_ih.value().data();
  const double* wh = w_hh.value().data();
  const double* bd = bias.value().data();
  std::vector<double> gates(4 * h), h_prev(h), c_prev(h);
  for (std::size_t b = 0; b < n; ++b) {
    std::fill(h_prev.begin(), h_prev.end(), 0.0);
    std::fill(c_prev.begin(), c_prev.end(), 0.0);
    for (std::size_t s = 0; s < t_len; ++s) {
      const std::size_t t = reverse ? t_len - 1 - s : s;
      const double* xt = xd + (b * t_len + t) * f_in;
      for (std::size_t r = 0; r < 4 * h; ++r) {
        double a = bd[r];
        for (std::size_t k = 0; k < f_in; ++k) {
          a += wi[r * f_in + k] * xt[k];
        }
        for (std::size_t k = 0; k < h; ++k) {
          a += wh[r * h + k] * h_prev[k];
        }
        gates[r] = a;
      }
      const std::size_t base = (b * t_len + t) * h;
      for (std::size_t u = 0; u < h; ++u) {
        const double ig = sigmoid(gates[u]);
        const double fg = sigmoid(gates[h + u]);
        const double gg = std::tanh(gates[2 * h + u]);
        const double og = sigmoid(gates[3 * h + u]);
        const double cc = fg * c_prev[u] + ig * gg;
        const double tc = std::tanh(cc);
        cache->i[base + u] = ig;
        cache->f[base + u] = fg;
        cache->g[base + u] = gg;
        cache->o[base + u] = og;
        cache->c[base + u] = cc;
        cache->tc[base + u] = tc;
        c_prev[u] = cc;
        h_prev[u] = og * tc;
        y[base + u] = h_prev[u];
      }
    }
  }

  return make_op(std::move(y), {x, w_ih, w_hh, bias}, [cache, n, t_len, f_in, h, reverse](Node& self) {
    const double* gy = self.grad.data();
    const double* yv = self.value.data();
    const double* xv = self.inputs[0]->value.data();
    const double* wi = self.inputs[1]->value.data();
    const double* wh = self.inputs[2]->value.data();
    double* gx = wants_grad(self, 0) ? self.inputs[0]->grad_buffer().data() : nullptr;
    double* gwi = wants_grad(self, 1) ? self.inputs[1]->grad_buffer().data() : nullptr;
    double* gwh = wants_grad(self, 2) ? self.inputs[2]->grad_buffer().data() : nullptr;
    double* gb = wants_grad(self, 3) ? self.inputs[3]->grad_buffer().data() : nullptr;
    std::vector<double> dh_next(h), dc_next(h), da(4 * h);
    for (std::size_t b = 0; b < n; ++b) {
      std::fill(dh_next.begin(), dh_next.end(), 0.0);
      std::fill(dc_next.begin(), dc_next.end(), 0.0);
      for (std::size_t s = t_len; s-- > 0;) {
        const std::size_t t = reverse ? t_len - 1 - s : s;
        const bool has_prev = s > 0;
        const std::size_t tp = has_prev ? (reverse ? t + 1 : t - 1) : 0;
        const std::size_t base = (b * t_len + t) * h;
        const std::size_t base_prev = (b * t_len + tp) * h;
        for (std::size_t u = 0; u < h; ++u) {
          const double dh = gy[base + u] + dh_next[u];
          const double ig = cache->i[base + u], fg = cache->f[base + u], gg = cache->g[base + u],
                       og = cache->o[base + u], tc = cache->tc[base + u];
          const double cp = has_prev ? cache->c[base_prev + u] : 0.0;
          const double d_o = dh * tc;
          const double dc = dh * og * (1.0 - tc * tc) + dc_next[u];
          da[u] = dc * gg * ig * (1.0 - ig);
          da[h + u] = dc * cp * fg * (1.0 - fg);
          da[2 * h + u] = dc * ig * (1.0 - gg * gg);
          da[3 * h + u] = d_o * og * (1.0 - og);
          dc_next[u] = dc * fg;
        }
        const double* xt = xv + (b * t_len + t) * f_in;
        const double* hp = has_prev ? yv + base_prev : nullptr;
        std::fill(dh_next.begin(), dh_next.end(), 0.0);
        for (std::size_t r = 0; r < 4 * h; ++r) {
          const double a = da[r];
          if (gb) {
            gb[r] += a;
          }
          if (gwi) {
            for (std::size_t k = 0; k < f_in; ++k) {
              gwi[r * f_in + k] += a * xt[k];
            }
          }
          if (gx) {
            double* gxt = gx + (b * t_len + t) * f_in;
            for (std::size_t k = 0; k < f_in; ++k) {
              gxt[k] += a * wi[r * f_in + k];
            }
          }
          if (hp) {
            if (gwh) {
              for (std::size_t k = 0; k < h; ++k) {
                gwh[r * h + k] += a * hp[k];
              }
            }
            for (std::size_t k = 0; k < h; ++k) {
              dh_next[k] += a * wh[r * h + k];
            }
          }
        }
      }
    }
  });
}

// max(0, 1 - y s), but a NaN score stays NaN so divergence is visible in the loss.
inline double hinge_margin(double y, double s) noexcept {
  const double m = 1.0 - y * s;
  return m < 0.0 ? 0.0 : m;
}

Var weighted_squared_hinge(const Var& scores, const Tensor& labels, double w_pos) {
  if (labels.shape() != scores.shape()) {
    throw ShapeError("weighted_squared_hinge: scores " + to_string(scores.shape()) + " vs labels " +
                     to_string(labels.shape()));
  }
  if (labels.empty()) {
    throw InputError("weighted_squared_hinge: empty input");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 1.0 && labels[i] != -1.0) {
      throw InputError("weighted_squared_hinge: labels must be +1 or -1");
    }
  }
  const double m = static_cast<double>(labels.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double w = labels[i] > 0.0 ? w_pos : 1.0;
    const double margin = hinge_margin(labels[i], scores.value()[i]);
    loss += w * margin * margin;
  }
  loss /= m;
  return make_op(Tensor(Shape{1}, loss), {scores}, [labels, w_pos, m](Node& self) {
    const double g = self.grad[0];
    const double* sv = self.inputs[0]->value.data();
    double* gs = self.inputs[0]->grad_buffer().data();
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const double w = labels[i] > 0.0 ? w_pos : 1.0;
      const double margin = hinge_margin(labels[i], sv[i]);
      gs[i] += g * w * 2.0 * margin * (-labels[i]) / m;
    }
  });
}

Var dot(const Var& x, const Tensor& w) {
  if (w.size() != x.value().size()) {
    throw ShapeError("dot: " + to_string(x.shape()) + " vs " + to_string(w.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    s += x.value()[i] * w[i];
  }
  return make_op(Tensor(Shape{1}, s), {x}, [w](Node& self) {
    const double g = self.grad[0];
    double* gx = self.inputs[0]->grad_buffer().data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      gx[i] += g * w[i];
    }
  });
}

} // namespace apnea::nn

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "denseplan/tensor.hpp"

namespace denseplan::ops {

enum class BnMode { Train, Eval };

// Per-channel scale/bias plus running statistics for evaluation mode.
// gamma/beta are (1, c, 1, 1) tensors so they can live in the parameter
// registry; running stats are plain vectors (cheap metadata, untracked).
template <typename T>
struct BatchNormState {
  Tensor<T> gamma;
  Tensor<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T eps = static_cast<T>(1e-5);
  T momentum = static_cast<T>(0.1);

  std::int64_t channels() const { return gamma.shape().c; }
};

// Batch mean and biased variance captured by a training-mode forward pass.
// Saving these makes a backward-pass recompute normalize bit-identically.
template <typename T>
struct BatchStats {
  std::vector<T> mean;
  std::vector<T> var;
};

template <typename T>
struct ConvParams {
  Tensor<T> weights;  // (out_channels, in_channels, kh, kw)
  std::int64_t stride = 1;
  std::int64_t padding = 0;

  std::int64_t out_channels() const { return weights.shape().n; }
  std::int64_t in_channels() const { return weights.shape().c; }
  std::int64_t kh() const { return weights.shape().h; }
  std::int64_t kw() const { return weights.shape().w; }
};

// ---------------------------------------------------------------------------
// concat

// Copies the inputs' channels, in order, into dst. All inputs must share
// (n, h, w) and the channel counts must sum to dst's. No allocation.
template <typename T>
void concat_forward(const std::vector<Tensor<T>>& inputs, Tensor<T>& dst) {
  if (inputs.empty()) throw ShapeError("concat of zero inputs");
  std::int64_t total_c = 0;
  for (const auto& in : inputs) {
    const Shape4& s = in.shape();
    if (s.n != dst.shape().n || s.h != dst.shape().h || s.w != dst.shape().w) {
      throw ShapeError("concat input " + s.str() + " incompatible with dst " +
                       dst.shape().str());
    }
    total_c += s.c;
  }
  if (total_c != dst.shape().c) {
    throw CapacityError("concat channel sum " + std::to_string(total_c) +
                        " != dst channels " + std::to_string(dst.shape().c));
  }
  std::int64_t offset = 0;
  for (const auto& in : inputs) {
    Tensor<T> slot = dst.channel_view(offset, in.shape().c);
    copy_into(in, slot);
    offset += in.shape().c;
  }
}

// Allocating overload.
template <typename T>
Tensor<T> concat_forward(const std::vector<Tensor<T>>& inputs, ArenaTag arena,
                         MemoryTracker& tracker) {
  std::int64_t total_c = 0;
  for (const auto& in : inputs) total_c += in.shape().c;
  const Shape4& s0 = inputs.at(0).shape();
  Tensor<T> dst =
      Tensor<T>::alloc(Shape4{s0.n, total_c, s0.h, s0.w}, arena, tracker);
  concat_forward(inputs, dst);
  return dst;
}

// Splits grad_out into channel views; pure bookkeeping, no arithmetic.
template <typename T>
std::vector<Tensor<T>> concat_backward(const Tensor<T>& grad_out,
                                       const std::vector<std::int64_t>& splits) {
  std::int64_t total = 0;
  for (std::int64_t s : splits) total += s;
  if (total != grad_out.shape().c) {
    throw ShapeError("concat_backward split sum " + std::to_string(total) +
                     " != " + std::to_string(grad_out.shape().c));
  }
  std::vector<Tensor<T>> views;
  std::int64_t offset = 0;
  for (std::int64_t s : splits) {
    views.push_back(grad_out.channel_view(offset, s));
    offset += s;
  }
  return views;
}

// ---------------------------------------------------------------------------
// batch normalization

// Applies the normalization y = gamma * (x - mean) / sqrt(var + eps) + beta
// with the given statistics. Shared between the forward pass and the
// backward-pass recompute so both produce bit-identical output.
template <typename T>
void batchnorm_apply(const Tensor<T>& x, const BatchNormState<T>& state,
                     const BatchStats<T>& stats, Tensor<T>& dst) {
  const Shape4& s = x.shape();
  if (s != dst.shape()) throw ShapeError("batchnorm dst shape mismatch");
  for (std::int64_t c = 0; c < s.c; ++c) {
    const T g = state.gamma.at(0, c, 0, 0);
    const T b = state.beta.at(0, c, 0, 0);
    const T inv = T(1) / std::sqrt(stats.var[static_cast<std::size_t>(c)] +
                                   state.eps);
    const T mean = stats.mean[static_cast<std::size_t>(c)];
    for (std::int64_t i = 0; i < s.n; ++i) {
      for (std::int64_t y = 0; y < s.h; ++y) {
        for (std::int64_t xx = 0; xx < s.w; ++xx) {
          dst.at(i, c, y, xx) = g * (x.at(i, c, y, xx) - mean) * inv + b;
        }
      }
    }
  }
}

// Per-channel mean and biased variance over (n, h, w), two-pass,
// deterministic summation order.
template <typename T>
BatchStats<T> batch_statistics(const Tensor<T>& x) {
  const Shape4& s = x.shape();
  BatchStats<T> st;
  st.mean.resize(static_cast<std::size_t>(s.c));
  st.var.resize(static_cast<std::size_t>(s.c));
  const T count = static_cast<T>(s.n * s.h * s.w);
  for (std::int64_t c = 0; c < s.c; ++c) {
    T sum = 0;
    for (std::int64_t i = 0; i < s.n; ++i)
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t xx = 0; xx < s.w; ++xx) sum += x.at(i, c, y, xx);
    const T mean = sum / count;
    T sq = 0;
    for (std::int64_t i = 0; i < s.n; ++i)
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t xx = 0; xx < s.w; ++xx) {
          const T d = x.at(i, c, y, xx) - mean;
          sq += d * d;
        }
    st.mean[static_cast<std::size_t>(c)] = mean;
    st.var[static_cast<std::size_t>(c)] = sq / count;
  }
  return st;
}

// Train mode normalizes with batch statistics and updates running stats by
// the momentum rule (unless update_running is cleared, e.g. during finite
// difference probing). Eval mode uses the running stats; the returned
// BatchStats echo whatever statistics were applied.
template <typename T>
BatchStats<T> batchnorm_forward(const Tensor<T>& x, BatchNormState<T>& state,
                                BnMode mode, Tensor<T>& dst,
                                bool update_running = true) {
  const Shape4& s = x.shape();
  if (s.c != state.channels()) {
    throw ShapeError("batchnorm channel mismatch: input " +
                     std::to_string(s.c) + ", state " +
                     std::to_string(state.channels()));
  }
  BatchStats<T> stats;
  if (mode == BnMode::Train) {
    if (s.n * s.h * s.w < 2) {
      throw DegenerateBatchError(
          "train-mode batchnorm needs at least 2 values per channel");
    }
    stats = batch_statistics(x);
    if (update_running) {
      for (std::int64_t c = 0; c < s.c; ++c) {
        auto& rm = state.running_mean[static_cast<std::size_t>(c)];
        auto& rv = state.running_var[static_cast<std::size_t>(c)];
        rm = (T(1) - state.momentum) * rm +
             state.momentum * stats.mean[static_cast<std::size_t>(c)];
        rv = (T(1) - state.momentum) * rv +
             state.momentum * stats.var[static_cast<std::size_t>(c)];
      }
    }
  } else {
    stats.mean = state.running_mean;
    stats.var = state.running_var;
  }
  batchnorm_apply(x, state, stats, dst);
  return stats;
}

// Exact gradients of the train-mode forward, treating mean and variance as
// functions of x (biased variance convention). grad_gamma/grad_beta are
// written as (1, c, 1, 1) tensors.
template <typename T>
void batchnorm_backward(const Tensor<T>& grad_y, const Tensor<T>& x,
                        const BatchNormState<T>& state,
                        const BatchStats<T>& stats, Tensor<T>& grad_x,
                        Tensor<T>& grad_gamma, Tensor<T>& grad_beta) {
  const Shape4& s = x.shape();
  if (grad_y.shape() != s || grad_x.shape() != s) {
    throw ShapeError("batchnorm_backward shape mismatch");
  }
  const T count = static_cast<T>(s.n * s.h * s.w);
  for (std::int64_t c = 0; c < s.c; ++c) {
    const T g = state.gamma.at(0, c, 0, 0);
    const T mean = stats.mean[static_cast<std::size_t>(c)];
    const T inv = T(1) / std::sqrt(stats.var[static_cast<std::size_t>(c)] +
                                   state.eps);
    T sum_g = 0;
    T sum_gx = 0;
    for (std::int64_t i = 0; i < s.n; ++i)
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t xx = 0; xx < s.w; ++xx) {
          const T gy = grad_y.at(i, c, y, xx);
          const T xh = (x.at(i, c, y, xx) - mean) * inv;
          sum_g += gy;
          sum_gx += gy * xh;
        }
    grad_gamma.at(0, c, 0, 0) = sum_gx;
    grad_beta.at(0, c, 0, 0) = sum_g;
    const T mg = sum_g / count;
    const T mgx = sum_gx / count;
    for (std::int64_t i = 0; i < s.n; ++i)
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t xx = 0; xx < s.w; ++xx) {
          const T gy = grad_y.at(i, c, y, xx);
          const T xh = (x.at(i, c, y, xx) - mean) * inv;
          grad_x.at(i, c, y, xx) = g * inv * (gy - mg - xh * mgx);
        }
  }
}

// ---------------------------------------------------------------------------
// relu

template <typename T>
void relu_forward(const Tensor<T>& x, Tensor<T>& dst) {
  const Shape4& s = x.shape();
  if (dst.shape() != s) throw ShapeError("relu dst shape mismatch");
  for (std::int64_t i = 0; i < s.n; ++i)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t xx = 0; xx < s.w; ++xx) {
          const T v = x.at(i, c, y, xx);
          dst.at(i, c, y, xx) = v > T(0) ? v : T(0);
        }
}

template <typename T>
void relu_inplace(Tensor<T>& t) {
  relu_forward(t, t);
}

// grad_x = grad_y where ref > 0 else 0. `ref` may be the relu input or its
// output: the predicate agrees on both (the subgradient at 0 is fixed to 0).
template <typename T>
void relu_backward(const Tensor<T>& grad_y, const Tensor<T>& ref,
                   Tensor<T>& grad_x) {
  const Shape4& s = ref.shape();
  if (grad_y.shape() != s || grad_x.shape() != s) {
    throw ShapeError("relu_backward shape mismatch");
  }
  for (std::int64_t i = 0; i < s.n; ++i)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t xx = 0; xx < s.w; ++xx) {
          grad_x.at(i, c, y, xx) =
              ref.at(i, c, y, xx) > T(0) ? grad_y.at(i, c, y, xx) : T(0);
        }
}

template <typename T>
void relu_backward_inplace(Tensor<T>& grad, const Tensor<T>& ref) {
  relu_backward(grad, ref, grad);
}

// ---------------------------------------------------------------------------
// convolution (cross-correlation, no kernel flip)

inline std::int64_t conv_out_dim(std::int64_t in, std::int64_t k,
                                 std::int64_t stride, std::int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

template <typename T>
Shape4 conv2d_out_shape(const Shape4& x, const ConvParams<T>& p) {
  if (x.c != p.in_channels()) {
    throw ShapeError("conv input channels " + std::to_string(x.c) +
                     " != weight in_channels " +
                     std::to_string(p.in_channels()));
  }
  const std::int64_t oh = conv_out_dim(x.h, p.kh(), p.stride, p.padding);
  const std::int64_t ow = conv_out_dim(x.w, p.kw(), p.stride, p.padding);
  if (oh < 1 || ow < 1) {
    throw ShapeError("conv output collapses to zero size for input " +
                     x.str());
  }
  return Shape4{x.n, p.out_channels(), oh, ow};
}

// Direct loop implementation with a fixed summation order, so results are
// bitwise reproducible and identical for strided and contiguous inputs.
template <typename T>
void conv2d_forward(const Tensor<T>& x, const ConvParams<T>& p,
                    Tensor<T>& dst) {
  const Shape4 os = conv2d_out_shape(x.shape(), p);
  if (dst.shape() != os) throw ShapeError("conv dst shape mismatch");
  const Shape4& s = x.shape();
  for (std::int64_t i = 0; i < s.n; ++i) {
    for (std::int64_t oc = 0; oc < os.c; ++oc) {
      for (std::int64_t oy = 0; oy < os.h; ++oy) {
        for (std::int64_t ox = 0; ox < os.w; ++ox) {
          T acc = 0;
          for (std::int64_t ic = 0; ic < s.c; ++ic) {
            for (std::int64_t ky = 0; ky < p.kh(); ++ky) {
              const std::int64_t iy = oy * p.stride - p.padding + ky;
              if (iy < 0 || iy >= s.h) continue;
              for (std::int64_t kx = 0; kx < p.kw(); ++kx) {
                const std::int64_t ix = ox * p.stride - p.padding + kx;
                if (ix < 0 || ix >= s.w) continue;
                acc += x.at(i, ic, iy, ix) * p.weights.at(oc, ic, ky, kx);
              }
            }
          }
          dst.at(i, oc, oy, ox) = acc;
        }
      }
    }
  }
}

// Exact gradients w.r.t. input and weights. grad_x may be null (e.g. for
// the stem convolution whose input is data). The input must be contiguous.
template <typename T>
void conv2d_backward(const Tensor<T>& grad_y, const Tensor<T>& x,
                     const ConvParams<T>& p, Tensor<T>* grad_x,
                     Tensor<T>& grad_w) {
  if (!x.contiguous()) {
    throw ShapeError("conv2d_backward requires a contiguous input");
  }
  const Shape4 os = conv2d_out_shape(x.shape(), p);
  if (grad_y.shape() != os) throw ShapeError("conv grad_y shape mismatch");
  if (grad_w.shape() != p.weights.shape()) {
    throw ShapeError("conv grad_w shape mismatch");
  }
  if (grad_x != nullptr && grad_x->shape() != x.shape()) {
    throw ShapeError("conv grad_x shape mismatch");
  }
  const Shape4& s = x.shape();
  grad_w.fill(T(0));
  if (grad_x != nullptr) grad_x->fill(T(0));
  for (std::int64_t i = 0; i < s.n; ++i) {
    for (std::int64_t oc = 0; oc < os.c; ++oc) {
      for (std::int64_t oy = 0; oy < os.h; ++oy) {
        for (std::int64_t ox = 0; ox < os.w; ++ox) {
          const T gy = grad_y.at(i, oc, oy, ox);
          for (std::int64_t ic = 0; ic < s.c; ++ic) {
            for (std::int64_t ky = 0; ky < p.kh(); ++ky) {
              const std::int64_t iy = oy * p.stride - p.padding + ky;
              if (iy < 0 || iy >= s.h) continue;
              for (std::int64_t kx = 0; kx < p.kw(); ++kx) {
                const std::int64_t ix = ox * p.stride - p.padding + kx;
                if (ix < 0 || ix >= s.w) continue;
                grad_w.at(oc, ic, ky, kx) += gy * x.at(i, ic, iy, ix);
                if (grad_x != nullptr) {
                  grad_x->at(i, ic, iy, ix) += gy * p.weights.at(oc, ic, ky, kx);
                }
              }
            }
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// pooling

template <typename T>
Shape4 avgpool2d_out_shape(const Shape4& x, std::int64_t window,
                           std::int64_t stride) {
  const std::int64_t oh = (x.h - window) / stride + 1;
  const std::int64_t ow = (x.w - window) / stride + 1;
  if (oh < 1 || ow < 1) {
    throw ShapeError("avgpool output collapses to zero size for " + x.str());
  }
  return Shape4{x.n, x.c, oh, ow};
}

template <typename T>
void avgpool2d_forward(const Tensor<T>& x, std::int64_t window,
                       std::int64_t stride, Tensor<T>& dst) {
  const Shape4 os = avgpool2d_out_shape<T>(x.shape(), window, stride);
  if (dst.shape() != os) throw ShapeError("avgpool dst shape mismatch");
  const T scale = T(1) / static_cast<T>(window * window);
  for (std::int64_t i = 0; i < os.n; ++i)
    for (std::int64_t c = 0; c < os.c; ++c)
      for (std::int64_t oy = 0; oy < os.h; ++oy)
        for (std::int64_t ox = 0; ox < os.w; ++ox) {
          T acc = 0;
          for (std::int64_t ky = 0; ky < window; ++ky)
            for (std::int64_t kx = 0; kx < window; ++kx)
              acc += x.at(i, c, oy * stride + ky, ox * stride + kx);
          dst.at(i, c, oy, ox) = acc * scale;
        }
}

template <typename T>
void avgpool2d_backward(const Tensor<T>& grad_y, std::int64_t window,
                        std::int64_t stride, Tensor<T>& grad_x) {
  const Shape4 os = avgpool2d_out_shape<T>(grad_x.shape(), window, stride);
  if (grad_y.shape() != os) throw ShapeError("avgpool grad_y shape mismatch");
  const T scale = T(1) / static_cast<T>(window * window);
  grad_x.fill(T(0));
  for (std::int64_t i = 0; i < os.n; ++i)
    for (std::int64_t c = 0; c < os.c; ++c)
      for (std::int64_t oy = 0; oy < os.h; ++oy)
        for (std::int64_t ox = 0; ox < os.w; ++ox) {
          const T g = grad_y.at(i, c, oy, ox) * scale;
          for (std::int64_t ky = 0; ky < window; ++ky)
            for (std::int64_t kx = 0; kx < window; ++kx)
              grad_x.at(i, c, oy * stride + ky, ox * stride + kx) += g;
        }
}

template <typename T>
void global_avgpool_forward(const Tensor<T>& x, Tensor<T>& dst) {
  const Shape4& s = x.shape();
  if (dst.shape() != (Shape4{s.n, s.c, 1, 1})) {
    throw ShapeError("global_avgpool dst shape mismatch");
  }
  const T scale = T(1) / static_cast<T>(s.h * s.w);
  for (std::int64_t i = 0; i < s.n; ++i)
    for (std::int64_t c = 0; c < s.c; ++c) {
      T acc = 0;
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t xx = 0; xx < s.w; ++xx) acc += x.at(i, c, y, xx);
      dst.at(i, c, 0, 0) = acc * scale;
    }
}

template <typename T>
void global_avgpool_backward(const Tensor<T>& grad_y, Tensor<T>& grad_x) {
  const Shape4& s = grad_x.shape();
  if (grad_y.shape() != (Shape4{s.n, s.c, 1, 1})) {
    throw ShapeError("global_avgpool grad_y shape mismatch");
  }
  const T scale = T(1) / static_cast<T>(s.h * s.w);
  for (std::int64_t i = 0; i < s.n; ++i)
    for (std::int64_t c = 0; c < s.c; ++c) {
      const T g = grad_y.at(i, c, 0, 0) * scale;
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t xx = 0; xx < s.w; ++xx) grad_x.at(i, c, y, xx) = g;
    }
}

// ---------------------------------------------------------------------------
// linear head

// x: (n, c, 1, 1), weights: (k, c, 1, 1), bias: (1, k, 1, 1), y: (n, k, 1, 1)
template <typename T>
void linear_forward(const Tensor<T>& x, const Tensor<T>& weights,
                    const Tensor<T>& bias, Tensor<T>& dst) {
  const std::int64_t n = x.shape().n;
  const std::int64_t c = x.shape().c;
  const std::int64_t k = weights.shape().n;
  if (weights.shape().c != c || bias.shape().c != k ||
      dst.shape() != (Shape4{n, k, 1, 1})) {
    throw ShapeError("linear shape mismatch");
  }
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t o = 0; o < k; ++o) {
      T acc = bias.at(0, o, 0, 0);
      for (std::int64_t j = 0; j < c; ++j)
        acc += weights.at(o, j, 0, 0) * x.at(i, j, 0, 0);
      dst.at(i, o, 0, 0) = acc;
    }
}

template <typename T>
void linear_backward(const Tensor<T>& grad_y, const Tensor<T>& x,
                     const Tensor<T>& weights, Tensor<T>& grad_x,
                     Tensor<T>& grad_w, Tensor<T>& grad_b) {
  const std::int64_t n = x.shape().n;
  const std::int64_t c = x.shape().c;
  const std::int64_t k = weights.shape().n;
  grad_w.fill(T(0));
  grad_b.fill(T(0));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < c; ++j) {
      T acc = 0;
      for (std::int64_t o = 0; o < k; ++o)
        acc += weights.at(o, j, 0, 0) * grad_y.at(i, o, 0, 0);
      grad_x.at(i, j, 0, 0) = acc;
    }
  for (std::int64_t o = 0; o < k; ++o) {
    T gb = 0;
    for (std::int64_t i = 0; i < n; ++i) gb += grad_y.at(i, o, 0, 0);
    grad_b.at(0, o, 0, 0) = gb;
    for (std::int64_t j = 0; j < c; ++j) {
      T gw = 0;
      for (std::int64_t i = 0; i < n; ++i)
        gw += grad_y.at(i, o, 0, 0) * x.at(i, j, 0, 0);
      grad_w.at(o, j, 0, 0) = gw;
    }
  }
}

// ---------------------------------------------------------------------------
// loss

// Mean over the batch of -log softmax at the label; writes
// (softmax - onehot)/n into grad_logits.
template <typename T>
T softmax_xent(const Tensor<T>& logits, const std::vector<int>& labels,
               Tensor<T>& grad_logits) {
  const std::int64_t n = logits.shape().n;
  const std::int64_t k = logits.shape().c;
  if (static_cast<std::int64_t>(labels.size()) != n) {
    throw ShapeError("label count != batch size");
  }
  if (grad_logits.shape() != logits.shape()) {
    throw ShapeError("grad_logits shape mismatch");
  }
  T loss = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= k) {
      throw LabelError("label " + std::to_string(label) + " out of range [0, " +
                       std::to_string(k) + ")");
    }
    T maxv = logits.at(i, 0, 0, 0);
    for (std::int64_t j = 1; j < k; ++j)
      maxv = std::max(maxv, logits.at(i, j, 0, 0));
    T sum = 0;
    for (std::int64_t j = 0; j < k; ++j)
      sum += std::exp(logits.at(i, j, 0, 0) - maxv);
    const T log_sum = std::log(sum) + maxv;
    loss += log_sum - logits.at(i, label, 0, 0);
    for (std::int64_t j = 0; j < k; ++j) {
      const T p = std::exp(logits.at(i, j, 0, 0) - log_sum);
      grad_logits.at(i, j, 0, 0) =
          (p - (j == label ? T(1) : T(0))) / static_cast<T>(n);
    }
  }
  return loss / static_cast<T>(n);
}

// ---------------------------------------------------------------------------
// flop estimates (coarse, fixed conventions; used for relative comparisons)

inline double concat_flops(std::int64_t out_elems) {
  return static_cast<double>(out_elems);  // one move per copied element
}
inline double bn_forward_flops(std::int64_t elems) {
  return 8.0 * static_cast<double>(elems);
}
inline double bn_backward_flops(std::int64_t elems) {
  return 12.0 * static_cast<double>(elems);
}
inline double relu_flops(std::int64_t elems) {
  return static_cast<double>(elems);
}
template <typename T>
double conv_forward_flops(const Shape4& x, const ConvParams<T>& p) {
  const Shape4 os = conv2d_out_shape(x, p);
  return 2.0 * static_cast<double>(os.n * os.c * os.h * os.w) *
         static_cast<double>(x.c * p.kh() * p.kw());
}
template <typename T>
double conv_backward_flops(const Shape4& x, const ConvParams<T>& p) {
  return 2.0 * conv_forward_flops(x, p);
}
inline double pool_flops(std::int64_t in_elems) {
  return static_cast<double>(in_elems);
}
inline double linear_flops(std::int64_t n, std::int64_t in, std::int64_t out) {
  return 2.0 * static_cast<double>(n * in * out);
}
inline double loss_flops(std::int64_t n, std::int64_t k) {
  return 5.0 * static_cast<double>(n * k);
}

}  // namespace denseplan::ops

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "denseplan/graph.hpp"
#include "denseplan/ops.hpp"
#include "denseplan/rng.hpp"

namespace denseplan {

inline double rel_err(double a, double b) {
  const double scale = std::max({1.0, std::abs(a), std::abs(b)});
  return std::abs(a - b) / scale;
}

struct OpCheckResult {
  std::string op;
  double max_rel_err = 0.0;
};

namespace detail {

template <typename T>
Tensor<T> random_tensor(const Shape4& s, Rng& rng, MemoryTracker& tr,
                        double scale = 1.0) {
  Tensor<T> t = Tensor<T>::alloc(s, ArenaTag::Scratch, tr);
  for (std::int64_t i = 0; i < s.n; ++i)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t x = 0; x < s.w; ++x)
          t.at(i, c, y, x) = static_cast<T>(scale * rng.normal());
  return t;
}

// Scalar probe loss L = sum(y * w) with fixed random weights w; its
// gradient w.r.t. y is simply w.
template <typename T>
double dot_all(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape4& s = a.shape();
  double acc = 0.0;
  for (std::int64_t i = 0; i < s.n; ++i)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t x = 0; x < s.w; ++x)
          acc += static_cast<double>(a.at(i, c, y, x)) *
                 static_cast<double>(b.at(i, c, y, x));
  return acc;
}

// Central finite difference of `loss` w.r.t. every element of `probe`,
// compared against `analytic`; returns the max relative error. `skip`
// elements whose |value| < kink_guard (ReLU subgradient ambiguity).
template <typename T, typename LossFn>
double fd_compare(Tensor<T>& probe, const Tensor<T>& analytic, LossFn loss,
                  double h, double kink_guard = 0.0) {
  const Shape4& s = probe.shape();
  double worst = 0.0;
  for (std::int64_t i = 0; i < s.n; ++i)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t x = 0; x < s.w; ++x) {
          const T old = probe.at(i, c, y, x);
          if (kink_guard > 0.0 &&
              std::abs(static_cast<double>(old)) < kink_guard) {
            continue;
          }
          probe.at(i, c, y, x) = old + static_cast<T>(h);
          const double lp = loss();
          probe.at(i, c, y, x) = old - static_cast<T>(h);
          const double lm = loss();
          probe.at(i, c, y, x) = old;
          const double fd = (lp - lm) / (2.0 * h);
          worst = std::max(
              worst, rel_err(static_cast<double>(analytic.at(i, c, y, x)), fd));
        }
  return worst;
}

}  // namespace detail

// Per-kernel finite-difference checks on small random shapes. `h` is the
// central-difference step (1e-5 is appropriate for 64-bit elements).
template <typename T>
std::vector<OpCheckResult> gradcheck_ops(std::uint64_t seed, double h) {
  using detail::dot_all;
  using detail::fd_compare;
  using detail::random_tensor;
  std::vector<OpCheckResult> results;
  MemoryTracker tr;
  Rng rng(seed);

  {  // batchnorm: grad_x, grad_gamma, grad_beta
    const Shape4 s{2, 3, 4, 4};
    Tensor<T> x = random_tensor<T>(s, rng, tr);
    Tensor<T> w = random_tensor<T>(s, rng, tr);
    ops::BatchNormState<T> bn;
    bn.gamma = random_tensor<T>(Shape4{1, 3, 1, 1}, rng, tr, 0.5);
    bn.beta = random_tensor<T>(Shape4{1, 3, 1, 1}, rng, tr, 0.5);
    for (std::int64_t c = 0; c < 3; ++c) bn.gamma.at(0, c, 0, 0) += T(1);
    bn.running_mean.assign(3, T(0));
    bn.running_var.assign(3, T(1));
    Tensor<T> y = Tensor<T>::alloc(s, ArenaTag::Scratch, tr);
    auto loss = [&] {
      ops::BatchNormState<T> bn_local = bn;  // running stats untouched
      ops::batchnorm_forward(x, bn_local, ops::BnMode::Train, y, false);
      return dot_all(y, w);
    };
    loss();
    const ops::BatchStats<T> stats = ops::batch_statistics(x);
    Tensor<T> gx = Tensor<T>::alloc(s, ArenaTag::Scratch, tr);
    Tensor<T> gg = Tensor<T>::alloc(Shape4{1, 3, 1, 1}, ArenaTag::Scratch, tr);
    Tensor<T> gb = Tensor<T>::alloc(Shape4{1, 3, 1, 1}, ArenaTag::Scratch, tr);
    ops::batchnorm_backward(w, x, bn, stats, gx, gg, gb);
    double worst = fd_compare(x, gx, loss, h);
    worst = std::max(worst, fd_compare(bn.gamma, gg, loss, h));
    worst = std::max(worst, fd_compare(bn.beta, gb, loss, h));
    results.push_back({"batchnorm", worst});
  }

  {  // relu with kink exclusion
    const Shape4 s{2, 2, 4, 4};
    Tensor<T> x = random_tensor<T>(s, rng, tr);
    Tensor<T> w = random_tensor<T>(s, rng, tr);
    Tensor<T> y = Tensor<T>::alloc(s, ArenaTag::Scratch, tr);
    auto loss = [&] {
      ops::relu_forward(x, y);
      return dot_all(y, w);
    };
    Tensor<T> gx = Tensor<T>::alloc(s, ArenaTag::Scratch, tr);
    ops::relu_backward(w, x, gx);
    results.push_back({"relu", fd_compare(x, gx, loss, h, 1e-4)});
  }

  {  // conv2d: grad_x and grad_w, 3x3 pad 1
    const Shape4 s{1, 2, 5, 5};
    Tensor<T> x = random_tensor<T>(s, rng, tr);
    ops::ConvParams<T> p;
    p.weights = random_tensor<T>(Shape4{3, 2, 3, 3}, rng, tr, 0.5);
    p.stride = 1;
    p.padding = 1;
    const Shape4 os = ops::conv2d_out_shape(s, p);
    Tensor<T> w = random_tensor<T>(os, rng, tr);
    Tensor<T> y = Tensor<T>::alloc(os, ArenaTag::Scratch, tr);
    auto loss = [&] {
      ops::conv2d_forward(x, p, y);
      return dot_all(y, w);
    };
    Tensor<T> gx = Tensor<T>::alloc(s, ArenaTag::Scratch, tr);
    Tensor<T> gw =
        Tensor<T>::alloc(p.weights.shape(), ArenaTag::Scratch, tr);
    ops::conv2d_backward(w, x, p, &gx, gw);
    double worst = fd_compare(x, gx, loss, h);
    worst = std::max(worst, fd_compare(p.weights, gw, loss, h));
    results.push_back({"conv", worst});
  }

  {  // average pooling (2x2 stride 2) and global average pooling
    const Shape4 s{2, 2, 4, 4};
    Tensor<T> x = random_tensor<T>(s, rng, tr);
    const Shape4 os = ops::avgpool2d_out_shape<T>(s, 2, 2);
    Tensor<T> w = random_tensor<T>(os, rng, tr);
    Tensor<T> y = Tensor<T>::alloc(os, ArenaTag::Scratch, tr);
    auto loss = [&] {
      ops::avgpool2d_forward(x, 2, 2, y);
      return dot_all(y, w);
    };
    Tensor<T> gx = Tensor<T>::alloc(s, ArenaTag::Scratch, tr);
    ops::avgpool2d_backward(w, 2, 2, gx);
    double worst = fd_compare(x, gx, loss, h);

    const Shape4 gs{2, 3, 1, 1};
    Tensor<T> gw = random_tensor<T>(gs, rng, tr);
    Tensor<T> gin = random_tensor<T>(Shape4{2, 3, 4, 4}, rng, tr);
    Tensor<T> gy = Tensor<T>::alloc(gs, ArenaTag::Scratch, tr);
    auto gloss = [&] {
      ops::global_avgpool_forward(gin, gy);
      return dot_all(gy, gw);
    };
    Tensor<T> ggx = Tensor<T>::alloc(gin.shape(), ArenaTag::Scratch, tr);
    ops::global_avgpool_backward(gw, ggx);
    worst = std::max(worst, fd_compare(gin, ggx, gloss, h));
    results.push_back({"pool", worst});
  }

  {  // linear: grad_x, grad_w, grad_b
    const Shape4 xs{3, 4, 1, 1};
    Tensor<T> x = random_tensor<T>(xs, rng, tr);
    Tensor<T> lw = random_tensor<T>(Shape4{5, 4, 1, 1}, rng, tr, 0.5);
    Tensor<T> lb = random_tensor<T>(Shape4{1, 5, 1, 1}, rng, tr, 0.5);
    const Shape4 ys{3, 5, 1, 1};
    Tensor<T> w = random_tensor<T>(ys, rng, tr);
    Tensor<T> y = Tensor<T>::alloc(ys, ArenaTag::Scratch, tr);
    auto loss = [&] {
      ops::linear_forward(x, lw, lb, y);
      return dot_all(y, w);
    };
    Tensor<T> gx = Tensor<T>::alloc(xs, ArenaTag::Scratch, tr);
    Tensor<T> gw = Tensor<T>::alloc(lw.shape(), ArenaTag::Scratch, tr);
    Tensor<T> gb = Tensor<T>::alloc(lb.shape(), ArenaTag::Scratch, tr);
    ops::linear_backward(w, x, lw, gx, gw, gb);
    double worst = fd_compare(x, gx, loss, h);
    worst = std::max(worst, fd_compare(lw, gw, loss, h));
    worst = std::max(worst, fd_compare(lb, gb, loss, h));
    results.push_back({"linear", worst});
  }

  {  // softmax cross-entropy: grad_logits
    const Shape4 s{3, 4, 1, 1};
    Tensor<T> logits = random_tensor<T>(s, rng, tr);
    const std::vector<int> labels{0, 2, 3};
    Tensor<T> g = Tensor<T>::alloc(s, ArenaTag::Scratch, tr);
    auto loss = [&] {
      Tensor<T> scratch = Tensor<T>::alloc(s, ArenaTag::Scratch, tr);
      return static_cast<double>(ops::softmax_xent(logits, labels, scratch));
    };
    ops::softmax_xent(logits, labels, g);
    results.push_back({"loss", fd_compare(logits, g, loss, h)});
  }

  return results;
}

struct FullModelCheck {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::int64_t checked = 0;
};

// Central finite differences of the training loss over every parameter
// element, against the analytic gradients from one backward pass. Running
// statistics are frozen so repeated forwards are pure functions of the
// parameters. If an element fails at step `h`, nearby steps are retried to
// rule out truncation/cancellation artifacts near ReLU kinks before the
// error is recorded.
template <typename T>
FullModelCheck gradcheck_full_model(GraphPlan<T>& plan, const Tensor<T>& input,
                                    const std::vector<int>& labels, double h,
                                    bool corrupt_bn = false) {
  plan.set_freeze_running_stats(true);
  auto loss_eval = [&]() -> double {
    StepState<T> st = plan.forward(input, ops::BnMode::Train);
    return static_cast<double>(plan.compute_loss(st, labels));
  };

  // Analytic gradients for this step.
  plan.step_trace(input, labels);
  std::vector<std::vector<T>> analytic;
  for (auto& p : plan.params()) {
    const T* g = p.grad.data();
    analytic.emplace_back(g, g + p.grad.elems());
  }
  if (corrupt_bn) {
    // Harness sensitivity fixture: perturb one batchnorm gradient so the
    // check must fail.
    for (std::size_t i = 0; i < plan.params().size(); ++i) {
      if (plan.params()[i].name.find(".gamma") != std::string::npos) {
        analytic[i][0] = analytic[i][0] * T(1.5) + T(1);
        break;
      }
    }
  }

  FullModelCheck out;
  for (std::size_t pi = 0; pi < plan.params().size(); ++pi) {
    auto& p = plan.params()[pi];
    T* vals = p.value.data();
    const std::int64_t n = p.value.elems();
    for (std::int64_t j = 0; j < n; ++j) {
      const double a = static_cast<double>(analytic[pi][static_cast<std::size_t>(j)]);
      double best = 0.0;
      bool first = true;
      for (const double step : {h, h * 10.0, h / 10.0}) {
        const T old = vals[j];
        vals[j] = old + static_cast<T>(step);
        const double lp = loss_eval();
        vals[j] = old - static_cast<T>(step);
        const double lm = loss_eval();
        vals[j] = old;
        const double fd = (lp - lm) / (2.0 * step);
        const double r = rel_err(a, fd);
        if (first || r < best) best = r;
        first = false;
        if (best < 1e-7) break;  // no need to refine further
      }
      ++out.checked;
      if (best > out.max_rel_err) {
        out.max_rel_err = best;
        out.worst_param = p.name + "[" + std::to_string(j) + "]";
      }
    }
  }
  plan.set_freeze_running_stats(false);
  return out;
}

}  // namespace denseplan

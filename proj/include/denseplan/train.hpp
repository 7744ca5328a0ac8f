#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "denseplan/checkpoint.hpp"
#include "denseplan/data.hpp"
#include "denseplan/graph.hpp"
#include "denseplan/rng.hpp"
#include "denseplan/schedule.hpp"

namespace denseplan {

// Momentum-SGD state. Velocities live in their own tracker so optimizer
// bytes are reported separately from feature and parameter bytes.
template <typename T>
struct OptimizerState {
  std::unique_ptr<MemoryTracker> tracker;
  std::vector<Tensor<T>> velocity;  // parallel to the plan's param registry
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool nesterov = false;

  static OptimizerState create(const std::vector<ParamEntry<T>>& params) {
    OptimizerState s;
    s.tracker = std::make_unique<MemoryTracker>();
    for (const auto& p : params) {
      s.velocity.push_back(
          Tensor<T>::alloc(p.value.shape(), ArenaTag::Params, *s.tracker));
    }
    return s;
  }

  std::int64_t bytes() const { return tracker->live(ArenaTag::Params); }
};

// v <- mu*v + g + wd*p; p <- p - lr*v (Nesterov applies the lookahead
// p <- p - lr*(g + wd*p + mu*v) instead when enabled).
template <typename T>
void sgd_step(std::vector<ParamEntry<T>>& params, OptimizerState<T>& opt,
              double lr) {
  if (params.size() != opt.velocity.size()) {
    throw ShapeError("optimizer state does not match parameter registry");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = params[i].value;
    Tensor<T>& g = params[i].grad;
    Tensor<T>& v = opt.velocity[i];
    if (v.shape() != p.shape() || g.shape() != p.shape()) {
      throw ShapeError("parameter/gradient/velocity shape mismatch at '" +
                       params[i].name + "'");
    }
    const std::int64_t n = p.elems();
    T* pd = p.data();
    T* gd = g.data();
    T* vd = v.data();
    const T mu = static_cast<T>(opt.momentum);
    const T wd = static_cast<T>(opt.weight_decay);
    const T eta = static_cast<T>(lr);
    for (std::int64_t j = 0; j < n; ++j) {
      const T d = gd[j] + wd * pd[j];
      vd[j] = mu * vd[j] + d;
      pd[j] -= eta * (opt.nesterov ? d + mu * vd[j] : vd[j]);
    }
  }
}

struct EpochRow {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  std::int64_t feature_peak_bytes = 0;
  std::int64_t param_bytes = 0;
  double step_ms = 0.0;
};

struct TrainOptions {
  int epochs = 30;
  std::int64_t batch = 32;
  std::uint64_t seed = 1;
  LrSchedule schedule;
};

// One full training run. Per epoch: deterministic shuffle, full batches
// only (a trailing partial batch is dropped so the plan's batch shape stays
// fixed), one optimizer step per batch. Accuracy is measured on the
// pre-update logits of each step.
template <typename T>
std::vector<EpochRow> train_loop(GraphPlan<T>& plan, const Dataset<T>& ds,
                                 OptimizerState<T>& opt,
                                 const TrainOptions& opts) {
  if (ds.n < opts.batch) throw ConfigError("dataset smaller than one batch");
  MemoryTracker data_tracker;  // input batches are not plan feature memory
  Tensor<T> input = Tensor<T>::alloc(
      Shape4{opts.batch, ds.c, ds.h, ds.w}, ArenaTag::Scratch, data_tracker);
  std::vector<std::int64_t> indices(static_cast<std::size_t>(ds.n));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    indices[i] = static_cast<std::int64_t>(i);
  }
  Rng shuffle_rng(opts.seed);
  std::vector<int> labels;
  std::vector<EpochRow> rows;

  const std::int64_t steps = ds.n / opts.batch;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    const double lr = lr_at(opts.schedule, epoch);
    shuffle_rng.shuffle(indices);
    double loss_sum = 0.0;
    std::int64_t correct = 0;
    std::int64_t peak = 0;
    double ms_sum = 0.0;
    for (std::int64_t s = 0; s < steps; ++s) {
      fill_batch(ds, indices, s * opts.batch, input, labels);
      const auto t0 = std::chrono::steady_clock::now();
      StepResult<T> r = plan.step_trace(input, labels);
      sgd_step(plan.params(), opt, lr);
      const auto t1 = std::chrono::steady_clock::now();
      ms_sum += std::chrono::duration<double, std::milli>(t1 - t0).count();
      loss_sum += static_cast<double>(r.loss);
      for (std::int64_t i = 0; i < opts.batch; ++i) {
        if (r.predictions[static_cast<std::size_t>(i)] ==
            labels[static_cast<std::size_t>(i)]) {
          ++correct;
        }
      }
      peak = std::max(peak, r.mem.total_feature_peak_bytes);
    }
    EpochRow row;
    row.epoch = epoch;
    row.lr = lr;
    row.train_loss = loss_sum / static_cast<double>(steps);
    row.train_acc =
        static_cast<double>(correct) / static_cast<double>(steps * opts.batch);
    row.feature_peak_bytes = peak;
    row.param_bytes = plan.tracker().live(ArenaTag::Params);
    row.step_ms = ms_sum / static_cast<double>(steps);
    rows.push_back(row);
  }
  return rows;
}

// Checkpoint wrappers: parameters first, then one velocity tensor per
// parameter under the "velocity." prefix.
template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> checkpoint_entries(
    std::vector<ParamEntry<T>>& params, OptimizerState<T>& opt) {
  std::vector<std::pair<std::string, Tensor<T>>> entries;
  for (auto& p : params) entries.emplace_back(p.name, p.value);
  for (std::size_t i = 0; i < params.size(); ++i) {
    entries.emplace_back("velocity." + params[i].name, opt.velocity[i]);
  }
  return entries;
}

template <typename T>
void save_training_checkpoint(const std::string& path, GraphPlan<T>& plan,
                              OptimizerState<T>& opt, int epoch) {
  auto entries = checkpoint_entries(plan.params(), opt);
  save_checkpoint(path, entries, epoch);
}

template <typename T>
int load_training_checkpoint(const std::string& path, GraphPlan<T>& plan,
                             OptimizerState<T>& opt) {
  auto entries = checkpoint_entries(plan.params(), opt);
  return load_checkpoint(path, entries);
}

}  // namespace denseplan

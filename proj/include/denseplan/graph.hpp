#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "denseplan/densenet.hpp"
#include "denseplan/ops.hpp"
#include "denseplan/rng.hpp"
#include "denseplan/tensor.hpp"

namespace denseplan {

// One entry of the plan's ordered node list. Rematerializable nodes save
// only cheap metadata for backward (input ids, batch statistics) and are
// re-executed into shared storage during back-propagation.
struct GraphNode {
  int id = -1;
  OpKind kind = OpKind::Concat;
  std::vector<int> inputs;
  ArenaTag storage_class = ArenaTag::FeatureOwned;
  bool rematerializable = false;
};

// Bump region over one pooled allocation; reset before each user.
template <typename T>
class PoolRegion {
 public:
  void init(std::int64_t capacity, ArenaTag tag, MemoryTracker& tracker) {
    tag_ = tag;
    capacity_ = capacity;
    if (capacity > 0) {
      base_ = Tensor<T>::alloc(Shape4{1, capacity, 1, 1}, tag, tracker);
    }
  }

  void reset() { used_ = 0; }

  Tensor<T> acquire(const Shape4& shape) {
    const std::int64_t need = shape.elems();
    if (used_ + need > capacity_) {
      throw CapacityError("pool " + std::string(arena_name(tag_)) +
                          " over capacity: need " + std::to_string(need) +
                          " at offset " + std::to_string(used_) + ", cap " +
                          std::to_string(capacity_));
    }
    T* p = base_.data() + used_;
    used_ += need;
    high_water_ = std::max(high_water_, used_);
    return Tensor<T>::wrap(base_.storage(), p, shape, tag_);
  }

  std::int64_t capacity() const { return capacity_; }
  std::int64_t high_water() const { return high_water_; }

 private:
  Tensor<T> base_;
  ArenaTag tag_ = ArenaTag::Shared1;
  std::int64_t capacity_ = 0;
  std::int64_t used_ = 0;
  std::int64_t high_water_ = 0;
};

// Pooled gradient storage: four fixed regions of equal size. Slots 0/1 hold
// the two transient gradients live inside one layer's backward; slots 2/3
// hold block accumulators, two of which overlap while gradient flow crosses
// a transition.
template <typename T>
class GradPool {
 public:
  void init(std::int64_t region_elems, MemoryTracker& tracker) {
    region_elems_ = region_elems;
    for (auto& b : base_) {
      if (region_elems > 0) {
        b = Tensor<T>::alloc(Shape4{1, region_elems, 1, 1},
                             ArenaTag::SharedGrad, tracker);
      }
    }
  }

  Tensor<T> acquire(int slot, const Shape4& shape) {
    auto& st = busy_[static_cast<std::size_t>(slot)];
    if (st) throw CapacityError("gradient pool slot already in use");
    const std::int64_t need = shape.elems();
    if (need > region_elems_) {
      throw CapacityError("gradient region too small: need " +
                          std::to_string(need) + ", cap " +
                          std::to_string(region_elems_));
    }
    st = true;
    live_ += need;
    high_water_ = std::max(high_water_, live_);
    live_sizes_[static_cast<std::size_t>(slot)] = need;
    auto& b = base_[static_cast<std::size_t>(slot)];
    return Tensor<T>::wrap(b.storage(), b.data(), shape, ArenaTag::SharedGrad);
  }

  void release(int slot) {
    auto& st = busy_[static_cast<std::size_t>(slot)];
    if (!st) throw CapacityError("release of a free gradient pool slot");
    st = false;
    live_ -= live_sizes_[static_cast<std::size_t>(slot)];
  }

  std::int64_t region_elems() const { return region_elems_; }
  std::int64_t high_water() const { return high_water_; }

 private:
  std::array<Tensor<T>, 4> base_;
  std::array<bool, 4> busy_{};
  std::array<std::int64_t, 4> live_sizes_{};
  std::int64_t region_elems_ = 0;
  std::int64_t live_ = 0;
  std::int64_t high_water_ = 0;
};

// The shared forward storages plus shared gradient storage. Pool contents
// are transient: any node may overwrite them, so no consumer may rely on
// stale data surviving past the layer that wrote it.
template <typename T>
struct BufferPool {
  PoolRegion<T> shared1;
  PoolRegion<T> shared2;
  GradPool<T> grad;
};

template <typename T>
struct ParamEntry {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

template <typename T>
struct LayerSaved {
  Tensor<T> cat;         // concat output (empty when rematerialized)
  Tensor<T> act_a;       // post-relu output of bn_a (empty when remat'd)
  Tensor<T> conv_a_out;  // output of the first convolution
  Tensor<T> conv_b_out;  // output of the second convolution, if any
  Tensor<T> act_b;       // post-relu output of bn_b (empty when remat'd)
  Tensor<T> out;         // the layer's k-channel output feature
  ops::BatchStats<T> stats_a, stats_b;
};

template <typename T>
struct BlockSaved {
  Tensor<T> input;
  std::vector<Tensor<T>> feats;  // [input, x_1, x_2, ...]
  std::vector<LayerSaved<T>> layers;
  Tensor<T> out_cat;  // block-output concat (empty when rematerialized)
};

template <typename T>
struct TransSaved {
  Tensor<T> act;  // post-relu bn output (empty when rematerialized)
  Tensor<T> conv_out;
  Tensor<T> pool_out;
  ops::BatchStats<T> stats;
};

template <typename T>
struct HeadSaved {
  Tensor<T> act;  // post-relu bn output (empty when rematerialized)
  Tensor<T> gap;
  Tensor<T> logits;
  ops::BatchStats<T> stats;
};

// Everything one training step saves between forward and backward. Owned
// tensors referenced here stay allocated (and accounted) until the state is
// dropped at the end of the step.
template <typename T>
struct StepState {
  ops::BnMode mode = ops::BnMode::Train;
  bool loss_ready = false;
  T loss = 0;
  Tensor<T> input;
  std::vector<BlockSaved<T>> blocks;
  std::vector<TransSaved<T>> trans;
  HeadSaved<T> head;
  Tensor<T> grad_logits;
  // Keep-alive list for Naive gradient buffers, which emulate frameworks
  // that retain every backward allocation until the step completes.
  std::vector<Tensor<T>> retained;
};

template <typename T>
struct StepResult {
  T loss = 0;
  std::vector<int> predictions;
  MemoryStats mem;
  OpTrace trace;
};

// Execution plan for one dense network under a fixed memory strategy.
// Topology and arithmetic are identical across strategies; only the storage
// class of intermediates and gradients differs, which is what makes losses
// and gradients bitwise comparable.
template <typename T>
class GraphPlan {
 public:
  struct Layer {
    int c_in = 0;
    bool bottleneck = false;
    ops::BatchNormState<T> bn_a, bn_b;
    ops::ConvParams<T> conv_a, conv_b;
    int id_cat = -1, id_bn_a = -1, id_relu_a = -1, id_conv_a = -1;
    int id_bn_b = -1, id_relu_b = -1, id_conv_b = -1;
  };
  struct Block {
    int c_in = 0, c_out = 0, h = 0, w = 0;
    std::vector<Layer> layers;
    int id_out_cat = -1;
  };
  struct Transition {
    int c_in = 0, c_out = 0, h_in = 0, w_in = 0;
    ops::BatchNormState<T> bn;
    ops::ConvParams<T> conv;
    int id_bn = -1, id_relu = -1, id_conv = -1, id_pool = -1;
  };
  struct Head {
    int c_in = 0, h = 0, w = 0;
    ops::BatchNormState<T> bn;
    Tensor<T> linear_w, linear_b;
    Tensor<T> grad_linear_w, grad_linear_b;
    int id_bn = -1, id_relu = -1, id_gap = -1, id_linear = -1, id_loss = -1;
  };

  GraphPlan(GraphPlan&&) = default;
  GraphPlan& operator=(GraphPlan&&) = default;

  static GraphPlan build(const DenseNetConfig& cfg, ExecutionStrategy strategy,
                         const Shape4& input_shape, std::uint64_t seed);

  // -- queries ----------------------------------------------------------

  const DenseNetConfig& config() const { return cfg_; }
  ExecutionStrategy strategy() const { return strategy_; }
  const Shape4& input_shape() const { return input_shape_; }
  MemoryTracker& tracker() { return *tracker_; }
  const MemoryTracker& tracker() const { return *tracker_; }
  OpTrace& trace() { return trace_; }
  const std::vector<GraphNode>& nodes() const { return nodes_; }
  std::vector<ParamEntry<T>>& params() { return params_; }
  const std::vector<ParamEntry<T>>& params() const { return params_; }
  const BufferPool<T>& pool() const { return pool_; }
  std::int64_t param_elems() const {
    std::int64_t t = 0;
    for (const auto& p : params_) t += p.value.elems();
    return t;
  }

  // Finite-difference probing must not drift the BN running statistics.
  void set_freeze_running_stats(bool freeze) { freeze_running_ = freeze; }

  void zero_grads() {
    for (auto& p : params_) p.grad.fill(T(0));
  }

  // -- execution --------------------------------------------------------

  StepState<T> forward(const Tensor<T>& input, ops::BnMode mode);
  T compute_loss(StepState<T>& state, const std::vector<int>& labels);
  void backward(StepState<T>& state);
  StepResult<T> step_trace(const Tensor<T>& input,
                           const std::vector<int>& labels);

 private:
  GraphPlan() = default;

  bool shared_grad() const { return strategy_ != ExecutionStrategy::Naive; }
  bool shared_fwd() const { return strategy_ == ExecutionStrategy::SharedAll; }
  bool pre_act() const {
    return cfg_.activation_order == ActivationOrder::PreActivation;
  }

  Tensor<T> alloc_owned(const Shape4& s) {
    return Tensor<T>::alloc(s, ArenaTag::FeatureOwned, *tracker_);
  }
  // Storage for a concat output.
  Tensor<T> alloc_cat(const Shape4& s) {
    if (shared_fwd()) {
      pool_.shared1.reset();
      return pool_.shared1.acquire(s);
    }
    return alloc_owned(s);
  }
  // Storage for a rematerializable bn output; `first_in_unit` resets the
  // shared region at the start of each layer/transition/head execution.
  Tensor<T> alloc_bn(const Shape4& s, bool first_in_unit) {
    if (shared_fwd()) {
      if (first_in_unit) pool_.shared2.reset();
      return pool_.shared2.acquire(s);
    }
    return alloc_owned(s);
  }

  // Gradient buffers: pooled slots for the shared strategies, fresh owned
  // allocations kept alive until step end under Naive.
  Tensor<T> grad_acquire(StepState<T>& state, int slot, const Shape4& s) {
    if (shared_grad()) return pool_.grad.acquire(slot, s);
    Tensor<T> t = alloc_owned(s);
    state.retained.push_back(t);
    return t;
  }
  void grad_release(int slot) {
    if (shared_grad()) pool_.grad.release(slot);
  }

  ops::BatchNormState<T> make_bn(int channels, const std::string& prefix);
  ops::ConvParams<T> make_conv(int in_c, int out_c, int kernel,
                               const std::string& name, Rng& rng);
  int add_node(OpKind kind, std::vector<int> inputs, ArenaTag storage,
               bool remat = false);

  void forward_layer(StepState<T>& state, Block& blk, Layer& layer,
                     BlockSaved<T>& saved, ops::BnMode mode);
  void backward_layer(StepState<T>& state, Block& blk, Layer& layer,
                      BlockSaved<T>& bsaved, LayerSaved<T>& lsaved,
                      int layer_index, Tensor<T>& acc);
  void backward_block(StepState<T>& state, int block_index, Tensor<T>& acc);
  // Repopulates shared storage with a concat + bn(+relu) forward; returns
  // {cat, post-relu act}.
  std::pair<Tensor<T>, Tensor<T>> rematerialize(
      const std::vector<Tensor<T>>& inputs, ops::BatchNormState<T>& bn,
      const ops::BatchStats<T>& stats, int id_cat, int id_bn, int id_relu);

  DenseNetConfig cfg_;
  ExecutionStrategy strategy_ = ExecutionStrategy::Naive;
  Shape4 input_shape_{};
  std::unique_ptr<MemoryTracker> tracker_;
  OpTrace trace_;
  std::vector<GraphNode> nodes_;
  std::vector<ParamEntry<T>> params_;
  BufferPool<T> pool_;
  bool freeze_running_ = false;

  ops::ConvParams<T> stem_;
  int id_stem_ = -1;
  std::vector<Block> blocks_;
  std::vector<Transition> transitions_;
  Head head_;
};

// ---------------------------------------------------------------------------
// construction

template <typename T>
ops::BatchNormState<T> GraphPlan<T>::make_bn(int channels,
                                             const std::string& prefix) {
  ops::BatchNormState<T> bn;
  bn.gamma = Tensor<T>::alloc(Shape4{1, channels, 1, 1}, ArenaTag::Params,
                              *tracker_);
  bn.beta = Tensor<T>::alloc(Shape4{1, channels, 1, 1}, ArenaTag::Params,
                             *tracker_);
  bn.gamma.fill(T(1));
  bn.running_mean.assign(static_cast<std::size_t>(channels), T(0));
  bn.running_var.assign(static_cast<std::size_t>(channels), T(1));
  params_.push_back({prefix + ".gamma", bn.gamma,
                     Tensor<T>::alloc(Shape4{1, channels, 1, 1},
                                      ArenaTag::Params, *tracker_)});
  params_.push_back({prefix + ".beta", bn.beta,
                     Tensor<T>::alloc(Shape4{1, channels, 1, 1},
                                      ArenaTag::Params, *tracker_)});
  return bn;
}

template <typename T>
ops::ConvParams<T> GraphPlan<T>::make_conv(int in_c, int out_c, int kernel,
                                           const std::string& name, Rng& rng) {
  ops::ConvParams<T> p;
  p.weights = Tensor<T>::alloc(Shape4{out_c, in_c, kernel, kernel},
                               ArenaTag::Params, *tracker_);
  p.stride = 1;
  p.padding = kernel == 3 ? 1 : 0;
  // He initialization.
  const double fan_in = static_cast<double>(in_c) * kernel * kernel;
  const double stddev = std::sqrt(2.0 / fan_in);
  for (std::int64_t oc = 0; oc < out_c; ++oc)
    for (std::int64_t ic = 0; ic < in_c; ++ic)
      for (std::int64_t ky = 0; ky < kernel; ++ky)
        for (std::int64_t kx = 0; kx < kernel; ++kx)
          p.weights.at(oc, ic, ky, kx) = static_cast<T>(rng.normal() * stddev);
  params_.push_back({name, p.weights,
                     Tensor<T>::alloc(Shape4{out_c, in_c, kernel, kernel},
                                      ArenaTag::Params, *tracker_)});
  return p;
}

template <typename T>
int GraphPlan<T>::add_node(OpKind kind, std::vector<int> inputs,
                           ArenaTag storage, bool remat) {
  GraphNode n;
  n.id = static_cast<int>(nodes_.size());
  n.kind = kind;
  n.inputs = std::move(inputs);
  n.storage_class = storage;
  n.rematerializable = remat;
  nodes_.push_back(std::move(n));
  return nodes_.back().id;
}

template <typename T>
GraphPlan<T> GraphPlan<T>::build(const DenseNetConfig& cfg,
                                 ExecutionStrategy strategy,
                                 const Shape4& input_shape,
                                 std::uint64_t seed) {
  const NetGeometry geom = net_geometry(cfg, static_cast<int>(input_shape.c),
                                        static_cast<int>(input_shape.h),
                                        static_cast<int>(input_shape.w));
  GraphPlan plan;
  plan.cfg_ = cfg;
  plan.strategy_ = strategy;
  plan.input_shape_ = input_shape;
  plan.tracker_ = std::make_unique<MemoryTracker>();
  Rng rng(seed);

  const bool shared_fwd = strategy == ExecutionStrategy::SharedAll;
  const ArenaTag cat_arena =
      shared_fwd ? ArenaTag::Shared1 : ArenaTag::FeatureOwned;
  const ArenaTag bn_arena =
      shared_fwd ? ArenaTag::Shared2 : ArenaTag::FeatureOwned;
  const bool pre = cfg.activation_order == ActivationOrder::PreActivation;
  const int k = cfg.growth_rate;
  const int bk = cfg.bottleneck_channels();
  const std::int64_t N = input_shape.n;

  plan.stem_ = plan.make_conv(geom.in_c, geom.stem_out, 3, "stem.conv.w", rng);
  plan.id_stem_ = plan.add_node(OpKind::Conv, {}, ArenaTag::FeatureOwned);

  // Pool sizing accumulators.
  std::int64_t cap1 = 0, cap2 = 0, grad_region = 0;

  int prev_feat_node = plan.id_stem_;
  const std::size_t nblocks = geom.blocks.size();
  for (std::size_t b = 0; b < nblocks; ++b) {
    const auto& gb = geom.blocks[b];
    Block blk;
    blk.c_in = gb.c_in;
    blk.c_out = gb.c_out;
    blk.h = gb.h;
    blk.w = gb.w;
    const std::int64_t hw = static_cast<std::int64_t>(gb.h) * gb.w;
    std::vector<int> feat_nodes{prev_feat_node};

    for (int l = 0; l < gb.layers; ++l) {
      Layer layer;
      layer.c_in = gb.c_in + l * k;
      layer.bottleneck = cfg.bottleneck;
      const std::string prefix =
          "b" + std::to_string(b) + ".l" + std::to_string(l);
      layer.id_cat = plan.add_node(OpKind::Concat, feat_nodes, cat_arena,
                                   shared_fwd);
      cap1 = std::max(cap1, layer.c_in * hw * N);
      int out_node = -1;
      if (pre) {
        layer.bn_a = plan.make_bn(layer.c_in, prefix + ".bn_a");
        layer.id_bn_a =
            plan.add_node(OpKind::BatchNorm, {layer.id_cat}, bn_arena,
                          shared_fwd);
        layer.id_relu_a =
            plan.add_node(OpKind::Relu, {layer.id_bn_a}, bn_arena, shared_fwd);
        if (cfg.bottleneck) {
          layer.conv_a = plan.make_conv(layer.c_in, bk, 1,
                                        prefix + ".conv_a.w", rng);
          layer.id_conv_a = plan.add_node(OpKind::Conv, {layer.id_relu_a},
                                          ArenaTag::FeatureOwned);
          layer.bn_b = plan.make_bn(bk, prefix + ".bn_b");
          layer.id_bn_b = plan.add_node(OpKind::BatchNorm, {layer.id_conv_a},
                                        bn_arena, shared_fwd);
          layer.id_relu_b = plan.add_node(OpKind::Relu, {layer.id_bn_b},
                                          bn_arena, shared_fwd);
          layer.conv_b =
              plan.make_conv(bk, k, 3, prefix + ".conv_b.w", rng);
          layer.id_conv_b = plan.add_node(OpKind::Conv, {layer.id_relu_b},
                                          ArenaTag::FeatureOwned);
          out_node = layer.id_conv_b;
          cap2 = std::max(cap2, (layer.c_in + bk) * hw * N);
          grad_region = std::max(grad_region, layer.c_in * hw * N);
          grad_region = std::max<std::int64_t>(grad_region, bk * hw * N);
        } else {
          layer.conv_a =
              plan.make_conv(layer.c_in, k, 3, prefix + ".conv_a.w", rng);
          layer.id_conv_a = plan.add_node(OpKind::Conv, {layer.id_relu_a},
                                          ArenaTag::FeatureOwned);
          out_node = layer.id_conv_a;
          cap2 = std::max(cap2, layer.c_in * hw * N);
          grad_region = std::max(grad_region, layer.c_in * hw * N);
        }
      } else {
        if (cfg.bottleneck) {
          layer.conv_a = plan.make_conv(layer.c_in, bk, 1,
                                        prefix + ".conv_a.w", rng);
          layer.id_conv_a = plan.add_node(OpKind::Conv, {layer.id_cat},
                                          ArenaTag::FeatureOwned);
          layer.bn_a = plan.make_bn(bk, prefix + ".bn_a");
          layer.id_bn_a = plan.add_node(OpKind::BatchNorm, {layer.id_conv_a},
                                        ArenaTag::FeatureOwned);
          layer.id_relu_a = plan.add_node(OpKind::Relu, {layer.id_bn_a},
                                          ArenaTag::FeatureOwned);
          layer.conv_b =
              plan.make_conv(bk, k, 3, prefix + ".conv_b.w", rng);
          layer.id_conv_b = plan.add_node(OpKind::Conv, {layer.id_relu_a},
                                          ArenaTag::FeatureOwned);
          layer.bn_b = plan.make_bn(k, prefix + ".bn_b");
          layer.id_bn_b = plan.add_node(OpKind::BatchNorm, {layer.id_conv_b},
                                        ArenaTag::FeatureOwned);
          layer.id_relu_b = plan.add_node(OpKind::Relu, {layer.id_bn_b},
                                          ArenaTag::FeatureOwned);
          out_node = layer.id_relu_b;
          grad_region = std::max(grad_region, layer.c_in * hw * N);
          grad_region = std::max<std::int64_t>(grad_region, bk * hw * N);
        } else {
          layer.conv_a =
              plan.make_conv(layer.c_in, k, 3, prefix + ".conv_a.w", rng);
          layer.id_conv_a = plan.add_node(OpKind::Conv, {layer.id_cat},
                                          ArenaTag::FeatureOwned);
          layer.bn_a = plan.make_bn(k, prefix + ".bn_a");
          layer.id_bn_a = plan.add_node(OpKind::BatchNorm, {layer.id_conv_a},
                                        ArenaTag::FeatureOwned);
          layer.id_relu_a = plan.add_node(OpKind::Relu, {layer.id_bn_a},
                                          ArenaTag::FeatureOwned);
          out_node = layer.id_relu_a;
          grad_region = std::max(grad_region, layer.c_in * hw * N);
        }
      }
      feat_nodes.push_back(out_node);
      blk.layers.push_back(std::move(layer));
    }

    blk.id_out_cat =
        plan.add_node(OpKind::Concat, feat_nodes, cat_arena, shared_fwd);
    cap1 = std::max(cap1, static_cast<std::int64_t>(gb.c_out) * hw * N);
    grad_region =
        std::max(grad_region, static_cast<std::int64_t>(gb.c_out) * hw * N);

    if (b + 1 < nblocks) {
      const auto& gt = geom.transitions[b];
      Transition tr;
      tr.c_in = gt.c_in;
      tr.c_out = gt.c_out;
      tr.h_in = gt.h_in;
      tr.w_in = gt.w_in;
      const std::string prefix = "t" + std::to_string(b);
      tr.bn = plan.make_bn(tr.c_in, prefix + ".bn");
      tr.id_bn = plan.add_node(OpKind::BatchNorm, {blk.id_out_cat}, bn_arena,
                               shared_fwd);
      tr.id_relu =
          plan.add_node(OpKind::Relu, {tr.id_bn}, bn_arena, shared_fwd);
      tr.conv = plan.make_conv(tr.c_in, tr.c_out, 1, prefix + ".conv.w", rng);
      tr.id_conv =
          plan.add_node(OpKind::Conv, {tr.id_relu}, ArenaTag::FeatureOwned);
      tr.id_pool =
          plan.add_node(OpKind::Pool, {tr.id_conv}, ArenaTag::FeatureOwned);
      cap2 = std::max(cap2, static_cast<std::int64_t>(tr.c_in) * hw * N);
      prev_feat_node = tr.id_pool;
      plan.transitions_.push_back(std::move(tr));
    } else {
      Head head;
      head.c_in = gb.c_out;
      head.h = gb.h;
      head.w = gb.w;
      head.bn = plan.make_bn(head.c_in, "head.bn");
      head.id_bn = plan.add_node(OpKind::BatchNorm, {blk.id_out_cat}, bn_arena,
                                 shared_fwd);
      head.id_relu =
          plan.add_node(OpKind::Relu, {head.id_bn}, bn_arena, shared_fwd);
      head.id_gap =
          plan.add_node(OpKind::Pool, {head.id_relu}, ArenaTag::FeatureOwned);
      head.linear_w = Tensor<T>::alloc(Shape4{cfg.num_classes, head.c_in, 1, 1},
                                       ArenaTag::Params, *plan.tracker_);
      head.linear_b = Tensor<T>::alloc(Shape4{1, cfg.num_classes, 1, 1},
                                       ArenaTag::Params, *plan.tracker_);
      // Classifier init: zero-mean normal scaled by fan-in, zero bias.
      const double w_std = std::sqrt(1.0 / head.c_in);
      for (std::int64_t o = 0; o < cfg.num_classes; ++o) {
        for (std::int64_t i = 0; i < head.c_in; ++i) {
          head.linear_w.at(o, i, 0, 0) = static_cast<T>(w_std * rng.normal());
        }
      }
      head.grad_linear_w =
          Tensor<T>::alloc(Shape4{cfg.num_classes, head.c_in, 1, 1},
                           ArenaTag::Params, *plan.tracker_);
      head.grad_linear_b = Tensor<T>::alloc(Shape4{1, cfg.num_classes, 1, 1},
                                            ArenaTag::Params, *plan.tracker_);
      plan.params_.push_back(
          {"head.linear.w", head.linear_w, head.grad_linear_w});
      plan.params_.push_back(
          {"head.linear.b", head.linear_b, head.grad_linear_b});
      head.id_linear =
          plan.add_node(OpKind::Linear, {head.id_gap}, ArenaTag::FeatureOwned);
      head.id_loss =
          plan.add_node(OpKind::Loss, {head.id_linear}, ArenaTag::Scratch);
      cap2 = std::max(cap2, static_cast<std::int64_t>(head.c_in) * hw * N);
      plan.head_ = std::move(head);
    }
    plan.blocks_.push_back(std::move(blk));
  }

  // Pools are pre-allocated once, before the first step.
  if (strategy == ExecutionStrategy::SharedAll) {
    plan.pool_.shared1.init(cap1, ArenaTag::Shared1, *plan.tracker_);
    plan.pool_.shared2.init(cap2, ArenaTag::Shared2, *plan.tracker_);
  }
  if (strategy != ExecutionStrategy::Naive) {
    plan.pool_.grad.init(grad_region, *plan.tracker_);
  }

  plan.trace_.resize(plan.nodes_.size());
  return plan;
}

// ---------------------------------------------------------------------------
// forward

template <typename T>
void GraphPlan<T>::forward_layer(StepState<T>& state, Block& blk, Layer& layer,
                                 BlockSaved<T>& saved, ops::BnMode mode) {
  const std::int64_t N = state.input.shape().n;
  const std::int64_t h = blk.h, w = blk.w;
  const bool update_running = mode == ops::BnMode::Train && !freeze_running_;
  LayerSaved<T> ls;

  const Shape4 cat_shape{N, layer.c_in, h, w};
  Tensor<T> cat = alloc_cat(cat_shape);
  ops::concat_forward(saved.feats, cat);
  trace_.on_forward(layer.id_cat, OpKind::Concat,
                    ops::concat_flops(cat.elems()));

  if (pre_act()) {
    Tensor<T> a = alloc_bn(cat_shape, true);
    ls.stats_a = ops::batchnorm_forward(cat, layer.bn_a, mode, a,
                                        update_running);
    trace_.on_forward(layer.id_bn_a, OpKind::BatchNorm,
                      ops::bn_forward_flops(a.elems()));
    ops::relu_inplace(a);
    trace_.on_forward(layer.id_relu_a, OpKind::Relu, ops::relu_flops(a.elems()));
    if (layer.bottleneck) {
      const Shape4 mid{N, cfg_.bottleneck_channels(), h, w};
      ls.conv_a_out = alloc_owned(mid);
      ops::conv2d_forward(a, layer.conv_a, ls.conv_a_out);
      trace_.on_forward(layer.id_conv_a, OpKind::Conv,
                        ops::conv_forward_flops(cat_shape, layer.conv_a));
      Tensor<T> a2 = alloc_bn(mid, false);
      ls.stats_b = ops::batchnorm_forward(ls.conv_a_out, layer.bn_b, mode, a2,
                                          update_running);
      trace_.on_forward(layer.id_bn_b, OpKind::BatchNorm,
                        ops::bn_forward_flops(a2.elems()));
      ops::relu_inplace(a2);
      trace_.on_forward(layer.id_relu_b, OpKind::Relu,
                        ops::relu_flops(a2.elems()));
      ls.conv_b_out = alloc_owned(Shape4{N, cfg_.growth_rate, h, w});
      ops::conv2d_forward(a2, layer.conv_b, ls.conv_b_out);
      trace_.on_forward(layer.id_conv_b, OpKind::Conv,
                        ops::conv_forward_flops(mid, layer.conv_b));
      ls.out = ls.conv_b_out;
      if (!shared_fwd()) ls.act_b = a2;
    } else {
      ls.conv_a_out = alloc_owned(Shape4{N, cfg_.growth_rate, h, w});
      ops::conv2d_forward(a, layer.conv_a, ls.conv_a_out);
      trace_.on_forward(layer.id_conv_a, OpKind::Conv,
                        ops::conv_forward_flops(cat_shape, layer.conv_a));
      ls.out = ls.conv_a_out;
    }
    if (!shared_fwd()) {
      ls.cat = cat;
      ls.act_a = a;
    }
  } else {
    // Post-activation: conv reads the concat directly; bn outputs are the
    // retained layer features, so nothing here is rematerializable except
    // the concat itself.
    if (layer.bottleneck) {
      const Shape4 mid{N, cfg_.bottleneck_channels(), h, w};
      ls.conv_a_out = alloc_owned(mid);
      ops::conv2d_forward(cat, layer.conv_a, ls.conv_a_out);
      trace_.on_forward(layer.id_conv_a, OpKind::Conv,
                        ops::conv_forward_flops(cat_shape, layer.conv_a));
      ls.act_a = alloc_owned(mid);
      ls.stats_a = ops::batchnorm_forward(ls.conv_a_out, layer.bn_a, mode,
                                          ls.act_a, update_running);
      trace_.on_forward(layer.id_bn_a, OpKind::BatchNorm,
                        ops::bn_forward_flops(ls.act_a.elems()));
      ops::relu_inplace(ls.act_a);
      trace_.on_forward(layer.id_relu_a, OpKind::Relu,
                        ops::relu_flops(ls.act_a.elems()));
      const Shape4 out_shape{N, cfg_.growth_rate, h, w};
      ls.conv_b_out = alloc_owned(out_shape);
      ops::conv2d_forward(ls.act_a, layer.conv_b, ls.conv_b_out);
      trace_.on_forward(layer.id_conv_b, OpKind::Conv,
                        ops::conv_forward_flops(mid, layer.conv_b));
      ls.act_b = alloc_owned(out_shape);
      ls.stats_b = ops::batchnorm_forward(ls.conv_b_out, layer.bn_b, mode,
                                          ls.act_b, update_running);
      trace_.on_forward(layer.id_bn_b, OpKind::BatchNorm,
                        ops::bn_forward_flops(ls.act_b.elems()));
      ops::relu_inplace(ls.act_b);
      trace_.on_forward(layer.id_relu_b, OpKind::Relu,
                        ops::relu_flops(ls.act_b.elems()));
      ls.out = ls.act_b;
    } else {
      const Shape4 out_shape{N, cfg_.growth_rate, h, w};
      ls.conv_a_out = alloc_owned(out_shape);
      ops::conv2d_forward(cat, layer.conv_a, ls.conv_a_out);
      trace_.on_forward(layer.id_conv_a, OpKind::Conv,
                        ops::conv_forward_flops(cat_shape, layer.conv_a));
      ls.act_a = alloc_owned(out_shape);
      ls.stats_a = ops::batchnorm_forward(ls.conv_a_out, layer.bn_a, mode,
                                          ls.act_a, update_running);
      trace_.on_forward(layer.id_bn_a, OpKind::BatchNorm,
                        ops::bn_forward_flops(ls.act_a.elems()));
      ops::relu_inplace(ls.act_a);
      trace_.on_forward(layer.id_relu_a, OpKind::Relu,
                        ops::relu_flops(ls.act_a.elems()));
      ls.out = ls.act_a;
    }
    if (!shared_fwd()) ls.cat = cat;
  }

  saved.feats.push_back(ls.out);
  saved.layers.push_back(std::move(ls));
}

template <typename T>
StepState<T> GraphPlan<T>::forward(const Tensor<T>& input, ops::BnMode mode) {
  if (input.shape() != input_shape_) {
    throw ShapeError("forward input " + input.shape().str() +
                     " does not match plan input " + input_shape_.str());
  }
  if (!input.contiguous()) throw ShapeError("forward input must be contiguous");
  const std::int64_t N = input.shape().n;
  const bool update_running = mode == ops::BnMode::Train && !freeze_running_;

  StepState<T> state;
  state.mode = mode;
  state.input = input;

  Tensor<T> stem_out = alloc_owned(
      Shape4{N, static_cast<std::int64_t>(cfg_.initial_channels),
             input.shape().h, input.shape().w});
  ops::conv2d_forward(input, stem_, stem_out);
  trace_.on_forward(id_stem_, OpKind::Conv,
                    ops::conv_forward_flops(input.shape(), stem_));

  Tensor<T> block_in = stem_out;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    Block& blk = blocks_[b];
    BlockSaved<T> bs;
    bs.input = block_in;
    bs.feats.push_back(block_in);
    for (auto& layer : blk.layers) {
      forward_layer(state, blk, layer, bs, mode);
    }
    const Shape4 out_shape{N, blk.c_out, blk.h, blk.w};
    Tensor<T> out_cat = alloc_cat(out_shape);
    ops::concat_forward(bs.feats, out_cat);
    trace_.on_forward(blk.id_out_cat, OpKind::Concat,
                      ops::concat_flops(out_cat.elems()));

    if (b + 1 < blocks_.size()) {
      Transition& tr = transitions_[b];
      TransSaved<T> ts;
      Tensor<T> a = alloc_bn(out_shape, true);
      ts.stats =
          ops::batchnorm_forward(out_cat, tr.bn, mode, a, update_running);
      trace_.on_forward(tr.id_bn, OpKind::BatchNorm,
                        ops::bn_forward_flops(a.elems()));
      ops::relu_inplace(a);
      trace_.on_forward(tr.id_relu, OpKind::Relu, ops::relu_flops(a.elems()));
      ts.conv_out = alloc_owned(Shape4{N, tr.c_out, blk.h, blk.w});
      ops::conv2d_forward(a, tr.conv, ts.conv_out);
      trace_.on_forward(tr.id_conv, OpKind::Conv,
                        ops::conv_forward_flops(out_shape, tr.conv));
      const Shape4 pooled = ops::avgpool2d_out_shape<T>(ts.conv_out.shape(), 2, 2);
      ts.pool_out = alloc_owned(pooled);
      ops::avgpool2d_forward(ts.conv_out, 2, 2, ts.pool_out);
      trace_.on_forward(tr.id_pool, OpKind::Pool,
                        ops::pool_flops(ts.conv_out.elems()));
      if (!shared_fwd()) {
        bs.out_cat = out_cat;
        ts.act = a;
      }
      block_in = ts.pool_out;
      state.trans.push_back(std::move(ts));
    } else {
      HeadSaved<T>& hs = state.head;
      Tensor<T> a = alloc_bn(out_shape, true);
      hs.stats =
          ops::batchnorm_forward(out_cat, head_.bn, mode, a, update_running);
      trace_.on_forward(head_.id_bn, OpKind::BatchNorm,
                        ops::bn_forward_flops(a.elems()));
      ops::relu_inplace(a);
      trace_.on_forward(head_.id_relu, OpKind::Relu,
                        ops::relu_flops(a.elems()));
      hs.gap = alloc_owned(Shape4{N, blk.c_out, 1, 1});
      ops::global_avgpool_forward(a, hs.gap);
      trace_.on_forward(head_.id_gap, OpKind::Pool, ops::pool_flops(a.elems()));
      hs.logits = alloc_owned(
          Shape4{N, static_cast<std::int64_t>(cfg_.num_classes), 1, 1});
      ops::linear_forward(hs.gap, head_.linear_w, head_.linear_b, hs.logits);
      trace_.on_forward(head_.id_linear, OpKind::Linear,
                        ops::linear_flops(N, blk.c_out, cfg_.num_classes));
      if (!shared_fwd()) {
        bs.out_cat = out_cat;
        hs.act = a;
      }
    }
    state.blocks.push_back(std::move(bs));
  }
  return state;
}

template <typename T>
T GraphPlan<T>::compute_loss(StepState<T>& state,
                             const std::vector<int>& labels) {
  state.grad_logits = Tensor<T>::alloc(state.head.logits.shape(),
                                       ArenaTag::Scratch, *tracker_);
  state.loss = ops::softmax_xent(state.head.logits, labels, state.grad_logits);
  trace_.on_forward(head_.id_loss, OpKind::Loss,
                    ops::loss_flops(state.head.logits.shape().n,
                                    cfg_.num_classes));
  state.loss_ready = true;
  return state.loss;
}

// ---------------------------------------------------------------------------
// backward

template <typename T>
std::pair<Tensor<T>, Tensor<T>> GraphPlan<T>::rematerialize(
    const std::vector<Tensor<T>>& inputs, ops::BatchNormState<T>& bn,
    const ops::BatchStats<T>& stats, int id_cat, int id_bn, int id_relu) {
  std::int64_t total_c = 0;
  for (const auto& in : inputs) total_c += in.shape().c;
  const Shape4& s0 = inputs.front().shape();
  const Shape4 cat_shape{s0.n, total_c, s0.h, s0.w};
  pool_.shared1.reset();
  Tensor<T> cat = pool_.shared1.acquire(cat_shape);
  ops::concat_forward(inputs, cat);
  trace_.on_recompute(id_cat, OpKind::Concat, ops::concat_flops(cat.elems()));
  pool_.shared2.reset();
  Tensor<T> act = pool_.shared2.acquire(cat_shape);
  // Normalization reuses the statistics captured by the forward pass, so
  // the repopulated contents are bit-identical to what backward saw under
  // the retaining strategies.
  ops::batchnorm_apply(cat, bn, stats, act);
  trace_.on_recompute(id_bn, OpKind::BatchNorm,
                      ops::bn_forward_flops(act.elems()));
  ops::relu_inplace(act);
  trace_.on_recompute(id_relu, OpKind::Relu, ops::relu_flops(act.elems()));
  return {cat, act};
}

template <typename T>
void GraphPlan<T>::backward_layer(StepState<T>& state, Block& blk,
                                  Layer& layer, BlockSaved<T>& bsaved,
                                  LayerSaved<T>& lsaved, int layer_index,
                                  Tensor<T>& acc) {
  const std::int64_t N = state.input.shape().n;
  const std::int64_t h = blk.h, w = blk.w;
  const std::int64_t k = cfg_.growth_rate;
  const std::int64_t bk = cfg_.bottleneck_channels();
  const Shape4 cat_shape{N, layer.c_in, h, w};

  // Gradient of this layer's output feature: a channel slice of the block
  // accumulator. All contributions from later consumers are already in.
  Tensor<T> grad_out =
      acc.channel_view(blk.c_in + static_cast<std::int64_t>(layer_index) * k, k);

  auto find_grad = [this](const Tensor<T>& value) -> Tensor<T>& {
    for (auto& p : params_) {
      if (p.value.storage() == value.storage()) return p.grad;
    }
    throw ProtocolError("parameter not registered");
  };

  if (pre_act()) {
    Tensor<T> cat = lsaved.cat;
    Tensor<T> act_a = lsaved.act_a;
    Tensor<T> act_b = lsaved.act_b;
    if (shared_fwd()) {
      std::vector<Tensor<T>> inputs(bsaved.feats.begin(),
                                    bsaved.feats.begin() + 1 + layer_index);
      auto [rc, ra] = rematerialize(inputs, layer.bn_a, lsaved.stats_a,
                                    layer.id_cat, layer.id_bn_a,
                                    layer.id_relu_a);
      cat = rc;
      act_a = ra;
      if (layer.bottleneck) {
        const Shape4 mid{N, bk, h, w};
        Tensor<T> a2 = pool_.shared2.acquire(mid);
        ops::batchnorm_apply(lsaved.conv_a_out, layer.bn_b, lsaved.stats_b, a2);
        trace_.on_recompute(layer.id_bn_b, OpKind::BatchNorm,
                            ops::bn_forward_flops(a2.elems()));
        ops::relu_inplace(a2);
        trace_.on_recompute(layer.id_relu_b, OpKind::Relu,
                            ops::relu_flops(a2.elems()));
        act_b = a2;
      }
    }
    if (layer.bottleneck) {
      const Shape4 mid{N, bk, h, w};
      Tensor<T> t0 = grad_acquire(state, 0, mid);
      ops::conv2d_backward(grad_out, act_b, layer.conv_b, &t0,
                           find_grad(layer.conv_b.weights));
      trace_.on_backward(layer.id_conv_b, OpKind::Conv,
                         ops::conv_backward_flops(mid, layer.conv_b));
      ops::relu_backward_inplace(t0, act_b);
      trace_.on_backward(layer.id_relu_b, OpKind::Relu,
                         ops::relu_flops(t0.elems()));
      Tensor<T> t1 = grad_acquire(state, 1, mid);
      ops::batchnorm_backward(t0, lsaved.conv_a_out, layer.bn_b,
                              lsaved.stats_b, t1, find_grad(layer.bn_b.gamma),
                              find_grad(layer.bn_b.beta));
      trace_.on_backward(layer.id_bn_b, OpKind::BatchNorm,
                         ops::bn_backward_flops(t1.elems()));
      grad_release(0);
      Tensor<T> t2 = grad_acquire(state, 0, cat_shape);
      ops::conv2d_backward(t1, act_a, layer.conv_a, &t2,
                           find_grad(layer.conv_a.weights));
      trace_.on_backward(layer.id_conv_a, OpKind::Conv,
                         ops::conv_backward_flops(cat_shape, layer.conv_a));
      grad_release(1);
      ops::relu_backward_inplace(t2, act_a);
      trace_.on_backward(layer.id_relu_a, OpKind::Relu,
                         ops::relu_flops(t2.elems()));
      Tensor<T> t3 = grad_acquire(state, 1, cat_shape);
      ops::batchnorm_backward(t2, cat, layer.bn_a, lsaved.stats_a, t3,
                              find_grad(layer.bn_a.gamma),
                              find_grad(layer.bn_a.beta));
      trace_.on_backward(layer.id_bn_a, OpKind::BatchNorm,
                         ops::bn_backward_flops(t3.elems()));
      grad_release(0);
      // Concat backward: accumulate into the prefix of the block gradient.
      for (std::int64_t c = 0; c < layer.c_in; ++c)
        for (std::int64_t i = 0; i < N; ++i)
          for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x)
              acc.at(i, c, y, x) += t3.at(i, c, y, x);
      trace_.on_backward(layer.id_cat, OpKind::Concat,
                         ops::concat_flops(t3.elems()));
      grad_release(1);
    } else {
      Tensor<T> t0 = grad_acquire(state, 0, cat_shape);
      ops::conv2d_backward(grad_out, act_a, layer.conv_a, &t0,
                           find_grad(layer.conv_a.weights));
      trace_.on_backward(layer.id_conv_a, OpKind::Conv,
                         ops::conv_backward_flops(cat_shape, layer.conv_a));
      ops::relu_backward_inplace(t0, act_a);
      trace_.on_backward(layer.id_relu_a, OpKind::Relu,
                         ops::relu_flops(t0.elems()));
      Tensor<T> t1 = grad_acquire(state, 1, cat_shape);
      ops::batchnorm_backward(t0, cat, layer.bn_a, lsaved.stats_a, t1,
                              find_grad(layer.bn_a.gamma),
                              find_grad(layer.bn_a.beta));
      trace_.on_backward(layer.id_bn_a, OpKind::BatchNorm,
                         ops::bn_backward_flops(t1.elems()));
      grad_release(0);
      for (std::int64_t c = 0; c < layer.c_in; ++c)
        for (std::int64_t i = 0; i < N; ++i)
          for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x)
              acc.at(i, c, y, x) += t1.at(i, c, y, x);
      trace_.on_backward(layer.id_cat, OpKind::Concat,
                         ops::concat_flops(t1.elems()));
      grad_release(1);
    }
  } else {
    Tensor<T> cat = lsaved.cat;
    if (shared_fwd()) {
      std::vector<Tensor<T>> inputs(bsaved.feats.begin(),
                                    bsaved.feats.begin() + 1 + layer_index);
      pool_.shared1.reset();
      cat = pool_.shared1.acquire(cat_shape);
      ops::concat_forward(inputs, cat);
      trace_.on_recompute(layer.id_cat, OpKind::Concat,
                          ops::concat_flops(cat.elems()));
    }
    if (layer.bottleneck) {
      // grad_out is consumed exactly once, so the relu mask may be applied
      // in place on the accumulator slice.
      ops::relu_backward_inplace(grad_out, lsaved.act_b);
      trace_.on_backward(layer.id_relu_b, OpKind::Relu,
                         ops::relu_flops(grad_out.elems()));
      const Shape4 out_shape{N, k, h, w};
      const Shape4 mid{N, bk, h, w};
      Tensor<T> t0 = grad_acquire(state, 0, out_shape);
      ops::batchnorm_backward(grad_out, lsaved.conv_b_out, layer.bn_b,
                              lsaved.stats_b, t0, find_grad(layer.bn_b.gamma),
                              find_grad(layer.bn_b.beta));
      trace_.on_backward(layer.id_bn_b, OpKind::BatchNorm,
                         ops::bn_backward_flops(t0.elems()));
      Tensor<T> t1 = grad_acquire(state, 1, mid);
      ops::conv2d_backward(t0, lsaved.act_a, layer.conv_b, &t1,
                           find_grad(layer.conv_b.weights));
      trace_.on_backward(layer.id_conv_b, OpKind::Conv,
                         ops::conv_backward_flops(mid, layer.conv_b));
      grad_release(0);
      ops::relu_backward_inplace(t1, lsaved.act_a);
      trace_.on_backward(layer.id_relu_a, OpKind::Relu,
                         ops::relu_flops(t1.elems()));
      Tensor<T> t2 = grad_acquire(state, 0, mid);
      ops::batchnorm_backward(t1, lsaved.conv_a_out, layer.bn_a,
                              lsaved.stats_a, t2, find_grad(layer.bn_a.gamma),
                              find_grad(layer.bn_a.beta));
      trace_.on_backward(layer.id_bn_a, OpKind::BatchNorm,
                         ops::bn_backward_flops(t2.elems()));
      grad_release(1);
      Tensor<T> t3 = grad_acquire(state, 1, cat_shape);
      ops::conv2d_backward(t2, cat, layer.conv_a, &t3,
                           find_grad(layer.conv_a.weights));
      trace_.on_backward(layer.id_conv_a, OpKind::Conv,
                         ops::conv_backward_flops(cat_shape, layer.conv_a));
      grad_release(0);
      for (std::int64_t c = 0; c < layer.c_in; ++c)
        for (std::int64_t i = 0; i < N; ++i)
          for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x)
              acc.at(i, c, y, x) += t3.at(i, c, y, x);
      trace_.on_backward(layer.id_cat, OpKind::Concat,
                         ops::concat_flops(t3.elems()));
      grad_release(1);
    } else {
      ops::relu_backward_inplace(grad_out, lsaved.act_a);
      trace_.on_backward(layer.id_relu_a, OpKind::Relu,
                         ops::relu_flops(grad_out.elems()));
      const Shape4 out_shape{N, k, h, w};
      Tensor<T> t0 = grad_acquire(state, 0, out_shape);
      ops::batchnorm_backward(grad_out, lsaved.conv_a_out, layer.bn_a,
                              lsaved.stats_a, t0, find_grad(layer.bn_a.gamma),
                              find_grad(layer.bn_a.beta));
      trace_.on_backward(layer.id_bn_a, OpKind::BatchNorm,
                         ops::bn_backward_flops(t0.elems()));
      Tensor<T> t1 = grad_acquire(state, 1, cat_shape);
      ops::conv2d_backward(t0, cat, layer.conv_a, &t1,
                           find_grad(layer.conv_a.weights));
      trace_.on_backward(layer.id_conv_a, OpKind::Conv,
                         ops::conv_backward_flops(cat_shape, layer.conv_a));
      grad_release(0);
      for (std::int64_t c = 0; c < layer.c_in; ++c)
        for (std::int64_t i = 0; i < N; ++i)
          for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x)
              acc.at(i, c, y, x) += t1.at(i, c, y, x);
      trace_.on_backward(layer.id_cat, OpKind::Concat,
                         ops::concat_flops(t1.elems()));
      grad_release(1);
    }
  }
}

template <typename T>
void GraphPlan<T>::backward_block(StepState<T>& state, int block_index,
                                  Tensor<T>& acc) {
  Block& blk = blocks_[static_cast<std::size_t>(block_index)];
  BlockSaved<T>& bsaved = state.blocks[static_cast<std::size_t>(block_index)];
  for (int l = static_cast<int>(blk.layers.size()) - 1; l >= 0; --l) {
    backward_layer(state, blk, blk.layers[static_cast<std::size_t>(l)], bsaved,
                   bsaved.layers[static_cast<std::size_t>(l)], l, acc);
  }
}

template <typename T>
void GraphPlan<T>::backward(StepState<T>& state) {
  if (state.mode != ops::BnMode::Train || !state.loss_ready) {
    throw ProtocolError(
        "backward requires a train-mode forward with a computed loss");
  }
  const std::int64_t N = state.input.shape().n;
  const int nblocks = static_cast<int>(blocks_.size());
  trace_.on_backward(head_.id_loss, OpKind::Loss, 0.0);

  auto find_grad = [this](const Tensor<T>& value) -> Tensor<T>& {
    for (auto& p : params_) {
      if (p.value.storage() == value.storage()) return p.grad;
    }
    throw ProtocolError("parameter not registered");
  };

  // Accumulator slots alternate so two block gradients can overlap while
  // gradient flow crosses a transition.
  const auto acc_slot = [nblocks](int block_index) {
    return 2 + (nblocks - 1 - block_index) % 2;
  };

  // ---- head ----
  Block& last_blk = blocks_.back();
  BlockSaved<T>& last_saved = state.blocks.back();
  const Shape4 head_shape{N, last_blk.c_out, last_blk.h, last_blk.w};

  Tensor<T> g_gap = grad_acquire(state, 0, Shape4{N, last_blk.c_out, 1, 1});
  ops::linear_backward(state.grad_logits, state.head.gap, head_.linear_w,
                       g_gap, head_.grad_linear_w, head_.grad_linear_b);
  trace_.on_backward(head_.id_linear, OpKind::Linear,
                     2.0 * ops::linear_flops(N, last_blk.c_out,
                                             cfg_.num_classes));
  Tensor<T> g_act = grad_acquire(state, 1, head_shape);
  ops::global_avgpool_backward(g_gap, g_act);
  trace_.on_backward(head_.id_gap, OpKind::Pool,
                     ops::pool_flops(g_act.elems()));
  grad_release(0);

  Tensor<T> head_cat = last_saved.out_cat;
  Tensor<T> head_act = state.head.act;
  if (shared_fwd()) {
    auto [rc, ra] =
        rematerialize(last_saved.feats, head_.bn, state.head.stats,
                      last_blk.id_out_cat, head_.id_bn, head_.id_relu);
    head_cat = rc;
    head_act = ra;
  }
  ops::relu_backward_inplace(g_act, head_act);
  trace_.on_backward(head_.id_relu, OpKind::Relu,
                     ops::relu_flops(g_act.elems()));
  Tensor<T> acc =
      grad_acquire(state, acc_slot(nblocks - 1), head_shape);
  ops::batchnorm_backward(g_act, head_cat, head_.bn, state.head.stats, acc,
                          find_grad(head_.bn.gamma), find_grad(head_.bn.beta));
  trace_.on_backward(head_.id_bn, OpKind::BatchNorm,
                     ops::bn_backward_flops(acc.elems()));
  grad_release(1);

  // ---- blocks in reverse, joined by transitions ----
  for (int b = nblocks - 1; b >= 0; --b) {
    backward_block(state, b, acc);
    if (b > 0) {
      Transition& tr = transitions_[static_cast<std::size_t>(b - 1)];
      TransSaved<T>& ts = state.trans[static_cast<std::size_t>(b - 1)];
      Block& prev_blk = blocks_[static_cast<std::size_t>(b - 1)];
      BlockSaved<T>& prev_saved = state.blocks[static_cast<std::size_t>(b - 1)];
      const Shape4 tr_in_shape{N, tr.c_in, prev_blk.h, prev_blk.w};
      const Shape4 conv_shape{N, tr.c_out, prev_blk.h, prev_blk.w};

      // Gradient w.r.t. the transition's pool output is the input prefix of
      // the downstream block's accumulator.
      Tensor<T> g_pool = acc.channel_view(0, tr.c_out);
      Tensor<T> g_conv = grad_acquire(state, 0, conv_shape);
      ops::avgpool2d_backward(g_pool, 2, 2, g_conv);
      trace_.on_backward(tr.id_pool, OpKind::Pool,
                         ops::pool_flops(g_conv.elems()));

      Tensor<T> tr_cat = prev_saved.out_cat;
      Tensor<T> tr_act = ts.act;
      if (shared_fwd()) {
        auto [rc, ra] = rematerialize(prev_saved.feats, tr.bn, ts.stats,
                                      prev_blk.id_out_cat, tr.id_bn,
                                      tr.id_relu);
        tr_cat = rc;
        tr_act = ra;
      }
      Tensor<T> g_trin = grad_acquire(state, 1, tr_in_shape);
      ops::conv2d_backward(g_conv, tr_act, tr.conv, &g_trin,
                           find_grad(tr.conv.weights));
      trace_.on_backward(tr.id_conv, OpKind::Conv,
                         ops::conv_backward_flops(tr_in_shape, tr.conv));
      grad_release(0);
      ops::relu_backward_inplace(g_trin, tr_act);
      trace_.on_backward(tr.id_relu, OpKind::Relu,
                         ops::relu_flops(g_trin.elems()));
      Tensor<T> next_acc = grad_acquire(state, acc_slot(b - 1), tr_in_shape);
      ops::batchnorm_backward(g_trin, tr_cat, tr.bn, ts.stats, next_acc,
                              find_grad(tr.bn.gamma), find_grad(tr.bn.beta));
      trace_.on_backward(tr.id_bn, OpKind::BatchNorm,
                         ops::bn_backward_flops(next_acc.elems()));
      grad_release(1);
      grad_release(acc_slot(b));
      acc = next_acc;
    } else {
      // Stem: only the weight gradient is needed, the input is data.
      Tensor<T> g_stem =
          acc.channel_view(0, static_cast<std::int64_t>(cfg_.initial_channels));
      ops::conv2d_backward(g_stem, state.input, stem_,
                           static_cast<Tensor<T>*>(nullptr),
                           find_grad(stem_.weights));
      trace_.on_backward(id_stem_, OpKind::Conv,
                         ops::conv_backward_flops(state.input.shape(), stem_));
      grad_release(acc_slot(0));
      acc = Tensor<T>();
    }
  }
}

template <typename T>
StepResult<T> GraphPlan<T>::step_trace(const Tensor<T>& input,
                                       const std::vector<int>& labels) {
  trace_.reset();
  tracker_->reset_peaks();
  zero_grads();

  StepState<T> state = forward(input, ops::BnMode::Train);
  compute_loss(state, labels);
  backward(state);

  StepResult<T> result;
  result.loss = state.loss;
  result.mem = tracker_->snapshot();
  result.trace = trace_;
  const std::int64_t N = input.shape().n;
  result.predictions.resize(static_cast<std::size_t>(N));
  for (std::int64_t i = 0; i < N; ++i) {
    int best = 0;
    for (int j = 1; j < cfg_.num_classes; ++j) {
      if (state.head.logits.at(i, j, 0, 0) >
          state.head.logits.at(i, best, 0, 0)) {
        best = j;
      }
    }
    result.predictions[static_cast<std::size_t>(i)] = best;
  }
  return result;
}

}  // namespace denseplan

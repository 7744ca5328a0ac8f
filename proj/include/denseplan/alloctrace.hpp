#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "denseplan/errors.hpp"

namespace denseplan {

// Storage class of a tensor. Shared1/Shared2/SharedGrad are pooled regions
// allocated once per plan; FeatureOwned tensors are uniquely owned
// per-allocation. Params holds weights and their gradient buffers and is
// excluded from feature-memory accounting.
enum class ArenaTag {
  Params = 0,
  FeatureOwned = 1,
  Shared1 = 2,
  Shared2 = 3,
  SharedGrad = 4,
  Scratch = 5,
};

inline constexpr int kArenaCount = 6;

inline constexpr bool is_feature_arena(ArenaTag tag) {
  return tag != ArenaTag::Params;
}

inline const char* arena_name(ArenaTag tag) {
  switch (tag) {
    case ArenaTag::Params: return "params";
    case ArenaTag::FeatureOwned: return "feature_owned";
    case ArenaTag::Shared1: return "shared1";
    case ArenaTag::Shared2: return "shared2";
    case ArenaTag::SharedGrad: return "shared_grad";
    case ArenaTag::Scratch: return "scratch";
  }
  return "?";
}

struct MemoryStats {
  std::array<std::int64_t, kArenaCount> live_bytes{};
  std::array<std::int64_t, kArenaCount> peak_bytes{};
  // Sum over all feature arenas at the instant the combined feature live
  // count was highest.
  std::int64_t total_feature_peak_bytes = 0;
  std::int64_t param_bytes = 0;

  friend bool operator==(const MemoryStats&, const MemoryStats&) = default;
};

// Exact byte accounting by explicit instrumentation at tensor alloc/free
// sites. One tracker per execution context; not thread safe by design.
class MemoryTracker {
 public:
  void record_alloc(ArenaTag tag, std::int64_t bytes) {
    const int i = static_cast<int>(tag);
    live_[i] += bytes;
    peak_[i] = std::max(peak_[i], live_[i]);
    if (is_feature_arena(tag)) {
      feature_live_ += bytes;
      feature_peak_ = std::max(feature_peak_, feature_live_);
    }
  }

  void record_free(ArenaTag tag, std::int64_t bytes) {
    const int i = static_cast<int>(tag);
    if (bytes > live_[i]) {
      throw AccountingError(std::string("free of ") + std::to_string(bytes) +
                            " bytes exceeds live count in arena " +
                            arena_name(tag));
    }
    live_[i] -= bytes;
    if (is_feature_arena(tag)) feature_live_ -= bytes;
  }

  MemoryStats snapshot() const {
    MemoryStats s;
    s.live_bytes = live_;
    s.peak_bytes = peak_;
    s.total_feature_peak_bytes = feature_peak_;
    s.param_bytes = live_[static_cast<int>(ArenaTag::Params)];
    return s;
  }

  // Collapses all peaks to the current live values (step boundary).
  void reset_peaks() {
    peak_ = live_;
    feature_peak_ = feature_live_;
  }

  std::int64_t live(ArenaTag tag) const { return live_[static_cast<int>(tag)]; }
  std::int64_t peak(ArenaTag tag) const { return peak_[static_cast<int>(tag)]; }
  std::int64_t feature_live() const { return feature_live_; }
  std::int64_t feature_peak() const { return feature_peak_; }

 private:
  std::array<std::int64_t, kArenaCount> live_{};
  std::array<std::int64_t, kArenaCount> peak_{};
  std::int64_t feature_live_ = 0;
  std::int64_t feature_peak_ = 0;
};

enum class OpKind {
  Concat = 0,
  BatchNorm = 1,
  Relu = 2,
  Conv = 3,
  Pool = 4,
  Linear = 5,
  Loss = 6,
};

inline constexpr int kOpKindCount = 7;

inline const char* op_kind_name(OpKind k) {
  switch (k) {
    case OpKind::Concat: return "concat";
    case OpKind::BatchNorm: return "batchnorm";
    case OpKind::Relu: return "relu";
    case OpKind::Conv: return "conv";
    case OpKind::Pool: return "pool";
    case OpKind::Linear: return "linear";
    case OpKind::Loss: return "loss";
  }
  return "?";
}

// Per-node execution counts and per-kind floating point operation estimates
// for one training step. Recompute events are forward re-executions issued
// during back-propagation to repopulate shared storage.
class OpTrace {
 public:
  struct NodeCounts {
    int forward = 0;
    int backward = 0;
    int recompute = 0;
  };

  void resize(std::size_t node_count) { nodes_.assign(node_count, {}); }

  void reset() {
    std::fill(nodes_.begin(), nodes_.end(), NodeCounts{});
    forward_flops_.fill(0.0);
    backward_flops_.fill(0.0);
    recompute_flops_.fill(0.0);
  }

  void on_forward(int node, OpKind kind, double flops) {
    nodes_.at(static_cast<std::size_t>(node)).forward++;
    forward_flops_[static_cast<int>(kind)] += flops;
  }

  void on_backward(int node, OpKind kind, double flops) {
    nodes_.at(static_cast<std::size_t>(node)).backward++;
    backward_flops_[static_cast<int>(kind)] += flops;
  }

  void on_recompute(int node, OpKind kind, double flops) {
    nodes_.at(static_cast<std::size_t>(node)).recompute++;
    recompute_flops_[static_cast<int>(kind)] += flops;
  }

  const NodeCounts& node(int id) const {
    return nodes_.at(static_cast<std::size_t>(id));
  }
  std::size_t node_count() const { return nodes_.size(); }

  double forward_flops(OpKind k) const {
    return forward_flops_[static_cast<int>(k)];
  }
  double backward_flops(OpKind k) const {
    return backward_flops_[static_cast<int>(k)];
  }
  double recompute_flops(OpKind k) const {
    return recompute_flops_[static_cast<int>(k)];
  }

  double total_flops() const {
    double t = 0.0;
    for (int k = 0; k < kOpKindCount; ++k) {
      t += forward_flops_[k] + backward_flops_[k] + recompute_flops_[k];
    }
    return t;
  }

  double total_recompute_flops() const {
    double t = 0.0;
    for (int k = 0; k < kOpKindCount; ++k) t += recompute_flops_[k];
    return t;
  }

 private:
  std::vector<NodeCounts> nodes_;
  std::array<double, kOpKindCount> forward_flops_{};
  std::array<double, kOpKindCount> backward_flops_{};
  std::array<double, kOpKindCount> recompute_flops_{};
};

}  // namespace denseplan

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <vector>

#include "denseplan/densenet.hpp"

namespace denseplan {

struct PeakPrediction {
  std::array<std::int64_t, kArenaCount> elems{};

  std::int64_t arena(ArenaTag tag) const {
    return elems[static_cast<int>(tag)];
  }
  std::int64_t feature_total() const {
    std::int64_t t = 0;
    for (int i = 0; i < kArenaCount; ++i) {
      if (is_feature_arena(static_cast<ArenaTag>(i))) t += elems[i];
    }
    return t;
  }
};

// Closed-form per-arena peak element counts for one training step, mirroring
// the engine's allocation discipline exactly:
//  - every forward output and (under Naive) every gradient buffer is
//    retained until the end of the step, so the Naive peak is the plain sum
//    of all allocations;
//  - pooled strategies allocate their pools once at plan build, sized to the
//    largest single user (Shared1/Shared2) or to four fixed gradient regions
//    (two block accumulators that overlap at block handoff plus two
//    transient slots).
// The instrumented run must match these numbers element-for-element.
inline PeakPrediction predict_peak_elements(const DenseNetConfig& cfg,
                                            ExecutionStrategy strategy,
                                            std::int64_t batch, int in_c,
                                            int in_h, int in_w) {
  const NetGeometry g = net_geometry(cfg, in_c, in_h, in_w);
  const std::int64_t N = batch;
  if (N < 1) throw ConfigError("batch must be >= 1");
  const std::int64_t k = cfg.growth_rate;
  const std::int64_t bk = cfg.bottleneck_channels();
  const bool pre = cfg.activation_order == ActivationOrder::PreActivation;

  std::int64_t owned_forward = 0;
  std::vector<std::int64_t> cat_sizes;
  std::vector<std::int64_t> bn_pool_sizes;   // rematerializable bn outputs
  std::vector<std::int64_t> bn_unit_sizes;   // simultaneous shared2 demand
  std::vector<std::int64_t> grad_transients;
  std::vector<std::int64_t> acc_sizes;

  owned_forward += static_cast<std::int64_t>(g.stem_out) * g.in_h * g.in_w * N;

  const std::size_t nblocks = g.blocks.size();
  for (std::size_t b = 0; b < nblocks; ++b) {
    const auto& blk = g.blocks[b];
    const std::int64_t hw = static_cast<std::int64_t>(blk.h) * blk.w;
    for (int l = 0; l < blk.layers; ++l) {
      const std::int64_t cl = blk.c_in + static_cast<std::int64_t>(l) * k;
      cat_sizes.push_back(cl * hw * N);
      if (pre) {
        bn_pool_sizes.push_back(cl * hw * N);
        if (cfg.bottleneck) {
          bn_pool_sizes.push_back(bk * hw * N);
          bn_unit_sizes.push_back((cl + bk) * hw * N);
          owned_forward += bk * hw * N + k * hw * N;
          grad_transients.insert(grad_transients.end(),
                                 {bk * hw * N, bk * hw * N, cl * hw * N,
                                  cl * hw * N});
        } else {
          bn_unit_sizes.push_back(cl * hw * N);
          owned_forward += k * hw * N;
          grad_transients.insert(grad_transients.end(),
                                 {cl * hw * N, cl * hw * N});
        }
      } else {
        if (cfg.bottleneck) {
          owned_forward += bk * hw * N + bk * hw * N + k * hw * N + k * hw * N;
          grad_transients.insert(
              grad_transients.end(),
              {k * hw * N, bk * hw * N, bk * hw * N, cl * hw * N});
        } else {
          owned_forward += k * hw * N + k * hw * N;
          grad_transients.insert(grad_transients.end(),
                                 {k * hw * N, cl * hw * N});
        }
      }
    }
    const std::int64_t cout = blk.c_out;
    cat_sizes.push_back(cout * hw * N);  // block-output concatenation
    acc_sizes.push_back(cout * hw * N);
    if (b + 1 < nblocks) {
      const auto& tr = g.transitions[b];
      const std::int64_t hw_half =
          (static_cast<std::int64_t>(tr.h_in) - 2) / 2 + 1;
      const std::int64_t ww_half =
          (static_cast<std::int64_t>(tr.w_in) - 2) / 2 + 1;
      bn_pool_sizes.push_back(cout * hw * N);
      bn_unit_sizes.push_back(cout * hw * N);
      owned_forward += static_cast<std::int64_t>(tr.c_out) * hw * N;
      owned_forward +=
          static_cast<std::int64_t>(tr.c_out) * hw_half * ww_half * N;
      grad_transients.insert(
          grad_transients.end(),
          {static_cast<std::int64_t>(tr.c_out) * hw * N, cout * hw * N});
    } else {
      // head
      bn_pool_sizes.push_back(cout * hw * N);
      bn_unit_sizes.push_back(cout * hw * N);
      owned_forward += cout * N;                 // global average pool
      owned_forward += cfg.num_classes * N;      // logits
      grad_transients.insert(grad_transients.end(),
                             {cout * N, cout * hw * N});
    }
  }

  const auto sum = [](const std::vector<std::int64_t>& v) {
    std::int64_t t = 0;
    for (std::int64_t x : v) t += x;
    return t;
  };
  const auto maxv = [](const std::vector<std::int64_t>& v) {
    std::int64_t t = 0;
    for (std::int64_t x : v) t = std::max(t, x);
    return t;
  };

  const std::int64_t grad_region =
      std::max(maxv(grad_transients), maxv(acc_sizes));

  PeakPrediction p;
  auto& e = p.elems;
  e[static_cast<int>(ArenaTag::Params)] = 2 * count_parameters(cfg, in_c);
  e[static_cast<int>(ArenaTag::Scratch)] =
      static_cast<std::int64_t>(cfg.num_classes) * N;
  switch (strategy) {
    case ExecutionStrategy::Naive:
      e[static_cast<int>(ArenaTag::FeatureOwned)] =
          owned_forward + sum(cat_sizes) + sum(bn_pool_sizes) +
          sum(grad_transients) + sum(acc_sizes);
      break;
    case ExecutionStrategy::SharedGradient:
      e[static_cast<int>(ArenaTag::FeatureOwned)] =
          owned_forward + sum(cat_sizes) + sum(bn_pool_sizes);
      e[static_cast<int>(ArenaTag::SharedGrad)] = 4 * grad_region;
      break;
    case ExecutionStrategy::SharedAll:
      e[static_cast<int>(ArenaTag::FeatureOwned)] = owned_forward;
      e[static_cast<int>(ArenaTag::Shared1)] = maxv(cat_sizes);
      e[static_cast<int>(ArenaTag::Shared2)] = maxv(bn_unit_sizes);
      e[static_cast<int>(ArenaTag::SharedGrad)] = 4 * grad_region;
      break;
  }
  return p;
}

}  // namespace denseplan

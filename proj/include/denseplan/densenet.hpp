#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "denseplan/alloctrace.hpp"
#include "denseplan/errors.hpp"

namespace denseplan {

enum class ActivationOrder { PreActivation, PostActivation };

// Which intermediates a plan retains, pools, or recomputes.
//  - Naive: every intermediate and every gradient is a fresh owned
//    allocation retained until the end of the step.
//  - SharedGradient: forward as Naive; all backward gradient buffers draw
//    from the pooled SharedGrad storage.
//  - SharedAll: concat outputs live in Shared1, rematerializable batchnorm
//    outputs in Shared2, gradients in SharedGrad; concat/batchnorm are
//    recomputed on backward.
enum class ExecutionStrategy { Naive, SharedGradient, SharedAll };

inline const char* strategy_name(ExecutionStrategy s) {
  switch (s) {
    case ExecutionStrategy::Naive: return "naive";
    case ExecutionStrategy::SharedGradient: return "shared-grad";
    case ExecutionStrategy::SharedAll: return "shared-all";
  }
  return "?";
}

inline ExecutionStrategy strategy_from_name(const std::string& name) {
  if (name == "naive") return ExecutionStrategy::Naive;
  if (name == "shared-grad") return ExecutionStrategy::SharedGradient;
  if (name == "shared-all") return ExecutionStrategy::SharedAll;
  throw ConfigError("unknown strategy '" + name + "'");
}

struct DenseNetConfig {
  std::vector<int> block_sizes;
  int growth_rate = 12;
  bool bottleneck = false;
  double compression = 1.0;  // transition output channels = floor(theta * c)
  int initial_channels = 24;
  ActivationOrder activation_order = ActivationOrder::PreActivation;
  int num_classes = 10;

  void validate() const {
    if (block_sizes.empty()) throw ConfigError("no dense blocks configured");
    for (int m : block_sizes) {
      if (m < 1) throw ConfigError("block size must be >= 1");
    }
    if (growth_rate < 1) throw ConfigError("growth rate must be >= 1");
    if (initial_channels < 1) throw ConfigError("initial channels must be >= 1");
    if (!(compression > 0.0) || compression > 1.0) {
      throw ConfigError("compression must be in (0, 1]");
    }
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  }

  int bottleneck_channels() const { return 4 * growth_rate; }
};

inline DenseNetConfig build_config(std::vector<int> blocks, int growth_rate,
                                   bool bottleneck, double compression,
                                   ActivationOrder order, int num_classes,
                                   int initial_channels = -1) {
  DenseNetConfig cfg;
  cfg.block_sizes = std::move(blocks);
  cfg.growth_rate = growth_rate;
  cfg.bottleneck = bottleneck;
  cfg.compression = compression;
  cfg.activation_order = order;
  cfg.num_classes = num_classes;
  cfg.initial_channels = initial_channels > 0 ? initial_channels : 2 * growth_rate;
  cfg.validate();
  return cfg;
}

// Named presets. The two "paper-*" models are constructible configurations
// only; training them is out of desk-scale reach.
inline DenseNetConfig preset_config(const std::string& name) {
  if (name == "desk") {
    return build_config({2, 2, 2}, 4, false, 1.0,
                        ActivationOrder::PreActivation, 4);
  }
  if (name == "tiny") {
    return build_config({2}, 4, false, 1.0, ActivationOrder::PreActivation, 4,
                        8);
  }
  if (name == "paper-264-k48") {
    return build_config({6, 32, 64, 48}, 48, true, 0.5,
                        ActivationOrder::PreActivation, 1000);
  }
  if (name == "paper-264-k32") {
    return build_config({6, 32, 64, 48}, 32, true, 0.5,
                        ActivationOrder::PreActivation, 1000);
  }
  if (name == "paper-232-k48") {
    return build_config({6, 32, 48, 48}, 48, true, 0.5,
                        ActivationOrder::PreActivation, 1000);
  }
  if (name == "bc-160-k12") {
    return build_config({26, 26, 26}, 12, true, 0.5,
                        ActivationOrder::PreActivation, 10);
  }
  throw ConfigError("unknown preset '" + name + "'");
}

inline int transition_out_channels(const DenseNetConfig& cfg, int c) {
  return static_cast<int>(std::floor(cfg.compression * c));
}

// Channel/spatial bookkeeping for a built network: a 3x3 stem producing
// initial_channels, dense blocks joined by transitions (BN-ReLU-1x1
// conv-2x2 avgpool), and a BN-ReLU-GAP-linear head.
struct NetGeometry {
  struct Block {
    int c_in = 0;     // channels entering the block
    int c_out = 0;    // c_in + layers * growth_rate
    int h = 0, w = 0; // spatial size inside the block
    int layers = 0;
  };
  struct Transition {
    int c_in = 0, c_out = 0;
    int h_in = 0, w_in = 0;  // output spatial is half of this
  };
  int in_c = 0, in_h = 0, in_w = 0;
  int stem_out = 0;
  std::vector<Block> blocks;
  std::vector<Transition> transitions;
};

inline NetGeometry net_geometry(const DenseNetConfig& cfg, int in_c, int in_h,
                                int in_w) {
  cfg.validate();
  if (in_c < 1 || in_h < 1 || in_w < 1) {
    throw ConfigError("invalid input shape");
  }
  NetGeometry g;
  g.in_c = in_c;
  g.in_h = in_h;
  g.in_w = in_w;
  g.stem_out = cfg.initial_channels;
  int c = cfg.initial_channels;
  int h = in_h, w = in_w;
  for (std::size_t b = 0; b < cfg.block_sizes.size(); ++b) {
    NetGeometry::Block blk;
    blk.c_in = c;
    blk.layers = cfg.block_sizes[b];
    blk.c_out = c + blk.layers * cfg.growth_rate;
    blk.h = h;
    blk.w = w;
    g.blocks.push_back(blk);
    c = blk.c_out;
    if (b + 1 < cfg.block_sizes.size()) {
      NetGeometry::Transition t;
      t.c_in = c;
      t.c_out = transition_out_channels(cfg, c);
      t.h_in = h;
      t.w_in = w;
      if (t.c_out < 1) throw ConfigError("compression collapses channels to 0");
      if (h < 2 || w < 2) {
        throw ConfigError("spatial size collapses below transition pool window");
      }
      g.transitions.push_back(t);
      c = t.c_out;
      h = (h - 2) / 2 + 1;
      w = (w - 2) / 2 + 1;
    }
  }
  return g;
}

// Ordered op sequence for one dense layer.
struct LayerOp {
  OpKind kind;
  int kernel = 0;        // conv only: 1 or 3
  int out_channels = 0;  // conv only
};

struct LayerSpec {
  std::vector<LayerOp> ops;
};

inline LayerSpec layer_spec(const DenseNetConfig& cfg, int block_index,
                            int layer_index) {
  cfg.validate();
  if (block_index < 0 ||
      block_index >= static_cast<int>(cfg.block_sizes.size()) ||
      layer_index < 0 ||
      layer_index >= cfg.block_sizes[static_cast<std::size_t>(block_index)]) {
    throw BoundsError("layer_spec index out of range");
  }
  const int k = cfg.growth_rate;
  const int bk = cfg.bottleneck_channels();
  LayerSpec spec;
  auto add = [&spec](OpKind kind, int kernel = 0, int out = 0) {
    spec.ops.push_back(LayerOp{kind, kernel, out});
  };
  add(OpKind::Concat);
  if (cfg.activation_order == ActivationOrder::PreActivation) {
    add(OpKind::BatchNorm);
    add(OpKind::Relu);
    if (cfg.bottleneck) {
      add(OpKind::Conv, 1, bk);
      add(OpKind::BatchNorm);
      add(OpKind::Relu);
    }
    add(OpKind::Conv, 3, k);
  } else {
    if (cfg.bottleneck) {
      add(OpKind::Conv, 1, bk);
      add(OpKind::BatchNorm);
      add(OpKind::Relu);
    }
    add(OpKind::Conv, 3, k);
    add(OpKind::BatchNorm);
    add(OpKind::Relu);
  }
  return spec;
}

// Exact parameter count of the constructed model: stem conv, per-layer
// BN gamma/beta and conv weights, transition BN + 1x1 conv, head BN +
// linear classifier. Convolutions are bias-free (BN supplies the bias).
inline std::int64_t count_parameters(const DenseNetConfig& cfg, int in_c) {
  cfg.validate();
  const std::int64_t k = cfg.growth_rate;
  const std::int64_t bk = cfg.bottleneck_channels();
  std::int64_t total = 0;
  std::int64_t c = cfg.initial_channels;
  total += static_cast<std::int64_t>(in_c) * c * 9;  // stem 3x3
  for (std::size_t b = 0; b < cfg.block_sizes.size(); ++b) {
    for (int l = 0; l < cfg.block_sizes[b]; ++l) {
      if (cfg.activation_order == ActivationOrder::PreActivation) {
        total += 2 * c;  // bn on the concatenated input
        if (cfg.bottleneck) {
          total += c * bk;       // 1x1
          total += 2 * bk;       // second bn
          total += bk * k * 9;   // 3x3
        } else {
          total += c * k * 9;
        }
      } else {
        if (cfg.bottleneck) {
          total += c * bk;      // 1x1
          total += 2 * bk;      // bn after it
          total += bk * k * 9;  // 3x3
          total += 2 * k;       // bn after it
        } else {
          total += c * k * 9;
          total += 2 * k;
        }
      }
      c += k;
    }
    if (b + 1 < cfg.block_sizes.size()) {
      const std::int64_t t = transition_out_channels(cfg, static_cast<int>(c));
      total += 2 * c;  // transition bn
      total += c * t;  // 1x1 conv
      c = t;
    }
  }
  total += 2 * c;                                    // head bn
  total += c * cfg.num_classes + cfg.num_classes;    // linear + bias
  return total;
}

// ---------------------------------------------------------------------------
// flat key=value serialization

inline std::string config_to_text(const DenseNetConfig& cfg) {
  std::ostringstream os;
  os << "blocks=";
  for (std::size_t i = 0; i < cfg.block_sizes.size(); ++i) {
    if (i) os << ",";
    os << cfg.block_sizes[i];
  }
  os << "\n";
  os << "growth_rate=" << cfg.growth_rate << "\n";
  os << "bottleneck=" << (cfg.bottleneck ? 1 : 0) << "\n";
  os << "compression=" << cfg.compression << "\n";
  os << "initial_channels=" << cfg.initial_channels << "\n";
  os << "activation="
     << (cfg.activation_order == ActivationOrder::PreActivation ? "pre"
                                                                : "post")
     << "\n";
  os << "num_classes=" << cfg.num_classes << "\n";
  return os.str();
}

// Parses flat `key=value` lines; '#' starts a comment, blank lines ignored.
inline std::map<std::string, std::string> parse_key_values(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    // trim
    const auto notspace = [](unsigned char ch) { return !std::isspace(ch); };
    line.erase(line.begin(),
               std::find_if(line.begin(), line.end(), notspace));
    line.erase(std::find_if(line.rbegin(), line.rend(), notspace).base(),
               line.end());
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError("config line " + std::to_string(lineno) +
                        " is not key=value: '" + line + "'");
    }
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw FormatError("bad integer '" + item + "' in list '" + s + "'");
    }
  }
  return out;
}

inline DenseNetConfig config_from_key_values(
    const std::map<std::string, std::string>& kv) {
  DenseNetConfig cfg;
  try {
    if (auto it = kv.find("blocks"); it != kv.end())
      cfg.block_sizes = parse_int_list(it->second);
    if (auto it = kv.find("growth_rate"); it != kv.end())
      cfg.growth_rate = std::stoi(it->second);
    if (auto it = kv.find("bottleneck"); it != kv.end())
      cfg.bottleneck = std::stoi(it->second) != 0;
    if (auto it = kv.find("compression"); it != kv.end())
      cfg.compression = std::stod(it->second);
    if (auto it = kv.find("initial_channels"); it != kv.end())
      cfg.initial_channels = std::stoi(it->second);
    if (auto it = kv.find("activation"); it != kv.end()) {
      if (it->second == "pre")
        cfg.activation_order = ActivationOrder::PreActivation;
      else if (it->second == "post")
        cfg.activation_order = ActivationOrder::PostActivation;
      else
        throw FormatError("activation must be 'pre' or 'post'");
    }
    if (auto it = kv.find("num_classes"); it != kv.end())
      cfg.num_classes = std::stoi(it->second);
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(std::string("bad config value: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

inline DenseNetConfig config_from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config file '" + path + "'");
  return config_from_key_values(parse_key_values(in));
}

}  // namespace denseplan

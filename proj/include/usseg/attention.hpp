#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "usseg/blocks.hpp"
#include "usseg/raster.hpp"

namespace usseg {

enum class Fusion { vector_concat, element_add };
enum class NormOrder { bn_then_relu, relu_then_bn };
enum class AttentionKind { mixed, spatial };

inline std::string_view to_string(Fusion f) {
  return f == Fusion::vector_concat ? "vector-concat" : "element-add";
}
inline std::string_view to_string(NormOrder o) {
  return o == NormOrder::bn_then_relu ? "bn-then-relu" : "relu-then-bn";
}
inline std::string_view to_string(AttentionKind k) {
  return k == AttentionKind::mixed ? "mixed" : "spatial";
}

inline Fusion parse_fusion(std::string_view s) {
  if (s == "vector-concat") return Fusion::vector_concat;
  if (s == "element-add") return Fusion::element_add;
  throw std::invalid_argument("unknown attention fusion '" + std::string(s) + "'");
}
inline NormOrder parse_norm_order(std::string_view s) {
  if (s == "bn-then-relu") return NormOrder::bn_then_relu;
  if (s == "relu-then-bn") return NormOrder::relu_then_bn;
  throw std::invalid_argument("unknown attention normalization order '" + std::string(s) + "'");
}
inline AttentionKind parse_attention_kind(std::string_view s) {
  if (s == "mixed") return AttentionKind::mixed;
  if (s == "spatial") return AttentionKind::spatial;
  throw std::invalid_argument("unknown attention kind '" + std::string(s) + "'");
}

struct AttentionConfig {
  Fusion fusion = Fusion::vector_concat;
  NormOrder normalization_order = NormOrder::bn_then_relu;
  AttentionKind kind = AttentionKind::mixed;
  std::size_t upsample_factor = 1;

  void validate() const {
    const std::size_t f = upsample_factor;
    if (f == 0 || (f & (f - 1)) != 0) {
      throw std::invalid_argument("attention upsample_factor must be a power of two, got " +
                                  std::to_string(f));
    }
  }

  bool operator==(const AttentionConfig&) const = default;
};

/// All 2 x 2 x 2 fusion / order / kind combinations.
inline std::vector<AttentionConfig> attention_variants() {
  std::vector<AttentionConfig> out;
  for (Fusion f : {Fusion::vector_concat, Fusion::element_add}) {
    for (NormOrder o : {NormOrder::bn_then_relu, NormOrder::relu_then_bn}) {
      for (AttentionKind k : {AttentionKind::mixed, AttentionKind::spatial}) {
        out.push_back(AttentionConfig{f, o, k, 1});
      }
    }
  }
  return out;
}

struct AttentionParams {
  std::size_t local_channels = 0;
  std::size_t fine_channels = 0;
  // One transposed 3x3 convolution per factor-2 step (a single stride-1 one for factor 1).
  std::vector<std::pair<ParamId, ParamId>> projection;
  std::optional<std::pair<ParamId, ParamId>> fusion;  // 1x1, 2C -> C; vector-concat only
  ParamId gamma{};
  ParamId beta{};
  StatsId stats{};
};

class AttentionModule {
 public:
  AttentionModule() = default;

  static AttentionModule create(ParamStore& store, const std::string& prefix,
                                const AttentionConfig& cfg, std::size_t local_channels,
                                std::size_t fine_channels) {
    cfg.validate();
    AttentionModule m;
    m.cfg_ = cfg;
    AttentionParams& p = m.params_;
    p.local_channels = local_channels;
    p.fine_channels = fine_channels;
    const std::size_t c = local_channels;
    std::size_t steps = 0;
    for (std::size_t f = cfg.upsample_factor; f > 1; f /= 2) ++steps;
    const std::size_t n_proj = std::max<std::size_t>(steps, 1);
    for (std::size_t i = 0; i < n_proj; ++i) {
      const std::size_t in = i == 0 ? fine_channels : c;
      const std::string name = prefix + ".project" + std::to_string(i);
      p.projection.emplace_back(store.he_kernel(name + ".weight", Shape{in, c, 3, 3}, in * 9),
                                store.constant(name + ".bias", Shape{1, c, 1, 1}, 0.0));
    }
    if (cfg.fusion == Fusion::vector_concat) {
      p.fusion = std::make_pair(store.he_kernel(prefix + ".fuse.weight", Shape{c, 2 * c, 1, 1}, 2 * c),
                                store.constant(prefix + ".fuse.bias", Shape{1, c, 1, 1}, 0.0));
    }
    p.gamma = store.constant(prefix + ".bn.gamma", Shape{1, c, 1, 1}, 1.0);
    p.beta = store.constant(prefix + ".bn.beta", Shape{1, c, 1, 1}, 0.0);
    p.stats = store.add_stats(prefix + ".bn", c);
    return m;
  }

  const AttentionConfig& config() const { return cfg_; }
  const AttentionParams& params() const { return params_; }

  /// Normalized weights: mixed -> C maps each summing to 1 over H*W; spatial -> one map.
  Var weights(Tape& tape, ParamStore& store, const Var& local, const Var& fine, Mode mode) const {
    const Shape ls = local.shape();
    const Shape fs = fine.shape();
    const std::size_t f = cfg_.upsample_factor;
    if (ls.c != params_.local_channels || fs.c != params_.fine_channels) {
      throw std::invalid_argument("attend: channel mismatch (local " + ls.str() + ", fine " +
                                  fs.str() + ")");
    }
    if (fs.h * f != ls.h || fs.w * f != ls.w || fs.n != ls.n) {
      throw std::invalid_argument("attend: fine " + fs.str() + " x" + std::to_string(f) +
                                  " does not reach local " + ls.str());
    }
    Var g = fine;
    if (f == 1) {
      g = transposed_conv2d(tape, g, store[params_.projection[0].first], 1,
                            store[params_.projection[0].second], 1, 0);
    } else {
      for (const auto& [k, b] : params_.projection) {
        g = transposed_conv2d(tape, g, store[k], 2, store[b], 1, 1);
      }
    }
    if (g.shape() != ls) {
      throw std::invalid_argument("attend: projected fine features " + g.shape().str() +
                                  " do not match local " + ls.str());
    }
    Var c = cfg_.fusion == Fusion::vector_concat
                ? conv2d(tape, concat(tape, local, g), store[params_.fusion->first],
                         store[params_.fusion->second], 1, 0)
                : add(tape, local, g);
    BatchNormStats& st = store.stats(params_.stats);
    if (cfg_.normalization_order == NormOrder::bn_then_relu) {
      c = relu(tape, batchnorm(tape, c, store[params_.gamma], store[params_.beta], mode, st));
    } else {
      c = batchnorm(tape, relu(tape, c), store[params_.gamma], store[params_.beta], mode, st);
    }
    Var a = softmax(tape, c, SoftmaxAxis::spatial);
    if (cfg_.kind == AttentionKind::spatial) a = channel_mean(tape, a);
    return a;
  }

  Var attend(Tape& tape, ParamStore& store, const Var& local, const Var& fine, Mode mode) const {
    Var a = weights(tape, store, local, fine, mode);
    if (cfg_.kind == AttentionKind::spatial) a = broadcast_channels(tape, a, local.shape().c);
    return mul(tape, local, a);
  }

 private:
  AttentionConfig cfg_;
  AttentionParams params_;
};

/// Min-max normalized 8-bit rendering of one weight map (item n, channel c).
inline Raster weight_map_raster(const Tensor& weights, std::size_t n = 0, std::size_t c = 0) {
  const Shape s = weights.shape();
  if (n >= s.n || c >= s.c) throw std::out_of_range("weight_map_raster: map index out of range");
  const double* p = weights.ptr() + (n * s.c + c) * s.plane();
  const auto [lo, hi] = std::minmax_element(p, p + s.plane());
  const double range = *hi - *lo;
  Raster r(s.w, s.h);
  for (std::size_t i = 0; i < s.plane(); ++i) {
    const double v = range > 0.0 ? (p[i] - *lo) / range : 0.0;
    r.pixels()[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return r;
}

}  // namespace usseg

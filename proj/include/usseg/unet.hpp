#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "usseg/attention.hpp"
#include "usseg/blocks.hpp"
#include "usseg/config.hpp"
#include "usseg/losses.hpp"

namespace usseg {

enum class FineSource { encoder_end, grid };

inline std::string_view to_string(FineSource f) {
  return f == FineSource::encoder_end ? "encoder-end" : "grid";
}
inline FineSource parse_fine_source(std::string_view s) {
  if (s == "encoder-end") return FineSource::encoder_end;
  if (s == "grid") return FineSource::grid;
  throw std::invalid_argument("unknown fine_source '" + std::string(s) + "'");
}

inline constexpr std::size_t kMaxAttentionSites = 5;

// Site j sits on the long skip entering decoder stage j (0 = deepest). The deepest one is
// called "bridge"; the following ones dec1 .. dec4.
inline std::string site_name(std::size_t j) { return j == 0 ? "bridge" : "dec" + std::to_string(j); }

inline std::size_t parse_site(std::string_view s) {
  if (s == "bridge") return 0;
  if (s.size() == 4 && s.substr(0, 3) == "dec" && s[3] >= '1' && s[3] <= '4') {
    return static_cast<std::size_t>(s[3] - '0');
  }
  throw std::invalid_argument("unknown attention site '" + std::string(s) + "'");
}

/// The first n sites starting from the bridge.
inline std::set<std::size_t> first_sites(std::size_t n) {
  std::set<std::size_t> out;
  for (std::size_t j = 0; j < n; ++j) out.insert(j);
  return out;
}

struct ModelConfig {
  std::size_t depth = 5;
  std::size_t base_width = 8;
  std::size_t in_channels = 1;
  bool encoder_residual = true;
  bool decoder_residual = false;
  std::set<std::size_t> attention_sites;
  AttentionConfig attention;  // upsample_factor is derived per site
  FineSource fine_source = FineSource::encoder_end;
  LossConfig loss;
  std::uint64_t seed = 0;

  /// Channels of encoder level k (0-based); level `depth` is the bridge.
  std::size_t width(std::size_t level) const { return base_width << level; }
  std::size_t divisor() const { return std::size_t{1} << depth; }

  void validate() const {
    if (depth < 3 || depth > 5) {
      throw std::invalid_argument("depth must be 3, 4 or 5, got " + std::to_string(depth));
    }
    if (base_width == 0) throw std::invalid_argument("base_width must be positive");
    if (in_channels != 1 && in_channels != 3) {
      throw std::invalid_argument("in_channels must be 1 or 3");
    }
    for (std::size_t s : attention_sites) {
      if (s >= depth) {
        throw std::invalid_argument("attention site " + site_name(s) + " exceeds depth " +
                                    std::to_string(depth));
      }
    }
    loss.validate();
  }

  void check_input(std::size_t h, std::size_t w) const {
    if (h == 0 || w == 0 || h % divisor() != 0 || w % divisor() != 0) {
      throw std::invalid_argument("input " + std::to_string(w) + "x" + std::to_string(h) +
                                  " must be divisible by " + std::to_string(divisor()) +
                                  " for depth " + std::to_string(depth));
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

inline std::string sites_to_string(const std::set<std::size_t>& sites) {
  std::string out;
  for (std::size_t s : sites) out += (out.empty() ? "" : ",") + site_name(s);
  return out;
}

/// Consumes the model keys from kv.
inline ModelConfig read_model_config(KeyValues& kv) {
  ModelConfig m;
  try {
    kv.take_to("depth", m.depth);
    kv.take_to("base_width", m.base_width);
    kv.take_to("in_channels", m.in_channels);
    kv.take_to("encoder_residual", m.encoder_residual);
    kv.take_to("decoder_residual", m.decoder_residual);
    if (auto v = kv.take("attention_sites")) {
      for (const auto& s : split_list(*v)) {
        if (s != "none") m.attention_sites.insert(parse_site(s));
      }
    }
    if (auto v = kv.take("attention_fusion")) m.attention.fusion = parse_fusion(*v);
    if (auto v = kv.take("attention_kind")) m.attention.kind = parse_attention_kind(*v);
    if (auto v = kv.take("attention_norm_order")) {
      m.attention.normalization_order = parse_norm_order(*v);
    }
    if (auto v = kv.take("fine_source")) m.fine_source = parse_fine_source(*v);
    if (auto v = kv.take("loss_kind")) m.loss.kind = parse_loss_kind(*v);
    kv.take_to("loss_beta", m.loss.beta);
    kv.take_to("loss_alpha", m.loss.alpha);
    kv.take_to("loss_epsilon", m.loss.epsilon);
    kv.take_to("seed", m.seed);
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(kv.source() + ": " + e.what());
  }
  return m;
}

inline void write_model_config(std::ostream& out, const ModelConfig& m) {
  std::ostringstream o;
  o.precision(17);
  o << "depth=" << m.depth << "\n"
    << "base_width=" << m.base_width << "\n"
    << "in_channels=" << m.in_channels << "\n"
    << "encoder_residual=" << (m.encoder_residual ? "true" : "false") << "\n"
    << "decoder_residual=" << (m.decoder_residual ? "true" : "false") << "\n"
    << "attention_sites=" << (m.attention_sites.empty() ? "none" : sites_to_string(m.attention_sites))
    << "\n"
    << "attention_fusion=" << to_string(m.attention.fusion) << "\n"
    << "attention_kind=" << to_string(m.attention.kind) << "\n"
    << "attention_norm_order=" << to_string(m.attention.normalization_order) << "\n"
    << "fine_source=" << to_string(m.fine_source) << "\n"
    << "loss_kind=" << to_string(m.loss.kind) << "\n"
    << "loss_beta=" << m.loss.beta << "\n"
    << "loss_alpha=" << m.loss.alpha << "\n"
    << "loss_epsilon=" << m.loss.epsilon << "\n"
    << "seed=" << m.seed << "\n";
  out << o.str();
}

// ---------------------------------------------------------------------------

/// Attention-augmented residual U-net. depth = number of poolings.
class UNet {
 public:
  explicit UNet(ModelConfig cfg) : cfg_(std::move(cfg)), store_(cfg_.seed) {
    cfg_.validate();
    const std::size_t d = cfg_.depth;
    for (std::size_t k = 0; k < d; ++k) {
      const std::size_t in = k == 0 ? cfg_.in_channels : cfg_.width(k - 1);
      encoder_.push_back(StageBlock::create(store_, "enc" + std::to_string(k), in, cfg_.width(k),
                                            cfg_.encoder_residual));
    }
    bridge_ = StageBlock::create(store_, "bridge", cfg_.width(d - 1), cfg_.width(d),
                                 cfg_.encoder_residual);
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t level = d - 1 - j;
      const std::size_t w = cfg_.width(level);
      const std::string prefix = "dec" + std::to_string(j);
      ups_.push_back(UpTransition::create(store_, prefix + ".up", cfg_.width(level + 1), w));
      if (cfg_.attention_sites.contains(j)) {
        AttentionConfig ac = cfg_.attention;
        std::size_t fine_channels = w;
        ac.upsample_factor = 1;
        if (cfg_.fine_source == FineSource::encoder_end) {
          ac.upsample_factor = std::size_t{1} << (d - level);
          fine_channels = cfg_.width(d);
        }
        attention_[j] = AttentionModule::create(store_, "att." + site_name(j), ac, w, fine_channels);
      }
      decoder_.push_back(
          StageBlock::create(store_, prefix + ".block", 2 * w, w, cfg_.decoder_residual));
    }
    head_kernel_ = store_.he_kernel("head.weight", Shape{2, cfg_.width(0), 1, 1}, cfg_.width(0));
    head_bias_ = store_.constant("head.bias", Shape{1, 2, 1, 1}, 0.0);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }
  std::size_t parameter_count() const { return store_.parameter_count(); }

  /// Batch x 2 x H x W channel-softmax probabilities. Attention weight maps are appended to
  /// `taps` in decoder order when given.
  Var forward(Tape& tape, const Var& x, Mode mode, std::vector<Var>* taps = nullptr) {
    const Shape xs = x.shape();
    if (xs.c != cfg_.in_channels) {
      throw std::invalid_argument("forward: expected " + std::to_string(cfg_.in_channels) +
                                  " input channels, got " + xs.str());
    }
    cfg_.check_input(xs.h, xs.w);
    const std::size_t d = cfg_.depth;
    std::vector<Var> skips;
    Var h = x;
    for (std::size_t k = 0; k < d; ++k) {
      h = encoder_[k].forward(tape, store_, h, mode);
      skips.push_back(h);
      h = down_transition(tape, h).first;
    }
    const Var bridge_out = bridge_.forward(tape, store_, h, mode);
    h = bridge_out;
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t level = d - 1 - j;
      const Var up = ups_[j].forward(tape, store_, h);
      Var skip = skips[level];
      if (attention_[j]) {
        const Var& fine = cfg_.fine_source == FineSource::encoder_end ? bridge_out : up;
        if (taps) {
          const Var a = attention_[j]->weights(tape, store_, skip, fine, mode);
          taps->push_back(a);
          Var aa = a;
          if (attention_[j]->config().kind == AttentionKind::spatial) {
            aa = broadcast_channels(tape, a, skip.shape().c);
          }
          skip = mul(tape, skip, aa);
        } else {
          skip = attention_[j]->attend(tape, store_, skip, fine, mode);
        }
      }
      h = decoder_[j].forward(tape, store_, concat(tape, up, skip), mode);
    }
    const Var logits = conv2d(tape, h, store_[head_kernel_], store_[head_bias_], 1, 0);
    return softmax(tape, logits, SoftmaxAxis::channels);
  }

  Var forward(Tape& tape, const Tensor& batch, Mode mode) {
    return forward(tape, Var::constant(batch), mode);
  }

  /// Infer-mode probabilities without recording gradients.
  Tensor predict(const Tensor& batch) {
    Tape tape(false);
    return forward(tape, batch, Mode::infer).value();
  }

  /// One weight map per attention site, in decoder order (infer mode).
  std::vector<Tensor> attention_taps(const Tensor& input) {
    Tape tape(false);
    std::vector<Var> taps;
    forward(tape, Var::constant(input), Mode::infer, &taps);
    std::vector<Tensor> out;
    for (const Var& t : taps) out.push_back(t.value());
    return out;
  }

  std::vector<std::size_t> attention_site_order() const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < attention_.size(); ++j) {
      if (attention_[j]) out.push_back(j);
    }
    return out;
  }

 private:
  ModelConfig cfg_;
  ParamStore store_;
  std::vector<StageBlock> encoder_;
  StageBlock bridge_;
  std::vector<UpTransition> ups_;
  std::array<std::optional<AttentionModule>, kMaxAttentionSites> attention_{};
  std::vector<StageBlock> decoder_;
  ParamId head_kernel_{};
  ParamId head_bias_{};
};

inline UNet build(const ModelConfig& cfg) { return UNet(cfg); }

// ---------------------------------------------------------------------------

/// Small tile classifier: two conv/pool stages, one more conv, global average pooling and a
/// 2-way channel softmax.
class PatchClassifier {
 public:
  static constexpr std::size_t kMinSide = 16;

  PatchClassifier(std::size_t width, std::uint64_t seed, std::size_t in_channels = 1)
      : width_(width), in_channels_(in_channels), store_(seed) {
    if (width == 0) throw std::invalid_argument("classifier width must be positive");
    u1_ = ConvUnit::create(store_, "clf.conv1", in_channels, width);
    u2_ = ConvUnit::create(store_, "clf.conv2", width, 2 * width);
    u3_ = ConvUnit::create(store_, "clf.conv3", 2 * width, 4 * width);
    head_kernel_ = store_.he_kernel("clf.head.weight", Shape{2, 4 * width, 1, 1}, 4 * width);
    head_bias_ = store_.constant("clf.head.bias", Shape{1, 2, 1, 1}, 0.0);
  }

  std::size_t width() const { return width_; }
  std::size_t in_channels() const { return in_channels_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }

  /// Batch x 2 x 1 x 1 probabilities.
  Var forward(Tape& tape, const Var& x, Mode mode) {
    const Shape s = x.shape();
    if (s.c != in_channels_) {
      throw std::invalid_argument("classifier: expected " + std::to_string(in_channels_) +
                                  " channels, got " + s.str());
    }
    if (s.h < kMinSide || s.w < kMinSide || s.h % 4 != 0 || s.w % 4 != 0) {
      throw std::invalid_argument("classifier: input " + s.str() +
                                  " must be at least 16x16 with sides divisible by 4");
    }
    Var h = maxpool2(tape, u1_.forward(tape, store_, x, mode)).first;
    h = maxpool2(tape, u2_.forward(tape, store_, h, mode)).first;
    h = spatial_mean(tape, u3_.forward(tape, store_, h, mode));
    const Var logits = conv2d(tape, h, store_[head_kernel_], store_[head_bias_], 1, 0);
    return softmax(tape, logits, SoftmaxAxis::channels);
  }

  Var forward(Tape& tape, const Tensor& batch, Mode mode) {
    return forward(tape, Var::constant(batch), mode);
  }

  Tensor predict(const Tensor& batch) {
    Tape tape(false);
    return forward(tape, batch, Mode::infer).value();
  }

 private:
  std::size_t width_;
  std::size_t in_channels_;
  ParamStore store_;
  ConvUnit u1_, u2_, u3_;
  ParamId head_kernel_{};
  ParamId head_bias_{};
};

inline PatchClassifier build_patch_classifier(std::size_t width, std::uint64_t seed) {
  return PatchClassifier(width, seed);
}

}  // namespace usseg

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "usseg/autodiff.hpp"

namespace usseg {

using ParamId = std::size_t;
using StatsId = std::size_t;

/// Owns every trainable tensor and batch-norm statistic of a network. Copying deep-copies.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}

  ParamStore(const ParamStore& other)
      : rng_(other.rng_), names_(other.names_), stats_(other.stats_),
        stat_names_(other.stat_names_), index_(other.index_) {
    params_.reserve(other.params_.size());
    for (const Var& v : other.params_) params_.push_back(Var::leaf(v.value()));
  }
  ParamStore& operator=(ParamStore other) {
    std::swap(rng_, other.rng_);
    std::swap(params_, other.params_);
    std::swap(names_, other.names_);
    std::swap(stats_, other.stats_);
    std::swap(stat_names_, other.stat_names_);
    std::swap(index_, other.index_);
    return *this;
  }
  ParamStore(ParamStore&&) = default;

  ParamId add(const std::string& name, Tensor init) {
    if (index_.contains(name)) throw std::logic_error("duplicate parameter " + name);
    index_[name] = params_.size();
    params_.push_back(Var::leaf(std::move(init)));
    names_.push_back(name);
    return params_.size() - 1;
  }

  /// He-normal kernel, std = sqrt(2 / fan_in) with fan_in = in_ch * kh * kw.
  ParamId he_kernel(const std::string& name, Shape shape, std::size_t fan_in) {
    Tensor t(shape);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng_);
    return add(name, std::move(t));
  }

  ParamId constant(const std::string& name, Shape shape, double v) {
    return add(name, Tensor(shape, v));
  }

  StatsId add_stats(const std::string& name, std::size_t channels) {
    stats_.emplace_back(channels);
    stat_names_.push_back(name);
    return stats_.size() - 1;
  }

  Var& operator[](ParamId id) { return params_[id]; }
  const Var& operator[](ParamId id) const { return params_[id]; }
  BatchNormStats& stats(StatsId id) { return stats_[id]; }
  const BatchNormStats& stats(StatsId id) const { return stats_[id]; }

  Var& find(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return params_[it->second];
  }

  std::size_t size() const { return params_.size(); }
  std::size_t stats_size() const { return stats_.size(); }
  const std::string& name(ParamId id) const { return names_[id]; }
  const std::string& stats_name(StatsId id) const { return stat_names_[id]; }
  std::vector<Var>& params() { return params_; }
  const std::vector<Var>& params() const { return params_; }
  std::vector<BatchNormStats>& all_stats() { return stats_; }
  const std::vector<BatchNormStats>& all_stats() const { return stats_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Var& v : params_) n += v.value().size();
    return n;
  }

  void zero_grad() {
    for (Var& v : params_) v.zero_grad();
  }

 private:
  std::mt19937_64 rng_;
  std::vector<Var> params_;
  std::vector<std::string> names_;
  std::vector<BatchNormStats> stats_;
  std::vector<std::string> stat_names_;
  std::map<std::string, ParamId> index_;
};

// ---------------------------------------------------------------------------

/// conv 3x3 (same padding, no bias) -> batchnorm -> relu
struct ConvUnit {
  ParamId kernel{};
  ParamId gamma{};
  ParamId beta{};
  StatsId stats{};

  static ConvUnit create(ParamStore& store, const std::string& prefix, std::size_t in,
                         std::size_t out) {
    ConvUnit u;
    u.kernel = store.he_kernel(prefix + ".weight", Shape{out, in, 3, 3}, in * 9);
    u.gamma = store.constant(prefix + ".bn.gamma", Shape{1, out, 1, 1}, 1.0);
    u.beta = store.constant(prefix + ".bn.beta", Shape{1, out, 1, 1}, 0.0);
    u.stats = store.add_stats(prefix + ".bn", out);
    return u;
  }

  Var forward(Tape& tape, ParamStore& store, const Var& x, Mode mode) const {
    const Var c = conv2d(tape, x, store[kernel], Var{}, 1, 1);
    const Var b = batchnorm(tape, c, store[gamma], store[beta], mode, store.stats(stats));
    return relu(tape, b);
  }
};

/// Two conv units; spatial extents preserved.
struct ConvStage {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  ConvUnit first;
  ConvUnit second;

  static ConvStage create(ParamStore& store, const std::string& prefix, std::size_t in,
                          std::size_t out) {
    ConvStage s;
    s.in_channels = in;
    s.out_channels = out;
    s.first = ConvUnit::create(store, prefix + ".conv1", in, out);
    s.second = ConvUnit::create(store, prefix + ".conv2", out, out);
    return s;
  }

  Var forward(Tape& tape, ParamStore& store, const Var& x, Mode mode) const {
    if (x.shape().c != in_channels) {
      throw std::invalid_argument("conv_stage: expected " + std::to_string(in_channels) +
                                  " channels, got " + x.shape().str());
    }
    return second.forward(tape, store, first.forward(tape, store, x, mode), mode);
  }
};

/// relu(F(x) + shortcut(x)); the shortcut is a 1x1 projection when channel counts differ.
struct ResidualBlock {
  ConvStage branch;
  std::optional<std::pair<ParamId, ParamId>> projection;  // kernel, bias

  static ResidualBlock create(ParamStore& store, const std::string& prefix, std::size_t in,
                              std::size_t out) {
    ResidualBlock r;
    r.branch = ConvStage::create(store, prefix, in, out);
    if (in != out) {
      r.projection = std::make_pair(
          store.he_kernel(prefix + ".shortcut.weight", Shape{out, in, 1, 1}, in),
          store.constant(prefix + ".shortcut.bias", Shape{1, out, 1, 1}, 0.0));
    }
    return r;
  }

  Var forward(Tape& tape, ParamStore& store, const Var& x, Mode mode) const {
    const Var f = branch.forward(tape, store, x, mode);
    const Var shortcut =
        projection ? conv2d(tape, x, store[projection->first], store[projection->second], 1, 0) : x;
    return relu(tape, add(tape, f, shortcut));
  }
};

/// Encoder/decoder stage that is either a plain ConvStage or a ResidualBlock.
struct StageBlock {
  bool residual = false;
  ConvStage plain;
  ResidualBlock res;

  static StageBlock create(ParamStore& store, const std::string& prefix, std::size_t in,
                           std::size_t out, bool residual) {
    StageBlock b;
    b.residual = residual;
    if (residual) {
      b.res = ResidualBlock::create(store, prefix, in, out);
    } else {
      b.plain = ConvStage::create(store, prefix, in, out);
    }
    return b;
  }

  std::size_t out_channels() const {
    return residual ? res.branch.out_channels : plain.out_channels;
  }

  Var forward(Tape& tape, ParamStore& store, const Var& x, Mode mode) const {
    return residual ? res.forward(tape, store, x, mode) : plain.forward(tape, store, x, mode);
  }
};

inline std::pair<Var, PoolIndices> down_transition(Tape& tape, const Var& x) {
  return maxpool2(tape, x);
}

/// 2x2 stride-2 transposed convolution doubling H and W.
struct UpTransition {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  ParamId kernel{};
  ParamId bias{};

  static UpTransition create(ParamStore& store, const std::string& prefix, std::size_t in,
                             std::size_t out) {
    UpTransition u;
    u.in_channels = in;
    u.out_channels = out;
    u.kernel = store.he_kernel(prefix + ".weight", Shape{in, out, 2, 2}, in * 4);
    u.bias = store.constant(prefix + ".bias", Shape{1, out, 1, 1}, 0.0);
    return u;
  }

  Var forward(Tape& tape, ParamStore& store, const Var& x) const {
    if (x.shape().c != in_channels) {
      throw std::invalid_argument("up_transition: expected " + std::to_string(in_channels) +
                                  " channels, got " + x.shape().str());
    }
    return transposed_conv2d(tape, x, store[kernel], 2, store[bias]);
  }
};

}  // namespace usseg

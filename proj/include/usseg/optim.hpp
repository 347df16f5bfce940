#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "usseg/autodiff.hpp"

namespace usseg {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool operator==(const AdamHyper&) const = default;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t t = 0;

  AdamState() = default;
  explicit AdamState(const std::vector<Var>& params) {
    for (const Var& p : params) {
      m.emplace_back(p.shape());
      v.emplace_back(p.shape());
    }
  }
};

/// Bias-corrected Adam update. A non-finite gradient rejects the whole step (returns false,
/// nothing changes, including t).
inline bool adam_step(std::vector<Var>& params, AdamState& state, double lr,
                      const AdamHyper& h = {}) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adam_step: state does not match parameter list");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (state.m[k].shape() != params[k].shape()) {
      throw std::invalid_argument("adam_step: moment shape mismatch for parameter " +
                                  std::to_string(k));
    }
    if (params[k].has_grad() && !params[k].grad().all_finite()) return false;
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& w = params[k].mutable_value();
    Tensor& m = state.m[k];
    Tensor& v = state.v[k];
    const bool has = params[k].has_grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = has ? params[k].grad()[i] : 0.0;
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + h.eps);
    }
  }
  return true;
}

/// base_lr * drop_factor ^ floor(epoch / drop_period); epochs are 0-based.
inline double lr_schedule(std::size_t epoch, double base_lr, double drop_factor,
                          std::size_t drop_period) {
  if (drop_period == 0 || drop_factor == 1.0) return base_lr;
  return base_lr * std::pow(drop_factor, static_cast<double>(epoch / drop_period));
}

}  // namespace usseg

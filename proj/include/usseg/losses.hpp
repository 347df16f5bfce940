#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "usseg/autodiff.hpp"
#include "usseg/raster.hpp"

namespace usseg {

// Similarity losses are computed on tumour scores s in [0, 1] against binary truth g,
// summing over every element of the score tensor (batch included) unless stated otherwise.

enum class LossKind {
  weighted_ce,
  soft_dice,
  soft_dice_quadratic,
  binary_soft_dice_eps,
  tversky,
  f_beta,
  mean_f_beta
};

inline std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::weighted_ce: return "weighted-ce";
    case LossKind::soft_dice: return "soft-dice";
    case LossKind::soft_dice_quadratic: return "soft-dice-quadratic";
    case LossKind::binary_soft_dice_eps: return "binary-soft-dice-eps";
    case LossKind::tversky: return "tversky";
    case LossKind::f_beta: return "f-beta";
    case LossKind::mean_f_beta: return "mean-f-beta";
  }
  return "?";
}

inline LossKind parse_loss_kind(std::string_view s) {
  for (LossKind k : {LossKind::weighted_ce, LossKind::soft_dice, LossKind::soft_dice_quadratic,
                     LossKind::binary_soft_dice_eps, LossKind::tversky, LossKind::f_beta,
                     LossKind::mean_f_beta}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown loss kind '" + std::string(s) + "'");
}

struct LossConfig {
  LossKind kind = LossKind::mean_f_beta;
  double alpha = 0.5;
  double beta = 1.0;
  double epsilon = 1.0;
  // Foreground frequency for weighted-ce; derived from the truth batch when unset.
  std::optional<double> class_weight;

  void validate() const {
    if (alpha < 0.0 || beta < 0.0) throw std::invalid_argument("loss alpha/beta must be >= 0");
    if (epsilon < 0.0) throw std::invalid_argument("loss epsilon must be >= 0");
    if (class_weight && (*class_weight < 0.0 || *class_weight > 1.0)) {
      throw std::invalid_argument("class weight must lie in [0, 1]");
    }
  }

  bool operator==(const LossConfig&) const = default;
};

struct LossResult {
  double value = 0.0;
  Tensor grad_scores;
};

inline constexpr double kScoreClampLo = 1e-7;
inline constexpr double kScoreClampHi = 1.0 - 1e-7;

inline double class_weight(const SegmentationMask& truth) {
  if (truth.empty()) throw std::invalid_argument("class_weight: empty mask");
  return static_cast<double>(truth.tumour_count()) / static_cast<double>(truth.size());
}

inline double class_weight(const Tensor& truth) {
  if (truth.empty()) throw std::invalid_argument("class_weight: empty truth");
  return truth.sum() / static_cast<double>(truth.size());
}

namespace detail {

inline void check_pair(const char* op, const Tensor& s, const Tensor& g) {
  if (s.shape() != g.shape()) {
    throw std::invalid_argument(std::string(op) + ": scores " + s.shape().str() +
                                " and truth " + g.shape().str() + " differ");
  }
}

struct OverlapSums {
  double gs = 0.0;  // sum g*s
  double s = 0.0;   // sum s
  double g = 0.0;   // sum g
  double ss = 0.0;  // sum s^2
  double gg = 0.0;  // sum g^2
};

inline OverlapSums overlap_sums(const Tensor& s, const Tensor& g) {
  OverlapSums o;
  for (std::size_t i = 0; i < s.size(); ++i) {
    o.gs += g[i] * s[i];
    o.s += s[i];
    o.g += g[i];
    o.ss += s[i] * s[i];
    o.gg += g[i] * g[i];
  }
  return o;
}

inline Tensor complement(const Tensor& t) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = 1.0 - t[i];
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Closed-form losses with analytic gradients
// ---------------------------------------------------------------------------

/// -sum[w*g*log(s) + (1-g)*log(1-s)] on clamped scores.
inline LossResult weighted_cross_entropy(const Tensor& scores, const Tensor& truth, double w) {
  detail::check_pair("weighted_cross_entropy", scores, truth);
  LossResult r;
  r.grad_scores = Tensor(scores.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double raw = scores[i];
    const double s = std::clamp(raw, kScoreClampLo, kScoreClampHi);
    const double g = truth[i];
    total += w * g * std::log(s) + (1.0 - g) * std::log(1.0 - s);
    if (raw >= kScoreClampLo && raw <= kScoreClampHi) {
      r.grad_scores[i] = -w * g / s + (1.0 - g) / (1.0 - s);
    }
  }
  r.value = -total;
  return r;
}

/// 1 - (2*sum(gs) + eps) / (sum(s + g) + eps).
inline LossResult soft_dice_loss(const Tensor& scores, const Tensor& truth, double eps = 0.0) {
  detail::check_pair("soft_dice_loss", scores, truth);
  const auto o = detail::overlap_sums(scores, truth);
  const double num = 2.0 * o.gs + eps;
  const double den = o.s + o.g + eps;
  if (!(den > 0.0)) {
    throw std::domain_error("soft_dice_loss: zero denominator (use a positive epsilon)");
  }
  LossResult r;
  r.value = 1.0 - num / den;
  r.grad_scores = Tensor(scores.shape());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    r.grad_scores[i] = -(2.0 * truth[i] * den - num) / (den * den);
  }
  return r;
}

/// 1 - (2*sum(gs) + eps) / (sum(s^2) + sum(g^2) + eps).
inline LossResult soft_dice_quadratic(const Tensor& scores, const Tensor& truth, double eps = 0.0) {
  detail::check_pair("soft_dice_quadratic", scores, truth);
  const auto o = detail::overlap_sums(scores, truth);
  const double num = 2.0 * o.gs + eps;
  const double den = o.ss + o.gg + eps;
  if (!(den > 0.0)) throw std::domain_error("soft_dice_quadratic: zero denominator");
  LossResult r;
  r.value = 1.0 - num / den;
  r.grad_scores = Tensor(scores.shape());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    r.grad_scores[i] = -(2.0 * truth[i] * den - 2.0 * scores[i] * num) / (den * den);
  }
  return r;
}

/// 1 - F_beta ratio with Laplace smoothing in numerator and denominator.
inline LossResult f_beta_loss(const Tensor& scores, const Tensor& truth, double beta,
                              double eps = 1.0) {
  detail::check_pair("f_beta_loss", scores, truth);
  if (beta < 0.0) throw std::invalid_argument("f_beta_loss: beta must be >= 0");
  const double b2 = beta * beta;
  double gs = 0.0, fn = 0.0, fp = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    gs += truth[i] * scores[i];
    fn += truth[i] * (1.0 - scores[i]);
    fp += (1.0 - truth[i]) * scores[i];
  }
  const double num = (1.0 + b2) * gs + eps;
  const double den = (1.0 + b2) * gs + b2 * fn + fp + eps;
  if (!(den > 0.0)) throw std::domain_error("f_beta_loss: zero denominator");
  LossResult r;
  r.value = 1.0 - num / den;
  r.grad_scores = Tensor(scores.shape());
  // d(den)/ds_i = (1+b2) g - b2 g + (1-g) = 1
  for (std::size_t i = 0; i < scores.size(); ++i) {
    r.grad_scores[i] = -((1.0 + b2) * truth[i] * den - num) / (den * den);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Tape expressions. Each returns a 1x1x1x1 loss.
// ---------------------------------------------------------------------------

inline Var weighted_cross_entropy_expr(Tape& t, const Var& s, const Tensor& g, double w) {
  const Var sc = clamp(t, s, kScoreClampLo, kScoreClampHi);
  Tensor wg(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) wg[i] = w * g[i];
  const Var fg = mul(t, Var::constant(wg), log(t, sc));
  const Var bg = mul(t, Var::constant(detail::complement(g)), log(t, affine(t, sc, -1.0, 1.0)));
  return affine(t, sum(t, add(t, fg, bg)), -1.0, 0.0);
}

inline Var soft_dice_expr(Tape& t, const Var& s, const Tensor& g, double eps = 0.0) {
  const Var gs = sum(t, mul(t, s, Var::constant(g)));
  const Var num = affine(t, gs, 2.0, eps);
  const Var den = affine(t, sum(t, s), 1.0, g.sum() + eps);
  return affine(t, div(t, num, den), -1.0, 1.0);
}

inline Var soft_dice_quadratic_expr(Tape& t, const Var& s, const Tensor& g, double eps = 0.0) {
  double gg = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) gg += g[i] * g[i];
  const Var num = affine(t, sum(t, mul(t, s, Var::constant(g))), 2.0, eps);
  const Var den = affine(t, sum(t, square(t, s)), 1.0, gg + eps);
  return affine(t, div(t, num, den), -1.0, 1.0);
}

/// 1 - A - B, A the smoothed foreground ratio and B the complemented-background ratio.
inline Var binary_soft_dice_eps_expr(Tape& t, const Var& s, const Tensor& g, double eps) {
  const Var gs = sum(t, mul(t, s, Var::constant(g)));
  const Var fg = div(t, affine(t, gs, 1.0, eps), affine(t, sum(t, s), 1.0, g.sum() + eps));
  const Tensor gc = detail::complement(g);
  const Var one_minus_s = affine(t, s, -1.0, 1.0);
  const Var bg_num = affine(t, sum(t, mul(t, one_minus_s, Var::constant(gc))), 1.0, eps);
  // sum(2 - g - s) = 2N - sum(g) - sum(s)
  const double n = static_cast<double>(g.size());
  const Var bg_den = affine(t, sum(t, s), -1.0, 2.0 * n - g.sum() + eps);
  const Var bg = div(t, bg_num, bg_den);
  return affine(t, add(t, fg, bg), -1.0, 1.0);
}

inline Var tversky_expr(Tape& t, const Var& s, const Tensor& g, double alpha, double beta,
                        double eps) {
  const Var tp = sum(t, mul(t, s, Var::constant(g)));
  const Var fp = sum(t, mul(t, s, Var::constant(detail::complement(g))));
  // sum g(1-s) = sum(g) - tp
  const Var den =
      add(t, affine(t, tp, 1.0 - beta, beta * g.sum() + eps), affine(t, fp, alpha, 0.0));
  return affine(t, div(t, affine(t, tp, 1.0, eps), den), -1.0, 1.0);
}

namespace detail {

/// Per-item (N x 1 x 1 x 1) smoothed F_beta ratio.
inline Var f_beta_ratio_items(Tape& t, const Var& s, const Tensor& g, double beta, double eps) {
  const double b2 = beta * beta;
  const Var tp = sum_items(t, mul(t, s, Var::constant(g)));
  const Var fp = sum_items(t, mul(t, s, Var::constant(complement(g))));
  // per-item sum(g)
  const Shape gs = g.shape();
  const std::size_t per = gs.c * gs.plane();
  Tensor g_items(Shape{gs.n, 1, 1, 1});
  for (std::size_t i = 0; i < g.size(); ++i) g_items[i / per] += g[i];
  Tensor shift(g_items.shape());
  for (std::size_t n = 0; n < gs.n; ++n) shift[n] = b2 * g_items[n] + eps;
  // (1+b2) tp + b2 (G - tp) + fp + eps = tp + fp + b2 G + eps
  const Var den = add(t, add(t, tp, fp), Var::constant(shift));
  const Var num = affine(t, tp, 1.0 + b2, eps);
  return div(t, num, den);
}

}  // namespace detail

inline Var f_beta_expr(Tape& t, const Var& s, const Tensor& g, double beta, double eps) {
  const double b2 = beta * beta;
  const Var tp = sum(t, mul(t, s, Var::constant(g)));
  const Var fp = sum(t, mul(t, s, Var::constant(detail::complement(g))));
  const Var den = affine(t, add(t, tp, fp), 1.0, b2 * g.sum() + eps);
  const Var num = affine(t, tp, 1.0 + b2, eps);
  return affine(t, div(t, num, den), -1.0, 1.0);
}

/// 1 - mean over batch items of the smoothed F_beta ratio.
inline Var mean_f_beta_expr(Tape& t, const Var& s, const Tensor& g, double beta, double eps) {
  const std::size_t items = s.shape().n;
  if (items == 0) throw std::invalid_argument("mean_f_beta_loss: empty batch");
  const Var ratio = detail::f_beta_ratio_items(t, s, g, beta, eps);
  return affine(t, sum(t, ratio), -1.0 / static_cast<double>(items), 1.0);
}

// ---------------------------------------------------------------------------
// Tape-evaluated losses (no closed-form gradient)
// ---------------------------------------------------------------------------

template <typename Expr>
LossResult evaluate_on_tape(const Tensor& scores, Expr&& expr) {
  Tape tape;
  Var s = Var::leaf(scores);
  const Var loss = expr(tape, s);
  backward(tape, loss);
  LossResult r;
  r.value = loss.value().item();
  r.grad_scores = s.has_grad() ? s.grad() : Tensor(scores.shape());
  return r;
}

inline LossResult binary_soft_dice_eps(const Tensor& scores, const Tensor& truth, double eps) {
  detail::check_pair("binary_soft_dice_eps", scores, truth);
  if (!(eps > 0.0)) throw std::invalid_argument("binary_soft_dice_eps: eps must be > 0");
  return evaluate_on_tape(scores, [&](Tape& t, const Var& s) {
    return binary_soft_dice_eps_expr(t, s, truth, eps);
  });
}

inline LossResult tversky_loss(const Tensor& scores, const Tensor& truth, double alpha, double beta,
                               double eps = 1.0) {
  detail::check_pair("tversky_loss", scores, truth);
  if (alpha < 0.0 || beta < 0.0) throw std::invalid_argument("tversky_loss: alpha, beta must be >= 0");
  return evaluate_on_tape(scores, [&](Tape& t, const Var& s) {
    return tversky_expr(t, s, truth, alpha, beta, eps);
  });
}

inline LossResult mean_f_beta_loss(const Tensor& scores, const Tensor& truth, double beta,
                                   double eps = 1.0) {
  detail::check_pair("mean_f_beta_loss", scores, truth);
  if (scores.shape().n == 0) throw std::invalid_argument("mean_f_beta_loss: empty batch");
  if (beta < 0.0) throw std::invalid_argument("mean_f_beta_loss: beta must be >= 0");
  return evaluate_on_tape(scores, [&](Tape& t, const Var& s) {
    return mean_f_beta_expr(t, s, truth, beta, eps);
  });
}

/// Dispatches on cfg.kind; closed-form gradients where available.
inline LossResult evaluate_loss(const LossConfig& cfg, const Tensor& scores, const Tensor& truth) {
  cfg.validate();
  switch (cfg.kind) {
    case LossKind::weighted_ce:
      return weighted_cross_entropy(scores, truth, cfg.class_weight.value_or(class_weight(truth)));
    case LossKind::soft_dice: return soft_dice_loss(scores, truth, cfg.epsilon);
    case LossKind::soft_dice_quadratic: return soft_dice_quadratic(scores, truth, cfg.epsilon);
    case LossKind::binary_soft_dice_eps: return binary_soft_dice_eps(scores, truth, cfg.epsilon);
    case LossKind::tversky: return tversky_loss(scores, truth, cfg.alpha, cfg.beta, cfg.epsilon);
    case LossKind::f_beta: return f_beta_loss(scores, truth, cfg.beta, cfg.epsilon);
    case LossKind::mean_f_beta: return mean_f_beta_loss(scores, truth, cfg.beta, cfg.epsilon);
  }
  throw std::logic_error("unhandled loss kind");
}

/// Tape-recorded loss for training; `scores` is the tumour channel (N x 1 x H x W).
inline Var loss_expr(Tape& t, const LossConfig& cfg, const Var& scores, const Tensor& truth) {
  cfg.validate();
  switch (cfg.kind) {
    case LossKind::weighted_ce:
      return weighted_cross_entropy_expr(t, scores, truth,
                                         cfg.class_weight.value_or(class_weight(truth)));
    case LossKind::soft_dice: return soft_dice_expr(t, scores, truth, cfg.epsilon);
    case LossKind::soft_dice_quadratic: return soft_dice_quadratic_expr(t, scores, truth, cfg.epsilon);
    case LossKind::binary_soft_dice_eps: return binary_soft_dice_eps_expr(t, scores, truth, cfg.epsilon);
    case LossKind::tversky: return tversky_expr(t, scores, truth, cfg.alpha, cfg.beta, cfg.epsilon);
    case LossKind::f_beta: return f_beta_expr(t, scores, truth, cfg.beta, cfg.epsilon);
    case LossKind::mean_f_beta: return mean_f_beta_expr(t, scores, truth, cfg.beta, cfg.epsilon);
  }
  throw std::logic_error("unhandled loss kind");
}

}  // namespace usseg

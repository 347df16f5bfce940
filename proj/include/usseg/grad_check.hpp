#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include "usseg/autodiff.hpp"

namespace usseg {

struct GradCheckOptions {
  double step = 1e-5;
  double tol = 1e-5;
  // Upper bound on perturbed elements across all inputs; 0 checks every element.
  std::size_t max_samples = 0;
  std::uint64_t seed = 0;
  // Denominator floor of the relative error. Gradients that vanish identically (e.g. a bias
  // feeding batch norm) leave only finite-difference noise, which a tiny floor amplifies.
  double floor = 1e-8;
};

struct GradCheckReport {
  std::vector<double> errors;
  double max_error = 0.0;
  double mean_error = 0.0;
  double tol = 0.0;
  bool passed = false;
};

inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Distance of a recorded forward pass from the nearest non-smooth point: the smallest |x|
/// fed to a relu and the smallest top-two gap inside a max-pool window. Central differences
/// are only meaningful when this comfortably exceeds the step.
inline double kink_margin(const Tape& tape) {
  double margin = std::numeric_limits<double>::infinity();
  for (const auto& e : tape.entries()) {
    const Tensor& x = e.inputs[0].value();
    if (e.op == "relu") {
      for (double v : x.data()) margin = std::min(margin, std::abs(v));
    } else if (e.op == "maxpool2") {
      const Shape s = x.shape();
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
          for (std::size_t y = 0; y < s.h; y += 2)
            for (std::size_t xx = 0; xx < s.w; xx += 2) {
              double w[4] = {x.at(n, c, y, xx), x.at(n, c, y, xx + 1), x.at(n, c, y + 1, xx),
                             x.at(n, c, y + 1, xx + 1)};
              std::sort(w, w + 4);
              // a tie at exactly zero comes from relu'd inputs that stay zero under a small
              // perturbation (the relu check covers the crossing)
              if (w[3] == 0.0) continue;
              margin = std::min(margin, w[3] - w[2]);
            }
    }
  }
  return margin;
}

/// Compares tape gradients of the scalar `f` against central differences over the leaves `wrt`.
inline GradCheckReport grad_check(const std::function<Var(Tape&)>& f, std::vector<Var> wrt,
                                  const GradCheckOptions& opt = {}) {
  for (Var& v : wrt) v.zero_grad();
  Tape tape;
  const Var y = f(tape);
  if (y.shape().size() != 1) {
    throw std::invalid_argument("grad_check: function must be scalar, got " + y.shape().str());
  }
  if (!std::isfinite(y.value().item())) {
    throw std::invalid_argument("grad_check: function value is not finite");
  }
  backward(tape, y);

  std::vector<std::pair<std::size_t, std::size_t>> sites;
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    for (std::size_t i = 0; i < wrt[k].value().size(); ++i) sites.emplace_back(k, i);
  }
  if (opt.max_samples > 0 && sites.size() > opt.max_samples) {
    std::vector<std::pair<std::size_t, std::size_t>> picked;
    std::mt19937_64 rng(opt.seed);
    std::sample(sites.begin(), sites.end(), std::back_inserter(picked), opt.max_samples, rng);
    sites = std::move(picked);
  }

  auto evaluate = [&f]() {
    Tape quiet(false);
    return f(quiet).value().item();
  };

  GradCheckReport report;
  report.tol = opt.tol;
  for (auto [k, i] : sites) {
    Tensor& value = wrt[k].mutable_value();
    const double saved = value[i];
    value[i] = saved + opt.step;
    const double plus = evaluate();
    value[i] = saved - opt.step;
    const double minus = evaluate();
    value[i] = saved;
    const double numeric = (plus - minus) / (2.0 * opt.step);
    const double analytic = wrt[k].has_grad() ? wrt[k].grad()[i] : 0.0;
    report.errors.push_back(relative_error(analytic, numeric, opt.floor));
  }
  if (!report.errors.empty()) {
    report.max_error = *std::max_element(report.errors.begin(), report.errors.end());
    report.mean_error = std::accumulate(report.errors.begin(), report.errors.end(), 0.0) /
                        static_cast<double>(report.errors.size());
  }
  report.passed = report.max_error < opt.tol;
  return report;
}

/// Single-input form: checks d f(x) / dx at `point`.
inline GradCheckReport grad_check(const std::function<Var(Tape&, const Var&)>& f,
                                  const Tensor& point, double step, double tol) {
  Var x = Var::leaf(point);
  GradCheckOptions opt;
  opt.step = step;
  opt.tol = tol;
  return grad_check([&](Tape& t) { return f(t, x); }, {x}, opt);
}

}  // namespace usseg

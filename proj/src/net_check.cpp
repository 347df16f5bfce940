#include "usseg/net_check.hpp"

#include <optional>
#include <random>
#include <stdexcept>

namespace usseg {

namespace {

Tensor uniform(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  Tensor t(s);
  for (double& v : t.data()) v = d(rng);
  return t;
}

}  // namespace

NetworkCheckResult network_grad_check(ModelConfig cfg, std::uint64_t seed,
                                      const NetworkCheckOptions& opt) {
  NetworkCheckResult res;
  const Shape in{opt.batch, cfg.in_channels, opt.side, opt.side};
  std::optional<UNet> net;
  Var x;
  std::uint64_t draw = seed;
  for (std::size_t k = 0;; ++k, draw += 1000) {
    if (k == opt.max_draws) {
      throw std::runtime_error("network_grad_check: no draw clears the kink margin after " +
                               std::to_string(k) + " attempts");
    }
    cfg.seed = draw;
    net.emplace(cfg);
    x = Var::leaf(uniform(in, draw));
    Tape t;
    net->forward(t, x, Mode::train);
    res.margin = kink_margin(t);
    if (res.margin > opt.margin) {
      res.redraws = k;
      break;
    }
  }
  res.draw = draw;
  const Var w = Var::constant(uniform(Shape{opt.batch, 2, opt.side, opt.side}, draw ^ 0xABCDEFull));
  std::vector<Var> wrt = net->store().params();
  wrt.push_back(x);
  GradCheckOptions gc;
  gc.step = opt.step;
  gc.tol = opt.tol;
  gc.max_samples = opt.samples;
  gc.seed = draw;
  gc.floor = opt.floor;
  res.report = grad_check(
      [&](Tape& t) { return sum(t, mul(t, net->forward(t, x, Mode::train), w)); }, wrt, gc);
  return res;
}

}  // namespace usseg

#include <gtest/gtest.h>

#include <sstream>

#include "support.hpp"

using namespace usseg;
using namespace testing_support;

namespace {

ModelConfig small(std::size_t depth, std::size_t width = 2) {
  ModelConfig c;
  c.depth = depth;
  c.base_width = width;
  return c;
}

void expect_channel_simplex(const Tensor& p, double tol = 1e-12) {
  const Shape s = p.shape();
  ASSERT_EQ(s.c, 2u);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) {
        const double a = p.at(n, 0, y, x), b = p.at(n, 1, y, x);
        ASSERT_TRUE(std::isfinite(a) && std::isfinite(b));
        ASSERT_GE(a, 0.0);
        ASSERT_GE(b, 0.0);
        ASSERT_NEAR(a + b, 1.0, tol);
      }
}

// Plain U-net parameter count written out layer by layer: 3x3 convs without bias, each
// followed by a batch norm (gamma, beta); 2x2 up-convolutions with bias; 1x1 head with bias.
std::size_t plain_parameter_count(const ModelConfig& c) {
  auto stage = [](std::size_t in, std::size_t out) { return 9 * in * out + 2 * out + 9 * out * out + 2 * out; };
  std::size_t total = 0;
  std::size_t in = c.in_channels;
  for (std::size_t k = 0; k <= c.depth; ++k) {
    const std::size_t w = c.base_width * (std::size_t{1} << k);
    total += stage(in, w);
    in = w;
  }
  for (std::size_t k = c.depth; k-- > 0;) {
    const std::size_t w = c.base_width * (std::size_t{1} << k);
    total += 4 * (2 * w) * w + w;  // up
    total += stage(2 * w, w);
  }
  return total + 2 * c.base_width + 2;
}

std::map<std::string, int> census_of(const ModelConfig& c, std::size_t side) {
  UNet net(c);
  Tape t;
  net.forward(t, random_tensor(Shape{1, c.in_channels, side, side}, 1), Mode::train);
  return t.census();
}

ModelConfig random_config(std::mt19937_64& rng) {
  ModelConfig c;
  c.depth = 3 + rng() % 3;
  c.base_width = 1 + rng() % 64;
  c.in_channels = rng() % 2 ? 1 : 3;
  c.encoder_residual = rng() % 2;
  c.decoder_residual = rng() % 2;
  for (std::size_t j = 0; j < c.depth; ++j) {
    if (rng() % 2) c.attention_sites.insert(j);
  }
  const auto variants = attention_variants();
  c.attention = variants[rng() % variants.size()];
  c.fine_source = rng() % 2 ? FineSource::grid : FineSource::encoder_end;
  c.loss.kind = static_cast<LossKind>(rng() % 7);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  c.loss.beta = u(rng);
  c.loss.alpha = u(rng) / 3.0;
  c.loss.epsilon = 0.01 + u(rng);
  c.seed = rng();
  return c;
}

}  // namespace

TEST(ModelConfig, StageWidthsDouble) {
  ModelConfig c = small(5, 48);
  const std::vector<std::size_t> expect = {48, 96, 192, 384, 768};
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(c.width(k), expect[k]);
  EXPECT_EQ(c.divisor(), 32u);
}

TEST(ModelConfig, Rejections) {
  ModelConfig c = small(3);
  c.attention_sites = {3};  // dec3 needs depth 4
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.attention_sites = {2};
  EXPECT_NO_THROW(c.validate());
  c.depth = 6;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small(3);
  c.in_channels = 2;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(parse_site("dec5"), std::invalid_argument);
  EXPECT_THROW(parse_fine_source("decoder"), std::invalid_argument);
}

TEST(ModelConfig, RoundTripProperty) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 200; ++i) {
    const ModelConfig c = random_config(rng);
    std::stringstream ss;
    write_model_config(ss, c);
    KeyValues kv = KeyValues::parse(ss, "mem");
    const ModelConfig back = read_model_config(kv);
    kv.finish();
    EXPECT_EQ(back, c) << ss.str();
  }
}

TEST(ModelConfig, UnknownKeyAndBadValues) {
  {
    std::istringstream in("depth=3\n# comment\nbase_width=4\nwidht=3\n");
    KeyValues kv = KeyValues::parse(in, "model.cfg");
    read_model_config(kv);
    try {
      kv.finish();
      FAIL() << "unknown key accepted";
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find("widht"), std::string::npos);
    }
  }
  {
    std::istringstream in("depth=3\nattention_sites=bridge,dec3\n");
    KeyValues kv = KeyValues::parse(in, "model.cfg");
    EXPECT_THROW(read_model_config(kv), ConfigError);
  }
  {
    std::istringstream in("attention_sites=bridge,dec1\nfine_source=grid\n");
    KeyValues kv = KeyValues::parse(in, "model.cfg");
    const ModelConfig c = read_model_config(kv);
    EXPECT_EQ(c.attention_sites, (std::set<std::size_t>{0, 1}));
    EXPECT_EQ(c.fine_source, FineSource::grid);
  }
}

TEST(UNet, ShapesAndSimplexAcrossDepths) {
  for (std::size_t d : {3u, 4u, 5u}) {
    for (std::size_t in_c : {1u, 3u}) {
      ModelConfig c = small(d);
      c.in_channels = in_c;
      c.attention_sites = first_sites(d);
      UNet net(c);
      const std::size_t side = 2 * c.divisor();
      const Tensor p = net.predict(random_tensor(Shape{2, in_c, side, side}, d, 0, 255));
      EXPECT_EQ(p.shape(), (Shape{2, 2, side, side}));
      expect_channel_simplex(p);
    }
  }
}

TEST(UNet, RejectsBadExtentWithDivisor) {
  UNet net(small(4));
  try {
    net.predict(Tensor(Shape{1, 1, 24, 32}));
    FAIL() << "24 rows accepted at depth 4";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("16"), std::string::npos) << e.what();
  }
  EXPECT_THROW(net.predict(Tensor(Shape{1, 3, 32, 32})), std::invalid_argument);
}

TEST(UNet, InferIsDeterministic) {
  ModelConfig c = small(3, 4);
  c.attention_sites = {0, 1};
  UNet net(c);
  const Tensor x = random_tensor(Shape{1, 1, 16, 16}, 4);
  EXPECT_EQ(net.predict(x), net.predict(x));
  UNet twin(c);
  EXPECT_EQ(twin.predict(x), net.predict(x));
}

TEST(UNet, ParameterCount) {
  for (std::size_t d : {3u, 4u, 5u}) {
    for (std::size_t w : {1u, 2u, 5u}) {
      ModelConfig c = small(d, w);
      c.encoder_residual = false;
      EXPECT_EQ(UNet(c).parameter_count(), plain_parameter_count(c));
    }
  }
  std::mt19937_64 rng(5);
  for (int i = 0; i < 20; ++i) {
    ModelConfig c = random_config(rng);
    c.base_width = 1 + c.base_width % 4;
    const std::size_t count = UNet(c).parameter_count();
    c.seed ^= 0x55;
    EXPECT_EQ(UNet(c).parameter_count(), count);  // seed does not change the graph
  }
}

TEST(UNet, PlainCensusAndGridWiringWithoutAttention) {
  for (std::size_t d : {3u, 4u, 5u}) {
    ModelConfig c = small(d);
    c.encoder_residual = false;
    const int n = static_cast<int>(d);
    const std::map<std::string, int> plain = {
        {"conv3x3", 2 * (2 * n + 1)}, {"batchnorm", 2 * (2 * n + 1)}, {"relu", 2 * (2 * n + 1)},
        {"maxpool2", n},           {"tconv2x2", n},                 {"concat", n},
        {"conv1x1", 1},            {"softmax_channels", 1}};
    EXPECT_EQ(census_of(c, c.divisor()), plain);
    c.fine_source = FineSource::grid;
    EXPECT_EQ(census_of(c, c.divisor()), plain);
  }
}

TEST(UNet, DecoderResidualCensusDelta) {
  for (std::size_t d : {3u, 4u, 5u}) {
    ModelConfig c = small(d);
    c.attention_sites = {0};
    auto off = census_of(c, c.divisor());
    c.decoder_residual = true;
    auto on = census_of(c, c.divisor());
    const int n = static_cast<int>(d);
    // one shortcut per decoder stage: 1x1 projection (channels halve), add, relu
    off["add"] += n;
    off["conv1x1"] += n;
    off["relu"] += n;
    EXPECT_EQ(on, off);
  }
}

TEST(UNet, AblationGridSmoke) {
  int built = 0;
  for (std::size_t d : {3u, 4u, 5u}) {
    for (bool er : {false, true}) {
      for (bool dr : {false, true}) {
        for (std::size_t sites = 0; sites <= d; ++sites) {
          for (const AttentionConfig& ac : attention_variants()) {
            for (FineSource fs : {FineSource::encoder_end, FineSource::grid}) {
              ModelConfig c = small(d, 1);
              c.encoder_residual = er;
              c.decoder_residual = dr;
              c.attention_sites = first_sites(sites);
              c.attention = ac;
              c.fine_source = fs;
              UNet net(c);
              Tape t;
              const Var p = net.forward(t, random_tensor(Shape{1, 1, 32, 32}, built), Mode::train);
              expect_channel_simplex(p.value(), 1e-12);
              const Var l = loss_expr(t, c.loss, select_channel(t, p, 1),
                                      random_binary(Shape{1, 1, 32, 32}, built));
              backward(t, l);
              double g = 0;
              for (const Var& w : net.store().params()) {
                if (!w.has_grad()) continue;
                for (double v : w.grad().data()) {
                  ASSERT_TRUE(std::isfinite(v));
                  g += std::abs(v);
                }
              }
              EXPECT_GT(g, 0.0);
              ++built;
            }
          }
        }
      }
    }
  }
  EXPECT_EQ(built, 2 * 2 * (4 + 5 + 6) * 8 * 2);
}

// Central differences on the full network carry ~1e-9 of round-off (measured against steps
// 1e-4 and 1e-6); below this floor the relative error only measures that noise. Biases ahead
// of a batch norm have an identically zero gradient and land here too.
constexpr double kNetworkFloor = 5e-5;

TEST(UNet, NetworkGradientCheck) {
  // depth 3, width 4, both wirings with attention at every site, 20 draws
  const auto variants = attention_variants();
  for (int k = 0; k < 20; ++k) {
    ModelConfig c = small(3, 4);
    c.encoder_residual = k % 2 == 0;
    c.decoder_residual = k % 3 == 0;
    c.attention_sites = first_sites(3);
    c.attention = variants[k % variants.size()];
    c.fine_source = k % 2 ? FineSource::grid : FineSource::encoder_end;
    std::optional<UNet> net;
    Var x;
    std::uint64_t draw = k;
    for (int tries = 0;; ++tries, draw += 1000) {
      ASSERT_LT(tries, 50) << "no smooth draw";
      c.seed = 500 + draw;
      net.emplace(c);
      x = Var::leaf(random_tensor(Shape{2, 1, 16, 16}, draw));
      Tape t;
      net->forward(t, x, Mode::train);
      if (kink_margin(t) > 1e-4) break;
    }
    std::vector<Var> wrt = net->store().params();
    wrt.push_back(x);
    const auto r = grad_check(
        [&](Tape& t) { return project(t, net->forward(t, x, Mode::train), draw); }, wrt,
        {1e-5, 1e-4, 300, draw, kNetworkFloor});
    EXPECT_TRUE(r.passed) << "draw " << draw << " max " << r.max_error;
  }
}

TEST(UNet, AttentionTaps) {
  ModelConfig c = small(4, 2);
  EXPECT_TRUE(UNet(c).attention_taps(Tensor(Shape{1, 1, 16, 16})).empty());
  for (AttentionConfig ac : attention_variants()) {
    c.attention = ac;
    c.attention_sites = first_sites(4);
    UNet net(c);
    const auto taps = net.attention_taps(random_tensor(Shape{1, 1, 32, 32}, 3));
    ASSERT_EQ(taps.size(), 4u);
    EXPECT_EQ(net.attention_site_order(), (std::vector<std::size_t>{0, 1, 2, 3}));
    for (std::size_t j = 0; j < 4; ++j) {
      const Shape s = taps[j].shape();
      const std::size_t side = 32 >> (3 - j);
      EXPECT_EQ(s.h, side);
      EXPECT_EQ(s.w, side);
      EXPECT_EQ(s.c, ac.kind == AttentionKind::spatial ? 1u : c.width(3 - j));
      for (std::size_t ch = 0; ch < s.c; ++ch) {
        double total = 0;
        for (std::size_t y = 0; y < s.h; ++y)
          for (std::size_t x = 0; x < s.w; ++x) total += taps[j].at(0, ch, y, x);
        EXPECT_NEAR(total, 1.0, 1e-12);
      }
    }
    // taps do not change the prediction
    const Tensor x = random_tensor(Shape{1, 1, 32, 32}, 3);
    const Tensor before = net.predict(x);
    net.attention_taps(x);
    EXPECT_EQ(net.predict(x), before);
  }
}

TEST(PatchClassifier, ShapeDeterminismAndRejection) {
  PatchClassifier a = build_patch_classifier(4, 9), b = build_patch_classifier(4, 9);
  const Tensor x = random_tensor(Shape{3, 1, 32, 32}, 1, 0, 1);
  const Tensor p = a.predict(x);
  EXPECT_EQ(p.shape(), (Shape{3, 2, 1, 1}));
  expect_channel_simplex(p);
  EXPECT_EQ(p, b.predict(x));
  EXPECT_NE(p, build_patch_classifier(4, 10).predict(x));
  EXPECT_NO_THROW(a.predict(Tensor(Shape{1, 1, 16, 16})));
  EXPECT_THROW(a.predict(Tensor(Shape{1, 1, 12, 16})), std::invalid_argument);
  EXPECT_THROW(a.predict(Tensor(Shape{1, 3, 16, 16})), std::invalid_argument);
}

TEST(PatchClassifier, OverfitsToySet) {
  // ten 16x16 patches: bright blob (tumour) vs textured background
  std::mt19937_64 rng(21);
  std::normal_distribution<double> noise(0.0, 0.1);
  Tensor x(Shape{10, 1, 16, 16});
  Tensor label(Shape{10, 1, 1, 1});
  for (std::size_t n = 0; n < 10; ++n) {
    const bool tumour = n % 2 == 0;
    label[n] = tumour ? 1.0 : 0.0;
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t xx = 0; xx < 16; ++xx) {
        const double r2 = (y - 7.5) * (y - 7.5) + (xx - 7.5) * (xx - 7.5);
        x.at(n, 0, y, xx) = (tumour && r2 < 25 ? 0.8 : 0.3) + noise(rng);
      }
  }
  PatchClassifier clf = build_patch_classifier(4, 3);
  std::vector<Var> params = clf.store().params();
  AdamState state(params);
  double acc = 0;
  for (int step = 0; step < 500 && acc < 0.99; ++step) {
    clf.store().zero_grad();
    Tape t;
    const Var p = clf.forward(t, x, Mode::train);
    backward(t, weighted_cross_entropy_expr(t, select_channel(t, p, 1), label, 1.0));
    ASSERT_TRUE(adam_step(params, state, 1e-2));
    const Tensor q = clf.predict(x);
    int right = 0;
    for (std::size_t n = 0; n < 10; ++n) right += (q.at(n, 1, 0, 0) > 0.5) == (label[n] > 0.5);
    acc = right / 10.0;
  }
  EXPECT_GE(acc, 0.99);
}

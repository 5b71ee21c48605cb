#include <gtest/gtest.h>

#include <cmath>

#include "hfd/nn/autograd.hpp"
#include "hfd/nn/net.hpp"
#include "hfd/trainer.hpp"

using namespace hfd;
using namespace hfd::nn;

namespace {

Tensor random_tensor(int c, int h, int w, SeededStream& s) {
  Tensor t(c, h, w);
  for (double& v : t.v) v = s.normal();
  return t;
}

std::vector<double> random_params(std::size_t n, SeededStream& s) {
  std::vector<double> p(n);
  for (double& v : p) v = s.normal();
  return p;
}

// Small net used by the gradient checks: under 1000 parameters.
NetConfig grad_check_config(LossKind kind) {
  NetConfig c;
  c.in_channels = 1;
  c.ctx_channels = 1;
  c.out_channels = 1;
  c.channels = {2, 4};
  c.blocks = {1, 1};
  c.emb_dim = 8;
  c.zero_init_output = false;
  c.time_input = kind == LossKind::diffusion ? TimeInput::log_snr : TimeInput::linear;
  return c;
}

std::vector<TrainExample> small_batch(int hw, std::uint64_t seed) {
  SeededStream r(seed);
  std::vector<TrainExample> b;
  for (int i = 0; i < 2; ++i) {
    ImageBuffer x(hw, hw, 1), c(hw, hw, 1);
    for (double& v : x.data) v = r.uniform();
    for (double& v : c.data) v = r.uniform();
    b.push_back({x, c, {}});
  }
  return b;
}

NetConfig small_rgb_config() {
  NetConfig c;
  c.channels = {8, 16};
  c.blocks = {1, 1};
  c.emb_dim = 16;
  c.zero_init_output = false;
  return c;
}

ImageBuffer random_image(int h, int w, int c, std::uint64_t seed) {
  SeededStream s(seed);
  ImageBuffer img(h, w, c);
  for (double& v : img.data) v = s.uniform();
  return img;
}

}  // namespace

TEST(Ops, ConvMatchesDirectSum) {
  SeededStream s(1);
  for (int k : {1, 3}) {
    const ConvSpec spec{3, 4, k, 0, static_cast<std::size_t>(4 * 3 * k * k)};
    const auto p = random_params(spec.count(), s);
    const Tensor x = random_tensor(3, 5, 6, s);
    NoGradGuard ng;
    const Tensor y = conv2d({p.data(), nullptr}, spec, leaf(x))->value;
    for (int co = 0; co < 4; ++co)
      for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 6; ++c) {
          double acc = p[spec.b + co];
          for (int ci = 0; ci < 3; ++ci)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int rr = r + ky - k / 2, cc = c + kx - k / 2;
                if (rr < 0 || rr >= 5 || cc < 0 || cc >= 6) continue;
                acc += p[((co * 3 + ci) * k + ky) * k + kx] * x.ch(ci)[rr * 6 + cc];
              }
          ASSERT_NEAR(y.ch(co)[r * 6 + c], acc, 1e-12);
        }
  }
}

TEST(Ops, GroupNormNormalizesGroups) {
  SeededStream s(2);
  const NormSpec spec{4, 2, 0, 4};
  std::vector<double> p{1, 1, 1, 1, 0, 0, 0, 0};
  Tensor x = random_tensor(4, 3, 3, s);
  for (double& v : x.v) v = 5 + 3 * v;
  NoGradGuard ng;
  const Tensor y = group_norm({p.data(), nullptr}, spec, leaf(x))->value;
  for (int g = 0; g < 2; ++g) {
    double m = 0, q = 0;
    for (int i = 0; i < 18; ++i) m += y.v[g * 18 + i];
    m /= 18;
    for (int i = 0; i < 18; ++i) q += (y.v[g * 18 + i] - m) * (y.v[g * 18 + i] - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(q / 18, 1.0, 1e-4);
  }
}

TEST(Ops, PoolAndUpsample) {
  Tensor x(1, 2, 4);
  x.v = {1, 2, 3, 4, 5, 6, 7, 8};
  NoGradGuard ng;
  const Tensor p = avg_pool2(leaf(x))->value;
  EXPECT_EQ(p.v, (AlignedVec{3.5, 5.5}));
  const Tensor u = upsample2(leaf(p))->value;
  EXPECT_EQ(u.v, (AlignedVec{3.5, 3.5, 5.5, 5.5, 3.5, 3.5, 5.5, 5.5}));
  EXPECT_THROW(avg_pool2(leaf(Tensor(1, 3, 2))), std::invalid_argument);
}

TEST(Ops, AttentionAveragesValues) {
  // Constant values per channel come back unchanged: softmax rows sum to one.
  SeededStream s(3);
  Tensor qkv = random_tensor(6, 2, 3, s);
  for (int i = 0; i < 6; ++i) {
    qkv.ch(4)[i] = 2.5;
    qkv.ch(5)[i] = -1.0;
  }
  NoGradGuard ng;
  const Tensor o = attention_core(leaf(qkv))->value;
  for (int i = 0; i < 6; ++i) {
    EXPECT_NEAR(o.ch(0)[i], 2.5, 1e-12);
    EXPECT_NEAR(o.ch(1)[i], -1.0, 1e-12);
  }
}

TEST(Ops, LayoutRoundTrip) {
  const auto img = random_image(3, 5, 3, 4);
  EXPECT_EQ(from_chw(to_chw(img)), img);
  EXPECT_EQ(to_chw(img).ch(1)[0], img.at(0, 0, 1));
}

TEST(Autograd, NoGradKeepsNoGraph) {
  SeededStream s(5);
  const ConvSpec spec{1, 1, 3, 0, 9};
  auto p = random_params(spec.count(), s);
  std::vector<double> g(p.size());
  NoGradGuard ng;
  const Var y = conv2d({p.data(), g.data()}, spec, leaf(random_tensor(1, 4, 4, s)));
  EXPECT_TRUE(y->parents.empty());
  EXPECT_FALSE(y->needs_grad);
}

TEST(Autograd, UnusedParameterHasZeroGradient) {
  SeededStream s(6);
  const ConvSpec used{1, 2, 3, 0, 18}, unused{2, 2, 1, 20, 24};
  auto p = random_params(26, s);
  std::vector<double> g(p.size(), 0.0);
  const Var y = conv2d({p.data(), g.data()}, used, leaf(random_tensor(1, 4, 4, s)));
  backward(scaled_sq_error(y, Tensor(2, 4, 4), 1.0));
  for (std::size_t i = unused.w; i < 26; ++i) EXPECT_EQ(g[i], 0.0);
  double used_norm = 0;
  for (std::size_t i = 0; i < 20; ++i) used_norm += std::abs(g[i]);
  EXPECT_GT(used_norm, 0.0);
}

TEST(Autograd, GradientIsLinearInSeed) {
  const NetConfig cfg = grad_check_config(LossKind::diffusion);
  const TinyCondNet net(cfg);
  const auto batch = small_batch(8, 1);
  std::vector<double> g1(net.parameter_count(), 0.0), g3(net.parameter_count(), 0.0);
  for (auto* g : {&g1, &g3}) {
    const Var out = net.forward(to_chw(batch[0].x), to_chw(batch[0].ctx), 0.3, net.params().data(), g->data());
    backward(scaled_sq_error(out, Tensor(1, 8, 8), 0.7), g == &g1 ? 1.0 : 3.0);
  }
  for (std::size_t i = 0; i < g1.size(); ++i) ASSERT_NEAR(g3[i], 3.0 * g1[i], 1e-12 * (1 + std::abs(g3[i])));
}

TEST(GradientCheck, BothLossKindsBelowBound) {
  for (auto kind : {LossKind::diffusion, LossKind::rectflow}) {
    const TinyCondNet net(grad_check_config(kind));
    ASSERT_LE(net.parameter_count(), 1000u);
    const auto batch = small_batch(8, 1);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const auto r = gradient_check(net, batch, kind, SeededStream(seed));
      EXPECT_LT(r.max_rel_error, 1e-4) << to_string(kind) << " index " << r.worst_index << " analytic " << r.analytic
                                       << " numeric " << r.numeric;
    }
  }
}

TEST(GradientCheck, TwoPointStencilConvergesQuadratically) {
  // The plain central difference is limited by O(h^2) truncation, not by the gradient.
  const TinyCondNet net(grad_check_config(LossKind::diffusion));
  const auto batch = small_batch(8, 1);
  const double e2 = gradient_check(net, batch, LossKind::diffusion, SeededStream(0), 1e-2, 2).max_rel_error;
  const double e3 = gradient_check(net, batch, LossKind::diffusion, SeededStream(0), 1e-3, 2).max_rel_error;
  EXPECT_GT(e2 / e3, 50.0);
}

TEST(TinyCondNet, DefaultIsDeskScale) {
  const TinyCondNet net{NetConfig{}};
  EXPECT_LE(net.parameter_count(), 1000000u);
  EXPECT_GT(net.parameter_count(), 100000u);
  for (double v : net.params()) ASSERT_TRUE(std::isfinite(v));
}

TEST(TinyCondNet, ZeroInitOutputPredictsZero) {
  NetConfig cfg = small_rgb_config();
  cfg.zero_init_output = true;
  const TinyCondNet net(cfg);
  const auto v = net.predict(random_image(16, 16, 3, 1), 0.4, random_image(16, 16, 3, 2));
  for (double x : v.data) EXPECT_EQ(x, 0.0);
}

TEST(TinyCondNet, FullyConvolutional) {
  const TinyCondNet net(small_rgb_config());
  for (int hw : {32, 64}) {
    const auto out = net.predict(random_image(hw, hw + 16, 3, 1), 0.5, random_image(hw, hw + 16, 3, 2));
    EXPECT_EQ(out.height, hw);
    EXPECT_EQ(out.width, hw + 16);
    EXPECT_EQ(out.channels, 3);
    EXPECT_TRUE(all_finite(out));
  }
}

TEST(TinyCondNet, ExamplesAreIndependent) {
  const TinyCondNet net(small_rgb_config());
  const auto a = random_image(16, 16, 3, 1), b = random_image(16, 16, 3, 2), c = random_image(16, 16, 3, 3);
  const auto va = net.predict(a, 0.3, c);
  net.predict(b, 0.7, a);
  EXPECT_EQ(net.predict(a, 0.3, c), va);
}

TEST(TinyCondNet, InputValidation) {
  const TinyCondNet net(small_rgb_config());
  EXPECT_THROW(net.predict(random_image(15, 16, 3, 1), 0.5, random_image(15, 16, 3, 1)), std::invalid_argument);
  EXPECT_THROW(net.predict(random_image(16, 16, 3, 1), 0.5, random_image(8, 8, 3, 1)), std::invalid_argument);
  EXPECT_THROW(net.predict(random_image(16, 16, 1, 1), 0.5, random_image(16, 16, 3, 1)), std::invalid_argument);
  EXPECT_THROW(net.predict(random_image(16, 16, 3, 1), 1.5, random_image(16, 16, 3, 1)), std::invalid_argument);
  NetConfig bad = small_rgb_config();
  bad.blocks = {1};
  EXPECT_THROW(TinyCondNet{bad}, std::invalid_argument);
}

TEST(TinyCondNet, DeterministicInit) {
  const TinyCondNet a(small_rgb_config()), b(small_rgb_config());
  EXPECT_EQ(a.params(), b.params());
  NetConfig other = small_rgb_config();
  other.init_seed = 1;
  EXPECT_NE(TinyCondNet(other).params(), a.params());
}

TEST(TinyCondNet, NonFiniteActivationsRaise) {
  TinyCondNet net(small_rgb_config());
  net.params()[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(net.predict(random_image(16, 16, 3, 1), 0.5, random_image(16, 16, 3, 2)), NumericalError);
}

TEST(TinyCondNet, OutputIndependentOfWeightAddress) {
  const TinyCondNet net(small_rgb_config());
  const auto z = random_image(16, 16, 3, 1), c = random_image(16, 16, 3, 2);
  const auto ref = net.predict(z, 0.3, c);
  for (std::size_t shift = 1; shift < 8; ++shift) {
    std::vector<double> buf(net.parameter_count() + shift);
    std::copy(net.params().begin(), net.params().end(), buf.begin() + static_cast<std::ptrdiff_t>(shift));
    const std::vector<double> w(buf.begin() + static_cast<std::ptrdiff_t>(shift), buf.end());
    EXPECT_EQ(net.predict_with(w, z, 0.3, c), ref);
    NoGradGuard ng;
    const Tensor out = net.forward(to_chw(z), to_chw(c), 0.3, buf.data() + shift, nullptr)->value;
    EXPECT_EQ(from_chw(out), ref) << "shift " << shift;
  }
}

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "hfd/checkpoint.hpp"
#include "hfd/denoiser.hpp"
#include "hfd/diffusion.hpp"
#include "hfd/trainer.hpp"

using namespace hfd;
namespace fs = std::filesystem;

namespace {

nn::NetConfig tiny_config() {
  nn::NetConfig c;
  c.channels = {8, 16};
  c.blocks = {1, 1};
  c.emb_dim = 16;
  return c;
}

ImageBuffer box_blur2(const ImageBuffer& x) {
  ImageBuffer o = x;
  for (int r = 0; r < x.height; r += 2)
    for (int c = 0; c < x.width; c += 2)
      for (int k = 0; k < x.channels; ++k) {
        const double m = 0.25 * (x.at(r, c, k) + x.at(r + 1, c, k) + x.at(r, c + 1, k) + x.at(r + 1, c + 1, k));
        o.at(r, c, k) = o.at(r + 1, c, k) = o.at(r, c + 1, k) = o.at(r + 1, c + 1, k) = m;
      }
  return o;
}

// Smooth 16x16 RGB images with their 2x box-blurred versions as context.
std::vector<TrainExample> smooth_dataset(int n, std::uint64_t seed) {
  SeededStream r(seed);
  std::vector<TrainExample> data;
  for (int i = 0; i < n; ++i) {
    ImageBuffer x(16, 16, 3);
    const double f1 = 1 + 2 * r.uniform(), f2 = 1 + 2 * r.uniform(), ph = 6 * r.uniform();
    for (int y = 0; y < 16; ++y)
      for (int c = 0; c < 16; ++c)
        for (int k = 0; k < 3; ++k) x.at(y, c, k) = 0.5 + 0.4 * std::sin(0.4 * f1 * y + ph + k) * std::cos(0.4 * f2 * c - k);
    data.push_back({x, box_blur2(x), {}});
  }
  return data;
}

fs::path temp_dir() {
  fs::path p = fs::temp_directory_path() / "hfd_denoise_test";
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(GaussianOracle, MatchesQuadraturePosterior) {
  // mu0 = 0, var0 = 1, logsnr = 0: posterior mean by brute-force Bayes on a grid.
  NoiseSchedule sched;
  sched.eta = 1.0;
  const auto oracle = GaussianOracleDenoiser::scalar(sched, 0.0, 1.0);
  const auto p = sched.params(0.5);
  for (double z : {-2.0, -0.3, 0.0, 0.8, 3.1}) {
    double num = 0, den = 0;
    const int n = 40001;
    for (int i = 0; i < n; ++i) {
      const double x = -10.0 + 20.0 * i / (n - 1);
      const double w = std::exp(-0.5 * x * x) * std::exp(-0.5 * (z - p.alpha * x) * (z - p.alpha * x) / (p.sigma * p.sigma));
      const double tw = (i == 0 || i == n - 1) ? 0.5 : 1.0;
      num += tw * w * x;
      den += tw * w;
    }
    ImageBuffer zb(1, 1, 1, z);
    EXPECT_NEAR(oracle.posterior_mean(zb, 0.5, ImageBuffer{}).data[0], num / den, 1e-6) << z;
  }
}

TEST(GaussianOracle, DiracIgnoresState) {
  const NoiseSchedule sched;
  const auto oracle = GaussianOracleDenoiser::scalar(sched, 0.42, 0.0);
  ImageBuffer z(1, 3, 1);
  z.data = {-5.0, 0.0, 7.0};
  for (double t : {0.1, 0.5, 0.99})
    for (double v : oracle.posterior_mean(z, t, ImageBuffer{}).data) EXPECT_DOUBLE_EQ(v, 0.42);
}

TEST(GaussianOracle, ContextSuppliesMean) {
  const NoiseSchedule sched;
  const GaussianOracleDenoiser oracle(sched, {}, {0.0}, true);
  ImageBuffer ctx(1, 2, 1);
  ctx.data = {0.1, 0.9};
  const auto x = oracle.posterior_mean(ImageBuffer(1, 2, 1, 3.0), 0.5, ctx);
  EXPECT_DOUBLE_EQ(x.data[0], 0.1);
  EXPECT_DOUBLE_EQ(x.data[1], 0.9);
  EXPECT_THROW(oracle.posterior_mean(ImageBuffer(1, 2, 1), 0.5, ImageBuffer(1, 3, 1)), std::invalid_argument);
}

TEST(GaussianOracle, RejectsZeroSigmaAndBadVariance) {
  NoiseSchedule sched;
  sched.logsnr_max = 1000.0;  // sigma^2 = sigmoid(-1000) underflows to 0
  const auto oracle = GaussianOracleDenoiser::scalar(sched, 0.0, 1.0);
  EXPECT_THROW(oracle.predict(ImageBuffer(1, 1, 1), 0.0, ImageBuffer{}), std::domain_error);
  EXPECT_THROW(GaussianOracleDenoiser::scalar(NoiseSchedule{}, 0.0, -1.0), std::invalid_argument);
}

TEST(GaussianOracle, LossEqualsAnalyticMinimum) {
  // x ~ N(0.3, 0.25): E_t[alpha^2 var0 / (alpha^2 var0 + sigma^2)] = 0.49999999943 (mpmath quadrature).
  const NoiseSchedule sched;
  const double mu = 0.3, var = 0.25;
  const auto oracle = GaussianOracleDenoiser::scalar(sched, mu, var);
  SeededStream s(1);
  std::vector<ImageBuffer> xs(400000, ImageBuffer(1, 1, 1));
  for (auto& x : xs) x.data[0] = mu + std::sqrt(var) * s.normal();
  const double loss = diffusion_loss(xs, {}, oracle, sched, SeededStream(2));
  EXPECT_NEAR(loss / 0.49999999943, 1.0, 0.01);
}

TEST(Trainer, LearningRateSchedule) {
  TrainConfig cfg;
  EXPECT_EQ(learning_rate(cfg, 0), 0.0);
  EXPECT_NEAR(learning_rate(cfg, 10000), 1e-4 * std::pow(0.5, 10000.0 / 400000.0), 1e-18);
  EXPECT_NEAR(learning_rate(cfg, 5000), 0.5e-4 * std::pow(0.5, 5000.0 / 400000.0), 1e-18);
  double prev = learning_rate(cfg, 10000);
  for (std::uint64_t s = 10001; s < 2000000; s += 9973) {
    const double lr = learning_rate(cfg, s);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
  // Continuity at the warmup boundary.
  EXPECT_NEAR(learning_rate(cfg, 9999), learning_rate(cfg, 10000), 2e-8);
  cfg.warmup = 0;
  EXPECT_EQ(learning_rate(cfg, 0), 1e-4);
}

TEST(Trainer, EmaAfterZeroUpdatesIsInit) {
  const TrainState st(nn::TinyCondNet(tiny_config()), TrainConfig{});
  EXPECT_EQ(st.eval_params(), st.net.params());
}

TEST(Trainer, EmaFollowsRecurrenceExactly) {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.warmup = 2;
  TrainState st(nn::TinyCondNet(tiny_config()), cfg);
  const auto data = smooth_dataset(2, 3);
  const SeededStream root(4);
  for (std::uint64_t k = 0; k < 4; ++k) {
    const auto ema_prev = st.ema;
    train_step(st, data, root.substream(k));
    for (std::size_t i = 0; i < ema_prev.size(); ++i)
      ASSERT_EQ(st.ema[i], 0.9999 * ema_prev[i] + (1.0 - 0.9999) * st.net.params()[i]);
    EXPECT_EQ(st.step, k + 1);
  }
}

TEST(Trainer, FirstStepHasZeroLearningRate) {
  TrainState st(nn::TinyCondNet(tiny_config()), TrainConfig{});
  const auto before = st.net.params();
  train_step(st, smooth_dataset(1, 1), SeededStream(1));
  EXPECT_EQ(st.net.params(), before);
}

TEST(Trainer, ConstantGradientEmaLags) {
  TrainConfig cfg;
  cfg.lr = 0.01;
  cfg.warmup = 0;
  cfg.ema_decay = 0.9;
  nn::NetConfig nc = tiny_config();
  TrainState st(nn::TinyCondNet(nc), cfg);
  const auto init = st.net.params();
  const std::vector<double> g(init.size(), 1.0);
  double prev_gap = 0;
  for (int k = 0; k < 20; ++k) {
    apply_gradient(st, g);
    const std::size_t i = 7;
    // Params decrease; the EMA stays between init and params and keeps falling.
    EXPECT_LT(st.net.params()[i], st.ema[i]);
    EXPECT_LT(st.ema[i], init[i]);
    const double gap = st.ema[i] - st.net.params()[i];
    EXPECT_GE(gap, prev_gap);
    prev_gap = gap;
  }
}

TEST(Trainer, ZeroDecayEmaEqualsParams) {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.warmup = 0;
  cfg.ema_decay = 0.0;
  TrainState st(nn::TinyCondNet(tiny_config()), cfg);
  train_step(st, smooth_dataset(2, 1), SeededStream(1));
  train_step(st, smooth_dataset(2, 1), SeededStream(2));
  EXPECT_EQ(st.ema, st.net.params());
}

TEST(Trainer, Deterministic) {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.warmup = 1;
  const auto data = smooth_dataset(2, 5);
  auto run = [&] {
    TrainState st(nn::TinyCondNet(tiny_config()), cfg);
    for (std::uint64_t k = 0; k < 3; ++k) train_step(st, data, SeededStream(9).substream(k));
    return st;
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.net.params(), b.net.params());
  EXPECT_EQ(a.ema, b.ema);
  EXPECT_EQ(a.adam_v, b.adam_v);
}

TEST(Trainer, BatchLossMatchesDiffusionLoss) {
  nn::NetConfig nc = tiny_config();
  nc.zero_init_output = false;
  const nn::TinyCondNet net(nc);
  const auto data = smooth_dataset(3, 6);
  std::vector<ImageBuffer> xs, ctxs;
  for (const auto& e : data) {
    xs.push_back(e.x);
    ctxs.push_back(e.ctx);
  }
  const SeededStream stream(11);
  const double a = batch_loss(net, net.params(), data, LossKind::diffusion, stream, nullptr);
  const double b = diffusion_loss(xs, ctxs, BoundNet(net, net.params()), nc.sched, stream);
  EXPECT_NEAR(a, b, 1e-10 * b);
}

TEST(Trainer, Errors) {
  TrainState st(nn::TinyCondNet(tiny_config()), TrainConfig{});
  EXPECT_THROW(train_step(st, std::vector<TrainExample>{}, SeededStream(1)), std::invalid_argument);
  auto data = smooth_dataset(1, 1);
  data[0].x.data[5] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(train_step(st, data, SeededStream(1)), NumericalError);
  std::vector<double> bad(st.net.parameter_count(), 0.0);
  bad[3] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(apply_gradient(st, bad), NumericalError);
  TrainConfig cfg;
  cfg.beta2 = 1.0;
  EXPECT_THROW(TrainState(nn::TinyCondNet(tiny_config()), cfg), std::invalid_argument);
}

TEST(Trainer, OverfitsSmallSet) {
  TrainConfig cfg;
  cfg.lr = 2e-3;
  cfg.warmup = 100;
  cfg.halflife = 1e9;
  nn::NetConfig nc = tiny_config();
  nc.channels = {16, 32};
  nc.emb_dim = 32;
  TrainState st(nn::TinyCondNet(nc), cfg);
  const auto data = smooth_dataset(8, 5);
  auto eval = [&] {
    double s = 0;
    for (std::uint64_t k = 0; k < 8; ++k) s += batch_loss(st.net, st.net.params(), data, LossKind::diffusion, SeededStream(1000 + k), nullptr);
    return s / 8;
  };
  const double before = eval();
  const SeededStream root(7);
  for (std::uint64_t k = 0; k < 500; ++k) train_step(st, data, root.substream(k));
  EXPECT_LT(eval(), before / 5);
}

TEST(Checkpoint, RoundTrip) {
  TrainConfig cfg;
  cfg.loss = LossKind::rectflow;
  cfg.lr = 1e-3;
  cfg.warmup = 1;
  nn::NetConfig nc = tiny_config();
  nc.time_input = nn::TimeInput::linear;
  nc.sched.eta = 0.75;
  TrainState st(nn::TinyCondNet(nc), cfg);
  for (std::uint64_t k = 0; k < 2; ++k) train_step(st, smooth_dataset(2, 1), SeededStream(k));
  const auto path = temp_dir() / "rt.ckpt";
  save_checkpoint(st, path);
  const TrainState back = load_checkpoint(path);
  EXPECT_EQ(back.step, 2u);
  EXPECT_EQ(back.net.params(), st.net.params());
  EXPECT_EQ(back.ema, st.ema);
  EXPECT_EQ(back.adam_m, st.adam_m);
  EXPECT_EQ(back.adam_v, st.adam_v);
  EXPECT_EQ(back.cfg.loss, LossKind::rectflow);
  EXPECT_EQ(back.net.config().sched.eta, 0.75);
  EXPECT_EQ(back.net.config().channels, nc.channels);
  EXPECT_EQ(back.net.config().time_input, nn::TimeInput::linear);
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(st));
}

TEST(Checkpoint, CorruptionIsDetected) {
  const TrainState st(nn::TinyCondNet(tiny_config()), TrainConfig{});
  const std::string good = serialize_checkpoint(st);
  EXPECT_THROW(deserialize_checkpoint(good.substr(0, good.size() - 9)), DataError);
  EXPECT_THROW(deserialize_checkpoint(good + "x"), DataError);
  std::string magic = good;
  magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(magic), DataError);
  // Editing the echoed schedule without the hash is caught.
  std::string eta = good;
  const auto pos = eta.find("eta=0.5");
  ASSERT_NE(pos, std::string::npos);
  eta[pos + 6] = '7';
  EXPECT_THROW(deserialize_checkpoint(eta), DataError);
  // Architecture edit changes the parameter count.
  std::string arch = good;
  const auto cpos = arch.find("emb_dim=16");
  ASSERT_NE(cpos, std::string::npos);
  arch[cpos + 8] = '2';
  EXPECT_THROW(deserialize_checkpoint(arch), DataError);
  EXPECT_THROW(load_checkpoint(temp_dir() / "missing.ckpt"), DataError);
}

TEST(Checkpoint, ScheduleHashDistinguishesEta) {
  NoiseSchedule a, b;
  b.eta = 1.0;
  EXPECT_NE(schedule_hash(a), schedule_hash(b));
  EXPECT_EQ(schedule_hash(a), schedule_hash(NoiseSchedule{}));
}

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "hfd/core/random.hpp"
#include "hfd/schedule.hpp"

using namespace hfd;

namespace {
NoiseSchedule sched_eta(double eta) {
  NoiseSchedule s;
  s.eta = eta;
  return s;
}
}  // namespace

TEST(LogSnr, SymmetryPoint) { EXPECT_NEAR(sched_eta(1.0).log_snr(0.5), 0.0, 1e-15); }

TEST(LogSnr, ShiftAtHalf) {
  // -2 ln 0.5, evaluated with mpmath to 30 digits.
  EXPECT_NEAR(sched_eta(0.5).log_snr(0.5), 1.38629436111989061883, 1e-14);
}

TEST(LogSnr, ClampedAtEndpoints) {
  for (double eta : {0.25, 0.5, 1.0, 2.0}) {
    EXPECT_EQ(sched_eta(eta).log_snr(0.0), 15.0);
    EXPECT_EQ(sched_eta(eta).log_snr(1.0), -15.0);
  }
}

TEST(LogSnr, ShiftLawAndMonotonicity) {
  SeededStream s(1);
  const auto a = sched_eta(0.5), b = sched_eta(1.0);
  for (int i = 0; i < 100; ++i) {
    const double t = 0.01 + 0.98 * s.uniform();
    EXPECT_NEAR(a.log_snr(t) - b.log_snr(t), 2.0 * std::log(2.0), 1e-12);
  }
  double prev = a.log_snr(0.0);
  for (int i = 1; i <= 1000; ++i) {
    const double cur = a.log_snr(i / 1000.0);
    EXPECT_LE(cur, prev);
    prev = cur;
  }
}

TEST(LogSnr, RejectsOutOfRange) {
  EXPECT_THROW(sched_eta(1).log_snr(-0.1), std::invalid_argument);
  EXPECT_THROW(sched_eta(1).log_snr(1.1), std::invalid_argument);
  NoiseSchedule bad;
  bad.logsnr_min = 3;
  bad.logsnr_max = 3;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(VpParams, Values) {
  const auto p0 = vp_params(0.0);
  EXPECT_DOUBLE_EQ(p0.alpha, std::sqrt(0.5));
  EXPECT_DOUBLE_EQ(p0.sigma, std::sqrt(0.5));
  // sqrt(sigmoid(+-15)) from mpmath.
  const auto p15 = vp_params(15.0);
  EXPECT_NEAR(p15.alpha, 0.99999984704887484016, 1e-15);
  EXPECT_NEAR(p15.sigma, 5.5308428555295686067e-4, 1e-15);
}

TEST(VpParams, VariancePreserving) {
  SeededStream s(2);
  for (int i = 0; i < 100; ++i) {
    const double l = -30.0 + 60.0 * s.uniform();
    const auto p = vp_params(l);
    EXPECT_NEAR(p.alpha * p.alpha + p.sigma * p.sigma, 1.0, 1e-12);
  }
}

TEST(TimeGrid, Shapes) {
  EXPECT_EQ(make_time_grid(1).times, std::vector<double>{1.0});
  EXPECT_EQ(make_time_grid(4).times, (std::vector<double>{1.0, 0.75, 0.5, 0.25}));
  const auto g = make_time_grid(250);
  EXPECT_EQ(g.times.size(), 250u);
  EXPECT_DOUBLE_EQ(g.times.back(), 0.004);
  for (std::size_t i = 1; i < g.times.size(); ++i) EXPECT_NEAR(g.times[i - 1] - g.times[i], 1.0 / 250, 1e-15);
  EXPECT_EQ(g.next(249), 0.0);
  EXPECT_THROW(make_time_grid(0), std::invalid_argument);
}

TEST(Transition, DegenerateStep) {
  const auto sched = sched_eta(0.5);
  const auto tr = transition_params(sched, 0.5 - 1e-9, 0.5);
  EXPECT_NEAR(tr.alpha_ts, 1.0, 1e-8);
  EXPECT_NEAR(tr.var_ts, 0.0, 1e-8);
  EXPECT_THROW(transition_params(sched, 0.5, 0.5), std::invalid_argument);
  EXPECT_THROW(transition_params(sched, 0.6, 0.5), std::invalid_argument);
}

TEST(Transition, DefiningIdentities) {
  SeededStream rng(3);
  const auto sched = sched_eta(0.5);
  for (int i = 0; i < 100; ++i) {
    double s = rng.uniform(), t = rng.uniform();
    if (s > t) std::swap(s, t);
    if (s == t) continue;
    const auto tr = transition_params(sched, s, t);
    const auto ps = sched.params(s), pt = sched.params(t);
    EXPECT_NEAR(pt.alpha, tr.alpha_ts * ps.alpha, 1e-12);
    EXPECT_NEAR(pt.sigma * pt.sigma, tr.alpha_ts * tr.alpha_ts * ps.sigma * ps.sigma + tr.var_ts, 1e-12);
    EXPECT_GE(tr.var_ts, 0.0);
  }
}

TEST(Transition, FrozenValuesAtQuarterPoints) {
  // eta = 1, s = 1/4, t = 3/4: alpha_ts = sqrt(2) - 1, var_ts = 2 (sqrt(2) - 1), evaluated in mpmath.
  const auto tr = transition_params(sched_eta(1.0), 0.25, 0.75);
  EXPECT_NEAR(tr.alpha_ts, 0.41421356237309504880, 1e-12);
  EXPECT_NEAR(tr.var_ts, 0.82842712474619009760, 1e-12);
}

TEST(Posterior, NoOpLimit) {
  const auto sched = sched_eta(0.5);
  std::vector<double> z{0.3, -1.2}, x{0.1, 0.9};
  const auto m = posterior_moments(sched, 0.4 - 1e-10, 0.4, z, x);
  EXPECT_NEAR(m.mu[0], z[0], 1e-8);
  EXPECT_NEAR(m.mu[1], z[1], 1e-8);
  EXPECT_NEAR(m.var, 0.0, 1e-9);
  EXPECT_THROW(posterior_moments(sched, 0.1, 0.4, z, std::vector<double>{1.0}), std::invalid_argument);
}

TEST(Posterior, NoiselessLimit) {
  // Tight clamp so sigma_s is tiny; z_t exactly on the data manifold.
  NoiseSchedule sched = sched_eta(1.0);
  sched.logsnr_max = 30.0;
  const double s = 1e-7, t = 0.5, x = 0.8;
  std::vector<double> z{sched.alpha(t) * x}, xs{x};
  const auto m = posterior_moments(sched, s, t, z, xs);
  EXPECT_NEAR(m.mu[0], sched.alpha(s) * x, 1e-9);
}

TEST(Posterior, MonteCarloComposition) {
  const auto sched = sched_eta(1.0);
  const double s = 0.4, t = 0.7, x = 1.0;
  const auto pt = sched.params(t), ps = sched.params(s);
  const auto c = posterior_coefficients(sched, s, t);
  SeededStream rng(4);
  const int n = 100000;
  double sum = 0, sum2 = 0;
  for (int i = 0; i < n; ++i) {
    const double zt = pt.alpha * x + pt.sigma * rng.normal();
    const double zs = c.coef_z * zt + c.coef_x * x + std::sqrt(c.var) * rng.normal();
    sum += zs;
    sum2 += zs * zs;
  }
  const double mean = sum / n, var = sum2 / n - mean * mean;
  EXPECT_NEAR(mean / (ps.alpha * x), 1.0, 0.01);
  EXPECT_NEAR(var / (ps.sigma * ps.sigma), 1.0, 0.01);
}

TEST(SamplerVariance, EndpointsAreExact) {
  const auto sched = sched_eta(0.5);
  SeededStream rng(5);
  for (int i = 0; i < 50; ++i) {
    double s = rng.uniform(), t = rng.uniform();
    if (s > t) std::swap(s, t);
    if (s == t) continue;
    EXPECT_EQ(sampler_variance(sched, s, t, 1.0), transition_params(sched, s, t).var_ts);
    EXPECT_EQ(sampler_variance(sched, s, t, 0.0), posterior_coefficients(sched, s, t).var);
    const double mid = sampler_variance(sched, s, t, 0.1);
    EXPECT_GE(mid, posterior_coefficients(sched, s, t).var * (1 - 1e-12));
    EXPECT_LE(mid, transition_params(sched, s, t).var_ts * (1 + 1e-12));
  }
  EXPECT_THROW(sampler_variance(sched, 0.2, 0.3, 1.5), std::invalid_argument);
  EXPECT_THROW(sampler_variance(sched, 0.2, 0.3, -0.1), std::invalid_argument);
}

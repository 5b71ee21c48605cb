#pragma once

// Variance-preserving noise schedule. Everything is expressed through the
// log signal-to-noise ratio; alpha_t^2 = sigmoid(logsnr), sigma_t^2 = sigmoid(-logsnr).

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "hfd/core/error.hpp"

namespace hfd {

struct VpParams {
  double alpha = 1.0;
  double sigma = 0.0;
};

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline VpParams vp_params(double logsnr) {
  return {std::sqrt(sigmoid(logsnr)), std::sqrt(sigmoid(-logsnr))};
}

// Alpha-cosine log-SNR curve shifted by -2 ln(eta), clamped to [logsnr_min, logsnr_max].
// eta < 1 moves every time toward less noise.
struct NoiseSchedule {
  double eta = 0.5;
  double logsnr_min = -15.0;
  double logsnr_max = 15.0;

  void validate() const {
    if (!(eta > 0.0) || !std::isfinite(eta)) throw std::invalid_argument("NoiseSchedule: eta must be > 0");
    if (!(logsnr_min < logsnr_max)) throw std::invalid_argument("NoiseSchedule: logsnr_min must be < logsnr_max");
  }

  double log_snr(double t) const {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("log_snr: t outside [0,1]");
    // tan(pi/2) evaluates to ~1.6e16 rather than inf; the clamp covers both ends.
    const double raw = -2.0 * (std::log(std::tan(std::numbers::pi * t / 2.0)) + std::log(eta));
    return std::clamp(raw, logsnr_min, logsnr_max);
  }

  VpParams params(double t) const { return vp_params(log_snr(t)); }
  double alpha(double t) const { return params(t).alpha; }
  double sigma(double t) const { return params(t).sigma; }
  double alpha_sq(double t) const { return sigmoid(log_snr(t)); }
  double sigma_sq(double t) const { return sigmoid(-log_snr(t)); }

  friend bool operator==(const NoiseSchedule&, const NoiseSchedule&) = default;
};

inline double log_snr(const NoiseSchedule& sched, double t) { return sched.log_snr(t); }

// Descending grid 1, 1 - 1/T, ..., 1/T.
struct TimeGrid {
  int steps = 0;
  std::vector<double> times;

  double at(int i) const { return times.at(static_cast<std::size_t>(i)); }
  // Time reached after step i; 0 after the last step.
  double next(int i) const { return i + 1 < steps ? times[static_cast<std::size_t>(i) + 1] : 0.0; }
};

inline TimeGrid make_time_grid(int steps) {
  if (steps < 1) throw std::invalid_argument("make_time_grid: T must be >= 1");
  TimeGrid g{steps, std::vector<double>(static_cast<std::size_t>(steps))};
  for (int i = 0; i < steps; ++i) g.times[static_cast<std::size_t>(i)] = static_cast<double>(steps - i) / steps;
  return g;
}

// q(z_t | z_s) = N(alpha_ts z_s, var_ts).
struct Transition {
  double alpha_ts = 1.0;
  double var_ts = 0.0;
};

// var_ts is evaluated as sigma_t^2 (1 - SNR_t/SNR_s), which equals
// sigma_t^2 - alpha_ts^2 sigma_s^2 and is non-negative by construction.
inline Transition transition_params(const NoiseSchedule& sched, double s, double t) {
  if (!(s < t)) throw std::invalid_argument("transition_params: need s < t");
  const double ls = sched.log_snr(s), lt = sched.log_snr(t);
  const VpParams ps = vp_params(ls), pt = vp_params(lt);
  const double var = pt.sigma * pt.sigma * -std::expm1(lt - ls);
  return {pt.alpha / ps.alpha, std::max(0.0, var)};
}

// q(z_s | z_t, x) moments.
struct PosteriorCoefficients {
  double coef_z = 1.0;  // multiplies z_t
  double coef_x = 0.0;  // multiplies x
  double var = 0.0;     // sigma_{t->s}^2
};

inline PosteriorCoefficients posterior_coefficients(const NoiseSchedule& sched, double s, double t) {
  const Transition tr = transition_params(sched, s, t);
  const VpParams ps = sched.params(s), pt = sched.params(t);
  const double sig_s2 = ps.sigma * ps.sigma, sig_t2 = pt.sigma * pt.sigma;
  return {tr.alpha_ts * sig_s2 / sig_t2, ps.alpha * tr.var_ts / sig_t2, tr.var_ts * sig_s2 / sig_t2};
}

struct PosteriorMoments {
  std::vector<double> mu;
  double var = 0.0;
};

inline PosteriorMoments posterior_moments(const NoiseSchedule& sched, double s, double t,
                                          std::span<const double> z_t, std::span<const double> x) {
  if (z_t.size() != x.size()) throw std::invalid_argument("posterior_moments: shape mismatch");
  const PosteriorCoefficients c = posterior_coefficients(sched, s, t);
  PosteriorMoments m{std::vector<double>(z_t.size()), c.var};
  for (std::size_t i = 0; i < z_t.size(); ++i) m.mu[i] = c.coef_z * z_t[i] + c.coef_x * x[i];
  return m;
}

// Ancestral-sampler variance, log-space interpolation between the transition
// variance (gamma = 1) and the single-example posterior variance (gamma = 0).
// pow(a, 1) and pow(b, 0) are exact, so both endpoints are reproduced bit for bit.
inline double sampler_variance(const NoiseSchedule& sched, double s, double t, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("sampler_variance: gamma outside [0,1]");
  const double var_ts = transition_params(sched, s, t).var_ts;
  const double var_post = posterior_coefficients(sched, s, t).var;
  return std::pow(var_ts, gamma) * std::pow(var_post, 1.0 - gamma);
}

}  // namespace hfd

#pragma once

// Forward corruption, x/eps/v prediction algebra, the eps-MSE loss with
// constant weighting, and the ancestral (DDPM) and deterministic (DDIM)
// reverse samplers.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include "hfd/core/image.hpp"
#include "hfd/core/random.hpp"
#include "hfd/denoiser.hpp"
#include "hfd/schedule.hpp"

namespace hfd {

// Substream keys shared by every sampler entry point. The tiler uses the same
// keys, which is what makes a single-window tiled run identical to sample().
namespace stream_keys {
inline constexpr std::uint64_t kInitial = 1;
inline constexpr std::uint64_t kStepNoise = 2;
inline constexpr std::uint64_t kMaskNoise = 3;
inline constexpr std::uint64_t kLoss = 4;
}  // namespace stream_keys

enum class PredictionKind { x, eps, v };

inline PredictionKind parse_prediction_kind(std::string_view s) {
  if (s == "x") return PredictionKind::x;
  if (s == "eps") return PredictionKind::eps;
  if (s == "v") return PredictionKind::v;
  throw std::invalid_argument("unknown prediction kind: " + std::string(s));
}

struct DiffusionState {
  ImageBuffer z;
  double t = 1.0;
};

struct Prediction {
  PredictionKind kind = PredictionKind::v;
  ImageBuffer value;
};

namespace detail {

// Recover (x, eps) from a prediction of any kind at a state with (alpha, sigma).
inline void to_x_eps(PredictionKind kind, double value, double z, double a, double s, double& x, double& eps) {
  switch (kind) {
    case PredictionKind::v:
      x = a * z - s * value;
      eps = s * z + a * value;
      return;
    case PredictionKind::x:
      x = value;
      eps = (z - a * value) / s;
      return;
    case PredictionKind::eps:
      eps = value;
      x = (z - s * value) / a;
      return;
  }
  throw std::invalid_argument("unknown prediction kind");
}

}  // namespace detail

inline ImageBuffer convert_prediction_values(PredictionKind from, const ImageBuffer& value, const ImageBuffer& z,
                                             VpParams p, PredictionKind to) {
  require_same_shape(value, z, "convert_prediction");
  if (from == to) return value;
  ImageBuffer out(z.height, z.width, z.channels);
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double zi = z.data[i], vi = value.data[i];
    // Direct inverses keep the v <-> eps and v <-> x round trips to a couple of ulps.
    if (from == PredictionKind::eps && to == PredictionKind::v) {
      out.data[i] = (vi - p.sigma * zi) / p.alpha;
      continue;
    }
    if (from == PredictionKind::x && to == PredictionKind::v) {
      out.data[i] = (p.alpha * zi - vi) / p.sigma;
      continue;
    }
    double x = 0, eps = 0;
    detail::to_x_eps(from, vi, zi, p.alpha, p.sigma, x, eps);
    switch (to) {
      case PredictionKind::x: out.data[i] = x; break;
      case PredictionKind::eps: out.data[i] = eps; break;
      case PredictionKind::v: out.data[i] = p.alpha * eps - p.sigma * x; break;
    }
  }
  return out;
}

inline Prediction convert_prediction(const Prediction& pred, const DiffusionState& state, const NoiseSchedule& sched,
                                     PredictionKind target) {
  return {target, convert_prediction_values(pred.kind, pred.value, state.z, sched.params(state.t), target)};
}

// z_t = alpha_t x + sigma_t eps, eps drawn from the stream.
inline DiffusionState forward_sample(const ImageBuffer& x, double t, const NoiseSchedule& sched, SeededStream& stream) {
  const VpParams p = sched.params(t);
  DiffusionState st{ImageBuffer(x.height, x.width, x.channels), t};
  for (std::size_t i = 0; i < x.size(); ++i) st.z.data[i] = p.alpha * x.data[i] + p.sigma * stream.normal();
  return st;
}

// One draw of the training corruption: t ~ U(0,1), eps ~ N(0, I), z_t.
struct DiffusionExample {
  double t = 0.0;
  VpParams p;
  ImageBuffer eps;
  ImageBuffer z;
};

inline DiffusionExample draw_diffusion_example(const ImageBuffer& x, const NoiseSchedule& sched, SeededStream stream) {
  DiffusionExample ex;
  ex.t = stream.uniform();
  ex.p = sched.params(ex.t);
  ex.eps = ImageBuffer(x.height, x.width, x.channels);
  stream.fill_normal(ex.eps.data);
  ex.z = ImageBuffer(x.height, x.width, x.channels);
  for (std::size_t i = 0; i < x.size(); ++i) ex.z.data[i] = ex.p.alpha * x.data[i] + ex.p.sigma * ex.eps.data[i];
  return ex;
}

// ||eps - eps_hat||^2 with eps_hat = sigma z + alpha v_hat.
inline double diffusion_example_loss(const DiffusionExample& ex, const ImageBuffer& v_hat) {
  require_same_shape(v_hat, ex.z, "diffusion loss");
  double acc = 0.0;
  for (std::size_t i = 0; i < v_hat.size(); ++i) {
    if (!std::isfinite(v_hat.data[i])) throw NumericalError("diffusion loss: non-finite model output");
    const double e_hat = ex.p.sigma * ex.z.data[i] + ex.p.alpha * v_hat.data[i];
    const double d = ex.eps.data[i] - e_hat;
    acc += d * d;
  }
  return acc;
}

// Batch mean of ||eps_t - eps_hat_t||^2 with w(t) = 1. Example i draws its
// time and noise from stream.substream({kLoss, i}).
template <Denoiser D>
double diffusion_loss(std::span<const ImageBuffer> x_batch, std::span<const ImageBuffer> context_batch,
                      const D& denoiser, const NoiseSchedule& sched, const SeededStream& stream) {
  if (x_batch.empty()) throw std::invalid_argument("diffusion_loss: empty batch");
  if (!context_batch.empty() && context_batch.size() != x_batch.size())
    throw std::invalid_argument("diffusion_loss: context batch size mismatch");
  const ImageBuffer none;
  double total = 0.0;
  for (std::size_t i = 0; i < x_batch.size(); ++i) {
    const ImageBuffer& ctx = context_batch.empty() ? none : context_batch[i];
    if (!ctx.empty() && (ctx.height != x_batch[i].height || ctx.width != x_batch[i].width))
      throw std::invalid_argument("diffusion_loss: context shape does not match x");
    const DiffusionExample ex = draw_diffusion_example(x_batch[i], sched, stream.substream({stream_keys::kLoss, i}));
    total += diffusion_example_loss(ex, denoiser.predict(ex.z, ex.t, ctx));
  }
  return total / static_cast<double>(x_batch.size());
}

namespace detail {
inline void check_step_times(double s, double t) {
  if (!(s < t)) throw std::invalid_argument("sampler step: need s < t");
  if (s < 0.0) throw std::invalid_argument("sampler step: s < 0");
}

template <Denoiser D>
void predict_x_eps(const D& den, const DiffusionState& state, const ImageBuffer& ctx, const NoiseSchedule& sched,
                   ImageBuffer& x_hat, ImageBuffer& eps_hat) {
  const ImageBuffer v = den.predict(state.z, state.t, ctx);
  require_same_shape(v, state.z, "denoiser output");
  const VpParams p = sched.params(state.t);
  x_hat = ImageBuffer(v.height, v.width, v.channels);
  eps_hat = ImageBuffer(v.height, v.width, v.channels);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v.data[i])) throw NumericalError("denoiser produced a non-finite value");
    x_hat.data[i] = p.alpha * state.z.data[i] - p.sigma * v.data[i];
    eps_hat.data[i] = p.sigma * state.z.data[i] + p.alpha * v.data[i];
  }
}
}  // namespace detail

// Ancestral step t -> s. The mean is the single-example posterior mean with
// x replaced by the model's x_hat; the variance is sampler_variance(gamma).
// Stepping to s = 0 returns x_hat and draws nothing.
template <Denoiser D>
DiffusionState ddpm_step(const DiffusionState& state, double s, const D& den, const ImageBuffer& ctx, double gamma,
                         const NoiseSchedule& sched, SeededStream& stream) {
  detail::check_step_times(s, state.t);
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("ddpm_step: gamma outside [0,1]");
  ImageBuffer x_hat, eps_hat;
  detail::predict_x_eps(den, state, ctx, sched, x_hat, eps_hat);
  if (s == 0.0) return {std::move(x_hat), 0.0};
  const PosteriorCoefficients c = posterior_coefficients(sched, s, state.t);
  const double std_dev = std::sqrt(sampler_variance(sched, s, state.t, gamma));
  DiffusionState out{ImageBuffer(x_hat.height, x_hat.width, x_hat.channels), s};
  for (std::size_t i = 0; i < x_hat.size(); ++i)
    out.z.data[i] = c.coef_z * state.z.data[i] + c.coef_x * x_hat.data[i] + std_dev * stream.normal();
  return out;
}

// Deterministic step z_s = alpha_s x_hat + sigma_s eps_hat; consumes no randomness.
template <Denoiser D>
DiffusionState ddim_step(const DiffusionState& state, double s, const D& den, const ImageBuffer& ctx,
                         const NoiseSchedule& sched) {
  detail::check_step_times(s, state.t);
  ImageBuffer x_hat, eps_hat;
  detail::predict_x_eps(den, state, ctx, sched, x_hat, eps_hat);
  if (s == 0.0) return {std::move(x_hat), 0.0};
  const VpParams ps = sched.params(s);
  DiffusionState out{ImageBuffer(x_hat.height, x_hat.width, x_hat.channels), s};
  for (std::size_t i = 0; i < x_hat.size(); ++i) out.z.data[i] = ps.alpha * x_hat.data[i] + ps.sigma * eps_hat.data[i];
  return out;
}

enum class SamplerMethod { ddpm, ddim };

inline SamplerMethod parse_sampler_method(std::string_view s) {
  if (s == "ddpm") return SamplerMethod::ddpm;
  if (s == "ddim") return SamplerMethod::ddim;
  throw std::invalid_argument("unknown diffusion sampler: " + std::string(s));
}

struct DiffusionSamplerConfig {
  SamplerMethod method = SamplerMethod::ddpm;
  int steps = 250;
  double gamma = 0.1;
  bool clamp_output = true;
};

struct SamplerStats {
  std::uint64_t noise_vectors = 0;  // step-noise vectors drawn after initialization
  std::uint64_t model_calls = 0;
};

// Runs grid steps [first, last) on z in place. Before every model call,
// `condition(z, t, step)` may overwrite observed entries of z (masked
// conditioning); pass a no-op for plain sampling. Step i draws its noise from
// noise_root.substream(i).
template <Denoiser D, class Condition>
void run_diffusion_steps(DiffusionState& state, int first, int last, const TimeGrid& grid, const D& den,
                         const ImageBuffer& ctx, const DiffusionSamplerConfig& cfg, const NoiseSchedule& sched,
                         const SeededStream& noise_root, Condition&& condition, SamplerStats* stats = nullptr) {
  for (int i = first; i < last; ++i) {
    const double t = grid.at(i), s = grid.next(i);
    state.t = t;
    condition(state.z, t, i);
    if (cfg.method == SamplerMethod::ddim) {
      state = ddim_step(state, s, den, ctx, sched);
    } else {
      SeededStream noise = noise_root.substream(static_cast<std::uint64_t>(i));
      state = ddpm_step(state, s, den, ctx, cfg.gamma, sched, noise);
      if (stats && s > 0.0) ++stats->noise_vectors;
    }
    if (stats) ++stats->model_calls;
  }
}

// Generative sampling from z_1 ~ N(0, I) of the given shape down to t = 0.
template <Denoiser D>
ImageBuffer sample(const D& den, const ImageBuffer& ctx, int height, int width, int channels,
                   const DiffusionSamplerConfig& cfg, const NoiseSchedule& sched, const SeededStream& stream,
                   SamplerStats* stats = nullptr) {
  const TimeGrid grid = make_time_grid(cfg.steps);
  DiffusionState state{ImageBuffer(height, width, channels), 1.0};
  SeededStream init = stream.substream(stream_keys::kInitial);
  init.fill_normal(state.z.data);
  const SeededStream noise_root = stream.substream({stream_keys::kStepNoise, 0});
  run_diffusion_steps(state, 0, grid.steps, grid, den, ctx, cfg, sched, noise_root,
                      [](ImageBuffer&, double, int) {}, stats);
  if (cfg.clamp_output) clamp01(state.z);
  return std::move(state.z);
}

// Context-shaped convenience overload: the sample takes the context's spatial
// size and `channels` channels.
template <Denoiser D>
ImageBuffer sample(const D& den, const ImageBuffer& ctx, int channels, const DiffusionSamplerConfig& cfg,
                   const NoiseSchedule& sched, const SeededStream& stream, SamplerStats* stats = nullptr) {
  return sample(den, ctx, ctx.height, ctx.width, channels, cfg, sched, stream, stats);
}

}  // namespace hfd

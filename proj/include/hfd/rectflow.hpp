#pragma once

// Paired rectified flow from the stage-one reconstruction to the image:
// straight interpolants y_t = t x + (1 - t) z, velocity target x - z, and
// forward Euler sampling from t = 0 to t = 1.

#include <cmath>
#include <span>
#include <stdexcept>

#include "hfd/core/image.hpp"
#include "hfd/core/random.hpp"
#include "hfd/denoiser.hpp"
#include "hfd/diffusion.hpp"

namespace hfd {

inline constexpr double kDefaultDequantAmplitude = 1.0 / 255.0;

// img + U(-a/2, a/2) per value.
inline ImageBuffer rf_dequantize(const ImageBuffer& img, double amplitude, SeededStream& stream) {
  if (!(amplitude >= 0.0)) throw std::invalid_argument("rf_dequantize: amplitude must be >= 0");
  ImageBuffer out = img;
  if (amplitude == 0.0) return out;
  for (double& v : out.data) v += amplitude * (stream.uniform() - 0.5);
  return out;
}

inline double rf_time_from_uniform(double u) { return 1.0 - u * u; }

// t = 1 - u^2, u ~ U(0,1); density 1 / (2 sqrt(1 - t)).
inline double rf_time_sample(SeededStream& stream) { return rf_time_from_uniform(stream.uniform()); }

struct FlowPair {
  ImageBuffer x;  // target (dequantized image)
  ImageBuffer z;  // source (dequantized stage-one reconstruction)
  ImageBuffer v;  // x - z
};

inline FlowPair make_flow_pair(const ImageBuffer& x, const ImageBuffer& x_mse, double amplitude, SeededStream& stream) {
  require_same_shape(x, x_mse, "make_flow_pair");
  FlowPair p{rf_dequantize(x, amplitude, stream), rf_dequantize(x_mse, amplitude, stream), {}};
  p.v = p.x;
  for (std::size_t i = 0; i < p.v.size(); ++i) p.v.data[i] -= p.z.data[i];
  return p;
}

inline ImageBuffer flow_interpolant(const FlowPair& pair, double t) {
  ImageBuffer y = pair.x;
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = t * pair.x.data[i] + (1.0 - t) * pair.z.data[i];
  return y;
}

inline double flow_example_loss(const FlowPair& pair, const ImageBuffer& velocity) {
  require_same_shape(velocity, pair.v, "rf loss");
  double acc = 0.0;
  for (std::size_t i = 0; i < velocity.size(); ++i) {
    if (!std::isfinite(velocity.data[i])) throw NumericalError("rf loss: non-finite model output");
    const double d = pair.v.data[i] - velocity.data[i];
    acc += d * d;
  }
  return acc;
}

// Mean over pairs of ||v - f(y_t, t, ctx)||^2 with t = 1 - u^2. Pair i uses
// stream.substream({kLoss, i}). Contexts are optional.
template <VelocityModel M>
double rf_loss(std::span<const FlowPair> pairs, std::span<const ImageBuffer> contexts, const M& model,
               const SeededStream& stream) {
  if (pairs.empty()) throw std::invalid_argument("rf_loss: empty batch");
  if (!contexts.empty() && contexts.size() != pairs.size())
    throw std::invalid_argument("rf_loss: context batch size mismatch");
  const ImageBuffer none;
  double total = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    SeededStream s = stream.substream({stream_keys::kLoss, i});
    const double t = rf_time_sample(s);
    total += flow_example_loss(pairs[i], model.predict(flow_interpolant(pairs[i], t), t, contexts.empty() ? none : contexts[i]));
  }
  return total / static_cast<double>(pairs.size());
}

template <VelocityModel M>
double rf_loss(std::span<const FlowPair> pairs, const M& model, const SeededStream& stream) {
  return rf_loss(pairs, std::span<const ImageBuffer>{}, model, stream);
}

struct FlowSamplerConfig {
  int steps = 8;
  double amplitude = kDefaultDequantAmplitude;
  bool clamp_output = true;
};

// Euler steps [first, last) of a `steps`-step ascending grid, in place.
// `condition(y, t, k)` may overwrite observed entries before each model call.
template <VelocityModel M, class Condition>
void run_flow_steps(ImageBuffer& y, int first, int last, int steps, const M& model, const ImageBuffer& ctx,
                    Condition&& condition, SamplerStats* stats = nullptr) {
  const double h = 1.0 / steps;
  for (int k = first; k < last; ++k) {
    const double t = static_cast<double>(k) / steps;
    condition(y, t, k);
    const ImageBuffer f = model.predict(y, t, ctx);
    require_same_shape(f, y, "velocity model output");
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (!std::isfinite(f.data[i])) throw NumericalError("velocity model produced a non-finite value");
      y.data[i] += h * f.data[i];
    }
    if (stats) ++stats->model_calls;
  }
}

// y_0 = dequantized x_mse, Euler to t = 1. x_mse is also passed as context.
template <VelocityModel M>
ImageBuffer rf_sample(const M& model, const ImageBuffer& x_mse, const ImageBuffer& ctx, const FlowSamplerConfig& cfg,
                      const SeededStream& stream, SamplerStats* stats = nullptr) {
  if (cfg.steps < 1) throw std::invalid_argument("rf_sample: steps must be >= 1");
  SeededStream init = stream.substream(stream_keys::kInitial);
  ImageBuffer y = rf_dequantize(x_mse, cfg.amplitude, init);
  run_flow_steps(y, 0, cfg.steps, cfg.steps, model, ctx, [](ImageBuffer&, double, int) {}, stats);
  if (cfg.clamp_output) clamp01(y);
  return y;
}

template <VelocityModel M>
ImageBuffer rf_sample(const M& model, const ImageBuffer& x_mse, const FlowSamplerConfig& cfg, const SeededStream& stream) {
  return rf_sample(model, x_mse, x_mse, cfg, stream);
}

}  // namespace hfd

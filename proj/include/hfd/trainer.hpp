#pragma once

// Training for TinyCondNet: per-example losses for both objectives with
// exact gradients, Adam with bias correction, linear warmup and half-life
// decay of the learning rate, and an EMA of the parameters for evaluation.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hfd/core/error.hpp"
#include "hfd/core/image.hpp"
#include "hfd/core/random.hpp"
#include "hfd/diffusion.hpp"
#include "hfd/nn/net.hpp"
#include "hfd/rectflow.hpp"

namespace hfd {

enum class LossKind { diffusion, rectflow };

inline LossKind parse_loss_kind(std::string_view s) {
  if (s == "diffusion") return LossKind::diffusion;
  if (s == "rectflow") return LossKind::rectflow;
  throw std::invalid_argument("unknown loss kind: " + std::string(s));
}

inline std::string to_string(LossKind k) { return k == LossKind::diffusion ? "diffusion" : "rectflow"; }

struct TrainConfig {
  LossKind loss = LossKind::diffusion;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adam_eps = 1e-8;
  double warmup = 10000;
  double halflife = 400000;
  double ema_decay = 0.9999;
  double dequant_amplitude = kDefaultDequantAmplitude;  // rectflow only

  void validate() const {
    require(lr >= 0 && std::isfinite(lr), "TrainConfig: lr must be >= 0");
    require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "TrainConfig: betas must be in [0,1)");
    require(adam_eps > 0, "TrainConfig: adam_eps must be > 0");
    require(warmup >= 0 && halflife > 0, "TrainConfig: warmup >= 0 and halflife > 0 required");
    require(ema_decay >= 0 && ema_decay <= 1, "TrainConfig: ema_decay must be in [0,1]");
    require(dequant_amplitude >= 0, "TrainConfig: dequant_amplitude must be >= 0");
  }
};

// base_lr * min(1, step / warmup) * 0.5^(step / halflife)
inline double learning_rate(const TrainConfig& cfg, std::uint64_t step) {
  const double s = static_cast<double>(step);
  const double ramp = cfg.warmup > 0 ? std::min(1.0, s / cfg.warmup) : 1.0;
  return cfg.lr * ramp * std::pow(0.5, s / cfg.halflife);
}

// x is the training target. For diffusion, ctx is the conditioning image
// (may be empty for an unconditional net). For rectflow, ctx is the
// stage-one reconstruction: it is both the flow source and the context,
// unless `source` is set (a context with extra channels).
struct TrainExample {
  ImageBuffer x;
  ImageBuffer ctx;
  ImageBuffer source;
};

// Mean over the batch of the per-example loss. Example i draws from
// stream.substream({kLoss, i}), matching diffusion_loss. When grad is
// non-null the gradient w.r.t. w is accumulated into it.
inline double batch_loss(const nn::TinyCondNet& net, const std::vector<double>& w, std::span<const TrainExample> batch,
                         LossKind kind, const SeededStream& stream, std::vector<double>* grad,
                         double amplitude = kDefaultDequantAmplitude) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  if (w.size() != net.parameter_count()) throw std::invalid_argument("batch_loss: parameter vector size mismatch");
  if (grad && grad->size() != w.size()) throw std::invalid_argument("batch_loss: gradient vector size mismatch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const auto& sched = net.config().sched;
  double total = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    SeededStream sub = stream.substream({stream_keys::kLoss, i});
    const auto& ex = batch[i];
    nn::Tensor input, target, ctx;
    double t = 0, scale = 1;
    if (kind == LossKind::diffusion) {
      const DiffusionExample d = draw_diffusion_example(ex.x, sched, sub);
      t = d.t;
      scale = d.p.alpha;
      input = nn::to_chw(d.z);
      target = nn::to_chw(d.eps);
      // eps - eps_hat = (eps - sigma z) - alpha v_hat
      for (std::size_t k = 0; k < target.size(); ++k) target.v[k] -= d.p.sigma * input.v[k];
      if (!ex.ctx.empty()) ctx = nn::to_chw(ex.ctx);
    } else {
      const FlowPair pair = make_flow_pair(ex.x, ex.source.empty() ? ex.ctx : ex.source, amplitude, sub);
      t = rf_time_sample(sub);
      input = nn::to_chw(flow_interpolant(pair, t));
      target = nn::to_chw(pair.v);
      ctx = nn::to_chw(ex.ctx);
    }
    nn::Var out;
    nn::Var loss;
    if (grad) {
      out = net.forward(input, ctx, t, w.data(), grad->data());
      loss = nn::scaled_sq_error(out, target, scale);
      nn::backward(loss, inv_b);
    } else {
      nn::NoGradGuard ng;
      out = net.forward(input, ctx, t, w.data(), nullptr);
      loss = nn::scaled_sq_error(out, target, scale);
    }
    const double l = loss->value.v[0];
    if (!std::isfinite(l)) throw NumericalError("batch_loss: non-finite loss");
    total += l;
  }
  return total * inv_b;
}

struct TrainState {
  nn::TinyCondNet net;
  TrainConfig cfg;
  std::uint64_t step = 0;
  std::vector<double> adam_m, adam_v, ema;

  TrainState(nn::TinyCondNet net_, TrainConfig cfg_) : net(std::move(net_)), cfg(cfg_) {
    cfg.validate();
    adam_m.assign(net.parameter_count(), 0.0);
    adam_v.assign(net.parameter_count(), 0.0);
    ema = net.params();
  }

  // Parameters used for evaluation.
  const std::vector<double>& eval_params() const { return ema; }
};

// Adam with bias correction at learning_rate(step), then the EMA update,
// then step += 1.
inline void apply_gradient(TrainState& st, const std::vector<double>& g) {
  auto& p = st.net.params();
  if (g.size() != p.size()) throw std::invalid_argument("apply_gradient: size mismatch");
  for (double v : g)
    if (!std::isfinite(v)) throw NumericalError("train_step: non-finite gradient");
  const double lr = learning_rate(st.cfg, st.step);
  const double n = static_cast<double>(st.step + 1);
  const double c1 = 1.0 - std::pow(st.cfg.beta1, n), c2 = 1.0 - std::pow(st.cfg.beta2, n);
  const double b1 = st.cfg.beta1, b2 = st.cfg.beta2, d = st.cfg.ema_decay;
  for (std::size_t i = 0; i < p.size(); ++i) {
    st.adam_m[i] = b1 * st.adam_m[i] + (1.0 - b1) * g[i];
    st.adam_v[i] = b2 * st.adam_v[i] + (1.0 - b2) * g[i] * g[i];
    const double mh = st.adam_m[i] / c1, vh = st.adam_v[i] / c2;
    p[i] -= lr * mh / (std::sqrt(vh) + st.cfg.adam_eps);
    st.ema[i] = d * st.ema[i] + (1.0 - d) * p[i];
  }
  ++st.step;
}

// One training update on the batch. Returns the pre-update batch loss.
inline double train_step(TrainState& st, std::span<const TrainExample> batch, const SeededStream& stream) {
  std::vector<double> g(st.net.parameter_count(), 0.0);
  const double loss = batch_loss(st.net, st.net.params(), batch, st.cfg.loss, stream, &g, st.cfg.dequant_amplitude);
  apply_gradient(st, g);
  return loss;
}

// A net evaluated with a fixed parameter vector (typically the EMA).
class BoundNet {
 public:
  BoundNet(const nn::TinyCondNet& net, const std::vector<double>& w) : net_(&net), w_(&w) {}
  ImageBuffer predict(const ImageBuffer& z, double t, const ImageBuffer& ctx) const {
    return net_->predict_with(*w_, z, t, ctx);
  }

 private:
  const nn::TinyCondNet* net_;
  const std::vector<double>* w_;
};

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t worst_index = 0;
  double analytic = 0, numeric = 0;
};

// Central differences on every parameter, with the two-point (order 2) or
// four-point (order 4) stencil. Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheckResult gradient_check(const nn::TinyCondNet& net, std::span<const TrainExample> batch, LossKind kind,
                                      const SeededStream& stream, double h = 1e-3, int order = 4,
                                      double floor = 1e-6) {
  require(order == 2 || order == 4, "gradient_check: order must be 2 or 4");
  std::vector<double> w = net.params();
  std::vector<double> g(w.size(), 0.0);
  batch_loss(net, w, batch, kind, stream, &g);
  auto f = [&](std::size_t i, double d) {
    const double keep = w[i];
    w[i] = keep + d;
    const double v = batch_loss(net, w, batch, kind, stream, nullptr);
    w[i] = keep;
    return v;
  };
  GradCheckResult r;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double d1 = f(i, h) - f(i, -h);
    const double num = order == 2 ? d1 / (2 * h) : (8 * d1 - (f(i, 2 * h) - f(i, -2 * h))) / (12 * h);
    const double rel = std::abs(g[i] - num) / std::max({std::abs(g[i]), std::abs(num), floor});
    if (rel > r.max_rel_error) r = {rel, i, g[i], num};
  }
  return r;
}

}  // namespace hfd

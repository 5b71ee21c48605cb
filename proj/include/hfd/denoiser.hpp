#pragma once

#include <concepts>
#include <functional>
#include <utility>
#include <vector>

#include "hfd/core/image.hpp"
#include "hfd/schedule.hpp"

namespace hfd {

// A conditional field predictor f(z, t, context). Diffusion models return the
// v-prediction, flow models return a velocity; both share this shape contract:
// output has the shape of z. An empty context means "unconditional".
template <class M>
concept FieldModel = requires(const M& m, const ImageBuffer& z, double t, const ImageBuffer& ctx) {
  { m.predict(z, t, ctx) } -> std::convertible_to<ImageBuffer>;
};

template <class M>
concept Denoiser = FieldModel<M>;

template <class M>
concept VelocityModel = FieldModel<M>;

// Adapts any callable to FieldModel; used by tests and the toy sampler.
class FunctionModel {
 public:
  using Fn = std::function<ImageBuffer(const ImageBuffer&, double, const ImageBuffer&)>;
  explicit FunctionModel(Fn fn) : fn_(std::move(fn)) {}
  ImageBuffer predict(const ImageBuffer& z, double t, const ImageBuffer& ctx) const { return fn_(z, t, ctx); }

 private:
  Fn fn_;
};

// Exact v-prediction for data x ~ N(mean0, diag(var0)). The posterior mean is
//   E[x | z_t] = (alpha var0 z + sigma^2 mean0) / (alpha^2 var0 + sigma^2)
// per coordinate. var0 = 0 gives a Dirac at mean0. Length-1 mean/var vectors
// broadcast; with mean_from_context the context buffer supplies mean0.
class GaussianOracleDenoiser {
 public:
  GaussianOracleDenoiser(NoiseSchedule sched, std::vector<double> mean0, std::vector<double> var0,
                         bool mean_from_context = false)
      : sched_(sched), mean0_(std::move(mean0)), var0_(std::move(var0)), mean_from_context_(mean_from_context) {
    require(!var0_.empty(), "GaussianOracleDenoiser: var0 is empty");
    require(mean_from_context_ || !mean0_.empty(), "GaussianOracleDenoiser: mean0 is empty");
    for (double v : var0_) require(v >= 0.0 && std::isfinite(v), "GaussianOracleDenoiser: var0 must be >= 0");
  }

  static GaussianOracleDenoiser scalar(NoiseSchedule sched, double mean0, double var0) {
    return GaussianOracleDenoiser(sched, {mean0}, {var0});
  }

  const NoiseSchedule& schedule() const { return sched_; }

  double mean_at(std::size_t i, const ImageBuffer& ctx) const {
    if (mean_from_context_) return ctx.data[i];
    return mean0_.size() == 1 ? mean0_[0] : mean0_[i];
  }
  double var_at(std::size_t i) const { return var0_.size() == 1 ? var0_[0] : var0_[i]; }

  ImageBuffer posterior_mean(const ImageBuffer& z, double t, const ImageBuffer& ctx) const {
    check(z, ctx);
    const VpParams p = sched_.params(t);
    const double s2 = p.sigma * p.sigma;
    ImageBuffer x(z.height, z.width, z.channels);
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double v0 = var_at(i);
      x.data[i] = (p.alpha * v0 * z.data[i] + s2 * mean_at(i, ctx)) / (p.alpha * p.alpha * v0 + s2);
    }
    return x;
  }

  ImageBuffer predict(const ImageBuffer& z, double t, const ImageBuffer& ctx) const {
    const VpParams p = sched_.params(t);
    if (!(p.sigma > 0.0)) throw std::domain_error("GaussianOracleDenoiser: sigma_t = 0");
    ImageBuffer v = posterior_mean(z, t, ctx);
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double xh = v.data[i];
      const double eh = (z.data[i] - p.alpha * xh) / p.sigma;
      v.data[i] = p.alpha * eh - p.sigma * xh;
    }
    return v;
  }

 private:
  void check(const ImageBuffer& z, const ImageBuffer& ctx) const {
    const auto n = z.size();
    if (mean_from_context_) {
      if (ctx.size() != n) throw std::invalid_argument("GaussianOracleDenoiser: context shape mismatch");
    } else if (mean0_.size() != 1 && mean0_.size() != n) {
      throw std::invalid_argument("GaussianOracleDenoiser: mean0 size mismatch");
    }
    if (var0_.size() != 1 && var0_.size() != n) throw std::invalid_argument("GaussianOracleDenoiser: var0 size mismatch");
  }

  NoiseSchedule sched_;
  std::vector<double> mean0_;
  std::vector<double> var0_;
  bool mean_from_context_ = false;
};

}  // namespace hfd

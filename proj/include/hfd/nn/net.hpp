#pragma once

// TinyCondNet: a small conditional U-Net. Levels of residual blocks with
// average-pool downsampling, self-attention only at the lowest level, and a
// mirrored decoder with additive skips. z and the context are concatenated
// along channels before the first conv. Time enters as a sinusoidal
// embedding of log-SNR(t) (diffusion) or of 30 t - 15 (flow), passed through
// an MLP and added as a per-channel bias in every residual block.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hfd/core/error.hpp"
#include "hfd/core/image.hpp"
#include "hfd/core/random.hpp"
#include "hfd/nn/autograd.hpp"
#include "hfd/schedule.hpp"

namespace hfd::nn {

enum class TimeInput { log_snr, linear };

struct NetConfig {
  int in_channels = 3;   // channels of z
  int ctx_channels = 3;  // 0 for unconditional
  int out_channels = 3;
  std::vector<int> channels{32, 64, 128};
  std::vector<int> blocks{2, 2, 2};
  int emb_dim = 64;
  bool attention = true;
  bool zero_init_output = true;
  TimeInput time_input = TimeInput::log_snr;
  NoiseSchedule sched{};
  std::uint64_t init_seed = 0;

  int levels() const { return static_cast<int>(channels.size()); }
  int downsample_factor() const { return 1 << (levels() - 1); }

  void validate() const {
    require(in_channels > 0 && out_channels > 0 && ctx_channels >= 0, "NetConfig: bad channel counts");
    require(!channels.empty() && channels.size() == blocks.size(), "NetConfig: channels and blocks must have equal length");
    for (int c : channels) require(c > 0, "NetConfig: channel widths must be positive");
    for (int b : blocks) require(b > 0, "NetConfig: block counts must be positive");
    require(emb_dim >= 2 && emb_dim % 2 == 0, "NetConfig: emb_dim must be even and >= 2");
    sched.validate();
  }
};

inline int norm_groups(int c) {
  for (int g = std::min(8, c); g > 1; --g)
    if (c % g == 0) return g;
  return 1;
}

// Sinusoidal features of a scalar s: sin/cos at geometric frequencies in [0.01, 10].
inline Tensor sinusoidal_embedding(double s, int dim) {
  Tensor e(dim, 1, 1);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double f = half == 1 ? 1.0 : 0.01 * std::pow(1000.0, static_cast<double>(i) / (half - 1));
    e.v[i] = std::sin(s * f);
    e.v[half + i] = std::cos(s * f);
  }
  return e;
}

class TinyCondNet {
 public:
  explicit TinyCondNet(NetConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
    init();
  }

  const NetConfig& config() const { return cfg_; }
  std::size_t parameter_count() const { return params_.size(); }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  double time_feature(double t) const {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("TinyCondNet: t outside [0,1]");
    return cfg_.time_input == TimeInput::log_snr ? cfg_.sched.log_snr(t) : 30.0 * t - 15.0;
  }

  void check_input(const Tensor& z, const Tensor& ctx) const {
    if (z.c != cfg_.in_channels)
      throw std::invalid_argument("TinyCondNet: expected " + std::to_string(cfg_.in_channels) + " state channels");
    const int f = cfg_.downsample_factor();
    if (z.h % f || z.w % f || z.h == 0 || z.w == 0)
      throw std::invalid_argument("TinyCondNet: spatial size " + std::to_string(z.h) + "x" + std::to_string(z.w) +
                                  " not divisible by " + std::to_string(f));
    if (cfg_.ctx_channels > 0 && (ctx.c != cfg_.ctx_channels || ctx.h != z.h || ctx.w != z.w))
      throw std::invalid_argument("TinyCondNet: context shape mismatch");
  }

  // Records a graph when grad mode is on and `grad` is non-null.
  Var forward(const Tensor& z, const Tensor& ctx, double t, const double* w, double* grad) const {
    check_input(z, ctx);
    const ParamRef P{w, grad};
    Var h = leaf(z);
    if (cfg_.ctx_channels > 0) h = concat(h, leaf(ctx));
    h = conv2d(P, in_conv_, h);

    Var temb = leaf(sinusoidal_embedding(time_feature(t), cfg_.emb_dim));
    temb = conv2d(P, emb2_, silu(conv2d(P, emb1_, temb)));
    const Var temb_act = silu(temb);

    std::vector<Var> skips;
    std::size_t rb = 0;
    for (int l = 0; l < cfg_.levels(); ++l) {
      for (int b = 0; b < cfg_.blocks[l]; ++b) h = res_block(P, res_[rb++], h, temb_act);
      if (l + 1 < cfg_.levels()) {
        skips.push_back(h);
        h = avg_pool2(h);
      }
    }
    if (cfg_.attention) {
      Var a = conv2d(P, attn_qkv_, group_norm(P, attn_norm_, h));
      h = add(h, conv2d(P, attn_proj_, attention_core(a)));
    }
    for (int l = cfg_.levels() - 2; l >= 0; --l) {
      h = conv2d(P, up_proj_[l], upsample2(h));
      h = add(h, skips[l]);
      h = res_block(P, res_[rb++], h, temb_act);
    }
    return conv2d(P, out_conv_, silu(group_norm(P, out_norm_, h)));
  }

  Tensor forward_eval(const Tensor& z, const Tensor& ctx, double t, const std::vector<double>& w) const {
    NoGradGuard ng;
    Var out = forward(z, ctx, t, w.data(), nullptr);
    for (double v : out->value.v)
      if (!std::isfinite(v)) throw NumericalError("TinyCondNet: non-finite activation");
    return std::move(out->value);
  }

  // Field-model interface on HWC images with the net's own parameters.
  ImageBuffer predict(const ImageBuffer& z, double t, const ImageBuffer& ctx) const {
    return predict_with(params_, z, t, ctx);
  }

  ImageBuffer predict_with(const std::vector<double>& w, const ImageBuffer& z, double t, const ImageBuffer& ctx) const {
    return from_chw(forward_eval(to_chw(z), cfg_.ctx_channels > 0 ? to_chw(ctx) : Tensor{}, t, w));
  }

  struct Layout {
    std::string name;
    std::size_t offset, size;
  };
  const std::vector<Layout>& layout() const { return layout_; }

 private:
  struct ResSpec {
    NormSpec n1;
    ConvSpec c1, emb;
    NormSpec n2;
    ConvSpec c2;
    bool has_skip = false;
    ConvSpec skip;
  };

  Var res_block(ParamRef P, const ResSpec& r, const Var& x, const Var& temb_act) const {
    Var h = conv2d(P, r.c1, silu(group_norm(P, r.n1, x)));
    h = add_channel_bias(h, conv2d(P, r.emb, temb_act));
    h = conv2d(P, r.c2, silu(group_norm(P, r.n2, h)));
    return add(r.has_skip ? conv2d(P, r.skip, x) : x, h);
  }

  ConvSpec conv(const std::string& name, int cin, int cout, int k) {
    ConvSpec s{cin, cout, k, 0, 0};
    s.w = reserve(name + ".w", static_cast<std::size_t>(cout) * cin * k * k);
    s.b = reserve(name + ".b", cout);
    convs_.push_back({name, s});
    return s;
  }

  NormSpec norm(const std::string& name, int c) {
    NormSpec s{c, norm_groups(c), 0, 0};
    s.gamma = reserve(name + ".gamma", c);
    s.beta = reserve(name + ".beta", c);
    norms_.push_back(s);
    return s;
  }

  ResSpec res(const std::string& name, int cin, int cout) {
    ResSpec r;
    r.n1 = norm(name + ".norm1", cin);
    r.c1 = conv(name + ".conv1", cin, cout, 3);
    r.emb = conv(name + ".emb", cfg_.emb_dim, cout, 1);
    r.n2 = norm(name + ".norm2", cout);
    r.c2 = conv(name + ".conv2", cout, cout, 3);
    if (cin != cout) {
      r.has_skip = true;
      r.skip = conv(name + ".skip", cin, cout, 1);
    }
    return r;
  }

  std::size_t reserve(const std::string& name, std::size_t n) {
    const std::size_t off = total_;
    layout_.push_back({name, off, n});
    total_ += n;
    return off;
  }

  void build() {
    const auto& ch = cfg_.channels;
    in_conv_ = conv("in", cfg_.in_channels + cfg_.ctx_channels, ch[0], 3);
    emb1_ = conv("temb.fc1", cfg_.emb_dim, cfg_.emb_dim, 1);
    emb2_ = conv("temb.fc2", cfg_.emb_dim, cfg_.emb_dim, 1);
    int c = ch[0];
    for (int l = 0; l < cfg_.levels(); ++l)
      for (int b = 0; b < cfg_.blocks[l]; ++b) {
        res_.push_back(res("down" + std::to_string(l) + "." + std::to_string(b), c, ch[l]));
        c = ch[l];
      }
    if (cfg_.attention) {
      attn_norm_ = norm("attn.norm", c);
      attn_qkv_ = conv("attn.qkv", c, 3 * c, 1);
      attn_proj_ = conv("attn.proj", c, c, 1);
    }
    up_proj_.resize(cfg_.levels() > 1 ? cfg_.levels() - 1 : 0);
    for (int l = cfg_.levels() - 2; l >= 0; --l) {
      up_proj_[l] = conv("up" + std::to_string(l) + ".proj", c, ch[l], 1);
      res_.push_back(res("up" + std::to_string(l) + ".block", ch[l], ch[l]));
      c = ch[l];
    }
    out_norm_ = norm("out.norm", c);
    out_conv_ = conv("out.conv", c, cfg_.out_channels, 3);
    params_.assign(total_, 0.0);
  }

  void init() {
    SeededStream s(cfg_.init_seed);
    for (const auto& [name, spec] : convs_) {
      const double fan_in = static_cast<double>(spec.cin) * spec.k * spec.k;
      double gain = 1.0 / std::sqrt(fan_in);
      if (name.ends_with(".conv2") || name == "attn.proj") gain *= 0.5;
      if (name == "out.conv" && cfg_.zero_init_output) gain = 0.0;
      SeededStream ls = s.substream(fnv1a64(name));
      const std::size_t n = static_cast<std::size_t>(spec.cout) * spec.cin * spec.k * spec.k;
      for (std::size_t i = 0; i < n; ++i) params_[spec.w + i] = gain * ls.normal();
    }
    for (const auto& nm : norms_)
      for (int i = 0; i < nm.c; ++i) params_[nm.gamma + i] = 1.0;
  }

  NetConfig cfg_;
  std::vector<double> params_;
  std::vector<Layout> layout_;
  std::size_t total_ = 0;
  std::vector<std::pair<std::string, ConvSpec>> convs_;
  std::vector<NormSpec> norms_;
  ConvSpec in_conv_, emb1_, emb2_, attn_qkv_, attn_proj_, out_conv_;
  NormSpec attn_norm_, out_norm_;
  std::vector<ResSpec> res_;
  std::vector<ConvSpec> up_proj_;
};

}  // namespace hfd::nn

#pragma once

// The pieces the command-line tool wires together: a validated run config,
// codec-generated training pairs, the training loop and stage-two refinement.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "hfd/checkpoint.hpp"
#include "hfd/codec/codec.hpp"
#include "hfd/core/error.hpp"
#include "hfd/core/image.hpp"
#include "hfd/core/image_io.hpp"
#include "hfd/core/kv.hpp"
#include "hfd/core/patch.hpp"
#include "hfd/core/random.hpp"
#include "hfd/diffusion.hpp"
#include "hfd/eval.hpp"
#include "hfd/rectflow.hpp"
#include "hfd/tiler.hpp"
#include "hfd/trainer.hpp"

namespace hfd {

// Bad flags, bad config keys or values. The CLI maps it to exit code 1.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  std::uint64_t seed = 0;
  codec::CodecConfig codec{};
  NoiseSchedule sched{};
  std::string method = "ddpm";  // ddpm | ddim | rectflow
  int steps = 0;                // 0: 250 for diffusion, 8 for rectflow
  double gamma = 0.1;
  int stages = 6;
  int threads = 1;
  double amplitude = kDefaultDequantAmplitude;
  bool hfd_plus = false;

  // training, desk scale
  int train_steps = 1000;
  int batch = 4;
  int crop = 128;
  int border = 16;
  int log_every = 10;
  double lr = 1e-3;
  double warmup = 100;
  double halflife = 1e5;
  double ema_decay = 0.999;
  std::vector<int> channels{16, 32, 64, 64};
  std::vector<int> blocks{1, 1, 1, 1};
  int emb_dim = 32;
  bool attention = false;

  std::string checkpoint;

  bool is_flow() const { return method == "rectflow"; }
  int sampler_steps() const { return steps > 0 ? steps : (is_flow() ? 8 : 250); }
  LossKind loss() const { return is_flow() ? LossKind::rectflow : LossKind::diffusion; }

  void validate() const {
    auto check = [](bool ok, const std::string& what) {
      if (!ok) throw UsageError("config: " + what);
    };
    check(method == "ddpm" || method == "ddim" || method == "rectflow", "method must be ddpm, ddim or rectflow");
    check(steps >= 0, "steps must be >= 0");
    check(gamma >= 0 && gamma <= 1, "gamma must be in [0,1]");
    check(stages >= 1, "stages must be >= 1");
    check(threads >= 1, "threads must be >= 1");
    check(amplitude >= 0, "amplitude must be >= 0");
    check(train_steps >= 0 && batch >= 1 && log_every >= 1, "train_steps >= 0, batch >= 1, log_every >= 1");
    check(crop >= 8 && border >= 0, "crop >= 8 and border >= 0");
    try {
      codec.validate();
      sched.validate();
      net_config(3).validate();
      train_config().validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(std::string("config: ") + e.what());
    }
    check(crop % net_config(3).downsample_factor() == 0, "crop must be divisible by the net downsample factor");
  }

  nn::NetConfig net_config(int image_channels) const {
    nn::NetConfig n;
    n.in_channels = n.out_channels = image_channels;
    n.ctx_channels = image_channels + (hfd_plus ? 1 : 0);
    n.channels = channels;
    n.blocks = blocks;
    n.emb_dim = emb_dim;
    n.attention = attention;
    n.sched = sched;
    n.init_seed = seed;
    return n;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.loss = loss();
    t.lr = lr;
    t.warmup = warmup;
    t.halflife = halflife;
    t.ema_decay = ema_decay;
    t.dequant_amplitude = amplitude;
    return t;
  }
};

inline const std::set<std::string>& run_config_keys() {
  static const std::set<std::string> keys{
      "seed",   "downsample", "delta",     "eta",      "logsnr_min", "logsnr_max", "method",   "steps",
      "gamma",  "stages",     "threads",   "amplitude", "hfd_plus",  "train_steps", "batch",   "crop",
      "border", "log_every",  "lr",        "warmup",   "halflife",   "ema_decay",  "channels", "blocks",
      "emb_dim", "attention", "checkpoint"};
  return keys;
}

// Applies key=value pairs on top of `cfg`. Unknown keys and malformed values
// are usage errors. Does not validate.
inline void apply_config(RunConfig& cfg, const KeyValues& kv, const std::string& source = "config") {
  try {
    kv.require_known(run_config_keys(), source);
    auto get = [&](const char* k, auto& field) {
      if (!kv.has(k)) return;
      using T = std::decay_t<decltype(field)>;
      if constexpr (std::is_same_v<T, std::string>) field = kv.str(k);
      else if constexpr (std::is_same_v<T, bool>) field = kv.flag(k);
      else if constexpr (std::is_same_v<T, double>) field = kv.num(k);
      else if constexpr (std::is_same_v<T, std::vector<int>>) field = kv.int_list(k);
      else {
        const long long v = kv.integer(k);
        if (v < 0 && std::is_unsigned_v<T>) throw DataError(std::string("key '") + k + "' must be >= 0");
        field = static_cast<T>(v);
      }
    };
    get("seed", cfg.seed);
    get("downsample", cfg.codec.downsample);
    get("delta", cfg.codec.delta);
    get("eta", cfg.sched.eta);
    get("logsnr_min", cfg.sched.logsnr_min);
    get("logsnr_max", cfg.sched.logsnr_max);
    get("method", cfg.method);
    get("steps", cfg.steps);
    get("gamma", cfg.gamma);
    get("stages", cfg.stages);
    get("threads", cfg.threads);
    get("amplitude", cfg.amplitude);
    get("hfd_plus", cfg.hfd_plus);
    get("train_steps", cfg.train_steps);
    get("batch", cfg.batch);
    get("crop", cfg.crop);
    get("border", cfg.border);
    get("log_every", cfg.log_every);
    get("lr", cfg.lr);
    get("warmup", cfg.warmup);
    get("halflife", cfg.halflife);
    get("ema_decay", cfg.ema_decay);
    get("channels", cfg.channels);
    get("blocks", cfg.blocks);
    get("emb_dim", cfg.emb_dim);
    get("attention", cfg.attention);
    get("checkpoint", cfg.checkpoint);
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot open config file " + path.string());
  const std::string text((std::istreambuf_iterator<char>(f)), {});
  RunConfig cfg;
  try {
    apply_config(cfg, KeyValues::parse(text, path.string()), path.string());
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

// --- training pairs ---

// Context fed to the net: x_mse, plus the residual energy channel for HFD+.
inline ImageBuffer model_context(const ImageBuffer& x_mse, const std::optional<codec::ResidualEnergyMap>& residual) {
  if (!residual) return x_mse;
  return concat_channels(x_mse, codec::residual_energy_image(*residual, x_mse.height, x_mse.width));
}

// A crop of crop + 2 * border pixels goes through the codec; the border is
// then discarded from both the target and the reconstruction, so codec edge
// effects are not over-represented. Crops shrink to fit small images.
inline TrainExample make_training_example(const ImageBuffer& img, const RunConfig& cfg, SeededStream& stream) {
  const int f = cfg.net_config(img.channels).downsample_factor();
  const int inner_h = std::min(cfg.crop, (img.height - 2 * cfg.border) / f * f);
  const int inner_w = std::min(cfg.crop, (img.width - 2 * cfg.border) / f * f);
  if (inner_h < f || inner_w < f)
    throw DataError("training image " + shape_string(img) + " is too small for the border");
  const int outer_h = inner_h + 2 * cfg.border, outer_w = inner_w + 2 * cfg.border;
  const int r = static_cast<int>(stream.next_u64() % static_cast<std::uint64_t>(img.height - outer_h + 1));
  const int c = static_cast<int>(stream.next_u64() % static_cast<std::uint64_t>(img.width - outer_w + 1));
  const ImageBuffer outer = extract_patch(img, Rect{r, c, outer_h, outer_w}).data;
  codec::DecodedBitstream b = codec::analyze(outer, cfg.codec);
  const ImageBuffer rec = codec::reconstruct(b);
  std::optional<codec::ResidualEnergyMap> residual;
  if (cfg.hfd_plus) residual = codec::residual_energy_map(outer, rec);
  const ImageBuffer ctx = model_context(rec, residual);
  const Rect inner{cfg.border, cfg.border, inner_h, inner_w};
  TrainExample ex{extract_patch(outer, inner).data, extract_patch(ctx, inner).data, {}};
  if (cfg.hfd_plus) ex.source = extract_patch(rec, inner).data;
  return ex;
}

// Images of a training directory (png/ppm), sorted by file name.
inline std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension().string();
    if (ext == ".png" || ext == ".ppm" || ext == ".PNG" || ext == ".PPM") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct TrainLogRow {
  std::uint64_t step;
  double loss;
  double lr;
};

// Runs `steps` updates starting at st.step. Step s draws its batch from
// root.substream(s), so a resumed run reproduces an uninterrupted one.
inline void train_loop(TrainState& st, const std::vector<ImageBuffer>& images, const RunConfig& cfg, int steps,
                       const std::function<void(const TrainLogRow&)>& log = {}) {
  if (images.empty()) throw DataError("train: empty dataset");
  for (const auto& img : images)
    if (img.channels != st.net.config().in_channels)
      throw DataError("train: image channels " + std::to_string(img.channels) + " do not match the net (" +
                      std::to_string(st.net.config().in_channels) + ")");
  const SeededStream root(cfg.seed);
  for (int i = 0; i < steps; ++i) {
    const std::uint64_t step = st.step;
    const SeededStream s = root.substream(step);
    SeededStream pick = s.substream(0);
    std::vector<TrainExample> batch;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& img = images[pick.next_u64() % images.size()];
      batch.push_back(make_training_example(img, cfg, pick));
    }
    const double lr = learning_rate(st.cfg, step);
    const double loss = train_step(st, batch, s.substream(1));
    if (log && (step % static_cast<std::uint64_t>(cfg.log_every) == 0 || i + 1 == steps)) log({step, loss, lr});
  }
}

// --- refinement ---

// Checks that a checkpoint can refine images under `cfg`; DataError otherwise.
inline void check_compatible(const TrainState& st, const RunConfig& cfg, int image_channels, bool has_residual) {
  const auto& n = st.net.config();
  if (schedule_hash(n.sched) != schedule_hash(cfg.sched))
    throw DataError("checkpoint schedule (eta=" + KeyValues::format_double(n.sched.eta) +
                    ") does not match the configured schedule (eta=" + KeyValues::format_double(cfg.sched.eta) + ")");
  if (st.cfg.loss != cfg.loss())
    throw DataError("checkpoint was trained with the " + to_string(st.cfg.loss) + " loss; method " + cfg.method +
                    " needs " + to_string(cfg.loss()));
  if (n.in_channels != image_channels)
    throw DataError("checkpoint expects " + std::to_string(n.in_channels) + " channels, image has " +
                    std::to_string(image_channels));
  const int want_ctx = image_channels + (has_residual ? 1 : 0);
  if (n.ctx_channels != want_ctx)
    throw DataError(has_residual ? "checkpoint was not trained with the residual side channel"
                                 : "checkpoint needs the residual side channel (compress with --hfd-plus)");
}

namespace detail {

inline ImageBuffer pad_edge(const ImageBuffer& img, int h, int w) {
  ImageBuffer out(h, w, img.channels);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int k = 0; k < img.channels; ++k)
        out.at(r, c, k) = img.at(std::min(r, img.height - 1), std::min(c, img.width - 1), k);
  return out;
}

}  // namespace detail

// Stage two. Images with both sides >= 256 use the tiled sampler; smaller
// ones are edge-padded to the net's size multiple and sampled in one piece.
template <FieldModel M>
ImageBuffer refine(const M& model, int downsample_factor, const ImageBuffer& x_mse, const ImageBuffer& ctx,
                   const RunConfig& cfg, SamplerStats* stats = nullptr) {
  const SeededStream stream(cfg.seed);
  const bool tiled = x_mse.height >= tiler::kPatchSize && x_mse.width >= tiler::kPatchSize;
  // fewer steps than stages: one step per stage
  const tiler::TiledConfig tcfg{std::min(cfg.stages, cfg.sampler_steps()), cfg.threads, 0};
  if (cfg.is_flow()) {
    const FlowSamplerConfig fc{cfg.sampler_steps(), cfg.amplitude, true};
    if (tiled) return tiler::run_tiled_flow(model, x_mse, ctx, fc, tcfg, stream, stats);
    const int f = downsample_factor;
    const int h = (x_mse.height + f - 1) / f * f, w = (x_mse.width + f - 1) / f * f;
    const ImageBuffer y = rf_sample(model, detail::pad_edge(x_mse, h, w), detail::pad_edge(ctx, h, w), fc, stream, stats);
    return extract_patch(y, Rect{0, 0, x_mse.height, x_mse.width}).data;
  }
  const DiffusionSamplerConfig dc{parse_sampler_method(cfg.method), cfg.sampler_steps(), cfg.gamma, true};
  if (tiled) return tiler::run_tiled(model, ctx, x_mse.height, x_mse.width, x_mse.channels, dc, cfg.sched, tcfg, stream, stats);
  const int f = downsample_factor;
  const int h = (x_mse.height + f - 1) / f * f, w = (x_mse.width + f - 1) / f * f;
  const ImageBuffer y = sample(model, detail::pad_edge(ctx, h, w), h, w, x_mse.channels, dc, cfg.sched, stream, stats);
  return extract_patch(y, Rect{0, 0, x_mse.height, x_mse.width}).data;
}

// Decodes a bitstream and, with a checkpoint, refines it. Without one the
// stage-one reconstruction is returned unchanged.
inline ImageBuffer decompress(std::span<const std::uint8_t> bytes, const TrainState* st, const RunConfig& cfg,
                              SamplerStats* stats = nullptr) {
  const codec::DecodedBitstream b = codec::read_bitstream(bytes);
  const ImageBuffer x_mse = codec::reconstruct(b);
  if (!st) return x_mse;
  check_compatible(*st, cfg, x_mse.channels, b.residual.has_value());
  const BoundNet net(st->net, st->eval_params());
  return refine(net, st->net.config().downsample_factor(), x_mse, model_context(x_mse, b.residual), cfg, stats);
}

// --- eval over directories ---

// Pairs files by stem. Reconstructions must cover exactly the originals;
// bitstreams (<stem>.hfdc), when a directory is given, must exist for each.
inline std::vector<eval::EvalItem> load_eval_items(const std::filesystem::path& originals,
                                                  const std::filesystem::path& reconstructions,
                                                  const std::optional<std::filesystem::path>& bitstreams) {
  auto by_stem = [](const std::filesystem::path& dir) {
    std::map<std::string, std::filesystem::path> m;
    for (const auto& p : list_images(dir))
      if (!m.emplace(p.stem().string(), p).second) throw DataError("duplicate image stem in " + dir.string() + ": " + p.stem().string());
    return m;
  };
  const auto orig = by_stem(originals), rec = by_stem(reconstructions);
  if (orig.empty()) throw DataError("eval: no images in " + originals.string());
  for (const auto& [stem, p] : orig)
    if (!rec.count(stem)) throw DataError("eval: no reconstruction for " + p.filename().string());
  for (const auto& [stem, p] : rec)
    if (!orig.count(stem)) throw DataError("eval: reconstruction without original: " + p.filename().string());
  std::vector<eval::EvalItem> items;
  for (const auto& [stem, p] : orig) {
    eval::EvalItem it{p.filename().string(), load_image(p), load_image(rec.at(stem)), std::nullopt};
    if (bitstreams) {
      const auto bp = *bitstreams / (stem + ".hfdc");
      const std::string raw = detail::read_file(bp, "bitstream");
      it.bitstream = std::vector<std::uint8_t>(raw.begin(), raw.end());
    }
    items.push_back(std::move(it));
  }
  return items;
}

}  // namespace hfd

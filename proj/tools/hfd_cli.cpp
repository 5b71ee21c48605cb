// hfd: compress, decompress, train, eval and sample from the command line.
// Exit codes: 0 success, 1 usage error, 2 data error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "hfd/checkpoint.hpp"
#include "hfd/codec/codec.hpp"
#include "hfd/core/image_io.hpp"
#include "hfd/denoiser.hpp"
#include "hfd/diffusion.hpp"
#include "hfd/eval.hpp"
#include "hfd/pipeline.hpp"

namespace fs = std::filesystem;
using namespace hfd;

namespace {

constexpr int kUsage = 1;
constexpr int kData = 2;

// Flags shared by every command. They override the config file.
struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> method;
  std::optional<int> steps, stages, threads, downsample, train_steps;
  std::optional<double> gamma, eta, delta;
  bool hfd_plus = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "key=value config file");
    app->add_option("--seed", seed, "random seed");
    app->add_option("--method", method, "ddpm, ddim or rectflow");
    app->add_option("--steps", steps, "sampler steps (default 250, rectflow 8)");
    app->add_option("--gamma", gamma, "DDPM noise interpolation in [0,1]");
    app->add_option("--eta", eta, "schedule shift");
    app->add_option("--stages", stages, "tiler stages");
    app->add_option("--threads", threads, "worker threads for tile groups");
    app->add_option("--downsample", downsample, "codec downsampling factor");
    app->add_option("--delta", delta, "codec quantizer step");
    app->add_option("--train-steps", train_steps, "training updates to run");
    app->add_flag("--hfd-plus", hfd_plus, "code / use the residual side channel");
  }

  RunConfig resolve() const {
    RunConfig cfg = config.empty() ? RunConfig{} : load_run_config(config);
    if (seed) cfg.seed = *seed;
    if (method) cfg.method = *method;
    if (steps) cfg.steps = *steps;
    if (gamma) cfg.gamma = *gamma;
    if (eta) cfg.sched.eta = *eta;
    if (stages) cfg.stages = *stages;
    if (threads) cfg.threads = *threads;
    if (downsample) cfg.codec.downsample = *downsample;
    if (delta) cfg.codec.delta = *delta;
    if (train_steps) cfg.train_steps = *train_steps;
    if (hfd_plus) cfg.hfd_plus = true;
    cfg.validate();
    return cfg;
  }
};

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  const std::string s = detail::read_file(p, "bitstream");
  return {s.begin(), s.end()};
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  detail::write_file(p, std::string(b.begin(), b.end()), "output");
}

int cmd_compress(const Overrides& o, const fs::path& in, const fs::path& out) {
  const RunConfig cfg = o.resolve();
  const ImageBuffer img = load_image(in);
  const auto bytes = cfg.hfd_plus ? codec::encode_with_residual(img, cfg.codec) : codec::encode(img, cfg.codec);
  write_bytes(out, bytes);
  std::printf("bpp=%.6f bytes=%zu\n", codec::bpp(bytes.size(), img.width, img.height), bytes.size());
  return 0;
}

int cmd_decompress(const Overrides& o, const fs::path& in, const fs::path& out, const std::string& ckpt_flag,
                   bool no_refine) {
  RunConfig cfg = o.resolve();
  if (!ckpt_flag.empty()) cfg.checkpoint = ckpt_flag;
  const auto bytes = read_bytes(in);
  if (no_refine) {
    save_image(quantize_8bit(decompress(bytes, nullptr, cfg)), out);
    return 0;
  }
  if (cfg.checkpoint.empty()) throw UsageError("decompress: --checkpoint is required unless --no-refine is given");
  const TrainState st = load_checkpoint(cfg.checkpoint);
  SamplerStats stats;
  save_image(quantize_8bit(decompress(bytes, &st, cfg, &stats)), out);
  std::printf("method=%s steps=%d model_calls=%llu noise_vectors=%llu\n", cfg.method.c_str(), cfg.sampler_steps(),
              static_cast<unsigned long long>(stats.model_calls), static_cast<unsigned long long>(stats.noise_vectors));
  return 0;
}

int cmd_train(const Overrides& o, const fs::path& data, const fs::path& out, bool resume, const std::string& log_path) {
  const RunConfig cfg = o.resolve();
  std::vector<ImageBuffer> images;
  for (const auto& p : list_images(data)) images.push_back(load_image(p));
  if (images.empty()) throw DataError("train: no images in " + data.string());
  std::optional<TrainState> st;
  if (resume) {
    st.emplace(load_checkpoint(out));
    if (st->net.config().ctx_channels != cfg.net_config(images[0].channels).ctx_channels)
      throw DataError("train: checkpoint and --hfd-plus setting disagree");
  } else {
    st.emplace(nn::TinyCondNet(cfg.net_config(images[0].channels)), cfg.train_config());
  }
  std::ofstream log;
  if (!log_path.empty()) {
    log.open(log_path, resume ? std::ios::app : std::ios::trunc);
    if (!log) throw DataError("train: cannot write " + log_path);
    if (!resume) log << "step,loss,lr\n";
  }
  train_loop(*st, images, cfg, cfg.train_steps, [&](const TrainLogRow& r) {
    char line[128];
    std::snprintf(line, sizeof line, "%llu,%.9g,%.9g", static_cast<unsigned long long>(r.step), r.loss, r.lr);
    if (log) log << line << '\n' << std::flush;
    std::fprintf(stderr, "step %llu loss %.6g\n", static_cast<unsigned long long>(r.step), r.loss);
  });
  save_checkpoint(*st, out);
  std::printf("step=%llu params=%zu\n", static_cast<unsigned long long>(st->step), st->net.parameter_count());
  return 0;
}

int cmd_eval(const fs::path& originals, const fs::path& recs, const std::string& bitstreams, const std::string& out) {
  const auto items = load_eval_items(originals, recs,
                                     bitstreams.empty() ? std::nullopt : std::optional<fs::path>(bitstreams));
  const std::string csv = eval::to_csv(eval::evaluate(items));
  if (out.empty()) {
    std::cout << csv;
  } else {
    detail::write_file(out, csv, "eval report");
  }
  return 0;
}

// Scalar Gaussian oracle, `count` independent chains in one buffer.
int cmd_sample(const Overrides& o, int count, double mean, double var, const std::string& out) {
  const RunConfig cfg = o.resolve();
  if (cfg.is_flow()) throw UsageError("sample: supports ddpm and ddim");
  if (count < 1) throw UsageError("sample: --count must be >= 1");
  if (!(var >= 0)) throw UsageError("sample: --var must be >= 0");
  const auto den = GaussianOracleDenoiser::scalar(cfg.sched, mean, var);
  const DiffusionSamplerConfig dc{parse_sampler_method(cfg.method), cfg.sampler_steps(), cfg.gamma, false};
  SamplerStats stats;
  const ImageBuffer x = sample(den, ImageBuffer{}, 1, count, 1, dc, cfg.sched, SeededStream(cfg.seed), &stats);
  double m = 0, v = 0;
  for (double d : x.data) m += d;
  m /= count;
  for (double d : x.data) v += (d - m) * (d - m);
  v /= count;
  if (!out.empty()) {
    std::string csv = "value\n";
    for (double d : x.data) csv += KeyValues::format_double(d) + "\n";
    detail::write_file(out, csv, "samples");
  }
  std::printf("mean=%.6f var=%.6f noise_vectors=%llu\n", m, v, static_cast<unsigned long long>(stats.noise_vectors));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hfd: two-stage image codec with generative refinement"};
  app.require_subcommand(1);
  Overrides o;

  std::string in, out, ckpt, log_path, data, originals, recs, bitstreams;
  bool no_refine = false, resume = false;
  int count = 10000;
  double mean = 0, var = 1;

  auto* compress = app.add_subcommand("compress", "image -> HFDC bitstream");
  compress->add_option("input", in, "PNG or PPM image")->required();
  compress->add_option("output", out, "bitstream file")->required();
  o.attach(compress);

  auto* decomp = app.add_subcommand("decompress", "HFDC bitstream -> PNG, refined by a checkpoint");
  decomp->add_option("input", in, "bitstream file")->required();
  decomp->add_option("output", out, "PNG or PPM image")->required();
  decomp->add_option("--checkpoint", ckpt, "trained checkpoint");
  decomp->add_flag("--no-refine", no_refine, "write the stage-one reconstruction");
  o.attach(decomp);

  auto* train = app.add_subcommand("train", "train the refinement net on a directory of images");
  train->add_option("--data", data, "directory of PNG/PPM images")->required();
  train->add_option("--out", out, "checkpoint to write")->required();
  train->add_flag("--resume", resume, "continue from the checkpoint at --out");
  train->add_option("--log", log_path, "loss CSV (step,loss,lr)");
  o.attach(train);

  auto* ev = app.add_subcommand("eval", "PSNR, bpp and patch Frechet distance as CSV");
  ev->add_option("--originals", originals, "directory of originals")->required();
  ev->add_option("--reconstructions", recs, "directory of reconstructions")->required();
  ev->add_option("--bitstreams", bitstreams, "directory of <stem>.hfdc files");
  ev->add_option("--out", out, "CSV file (default stdout)");

  auto* smp = app.add_subcommand("sample", "scalar Gaussian toy sampling with the exact oracle");
  smp->add_option("--count", count, "number of chains");
  smp->add_option("--mean", mean, "data mean");
  smp->add_option("--var", var, "data variance");
  smp->add_option("--out", out, "CSV of samples");
  o.attach(smp);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsage;
  }

  try {
    if (*compress) return cmd_compress(o, in, out);
    if (*decomp) return cmd_decompress(o, in, out, ckpt, no_refine);
    if (*train) return cmd_train(o, data, out, resume, log_path);
    if (*ev) return cmd_eval(originals, recs, bitstreams, out);
    if (*smp) return cmd_sample(o, count, mean, var, out);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kData;
  }
  return kUsage;
}

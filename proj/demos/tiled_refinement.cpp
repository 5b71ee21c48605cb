// Compresses an image, then refines the stage-one reconstruction with the
// tiled sampler. The denoiser is a Gaussian oracle centred on the
// reconstruction, so the demo runs in seconds and shows the tiling itself:
// task layout, per-stage progress and seam statistics.
//
// usage: tiled_refinement [image.png] [out_dir]

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <string>

#include "hfd/codec/codec.hpp"
#include "hfd/core/image_io.hpp"
#include "hfd/denoiser.hpp"
#include "hfd/eval.hpp"
#include "hfd/tiler.hpp"

using namespace hfd;

int main(int argc, char** argv) {
  const std::filesystem::path in = argc > 1 ? argv[1] : std::filesystem::path(HFD_DEMO_IMAGE);
  const std::filesystem::path out = argc > 2 ? argv[2] : std::filesystem::path(".");
  try {
    const ImageBuffer x = load_image(in);
    const auto bytes = codec::encode(x, {4, 1.0 / 32});
    const ImageBuffer x_mse = codec::decode(bytes);
    std::printf("%s: %dx%d, %.4f bpp, stage-one PSNR %.2f dB\n", in.filename().c_str(), x.width, x.height,
                codec::bpp(bytes.size(), x.width, x.height), eval::psnr(x, x_mse));

    const auto layout = tiler::plan(x.width, x.height);
    std::printf("%zu tasks on a %dx%d cell grid\n", layout.tasks.size(), layout.cells_x, layout.cells_y);
    for (int g = 0; g < tiler::kGroupCount; ++g) std::printf("  group %d: %zu tasks\n", g, layout.group(g).size());

    const NoiseSchedule sched{0.5};
    const GaussianOracleDenoiser den(sched, {}, {0.002}, true);
    const DiffusionSamplerConfig cfg{SamplerMethod::ddpm, 50, 0.1, true};
    const auto t0 = std::chrono::steady_clock::now();
    SamplerStats stats;
    const ImageBuffer refined =
        tiler::run_tiled(den, x_mse, x.height, x.width, x.channels, cfg, sched, tiler::TiledConfig{6, 2, 0},
                         SeededStream(1), &stats);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("refined in %.1f s, %llu model calls; PSNR %.2f dB\n", secs,
                static_cast<unsigned long long>(stats.model_calls), eval::psnr(x, refined));
    const auto s_mse = tiler::seam_stats(x_mse), s_ref = tiler::seam_stats(refined);
    std::printf("seams (mean |neighbour diff|): stage one %.4f boundary / %.4f interior, refined %.4f / %.4f\n",
                s_mse.boundary, s_mse.interior, s_ref.boundary, s_ref.interior);
    save_image(quantize_8bit(x_mse), out / "stage_one.png");
    save_image(quantize_8bit(refined), out / "refined.png");
    std::printf("wrote %s and %s\n", (out / "stage_one.png").c_str(), (out / "refined.png").c_str());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}

// Terminal moments of the samplers on scalar Gaussian data with the exact
// oracle denoiser, across step counts. Target: mean 0.5, variance 0.04.

#include <cmath>
#include <cstdio>

#include "hfd/denoiser.hpp"
#include "hfd/diffusion.hpp"

using namespace hfd;

int main() {
  const NoiseSchedule sched{0.5};
  const double mu = 0.5, var = 0.04;
  const auto oracle = GaussianOracleDenoiser::scalar(sched, mu, var);
  const int chains = 20000;

  std::printf("%-12s %6s %10s %10s %8s\n", "sampler", "steps", "mean", "variance", "draws");
  for (int steps : {4, 16, 64, 250}) {
    struct {
      SamplerMethod m;
      double gamma;
      const char* name;
    } runs[] = {{SamplerMethod::ddim, 0.0, "ddim"},
                {SamplerMethod::ddpm, 0.0, "ddpm g=0"},
                {SamplerMethod::ddpm, 0.1, "ddpm g=0.1"},
                {SamplerMethod::ddpm, 1.0, "ddpm g=1"}};
    for (const auto& r : runs) {
      SamplerStats stats;
      const auto x = sample(oracle, ImageBuffer{}, 1, chains, 1, {r.m, steps, r.gamma, false}, sched, SeededStream(1),
                            &stats);
      double m = 0, v = 0;
      for (double d : x.data) m += d;
      m /= chains;
      for (double d : x.data) v += (d - m) * (d - m);
      v /= chains - 1;
      std::printf("%-12s %6d %10.5f %10.5f %8llu\n", r.name, steps, m, v,
                  static_cast<unsigned long long>(stats.noise_vectors));
    }
  }
  std::printf("target %19.5f %10.5f\n", mu, var);
  return 0;
}

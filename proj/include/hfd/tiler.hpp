#pragma once

// Patch-parallel sampling for images larger than the model's window.
//
// The image is cut into 128 x 128 center cells, one task per cell (an axis
// exactly one window long is a single 256 cell instead). Each task
// owns a 256 x 256 window around its cell, shifted inward at the borders.
// Tasks are split into 4 groups by (row % 2, col % 2). The reverse process
// is cut into `stages` contiguous time segments; per stage the groups run in
// order 0..3 and every task advances its whole window through the segment,
// conditioning on pixels that earlier groups already advanced. Only the
// center cell is written back.
//
// Tasks of one group all read the canvas as it was when the group started
// and write disjoint centers, so intra-group execution order (and thread
// count) cannot change the result.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <optional>
#include <thread>
#include <vector>

#include "hfd/core/error.hpp"
#include "hfd/core/image.hpp"
#include "hfd/core/patch.hpp"
#include "hfd/core/random.hpp"
#include "hfd/diffusion.hpp"
#include "hfd/rectflow.hpp"
#include "hfd/schedule.hpp"

namespace hfd::tiler {

inline constexpr int kPatchSize = 256;
inline constexpr int kCenterSize = 128;
inline constexpr int kGroupCount = 4;

struct PatchTask {
  int index = 0;
  int cell_row = 0, cell_col = 0;
  Rect window;
  Rect center;
  int group = 0;
  // Over the window, row-major: 1 = generated by this task, 0 = observed
  // (already advanced by an earlier group in the same stage).
  std::vector<std::uint8_t> mask;

  bool observed(int r, int c) const { return mask[static_cast<std::size_t>(r) * window.width + c] == 0; }
  bool has_observed() const { return std::find(mask.begin(), mask.end(), 0) != mask.end(); }
};

struct TileLayout {
  int width = 0, height = 0;
  int cells_x = 0, cells_y = 0;
  std::vector<PatchTask> tasks;

  std::vector<int> group(int g) const {
    std::vector<int> out;
    for (const auto& t : tasks)
      if (t.group == g) out.push_back(t.index);
    return out;
  }
};

inline int window_start(int cell_start, int extent) {
  return std::clamp(cell_start - (kPatchSize - kCenterSize) / 2, 0, extent - kPatchSize);
}

// Cell edges along one axis.
inline std::vector<int> cell_edges(int extent) {
  if (extent == kPatchSize) return {0, extent};
  std::vector<int> e;
  for (int x = 0; x < extent; x += kCenterSize) e.push_back(x);
  e.push_back(extent);
  return e;
}

inline TileLayout plan(int width, int height) {
  if (width < kPatchSize || height < kPatchSize)
    throw std::invalid_argument("tiler::plan: image " + std::to_string(width) + "x" + std::to_string(height) +
                                " is smaller than one " + std::to_string(kPatchSize) + " window");
  TileLayout L;
  L.width = width;
  L.height = height;
  const std::vector<int> ex = cell_edges(width), ey = cell_edges(height);
  L.cells_x = static_cast<int>(ex.size()) - 1;
  L.cells_y = static_cast<int>(ey.size()) - 1;
  for (int r = 0; r < L.cells_y; ++r)
    for (int c = 0; c < L.cells_x; ++c) {
      PatchTask t;
      t.index = static_cast<int>(L.tasks.size());
      t.cell_row = r;
      t.cell_col = c;
      t.center = {ey[r], ex[c], ey[r + 1] - ey[r], ex[c + 1] - ex[c]};
      t.window = {window_start(t.center.row, height), window_start(t.center.col, width), kPatchSize, kPatchSize};
      t.group = (r % 2) * 2 + (c % 2);
      L.tasks.push_back(std::move(t));
    }
  // The mask of a task is the same in every stage: centers of lower groups
  // are observed.
  for (auto& t : L.tasks) {
    t.mask.assign(static_cast<std::size_t>(kPatchSize) * kPatchSize, 1);
    for (const auto& o : L.tasks) {
      if (o.group >= t.group || !o.center.intersects(t.window)) continue;
      for (int r = o.center.row; r < o.center.bottom(); ++r)
        for (int c = o.center.col; c < o.center.right(); ++c)
          if (t.window.contains(r, c))
            t.mask[static_cast<std::size_t>(r - t.window.row) * kPatchSize + (c - t.window.col)] = 0;
    }
  }
  return L;
}

// m z_t + (1 - m)(alpha_t x_known + sigma_t eps) with fresh eps for every
// entry. The mask has one channel (broadcast) or as many as z_t.
inline ImageBuffer masked_input(const ImageBuffer& z_t, const ImageBuffer& x_known, const ImageBuffer& mask, double t,
                                const NoiseSchedule& sched, SeededStream& stream) {
  require_same_shape(z_t, x_known, "masked_input");
  if (mask.height != z_t.height || mask.width != z_t.width || (mask.channels != 1 && mask.channels != z_t.channels))
    throw std::invalid_argument("masked_input: mask shape mismatch");
  for (double m : mask.data)
    if (m != 0.0 && m != 1.0) throw std::invalid_argument("masked_input: mask must be binary");
  const VpParams p = sched.params(t);
  ImageBuffer out = z_t;
  for (int r = 0; r < z_t.height; ++r)
    for (int c = 0; c < z_t.width; ++c)
      for (int k = 0; k < z_t.channels; ++k) {
        const double eps = stream.normal();
        if (mask.at(r, c, mask.channels == 1 ? 0 : k) == 0.0) out.at(r, c, k) = p.alpha * x_known.at(r, c, k) + p.sigma * eps;
      }
  return out;
}

// Output pixel (i, j) comes from the center of the task that owns it.
inline ImageBuffer assemble(const TileLayout& L, const std::vector<std::optional<Patch>>& centers, int channels) {
  if (centers.size() != L.tasks.size()) throw std::invalid_argument("tiler::assemble: wrong number of task outputs");
  ImageBuffer out(L.height, L.width, channels);
  for (const auto& t : L.tasks) {
    const auto& p = centers[static_cast<std::size_t>(t.index)];
    if (!p) throw std::invalid_argument("tiler::assemble: missing output of task " + std::to_string(t.index));
    if (!(p->region == t.center)) throw std::invalid_argument("tiler::assemble: task output is not its center");
    paste_patch(out, *p);
  }
  return out;
}

// Step boundaries of `stages` contiguous segments of [0, steps); the first
// steps % stages segments are one step longer.
inline std::vector<int> stage_bounds(int steps, int stages) {
  if (stages < 1 || stages > steps)
    throw std::invalid_argument("tiler: stages must be in [1, steps], got " + std::to_string(stages));
  std::vector<int> b{0};
  for (int s = 0; s < stages; ++s) b.push_back(b.back() + steps / stages + (s < steps % stages ? 1 : 0));
  return b;
}

struct TiledConfig {
  int stages = 6;
  int threads = 1;
  // Non-zero: run each group's tasks in a shuffled order (testing aid).
  std::uint64_t order_shuffle = 0;
};

namespace detail {

template <class Fn>
void parallel_for(const std::vector<int>& items, int threads, Fn&& fn) {
  const int n = static_cast<int>(items.size());
  const int workers = std::clamp(threads, 1, std::max(1, n));
  if (workers == 1) {
    for (int i : items) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (int k = next++; k < n; k = next++) fn(items[static_cast<std::size_t>(k)]);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
        next = n;
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::vector<int> group_order(const TileLayout& L, int g, std::uint64_t shuffle, int stage) {
  std::vector<int> ids = L.group(g);
  if (shuffle) {
    SeededStream s = SeededStream(shuffle).substream({static_cast<std::uint64_t>(stage), static_cast<std::uint64_t>(g)});
    for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[s.next_u64() % i]);
  }
  return ids;
}

// Drives stages x groups. task_fn(task, stage, snapshot) returns the task's
// window state at the end of the stage segment.
template <class TaskFn>
ImageBuffer run_schedule(const TileLayout& L, ImageBuffer canvas, int stages, const TiledConfig& cfg,
                         TaskFn&& task_fn) {
  std::vector<std::optional<Patch>> last(L.tasks.size());
  for (int s = 0; s < stages; ++s)
    for (int g = 0; g < kGroupCount; ++g) {
      const std::vector<int> ids = group_order(L, g, cfg.order_shuffle, s);
      if (ids.empty()) continue;
      const ImageBuffer snapshot = canvas;
      parallel_for(ids, cfg.threads, [&](int id) {
        const PatchTask& t = L.tasks[static_cast<std::size_t>(id)];
        const ImageBuffer win = task_fn(t, s, snapshot);
        const Patch full{t.window, win};
        const Rect local{t.center.row - t.window.row, t.center.col - t.window.col, t.center.height, t.center.width};
        Patch c = extract_patch(full.data, local);
        c.region = t.center;
        paste_patch(canvas, c);  // centers are disjoint
        if (s == stages - 1) last[static_cast<std::size_t>(id)] = std::move(c);
      });
    }
  return assemble(L, last, canvas.channels);
}

inline ImageBuffer window_of(const ImageBuffer& img, const PatchTask& t) {
  return img.empty() ? img : extract_patch(img, t.window).data;
}

}  // namespace detail

// Tiled diffusion sampling. ctx (may be empty) is the full-size conditioning
// image. Randomness: initial noise from substream(kInitial) over the whole
// canvas, step noise from substream({kStepNoise, task}), mask noise from
// substream({kMaskNoise, task, step}). A 256 x 256 image is one task and
// reproduces sample() exactly.
template <Denoiser D>
ImageBuffer run_tiled(const D& den, const ImageBuffer& ctx, int height, int width, int channels,
                      const DiffusionSamplerConfig& cfg, const NoiseSchedule& sched, const TiledConfig& tcfg,
                      const SeededStream& stream, SamplerStats* stats = nullptr) {
  if (!ctx.empty() && (ctx.height != height || ctx.width != width))
    throw std::invalid_argument("run_tiled: context size does not match the output size");
  const TileLayout L = plan(width, height);
  const TimeGrid grid = make_time_grid(cfg.steps);
  const std::vector<int> bounds = stage_bounds(cfg.steps, tcfg.stages);
  ImageBuffer canvas(height, width, channels);
  SeededStream init = stream.substream(stream_keys::kInitial);
  init.fill_normal(canvas.data);
  std::vector<SamplerStats> per_task(L.tasks.size());

  auto task_fn = [&](const PatchTask& t, int s, const ImageBuffer& snapshot) {
    DiffusionState st{extract_patch(snapshot, t.window).data, grid.at(bounds[s])};
    const ImageBuffer observed = st.z;  // valid where the mask is 0, at time tau
    const double tau = bounds[s + 1] < cfg.steps ? grid.at(bounds[s + 1]) : 0.0;
    const ImageBuffer ctx_w = detail::window_of(ctx, t);
    const SeededStream noise_root = stream.substream({stream_keys::kStepNoise, static_cast<std::uint64_t>(t.index)});
    const bool conditioned = t.has_observed();
    auto condition = [&](ImageBuffer& z, double time, int step) {
      if (!conditioned) return;
      SeededStream ms = stream.substream(
          {stream_keys::kMaskNoise, static_cast<std::uint64_t>(t.index), static_cast<std::uint64_t>(step)});
      // Observed pixels are noised from tau up to the current time. From
      // tau = 0 this is alpha_t x + sigma_t eps.
      double a, sd;
      if (tau == 0.0) {
        const VpParams p = sched.params(time);
        a = p.alpha;
        sd = p.sigma;
      } else {
        const Transition tr = transition_params(sched, tau, time);
        a = tr.alpha_ts;
        sd = std::sqrt(tr.var_ts);
      }
      for (int r = 0; r < z.height; ++r)
        for (int c = 0; c < z.width; ++c)
          for (int k = 0; k < z.channels; ++k) {
            const double eps = ms.normal();
            if (t.observed(r, c)) z.at(r, c, k) = a * observed.at(r, c, k) + sd * eps;
          }
    };
    run_diffusion_steps(st, bounds[s], bounds[s + 1], grid, den, ctx_w, cfg, sched, noise_root, condition,
                        &per_task[static_cast<std::size_t>(t.index)]);
    return std::move(st.z);
  };
  ImageBuffer out = detail::run_schedule(L, std::move(canvas), tcfg.stages, tcfg, task_fn);
  if (stats)
    for (const auto& p : per_task) {
      stats->noise_vectors += p.noise_vectors;
      stats->model_calls += p.model_calls;
    }
  if (cfg.clamp_output) clamp01(out);
  return out;
}

// Tiled rectified-flow refinement of x_mse with a full-size context. Observed
// pixels at a later time a are mapped back to the current time b along the
// straight path from the start: y_b = y_0 + (b/a)(y_a - y_0). A 256 x 256
// image reproduces rf_sample() exactly.
template <VelocityModel M>
ImageBuffer run_tiled_flow(const M& model, const ImageBuffer& x_mse, const ImageBuffer& ctx,
                           const FlowSamplerConfig& cfg, const TiledConfig& tcfg, const SeededStream& stream,
                           SamplerStats* stats = nullptr) {
  if (cfg.steps < 1) throw std::invalid_argument("run_tiled_flow: steps must be >= 1");
  if (ctx.height != x_mse.height || ctx.width != x_mse.width)
    throw std::invalid_argument("run_tiled_flow: context size does not match the image size");
  const TileLayout L = plan(x_mse.width, x_mse.height);
  const std::vector<int> bounds = stage_bounds(cfg.steps, tcfg.stages);
  SeededStream init = stream.substream(stream_keys::kInitial);
  const ImageBuffer y0 = rf_dequantize(x_mse, cfg.amplitude, init);
  std::vector<SamplerStats> per_task(L.tasks.size());

  auto task_fn = [&](const PatchTask& t, int s, const ImageBuffer& snapshot) {
    ImageBuffer y = extract_patch(snapshot, t.window).data;
    const ImageBuffer observed = y;
    const ImageBuffer start = extract_patch(y0, t.window).data;
    const double a = static_cast<double>(bounds[s + 1]) / cfg.steps;
    const bool conditioned = t.has_observed();
    auto condition = [&](ImageBuffer& z, double b, int) {
      if (!conditioned) return;
      const double f = b / a;
      for (int r = 0; r < z.height; ++r)
        for (int c = 0; c < z.width; ++c)
          if (t.observed(r, c))
            for (int k = 0; k < z.channels; ++k)
              z.at(r, c, k) = start.at(r, c, k) + f * (observed.at(r, c, k) - start.at(r, c, k));
    };
    run_flow_steps(y, bounds[s], bounds[s + 1], cfg.steps, model, extract_patch(ctx, t.window).data, condition,
                   &per_task[static_cast<std::size_t>(t.index)]);
    return y;
  };
  ImageBuffer out = detail::run_schedule(L, y0, tcfg.stages, tcfg, task_fn);
  if (stats)
    for (const auto& p : per_task) stats->model_calls += p.model_calls;
  if (cfg.clamp_output) clamp01(out);
  return out;
}

// x_mse is also the context.
template <VelocityModel M>
ImageBuffer run_tiled_flow(const M& model, const ImageBuffer& x_mse, const FlowSamplerConfig& cfg,
                           const TiledConfig& tcfg, const SeededStream& stream, SamplerStats* stats = nullptr) {
  return run_tiled_flow(model, x_mse, x_mse, cfg, tcfg, stream, stats);
}

// Mean absolute difference of horizontally/vertically adjacent pixels that
// straddle a center boundary, and of those inside one center.
struct SeamStats {
  double boundary = 0;
  double interior = 0;
};

inline SeamStats seam_stats(const ImageBuffer& img) {
  SeamStats s;
  double nb = 0, ni = 0;
  std::vector<bool> cut_x(img.width + 1, false), cut_y(img.height + 1, false);
  for (int e : cell_edges(img.width)) cut_x[e] = true;
  for (int e : cell_edges(img.height)) cut_y[e] = true;
  auto add = [&](bool across, double d) {
    (across ? s.boundary : s.interior) += d;
    (across ? nb : ni) += 1;
  };
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      for (int k = 0; k < img.channels; ++k) {
        if (c + 1 < img.width) add(cut_x[c + 1], std::abs(img.at(r, c + 1, k) - img.at(r, c, k)));
        if (r + 1 < img.height) add(cut_y[r + 1], std::abs(img.at(r + 1, c, k) - img.at(r, c, k)));
      }
  if (nb > 0) s.boundary /= nb;
  if (ni > 0) s.interior /= ni;
  return s;
}

}  // namespace hfd::tiler

#pragma once

// Metrics: PSNR, the 256-px patch protocol, Frechet distance over pluggable
// features, the MSE-bound toy experiment and the CSV report.

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hfd/codec/codec.hpp"
#include "hfd/core/error.hpp"
#include "hfd/core/image.hpp"
#include "hfd/core/patch.hpp"
#include "hfd/core/random.hpp"

namespace hfd::eval {

// Returned for identical images, and the ceiling for everything else.
inline constexpr double kPsnrCap = 99.0;

inline double mse(const ImageBuffer& a, const ImageBuffer& b) {
  require_same_shape(a, b, "mse");
  if (a.empty()) throw std::invalid_argument("mse: empty images");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  return s / static_cast<double>(a.size());
}

inline double psnr(const ImageBuffer& a, const ImageBuffer& b) {
  const double e = mse(a, b);
  if (e == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(e));
}

struct PatchSet {
  std::vector<ImageBuffer> patches;
  int skipped = 0;  // images smaller than one patch
};

// Non-overlapping grid from the top-left corner; remainders are cropped.
inline PatchSet patchify(const std::vector<ImageBuffer>& images, int patch = 256) {
  if (patch < 1) throw std::invalid_argument("patchify: patch size must be positive");
  PatchSet out;
  for (const auto& img : images) {
    if (img.height < patch || img.width < patch) {
      ++out.skipped;
      continue;
    }
    for (int r = 0; r + patch <= img.height; r += patch)
      for (int c = 0; c + patch <= img.width; c += patch)
        out.patches.push_back(extract_patch(img, r, c, patch).data);
  }
  return out;
}

using FeatureExtractor = std::function<std::vector<double>(const ImageBuffer&)>;

// Default extractor "gray8-v1": grayscale, 8x box-downsampled, flattened
// row-major (1024 values for a 256-px patch).
inline std::vector<double> gray8_features(const ImageBuffer& patch) {
  return codec::box_downsample(to_gray(patch), 8).data;
}

struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // unbiased
  std::size_t n = 0;

  Eigen::Index dim() const { return mean.size(); }
  bool full_rank_possible() const { return n >= static_cast<std::size_t>(dim()) + 1; }
};

inline FeatureStats feature_stats(const std::vector<std::vector<double>>& features) {
  if (features.size() < 2) throw std::invalid_argument("feature_stats: need at least 2 samples");
  const auto d = static_cast<Eigen::Index>(features[0].size());
  Eigen::MatrixXd X(static_cast<Eigen::Index>(features.size()), d);
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (static_cast<Eigen::Index>(features[i].size()) != d)
      throw std::invalid_argument("feature_stats: inconsistent feature dimensions");
    X.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(features[i].data(), d);
  }
  FeatureStats s;
  s.n = features.size();
  // shifted by the first sample: identical samples give an exactly zero covariance
  const Eigen::RowVectorXd ref = X.row(0);
  Eigen::MatrixXd C = X.rowwise() - ref;
  const Eigen::RowVectorXd shift = C.colwise().mean();
  C.rowwise() -= shift;
  s.mean = (ref + shift).transpose();
  s.cov = (C.transpose() * C) / static_cast<double>(s.n - 1);
  return s;
}

inline FeatureStats feature_stats(const std::vector<ImageBuffer>& patches, const FeatureExtractor& fx = gray8_features) {
  std::vector<std::vector<double>> f;
  f.reserve(patches.size());
  for (const auto& p : patches) f.push_back(fx(p));
  return feature_stats(f);
}

// Moments of the union of two sample sets.
inline FeatureStats merge_stats(const FeatureStats& a, const FeatureStats& b) {
  if (a.dim() != b.dim()) throw std::invalid_argument("merge_stats: dimension mismatch");
  const double na = static_cast<double>(a.n), nb = static_cast<double>(b.n), n = na + nb;
  FeatureStats s;
  s.n = a.n + b.n;
  const Eigen::VectorXd delta = b.mean - a.mean;
  s.mean = a.mean + delta * (nb / n);
  s.cov = ((na - 1) * a.cov + (nb - 1) * b.cov + delta * delta.transpose() * (na * nb / n)) / (n - 1);
  return s;
}

inline constexpr double kPsdTolerance = 1e-8;

// Symmetric PSD square root; eigenvalues in [-tol, 0) are clipped to 0.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw NumericalError("psd_sqrt: eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -kPsdTolerance) throw std::invalid_argument("frechet_distance: covariance is not PSD");
    ev(i) = std::sqrt(std::max(0.0, ev(i)));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

// |m1 - m2|^2 + tr(C1 + C2 - 2 (C1 C2)^(1/2)), with tr (C1 C2)^(1/2)
// computed as tr (C1^(1/2) C2 C1^(1/2))^(1/2).
inline double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  if (a.dim() != b.dim() || a.cov.rows() != a.dim() || b.cov.rows() != b.dim())
    throw std::invalid_argument("frechet_distance: dimension mismatch");
  const Eigen::MatrixXd s1 = psd_sqrt(a.cov);
  const Eigen::MatrixXd cross = psd_sqrt(s1 * b.cov * s1);
  psd_sqrt(b.cov);  // validates b
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
  return std::max(0.0, d);
}

// Scalar toy model for the distortion bound: x ~ N(0, 1), y = x + n with
// n ~ N(0, noise_var). The first stage outputs E[x | y] + bias. The second
// stage either samples the exact posterior p(x | y) or returns its mean.
struct MseToyModel {
  double noise_var = 1.0;
  double bias = 0.0;
};

enum class SecondStage { posterior_sample, posterior_mean };

struct MseBoundResult {
  double first_stage_mse = 0;
  double refined_mse = 0;
  double ratio = 0;
};

inline MseBoundResult mse_bound_check(const MseToyModel& m, SecondStage stage, std::size_t trials,
                                      SeededStream stream) {
  if (!(m.noise_var >= 0)) throw std::invalid_argument("mse_bound_check: noise_var must be >= 0");
  if (trials == 0) throw std::invalid_argument("mse_bound_check: trials must be > 0");
  const double shrink = 1.0 / (1.0 + m.noise_var);
  const double post_sd = std::sqrt(m.noise_var * shrink);
  double e1 = 0, e2 = 0;
  for (std::size_t i = 0; i < trials; ++i) {
    const double x = stream.normal();
    const double y = x + std::sqrt(m.noise_var) * stream.normal();
    const double mean = shrink * y;
    const double first = mean + m.bias;
    const double refined = stage == SecondStage::posterior_sample ? mean + post_sd * stream.normal() : mean;
    e1 += (first - x) * (first - x);
    e2 += (refined - x) * (refined - x);
  }
  if (e1 == 0.0) throw std::invalid_argument("mse_bound_check: first-stage MSE is zero");
  return {e1 / trials, e2 / trials, e2 / e1};
}

// --- report ---

struct EvalItem {
  std::string id;
  ImageBuffer original;
  ImageBuffer reconstruction;
  std::optional<std::vector<std::uint8_t>> bitstream;
};

struct EvalRow {
  std::string id;
  std::optional<double> bpp;
  std::optional<double> psnr_mse_stage;
  double psnr_refined = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::optional<double> frechet;  // absent with fewer than 2 patches
  int skipped_patches = 0;
  std::size_t patch_count = 0;
};

inline EvalReport evaluate(const std::vector<EvalItem>& items, const FeatureExtractor& fx = gray8_features) {
  EvalReport rep;
  std::vector<ImageBuffer> orig, rec;
  for (const auto& it : items) {
    if (!it.original.same_shape(it.reconstruction))
      throw DataError("eval: " + it.id + ": reconstruction shape " + shape_string(it.reconstruction) +
                      " does not match original " + shape_string(it.original));
    EvalRow row{it.id, std::nullopt, std::nullopt, psnr(it.original, it.reconstruction)};
    if (it.bitstream) {
      row.bpp = codec::bpp(it.bitstream->size(), it.original.width, it.original.height);
      const ImageBuffer stage_one = codec::decode(*it.bitstream);
      if (!stage_one.same_shape(it.original)) throw DataError("eval: " + it.id + ": bitstream dimensions differ");
      row.psnr_mse_stage = psnr(it.original, stage_one);
    }
    rep.rows.push_back(row);
    orig.push_back(it.original);
    rec.push_back(it.reconstruction);
  }
  const PatchSet po = patchify(orig), pr = patchify(rec);
  rep.skipped_patches = po.skipped;
  rep.patch_count = po.patches.size();
  if (po.patches.size() >= 2) rep.frechet = frechet_distance(feature_stats(po.patches, fx), feature_stats(pr.patches, fx));
  return rep;
}

inline std::string format_number(std::optional<double> v) {
  if (!v) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

// image_id,bpp,psnr_mse_stage,psnr_refined,frechet_distance
// One row per image, then a "summary" row with the means and the corpus
// Frechet distance. Absent values are empty fields.
inline std::string to_csv(const EvalReport& rep) {
  std::ostringstream os;
  os << "image_id,bpp,psnr_mse_stage,psnr_refined,frechet_distance\n";
  auto mean_of = [&](auto get) -> std::optional<double> {
    double s = 0;
    std::size_t n = 0;
    for (const auto& r : rep.rows)
      if (auto v = get(r)) {
        s += *v;
        ++n;
      }
    if (n == 0) return std::nullopt;
    return s / static_cast<double>(n);
  };
  for (const auto& r : rep.rows)
    os << r.id << ',' << format_number(r.bpp) << ',' << format_number(r.psnr_mse_stage) << ','
       << format_number(r.psnr_refined) << ",\n";
  os << "summary," << format_number(mean_of([](const EvalRow& r) { return r.bpp; })) << ','
     << format_number(mean_of([](const EvalRow& r) { return r.psnr_mse_stage; })) << ','
     << format_number(mean_of([](const EvalRow& r) { return std::optional<double>(r.psnr_refined); })) << ','
     << format_number(rep.frechet) << '\n';
  return os.str();
}

}  // namespace hfd::eval

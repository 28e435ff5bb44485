#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <fftw3.h>

#include "crdiff/patterns.hpp"
#include "crdiff/tensor.hpp"

namespace crdiff {

inline constexpr int kFeatureDim = 8;

/// mean, variance, horizontal and vertical gradient energy, four radial spectrum bands.
using FeatureVector = std::array<double, kFeatureDim>;

inline constexpr std::array<double, 4> kBandEdges = {0.25, 0.5, 0.75, 1e9};  // fractions of Nyquist

namespace detail {

inline std::mutex& fftw_plan_mutex() {
  static std::mutex m;
  return m;
}

/// |F(ky,kx)|^2 of a real H x W image via FFTW.
inline std::vector<double> power_spectrum(std::span<const float> img, int H, int W) {
  const std::size_t n = static_cast<std::size_t>(H) * W;
  fftw_complex* buf = fftw_alloc_complex(n);
  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lock(fftw_plan_mutex());
    plan = fftw_plan_dft_2d(H, W, buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
  }
  for (std::size_t i = 0; i < n; ++i) {
    buf[i][0] = img[i];
    buf[i][1] = 0.0;
  }
  fftw_execute(plan);
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = buf[i][0] * buf[i][0] + buf[i][1] * buf[i][1];
  {
    std::lock_guard<std::mutex> lock(fftw_plan_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(buf);
  return p;
}

}  // namespace detail

/**
 * Size-normalised handcrafted features of a (1,H,W) or (H,W) image.
 * Gradient energies are mean squared neighbour differences scaled by
 * extent/16; band energies are Parseval-normalised (they sum to the variance).
 */
inline FeatureVector features(const Tensor& image) {
  const int H = image.dim(image.rank() - 2), W = image.dim(image.rank() - 1);
  if (H < 8 || W < 8) throw InputError("features: image must be at least 8x8");
  const std::size_t n = static_cast<std::size_t>(H) * W;
  if (image.size() != n) throw InputError("features: expected a single-channel image");
  FeatureVector f{};
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += image[i];
  const double mean = s / static_cast<double>(n);
  double v = 0;
  for (std::size_t i = 0; i < n; ++i) v += (image[i] - mean) * (image[i] - mean);
  f[0] = mean;
  f[1] = v / static_cast<double>(n);

  double gh = 0, gv = 0;
  for (int i = 0; i < H; ++i)
    for (int j = 0; j + 1 < W; ++j) {
      const double d = static_cast<double>(image[static_cast<std::size_t>(i) * W + j + 1]) - image[static_cast<std::size_t>(i) * W + j];
      gh += d * d;
    }
  for (int i = 0; i + 1 < H; ++i)
    for (int j = 0; j < W; ++j) {
      const double d = static_cast<double>(image[static_cast<std::size_t>(i + 1) * W + j]) - image[static_cast<std::size_t>(i) * W + j];
      gv += d * d;
    }
  f[2] = gh / (static_cast<double>(H) * (W - 1)) * (W / 16.0);
  f[3] = gv / (static_cast<double>(H - 1) * W) * (H / 16.0);

  const auto power = detail::power_spectrum(image.data(), H, W);
  const double norm = static_cast<double>(n) * static_cast<double>(n);
  for (int ky = 0; ky < H; ++ky)
    for (int kx = 0; kx < W; ++kx) {
      if (ky == 0 && kx == 0) continue;
      const double fy = 2.0 * (ky <= H / 2 ? ky : ky - H) / H;
      const double fx = 2.0 * (kx <= W / 2 ? kx : kx - W) / W;
      const double r = std::sqrt(fy * fy + fx * fx);
      std::size_t band = 0;
      while (r >= kBandEdges[band]) ++band;
      f[4 + band] += power[static_cast<std::size_t>(ky) * W + kx] / norm;
    }
  return f;
}

struct Gaussian8 {
  Eigen::Matrix<double, kFeatureDim, 1> mean;
  Eigen::Matrix<double, kFeatureDim, kFeatureDim> cov;
};

inline Gaussian8 fit_gaussian(std::span<const FeatureVector> set) {
  if (set.size() < 16) throw InputError("frechet_distance: each set needs at least 16 feature vectors");
  Gaussian8 g;
  g.mean.setZero();
  for (const auto& f : set) g.mean += Eigen::Map<const Eigen::Matrix<double, kFeatureDim, 1>>(f.data());
  g.mean /= static_cast<double>(set.size());
  g.cov.setZero();
  for (const auto& f : set) {
    const auto d = Eigen::Map<const Eigen::Matrix<double, kFeatureDim, 1>>(f.data()) - g.mean;
    g.cov += d * d.transpose();
  }
  g.cov /= static_cast<double>(set.size() - 1);
  return g;
}

/// PSD square root through a symmetric eigendecomposition, negative eigenvalues clamped to 0.
template <typename Mat>
Mat psd_sqrt(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (m + m.transpose()));
  auto ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

/// Squared Frechet distance between Gaussians: |mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}).
inline double frechet_distance(const Gaussian8& a, const Gaussian8& b) {
  using Mat = Eigen::Matrix<double, kFeatureDim, kFeatureDim>;
  const Mat ra = psd_sqrt(a.cov);
  const Mat inner = ra * b.cov * ra;
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d2 = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
  return std::max(d2, 0.0);
}

inline double frechet_distance(std::span<const FeatureVector> a, std::span<const FeatureVector> b) {
  return frechet_distance(fit_gaussian(a), fit_gaussian(b));
}

// ---------------------------------------------------------------------------
// pattern score

namespace detail {

// Which rows form half `part` (0/1) of the image; part < 0 means every row.
// Periodic classes split into top/bottom halves so each half spans whole
// periods; radial classes interleave rows to keep the profile symmetric.
struct RowSplit {
  int H = 0;
  int part = -1;
  bool interleaved = false;
  bool used(int i) const {
    if (part < 0) return true;
    return interleaved ? i % 2 == part : (i < H / 2) == (part == 0);
  }
};

// Pearson correlation over the used rows; 0 if either side is constant there.
inline double correlation(std::span<const float> a, std::span<const float> b, int H, int W, RowSplit rows) {
  double ma = 0, mb = 0, n = 0;
  for (int i = 0; i < H; ++i) {
    if (!rows.used(i)) continue;
    for (int j = 0; j < W; ++j) {
      ma += a[static_cast<std::size_t>(i) * W + j];
      mb += b[static_cast<std::size_t>(i) * W + j];
      n += 1;
    }
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (int i = 0; i < H; ++i) {
    if (!rows.used(i)) continue;
    for (int j = 0; j < W; ++j) {
      const double da = a[static_cast<std::size_t>(i) * W + j] - ma, db = b[static_cast<std::size_t>(i) * W + j] - mb;
      sab += da * db;
      saa += da * da;
      sbb += db * db;
    }
  }
  if (saa <= 1e-20 || sbb <= 1e-20) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

// Sum of x * exp(-2 pi i (fu * u + fv * v)) over pixel centres u = (j+0.5)/W, v = (i+0.5)/H.
inline std::complex<double> fourier_coefficient(std::span<const float> x, int H, int W, double fu, double fv,
                                                RowSplit rows) {
  std::complex<double> acc = 0;
  for (int i = 0; i < H; ++i) {
    if (!rows.used(i)) continue;
    for (int j = 0; j < W; ++j) {
      const double ph = -2.0 * std::numbers::pi * (fu * (j + 0.5) / W + fv * (i + 0.5) / H);
      acc += static_cast<double>(x[static_cast<std::size_t>(i) * W + j]) * std::complex<double>(std::cos(ph), std::sin(ph));
    }
  }
  return acc;
}

}  // namespace detail

inline constexpr double kRefineStep = 0.25;  // pixels

/// Candidate offsets for this class (as used by render_with_phase), estimated from the used rows.
inline std::vector<PatternPhase> initial_phases(const Tensor& image, const PatternClass& cls, int H, int W,
                                                detail::RowSplit rows = {}) {
  const auto x = image.data();
  constexpr double pi = std::numbers::pi;
  switch (cls.id) {
    case PatternId::stripes: {
      // sq(2u/p + du) has fundamental sin(2 pi u / p + pi du)
      const auto c = detail::fourier_coefficient(x, H, W, 1.0 / cls.scale, 0.0, rows);
      return {{std::arg(c) / pi + 0.5, 0.0}};
    }
    case PatternId::checkerboard: {
      // sq(u/s + du) sq(v/s + dv) ~ 1/2 [cos(pi(u-v)/s + pi(du-dv)) - cos(pi(u+v)/s + pi(du+dv))]
      const double f = 0.5 / cls.scale;
      const auto cp = detail::fourier_coefficient(x, H, W, f, f, rows);
      const auto cm = detail::fourier_coefficient(x, H, W, f, -f, rows);
      const double sum = (std::arg(cp) + pi) / pi;
      const double diff = std::arg(cm) / pi;
      const double du = 0.5 * (sum + diff), dv = 0.5 * (sum - diff);
      return {{du, dv}, {du + 1.0, dv}};  // second one is the sign-flipped pattern
    }
    case PatternId::radial_blob:
    case PatternId::ring: {
      double sw = 0, su = 0, sv = 0;
      for (int i = 0; i < H; ++i) {
        if (!rows.used(i)) continue;
        for (int j = 0; j < W; ++j) {
          const double w = std::max(0.0, (x[static_cast<std::size_t>(i) * W + j] + 1.0) * 0.5);
          sw += w;
          su += w * (j + 0.5) / W;
          sv += w * (i + 0.5) / H;
        }
      }
      if (sw <= 0) return {{0.0, 0.0}};
      return {{su / sw - (W / 2 + 0.5) / W, sv / sw - (H / 2 + 0.5) / H}};
    }
  }
  return {{0.0, 0.0}};
}

/**
 * Normalised correlation between an image and the best-matching offset
 * template of its class, clamped to [-1, 1].
 *
 * The offset is fitted on one half of the rows (Fourier phase for periodic
 * classes, centroid for radial ones, then the best of a 3x3 grid of quarter
 * pixel shifts) and the correlation is measured on the other half; the two
 * cross-fitted directions are averaged. Fitting and scoring on disjoint pixels
 * keeps the score of pure noise centred on zero.
 */
inline double pattern_score(const Tensor& image, const PatternClass& cls) {
  if (static_cast<int>(cls.id) < 0 || static_cast<int>(cls.id) >= kNumPatternClasses)
    throw InputError("pattern_score: unknown class");
  const int H = image.dim(image.rank() - 2), W = image.dim(image.rank() - 1);
  if (image.size() != static_cast<std::size_t>(H) * W) throw InputError("pattern_score: expected a single-channel image");
  if (H < 4) throw InputError("pattern_score: image too small");
  // one pixel expressed in offset units, per axis
  double px_u, px_v;
  switch (cls.id) {
    case PatternId::checkerboard: px_u = 1.0 / (W * cls.scale); px_v = 1.0 / (H * cls.scale); break;
    case PatternId::stripes: px_u = 2.0 / (W * cls.scale); px_v = 0.0; break;
    default: px_u = 1.0 / W; px_v = 1.0 / H; break;
  }
  const bool interleaved = cls.id == PatternId::radial_blob || cls.id == PatternId::ring;
  double total = 0;
  for (int fit = 0; fit < 2; ++fit) {
    const detail::RowSplit fit_rows{H, fit, interleaved}, score_rows{H, 1 - fit, interleaved};
    double best = -2.0;
    Tensor best_template;
    for (PatternPhase start : initial_phases(image, cls, H, W, fit_rows))
      for (int a = -1; a <= 1; ++a)
        for (int b = -1; b <= 1; ++b) {
          if (px_v == 0.0 && b != 0) continue;
          Tensor tmpl = render_with_phase(cls, H, W, {start.du + a * kRefineStep * px_u, start.dv + b * kRefineStep * px_v});
          const double s = detail::correlation(image.data(), tmpl.data(), H, W, fit_rows);
          if (s > best) {
            best = s;
            best_template = std::move(tmpl);
          }
        }
    total += detail::correlation(image.data(), best_template.data(), H, W, score_rows);
  }
  return std::clamp(0.5 * total, -1.0, 1.0);
}

}  // namespace crdiff

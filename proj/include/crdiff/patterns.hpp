#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "crdiff/random.hpp"
#include "crdiff/tensor.hpp"

namespace crdiff {

enum class PatternId : int { checkerboard = 0, stripes = 1, radial_blob = 2, ring = 3 };

inline constexpr int kNumPatternClasses = 4;
inline constexpr double kRingWidth = 0.08;     // radial profile width of the ring, fraction of extent
inline constexpr double kRadialCentre = 17.0 / 32;
inline constexpr double kCentreJitter = 0.25;  // blob/ring centre offset at jitter 1, fraction of extent

inline std::string_view to_string(PatternId id) {
  switch (id) {
    case PatternId::checkerboard: return "checkerboard";
    case PatternId::stripes: return "stripes";
    case PatternId::radial_blob: return "radial-blob";
    case PatternId::ring: return "ring";
  }
  return "?";
}

inline PatternId parse_pattern(std::string_view s) {
  for (int i = 0; i < kNumPatternClasses; ++i)
    if (to_string(static_cast<PatternId>(i)) == s) return static_cast<PatternId>(i);
  throw InputError("unknown pattern class '" + std::string(s) + "'");
}

inline PatternId pattern_from_int(int id) {
  if (id < 0 || id >= kNumPatternClasses) throw InputError("unknown pattern class id " + std::to_string(id));
  return static_cast<PatternId>(id);
}

/**
 * A pattern family. `scale` is in fractions of the grid extent:
 * checkerboard cell size, stripe period, blob sigma, ring radius.
 */
struct PatternClass {
  PatternId id = PatternId::checkerboard;
  double scale = 0.25;

  static PatternClass standard(PatternId id) {
    switch (id) {
      case PatternId::checkerboard: return {id, 0.25};
      case PatternId::stripes: return {id, 0.5};
      case PatternId::radial_blob: return {id, 0.2};
      case PatternId::ring: return {id, 0.3};
    }
    throw InputError("unknown pattern class");
  }
  static PatternClass standard(int id) { return standard(pattern_from_int(id)); }
};

/// Per-sample geometry offsets. Periodic classes use phases (in half-periods), radial classes centre offsets.
struct PatternPhase {
  double du = 0;
  double dv = 0;
};

namespace detail {

// Antiderivative of the +-1 square wave that is +1 on [0,1) and -1 on [1,2).
inline double square_antiderivative(double z) {
  const double m = z - 2.0 * std::floor(z / 2.0);
  return m < 1.0 ? m : 2.0 - m;
}

// Mean of the square wave over [a, b].
inline double square_mean(double a, double b) { return (square_antiderivative(b) - square_antiderivative(a)) / (b - a); }

}  // namespace detail

/**
 * Renders a class at (H, W) with explicit offsets. Hard-edged periodic
 * classes are box-filtered exactly over each pixel so 2x averaging of a
 * rendering matches the rendering at half the size. Radial classes are
 * point-sampled around a fixed fractional centre, kRadialCentre, which is
 * a pixel centre at 16x16.
 */
inline Tensor render_with_phase(const PatternClass& cls, int H, int W, PatternPhase ph) {
  if (H < 8 || W < 8) throw InputError("pattern grids must be at least 8x8");
  if (!(cls.scale > 0)) throw InputError("pattern scale must be positive");
  Tensor img({1, H, W});
  switch (cls.id) {
    case PatternId::checkerboard: {
      // z = u / cell; the square wave has period 2 in z
      std::vector<double> col(static_cast<std::size_t>(W)), row(static_cast<std::size_t>(H));
      for (int j = 0; j < W; ++j)
        col[j] = detail::square_mean(static_cast<double>(j) / W / cls.scale + ph.du,
                                     static_cast<double>(j + 1) / W / cls.scale + ph.du);
      for (int i = 0; i < H; ++i)
        row[i] = detail::square_mean(static_cast<double>(i) / H / cls.scale + ph.dv,
                                     static_cast<double>(i + 1) / H / cls.scale + ph.dv);
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) img[static_cast<std::size_t>(i) * W + j] = static_cast<float>(row[i] * col[j]);
      break;
    }
    case PatternId::stripes: {
      for (int j = 0; j < W; ++j) {
        const double v = detail::square_mean(2.0 * j / W / cls.scale + ph.du, 2.0 * (j + 1) / W / cls.scale + ph.du);
        for (int i = 0; i < H; ++i) img[static_cast<std::size_t>(i) * W + j] = static_cast<float>(v);
      }
      break;
    }
    case PatternId::radial_blob:
    case PatternId::ring: {
      const double cu = kRadialCentre + ph.du;
      const double cv = kRadialCentre + ph.dv;
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const double u = (j + 0.5) / W - cu, v = (i + 0.5) / H - cv;
          const double r = std::sqrt(u * u + v * v);
          double g;
          if (cls.id == PatternId::radial_blob)
            g = std::exp(-r * r / (2 * cls.scale * cls.scale));
          else
            g = std::exp(-(r - cls.scale) * (r - cls.scale) / (2 * kRingWidth * kRingWidth));
          img[static_cast<std::size_t>(i) * W + j] = static_cast<float>(2 * g - 1);
        }
      break;
    }
  }
  return img;
}

/// Offsets at jitter `j` for unit draws (a, b) in [-1, 1].
inline PatternPhase phase_for(PatternId id, double a, double b, double jitter) {
  switch (id) {
    case PatternId::checkerboard:
    case PatternId::stripes:
      return {2.0 * jitter * a, 2.0 * jitter * b};  // up to one full period at jitter 0.5
    case PatternId::radial_blob:
    case PatternId::ring:
      return {kCentreJitter * jitter * a, kCentreJitter * jitter * b};
  }
  return {};
}

struct Sample {
  Tensor image;  // (1, H, W), values in [-1, 1]
  int label = 0;
  std::uint64_t seed = 0;
};

inline Sample render(const PatternClass& cls, std::uint64_t seed, int H, int W, double jitter = 0.25) {
  if (!(jitter >= 0.0 && jitter <= 0.5)) throw InputError("jitter must lie in [0, 0.5]");
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(cls.id)));
  std::uniform_real_distribution<double> ud(-1.0, 1.0);
  const double a = ud(rng);
  const double b = ud(rng);
  return Sample{render_with_phase(cls, H, W, phase_for(cls.id, a, b, jitter)), static_cast<int>(cls.id), seed};
}

/// Class-balanced, class-major list of samples; sample k of class c uses seed mix(seed, c, k).
inline std::vector<Sample> make_dataset(const std::vector<PatternClass>& classes, int n_per_class, int H, int W,
                                        std::uint64_t seed, double jitter = 0.25) {
  if (n_per_class < 1) throw InputError("n_per_class must be >= 1");
  std::vector<Sample> out;
  out.reserve(classes.size() * static_cast<std::size_t>(n_per_class));
  for (const auto& cls : classes)
    for (int k = 0; k < n_per_class; ++k)
      out.push_back(render(cls, mix_seed(seed, static_cast<std::uint64_t>(cls.id), static_cast<std::uint64_t>(k)), H, W,
                           jitter));
  return out;
}

inline std::vector<PatternClass> standard_classes(const std::vector<int>& ids) {
  std::vector<PatternClass> out;
  for (int id : ids) out.push_back(PatternClass::standard(id));
  return out;
}

inline std::vector<PatternClass> all_standard_classes() { return standard_classes({0, 1, 2, 3}); }

}  // namespace crdiff

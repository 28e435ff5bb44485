#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "crdiff/diffusion.hpp"
#include "crdiff/prune.hpp"
#include "crdiff/unet.hpp"

namespace crdiff {

/// Which per-step prediction is mixed.
enum class PoaTarget { eps, x0 };

inline std::string_view to_string(PoaTarget t) { return t == PoaTarget::eps ? "eps" : "x0"; }

inline PoaTarget parse_poa_target(std::string_view s) {
  if (s == "eps") return PoaTarget::eps;
  if (s == "x0") return PoaTarget::x0;
  throw InputError("unknown poa target '" + std::string(s) + "' (expected eps or x0)");
}

struct PoaConfig {
  double k = 1.5;
  PoaTarget target = PoaTarget::eps;
};

inline void validate(const PoaConfig& cfg) {
  if (!(cfg.k >= 0.0) || !std::isfinite(cfg.k)) throw InputError("poa k must be finite and >= 0");
}

/// Per-step spread between the pruned and dense predictions.
struct DivergenceRow {
  int t = 0;
  double mean_abs = 0;
  double max_abs = 0;
};

struct PoaStats {
  std::atomic<long> forwards{0};
  std::atomic<long> steps{0};
  std::vector<DivergenceRow> divergence;  // filled by the sampler, one row per step
};

/// k * p + (1 - k) * d, computed as d + k (p - d). k = 0 and k = 1 return d and p unchanged.
inline Tensor poa_mix(const Tensor& pruned, const Tensor& dense, double k) {
  if (pruned.shape() != dense.shape()) throw InputError("poa_mix: shape mismatch");
  if (k == 0.0) return dense;
  if (k == 1.0) return pruned;
  Tensor out(dense.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = dense[i];
    out[i] = static_cast<float>(d + k * (static_cast<double>(pruned[i]) - d));
  }
  return out;
}

namespace detail {

inline Tensor eps_to_x0(const Tensor& x_t, const Tensor& eps, double ab) {
  Tensor out(x_t.shape());
  const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>((x_t[i] - s * eps[i]) / a);
  return out;
}

inline Tensor x0_to_eps(const Tensor& x_t, const Tensor& x0, double ab) {
  Tensor out(x_t.shape());
  const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>((x_t[i] - a * x0[i]) / s);
  return out;
}

}  // namespace detail

/// Mixes two noise predictions at step t according to cfg; returns a noise prediction.
inline Tensor poa_combine(const Tensor& eps_pruned, const Tensor& eps_dense, const Tensor& x_t, int t,
                          const NoiseSchedule& sched, const PoaConfig& cfg) {
  if (cfg.target == PoaTarget::eps || cfg.k == 0.0 || cfg.k == 1.0) return poa_mix(eps_pruned, eps_dense, cfg.k);
  const double ab = sched.alpha_bar(t);
  const Tensor x0 = poa_mix(detail::eps_to_x0(x_t, eps_pruned, ab), detail::eps_to_x0(x_t, eps_dense, ab), cfg.k);
  return detail::x0_to_eps(x_t, x0, ab);
}

inline DivergenceRow divergence(const Tensor& a, const Tensor& b, int t) {
  DivergenceRow r{t, 0.0, 0.0};
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(static_cast<double>(a[i]) - b[i]);
    r.mean_abs += d;
    r.max_abs = std::max(r.max_abs, d);
  }
  if (a.size() > 0) r.mean_abs /= static_cast<double>(a.size());
  return r;
}

/// One dense and one masked forward, mixed with coefficient k on the noise prediction.
inline Tensor poa_predict(const ParameterStore& params, const PruneMask& mask, double k, const Tensor& x_t,
                          std::span<const int> t, std::span<const int> c, PoaStats* stats = nullptr) {
  validate(PoaConfig{k, PoaTarget::eps});
  Tensor dense = unet_forward(params, x_t, t, c, nullptr);
  Tensor pruned = unet_forward(params, x_t, t, c, &mask);
  if (stats) stats->forwards += 2;
  return poa_mix(pruned, dense, k);
}

/// Noise predictor for the sampler: two forwards per step, mixed per cfg, divergence logged into stats.
inline EpsFn poa_eps(const ParameterStore& params, const PruneMask& mask, const NoiseSchedule& sched,
                     const PoaConfig& cfg, PoaStats* stats = nullptr) {
  validate(cfg);
  check_mask_matches(params, mask);
  return [&params, &mask, &sched, cfg, stats](const Tensor& x, int t, std::span<const int> c) {
    std::vector<int> ts(c.size(), t);
    Tensor dense = unet_forward(params, x, ts, c, nullptr);
    Tensor pruned = unet_forward(params, x, ts, c, &mask);
    if (stats) {
      stats->forwards += 2;
      stats->steps += 1;
      stats->divergence.push_back(divergence(pruned, dense, t));
    }
    return poa_combine(pruned, dense, x, t, sched, cfg);
  };
}

/// Ancestral sampling with the mixed prediction at every step.
inline Tensor poa_sample(const ParameterStore& params, const NoiseSchedule& sched, const PruneMask& mask,
                         const PoaConfig& cfg, int n, std::span<const int> classes, int H, int W, std::uint64_t seed,
                         PoaStats* stats = nullptr) {
  return sample(sched, n, classes, H, W, seed, poa_eps(params, mask, sched, cfg, stats));
}

}  // namespace crdiff

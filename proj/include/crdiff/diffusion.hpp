#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "crdiff/autograd.hpp"
#include "crdiff/patterns.hpp"
#include "crdiff/random.hpp"
#include "crdiff/unet.hpp"

namespace crdiff {

/// Linear-beta DDPM schedule. Timesteps are 1-based: beta(1) .. beta(T).
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;       // [T]
  std::vector<double> alpha_bars;  // [T], cumulative products of (1 - beta)

  double beta(int t) const { return betas.at(static_cast<std::size_t>(index(t))); }
  double alpha(int t) const { return 1.0 - beta(t); }
  double alpha_bar(int t) const { return alpha_bars.at(static_cast<std::size_t>(index(t))); }

 private:
  int index(int t) const {
    if (t < 1 || t > T) throw InputError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
    return t - 1;
  }
};

inline NoiseSchedule schedule_from_betas(std::vector<double> betas) {
  if (betas.size() < 2) throw InputError("schedule needs at least 2 steps");
  NoiseSchedule s;
  s.T = static_cast<int>(betas.size());
  double ab = 1.0;
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw InputError("every beta must lie in (0, 1)");
    ab *= 1.0 - b;
    s.alpha_bars.push_back(ab);
  }
  s.betas = std::move(betas);
  return s;
}

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 2) throw InputError("schedule needs T >= 2");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw InputError("schedule needs 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * i / (T - 1);
  return schedule_from_betas(std::move(betas));
}

/// x_t = sqrt(ab) x0 + sqrt(1 - ab) eps for an explicit alpha-bar value.
template <typename T>
BasicTensor<T> q_sample_ab(const BasicTensor<T>& x0, double alpha_bar, const BasicTensor<T>& eps) {
  if (x0.shape() != eps.shape())
    throw InputError("q_sample: noise shape " + shape_str(eps.shape()) + " != " + shape_str(x0.shape()));
  const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
  BasicTensor<T> out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(a * x0[i] + b * eps[i]);
  return out;
}

template <typename T>
BasicTensor<T> q_sample(const BasicTensor<T>& x0, int t, const BasicTensor<T>& eps, const NoiseSchedule& sched) {
  return q_sample_ab(x0, sched.alpha_bar(t), eps);
}

/// One noised training batch: shared-extent samples, per-sample t and eps.
struct NoisedBatch {
  Tensor x_t;  // (N,1,H,W)
  Tensor eps;  // (N,1,H,W)
  std::vector<int> t;
  std::vector<int> c;
};

/// t ~ U{1..T} and eps ~ N(0, I) per sample, all drawn from `seed`.
inline NoisedBatch make_noised_batch(std::span<const Sample* const> batch, const NoiseSchedule& sched,
                                     std::uint64_t seed) {
  if (batch.empty()) throw InputError("loss batch must be non-empty");
  const int N = static_cast<int>(batch.size());
  const int H = batch[0]->image.dim(1), W = batch[0]->image.dim(2);
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  NoisedBatch nb{Tensor({N, 1, H, W}), Tensor({N, 1, H, W}), std::vector<int>(N), std::vector<int>(N)};
  Rng rng(seed);
  std::uniform_int_distribution<int> td(1, sched.T);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int n = 0; n < N; ++n) {
    const Sample& s = *batch[static_cast<std::size_t>(n)];
    if (s.image.dim(1) != H || s.image.dim(2) != W) throw InputError("loss batch mixes grid sizes");
    nb.t[n] = td(rng);
    nb.c[n] = s.label;
    const double ab = sched.alpha_bar(nb.t[n]);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    for (std::size_t i = 0; i < hw; ++i) {
      const float e = static_cast<float>(nd(rng));
      nb.eps[n * hw + i] = e;
      nb.x_t[n * hw + i] = static_cast<float>(a * s.image[i] + b * e);
    }
  }
  return nb;
}

/**
 * Records the denoising objective mean ||eps - eps_theta(x_t, t, c)||^2 on
 * `tape` and returns the scalar loss. Deterministic in `seed`.
 */
inline Var<float> diffusion_loss(Tape<float>& tape, const ParameterStore& params, std::span<const Sample* const> batch,
                                 const NoiseSchedule& sched, std::uint64_t seed) {
  NoisedBatch nb = make_noised_batch(batch, sched, seed);
  Var<float> x = tape.constant(std::move(nb.x_t));
  Var<float> target = tape.constant(std::move(nb.eps));
  Var<float> pred = unet_graph(tape, params, nullptr, x, nb.t, nb.c);
  return ops::mse(pred, target);
}

struct TrainConfig {
  int epochs = 30;
  int batch = 32;
  double lr = 0.5;
  std::uint64_t seed = 0;
  double grad_clip = 1.0;  // global-norm clip; 0 disables
};

struct LossRow {
  int epoch = 0;
  int step = 0;
  double loss = 0;
};

/// Scales every gradient so the global L2 norm is at most max_norm. Returns the pre-clip norm.
template <typename T>
double clip_grad_norm(GradMap<T>& grads, double max_norm) {
  double sq = 0;
  for (const auto& [name, g] : grads)
    for (std::size_t i = 0; i < g.size(); ++i) sq += static_cast<double>(g[i]) * g[i];
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [name, g] : grads)
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<T>(g[i] * s);
  }
  return norm;
}

/**
 * Plain minibatch SGD on the denoising objective. Runs epochs
 * [params.epochs_done, cfg.epochs); epoch e shuffles with mix(seed, e) and
 * step s draws its noise from mix(seed, e, s), so a resumed run reproduces an
 * uninterrupted one exactly.
 */
inline std::vector<LossRow> train(ParameterStore& params, const std::vector<Sample>& dataset, const NoiseSchedule& sched,
                                  const TrainConfig& cfg, const std::function<void(const LossRow&)>& on_step = {}) {
  if (cfg.batch < 1) throw InputError("batch size must be positive");
  if (!(cfg.lr >= 0)) throw InputError("learning rate must be non-negative");
  if (cfg.epochs < 0) throw InputError("epochs must be non-negative");
  if (dataset.empty() && cfg.epochs > params.epochs_done) throw InputError("training dataset is empty");
  std::vector<LossRow> rows;
  std::vector<std::size_t> order(dataset.size());
  for (int epoch = params.epochs_done; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    int step = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch), ++step) {
      std::vector<const Sample*> batch;
      for (std::size_t k = start; k < std::min(order.size(), start + static_cast<std::size_t>(cfg.batch)); ++k)
        batch.push_back(&dataset[order[k]]);
      Tape<float> tape;
      Var<float> loss = diffusion_loss(tape, params, batch, sched,
                                       mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(step)));
      const double value = tape.value(loss)[0];
      if (!std::isfinite(value)) throw NumericalError("training loss became non-finite at epoch " + std::to_string(epoch));
      GradMap<float> grads = tape.backward(loss);
      clip_grad_norm(grads, cfg.grad_clip);
      sgd_update(params, grads, cfg.lr, nullptr);
      LossRow row{epoch, step, value};
      rows.push_back(row);
      if (on_step) on_step(row);
    }
    params.epochs_done = epoch + 1;
  }
  return rows;
}

// ---------------------------------------------------------------------------
// reverse process

/// x_{t-1} = (x_t - beta_t / sqrt(1 - ab_t) * eps_hat) / sqrt(alpha_t) + sqrt(beta_t) * noise; no noise at t = 1.
inline Tensor ddpm_step(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched, const Tensor& noise) {
  if (x_t.shape() != eps_hat.shape() || x_t.shape() != noise.shape())
    throw InputError("ddpm_step: x_t, eps_hat and noise must share a shape");
  const double beta = sched.beta(t);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
  const double eps_coef = beta / std::sqrt(1.0 - sched.alpha_bar(t));
  const double sigma = t > 1 ? std::sqrt(beta) : 0.0;
  Tensor out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = inv_sqrt_alpha * (x_t[i] - eps_coef * eps_hat[i]);
    if (t > 1) v += sigma * noise[i];
    out[i] = static_cast<float>(v);
  }
  return out;
}

/// Noise prediction seam: (x_t, t, class ids) -> eps_hat with the shape of x_t.
using EpsFn = std::function<Tensor(const Tensor& x_t, int t, std::span<const int> classes)>;

/**
 * Random stream of chain i: H*W normals for x_T, then H*W normals for each
 * step t = T..2 in order.
 */
inline Rng chain_rng(std::uint64_t seed, int i) { return Rng(mix_seed(seed, 0x5A3D1E, static_cast<std::uint64_t>(i))); }

/// Ancestral T-step chain for n images from seeded Gaussian noise. Returns (n,1,H,W).
inline Tensor sample(const NoiseSchedule& sched, int n, std::span<const int> classes, int H, int W, std::uint64_t seed,
                     const EpsFn& eps_fn) {
  if (n < 0) throw InputError("sample count must be non-negative");
  if (classes.size() != static_cast<std::size_t>(n)) throw InputError("need one class id per image");
  unet::check_extents(H, W);
  Tensor x({n, 1, H, W});
  if (n == 0) return x;
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  std::vector<Rng> rngs;
  std::vector<std::normal_distribution<double>> nds(static_cast<std::size_t>(n));
  rngs.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    rngs.push_back(chain_rng(seed, i));
    for (std::size_t k = 0; k < hw; ++k) x[i * hw + k] = static_cast<float>(nds[i](rngs.back()));
  }
  Tensor noise(x.shape());
  for (int t = sched.T; t >= 1; --t) {
    Tensor eps = eps_fn(x, t, classes);
    if (eps.shape() != x.shape()) throw InputError("noise predictor returned shape " + shape_str(eps.shape()));
    if (t > 1) {
      for (int i = 0; i < n; ++i)
        for (std::size_t k = 0; k < hw; ++k) noise[i * hw + k] = static_cast<float>(nds[i](rngs[static_cast<std::size_t>(i)]));
    } else {
      std::fill(noise.data().begin(), noise.data().end(), 0.0f);
    }
    x = ddpm_step(x, eps, t, sched, noise);
    require_finite(x, "ddpm sampler");
  }
  return x;
}

/// Dense (mask == nullptr) or masked noise predictor over a store.
inline EpsFn model_eps(const ParameterStore& params, const PruneMask* mask = nullptr) {
  return [&params, mask](const Tensor& x, int t, std::span<const int> c) {
    std::vector<int> ts(c.size(), t);
    return unet_forward(params, x, ts, c, mask);
  };
}

}  // namespace crdiff

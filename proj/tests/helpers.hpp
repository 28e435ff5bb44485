#pragma once

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include <Eigen/Cholesky>

#include "crdiff/crdiff.hpp"

namespace testutil {

namespace fs = std::filesystem;
using namespace crdiff;

inline fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("crdiff_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

inline std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

template <typename T = float>
BasicTensor<T> randn(Shape s, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, sd);
  BasicTensor<T> t(std::move(s));
  for (auto& v : t.vec()) v = static_cast<T>(nd(rng));
  return t;
}

template <typename T>
void randomize(BasicTensor<T>& t, std::uint64_t seed, double sd) {
  t = randn<T>(t.shape(), seed, sd);
}

using DParams = std::map<std::string, BasicTensor<double>>;
using DVars = std::map<std::string, Var<double>>;
using LossBuilder = std::function<Var<double>(Tape<double>&, DVars&)>;

inline double loss_at(const DParams& p, const LossBuilder& build) {
  Tape<double> tape(false);
  DVars v;
  for (const auto& [k, t] : p) v[k] = tape.param(k, t);
  return tape.value(build(tape, v))[0];
}

// |analytic - numeric| / max(|analytic|, |numeric|, floor)
inline double rel_error(double a, double n, double floor = 1e-3) {
  return std::fabs(a - n) / std::max({std::fabs(a), std::fabs(n), floor});
}

/// Worst relative error of analytic vs central-difference gradients over `probes`
/// random entries per parameter (every entry when probes < 0).
inline double gradient_check(const DParams& params, const LossBuilder& build, double step, int probes,
                             std::uint64_t seed = 1) {
  Tape<double> tape;
  DVars v;
  for (const auto& [k, t] : params) v[k] = tape.param(k, t);
  const GradMap<double> g = tape.backward(build(tape, v));
  Rng rng(seed);
  double worst = 0;
  for (const auto& [name, t] : params) {
    std::vector<std::size_t> idx;
    if (probes < 0 || static_cast<std::size_t>(probes) >= t.size()) {
      for (std::size_t i = 0; i < t.size(); ++i) idx.push_back(i);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, t.size() - 1);
      for (int k = 0; k < probes; ++k) idx.push_back(pick(rng));
    }
    for (std::size_t i : idx) {
      DParams p = params;
      p[name][i] += step;
      const double up = loss_at(p, build);
      p[name][i] -= 2 * step;
      const double down = loss_at(p, build);
      const double numeric = (up - down) / (2 * step);
      worst = std::max(worst, rel_error(g.at(name)[i], numeric));
    }
  }
  return worst;
}

using Mat8 = Eigen::Matrix<double, 8, 8>;
using Vec8 = Eigen::Matrix<double, 8, 1>;

// computed offline with scipy.linalg.sqrtm for the two Gaussians built below
inline constexpr double kFrechetOracle = 3.690949702828611;

inline Gaussian8 banded(double rho, double s0, double ds, double mu_step) {
  Gaussian8 g;
  for (int a = 0; a < 8; ++a) {
    g.mean[a] = mu_step * a;
    for (int b = 0; b < 8; ++b) g.cov(a, b) = std::pow(rho, std::abs(a - b)) * (s0 + ds * a) * (s0 + ds * b);
  }
  return g;
}

inline std::vector<FeatureVector> draw(const Gaussian8& g, int n, std::uint64_t seed) {
  const Mat8 L = g.cov.llt().matrixL();
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<FeatureVector> out(static_cast<std::size_t>(n));
  for (auto& f : out) {
    Vec8 z;
    for (int k = 0; k < 8; ++k) z[k] = nd(rng);
    const Vec8 x = g.mean + L * z;
    for (int k = 0; k < 8; ++k) f[k] = x[k];
  }
  return out;
}

/// Small untrained denoiser with a randomised output conv so outputs depend on every layer.
inline ParameterStore small_unet(int width = 8, std::uint64_t seed = 5) {
  ParameterStore p = build_unet(width, seed, 16, 16);
  randomize(p.at("up.out_conv.weight"), seed + 100, 0.1);
  return p;
}

/// Worst relative FD error over `probes` random entries of every tensor of a double UNet, loss = mse(eps_hat, eps).
inline double unet_gradient_check(const BasicParameterStore<double>& store, int probes, double step, std::uint64_t seed,
                                  int* checked = nullptr) {
  const int H = store.arch().train_h, W = store.arch().train_w;
  const BasicTensor<double> x = randn<double>({2, 1, H, W}, seed + 1);
  const BasicTensor<double> eps = randn<double>({2, 1, H, W}, seed + 2);
  const std::vector<int> t{3, 41}, c{1, 2};
  auto loss = [&](const BasicParameterStore<double>& s, bool grad, GradMap<double>* g) {
    Tape<double> tape(grad);
    Var<double> l = ops::mse(unet_graph(tape, s, nullptr, tape.constant(x), t, c), tape.constant(eps));
    const double v = tape.value(l)[0];
    if (g) *g = tape.backward(l);
    return v;
  };
  GradMap<double> g;
  loss(store, true, &g);
  BasicParameterStore<double> work = store;
  Rng rng(seed);
  double worst = 0;
  int n = 0;
  for (auto& e : work.entries()) {
    std::uniform_int_distribution<std::size_t> pick(0, e.value.size() - 1);
    for (int k = 0; k < probes; ++k) {
      const std::size_t i = pick(rng);
      const double orig = e.value[i];
      e.value[i] = orig + step;
      const double up = loss(work, false, nullptr);
      e.value[i] = orig - step;
      const double down = loss(work, false, nullptr);
      e.value[i] = orig;
      worst = std::max(worst, rel_error(g.at(e.name)[i], (up - down) / (2 * step)));
      ++n;
    }
  }
  if (checked) *checked = n;
  return worst;
}

/// Double-precision UNet with every tensor perturbed so all gradients are non-trivial.
inline BasicParameterStore<double> random_unet_double(int width, std::uint64_t seed) {
  BasicParameterStore<double> p = build_unet<double>(width, seed, 16, 16);
  Rng rng(seed + 7);
  std::normal_distribution<double> nd(0.0, 0.05);
  for (auto& e : p.entries())
    for (auto& v : e.value.vec()) v += nd(rng);
  return p;
}

inline int run_cli(const std::string& args, std::string* out = nullptr, const fs::path& cwd = {}) {
  const std::string log = (fs::temp_directory_path() / ("crdiff_cli_" + std::to_string(::getpid()) + ".log")).string();
  std::string cmd = std::string(CRDIFF_CLI) + " " + args + " > " + log + " 2>/dev/null";
  if (!cwd.empty()) cmd = "cd '" + cwd.string() + "' && " + cmd;
  const int status = std::system(cmd.c_str());
  if (out) *out = slurp(log);
  fs::remove(log);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace testutil

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <ostream>
#include <random>
#include <vector>

#include "crdiff/prune.hpp"
#include "crdiff/random.hpp"

namespace crdiff {

using EnergyFn = std::function<double(const RatioConfig&)>;

inline constexpr double kNeighborScale = 0.15;

struct SAParams {
  double T_init = 1.0;
  double alpha = 0.95;
  int n_iter = 300;
  double T_min = 1e-3;
  int R_max = 2;
  std::vector<RatioConfig> seeds = {uniform_config(0.1), uniform_config(0.2), uniform_config(0.3),
                                    uniform_config(0.4), RatioConfig{0.397, 0.434, 0.387}};
  std::uint64_t seed = 0;
  bool normalize = true;  // divide energies by the seed-energy standard deviation in the Metropolis test
};

inline void validate(const SAParams& p) {
  if (!(p.T_init > 0)) throw InputError("sa: T_init must be > 0");
  if (!(p.alpha > 0 && p.alpha < 1)) throw InputError("sa: alpha must lie in (0, 1)");
  if (p.n_iter < 1) throw InputError("sa: n_iter must be >= 1");
  if (!(p.T_min > 0) || p.T_min >= p.T_init) throw InputError("sa: T_min must lie in (0, T_init)");
  if (p.R_max < 0) throw InputError("sa: r_max must be >= 0");
  if (p.seeds.empty()) throw InputError("sa: seed list is empty");
  for (const auto& s : p.seeds) validate(s);
}

struct SATraceRow {
  int iter = 0;  // 0 for seed evaluations
  double T = 0;
  RatioConfig r;
  double E = 0;
  bool accepted = false;
  double E_best = 0;
};

struct SAState {
  RatioConfig S_curr, S_best;
  double E_curr = 0, E_best = 0;
  double T = 0;
  int C_restart = 0;
  int iterations = 0;
  int evaluations = 0;
  std::vector<SATraceRow> trace;
};

struct SeedResult {
  RatioConfig config;
  double energy = 0;
  std::vector<double> energies;
};

/// Lowest-energy seed, earliest on ties.
inline SeedResult best_seed(const std::vector<RatioConfig>& seeds, const EnergyFn& energy) {
  if (seeds.empty()) throw InputError("best_seed: empty seed list");
  SeedResult out;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    const double e = energy(seeds[i]);
    out.energies.push_back(e);
    if (i == 0 || e < out.energy) {
      out.energy = e;
      out.config = seeds[i];
    }
  }
  return out;
}

inline RatioConfig generate_neighbor(const RatioConfig& s, double T, double T_init, Rng& rng) {
  if (!(T > 0)) throw InputError("generate_neighbor: T must be > 0");
  std::normal_distribution<double> nd(0.0, kNeighborScale * (T / T_init));
  auto a = s.as_array();
  for (auto& v : a) v = std::clamp(v + nd(rng), 0.0, kMaxPruneRatio);
  return RatioConfig::from_array(a);
}

inline bool accept(double E_curr, double E_neighbor, double T, double u) {
  if (!(T > 0)) throw InputError("accept: T must be > 0");
  if (E_neighbor < E_curr) return true;
  return std::exp(-(E_neighbor - E_curr) / T) > u;
}

/// ||r - (0.4, 0.3, 0.2)||^2
inline double synthetic_energy(const RatioConfig& r) {
  const double a = r.r_down - 0.4, b = r.r_mid - 0.3, c = r.r_up - 0.2;
  return a * a + b * b + c * c;
}

/// Standard deviation of the seed energies; 1 when they are all equal or not finite.
inline double energy_spread(const std::vector<double>& e) {
  double m = 0;
  for (double v : e) m += v;
  m /= static_cast<double>(e.size());
  double var = 0;
  for (double v : e) var += (v - m) * (v - m);
  const double sd = std::sqrt(var / static_cast<double>(e.size()));
  return sd > 0 && std::isfinite(sd) ? sd : 1.0;
}

using TraceSink = std::function<void(const SATraceRow&)>;

/**
 * Annealing over ratio configurations. Seeds are evaluated first (trace rows
 * with iter 0), then up to n_iter neighbours. When T drops below T_min it is
 * reset to T_init and the restart counter grows; the loop stops once the
 * counter exceeds R_max.
 */
inline SAState anneal(const SAParams& p, const EnergyFn& energy, const TraceSink& sink = {}) {
  validate(p);
  SAState st;
  auto emit = [&](const SATraceRow& row) {
    st.trace.push_back(row);
    if (sink) sink(row);
  };

  const SeedResult seeds = best_seed(p.seeds, energy);
  st.evaluations = static_cast<int>(p.seeds.size());
  {
    double running = std::numeric_limits<double>::infinity();
    bool chosen = false;
    for (std::size_t i = 0; i < p.seeds.size(); ++i) {
      running = std::min(running, seeds.energies[i]);
      const bool is_best = !chosen && seeds.energies[i] == seeds.energy;
      chosen = chosen || is_best;
      emit({0, p.T_init, p.seeds[i], seeds.energies[i], is_best, running});
    }
  }
  const double scale = p.normalize ? energy_spread(seeds.energies) : 1.0;

  st.S_curr = st.S_best = seeds.config;
  st.E_curr = st.E_best = seeds.energy;
  st.T = p.T_init;
  st.C_restart = 0;
  Rng rng(mix_seed(p.seed, 0x5A));
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  for (int i = 1; i <= p.n_iter; ++i) {
    const RatioConfig cand = generate_neighbor(st.S_curr, st.T, p.T_init, rng);
    const double u = unif(rng);
    const double E = energy(cand);
    ++st.evaluations;
    const bool acc = accept(st.E_curr / scale, E / scale, st.T, u);
    if (acc) {
      st.S_curr = cand;
      st.E_curr = E;
    }
    if (st.E_curr < st.E_best) {
      st.S_best = st.S_curr;
      st.E_best = st.E_curr;
    }
    emit({i, st.T, cand, E, acc, st.E_best});
    st.iterations = i;
    st.T *= p.alpha;
    if (st.T < p.T_min) {
      st.T = p.T_init;
      ++st.C_restart;
      if (st.C_restart > p.R_max) break;
    }
  }
  return st;
}

inline void write_trace_header(std::ostream& out) { out << "iter,T,r_down,r_mid,r_up,E,accepted,E_best\n"; }

inline void write_trace_row(std::ostream& out, const SATraceRow& r) {
  const auto old = out.precision(17);
  out << r.iter << ',' << r.T << ',' << r.r.r_down << ',' << r.r.r_mid << ',' << r.r.r_up << ',' << r.E << ','
      << (r.accepted ? 1 : 0) << ',' << r.E_best << '\n';
  out.precision(old);
}

}  // namespace crdiff

#include <gtest/gtest.h>

#include "helpers.hpp"

using namespace crdiff;
using namespace testutil;

namespace {

double linf_to_optimum(const RatioConfig& r) {
  return std::max({std::fabs(r.r_down - 0.4), std::fabs(r.r_mid - 0.3), std::fabs(r.r_up - 0.2)});
}

std::string trace_bytes(const SAState& st) {
  std::ostringstream os;
  write_trace_header(os);
  for (const auto& r : st.trace) write_trace_row(os, r);
  return os.str();
}

}  // namespace

TEST(BestSeed, Argmin) {
  const std::vector<RatioConfig> one{uniform_config(0.2)};
  EXPECT_EQ(best_seed(one, synthetic_energy).config, uniform_config(0.2));

  const std::vector<RatioConfig> three{uniform_config(0.1), uniform_config(0.2), uniform_config(0.3)};
  const std::vector<double> e{3, 1, 2};
  auto table = [&](const RatioConfig& r) {
    for (std::size_t i = 0; i < three.size(); ++i)
      if (three[i] == r) return e[i];
    return 99.0;
  };
  const SeedResult b = best_seed(three, table);
  EXPECT_EQ(b.config, three[1]);
  EXPECT_EQ(b.energy, 1.0);

  auto flat = [](const RatioConfig&) { return 0.5; };
  EXPECT_EQ(best_seed(three, flat).config, three[0]);
  EXPECT_THROW(best_seed({}, flat), InputError);
}

TEST(Neighbor, SpreadAtInitialTemperature) {
  Rng rng(1);
  const RatioConfig s{0.45, 0.45, 0.45};
  const int n = 10000;
  std::array<double, 3> sum{}, sq{};
  for (int i = 0; i < n; ++i) {
    const auto a = generate_neighbor(s, 1.0, 1.0, rng).as_array();
    for (int k = 0; k < 3; ++k) {
      sum[k] += a[k];
      sq[k] += a[k] * a[k];
    }
  }
  for (int k = 0; k < 3; ++k) {
    const double m = sum[k] / n;
    const double sd = std::sqrt(sq[k] / n - m * m);
    EXPECT_NEAR(sd, 0.15, 0.15 * 0.05) << "component " << k;
  }
}

TEST(Neighbor, ColdAndClamped) {
  Rng rng(2);
  const RatioConfig s{0.3, 0.5, 0.7};
  const auto near = generate_neighbor(s, 1e-9, 1.0, rng);
  EXPECT_LT(std::max({std::fabs(near.r_down - 0.3), std::fabs(near.r_mid - 0.5), std::fabs(near.r_up - 0.7)}), 1e-8);
  for (int i = 0; i < 1000; ++i) {
    const auto r = generate_neighbor({0.9, 0.0, 0.9}, 1.0, 1.0, rng);
    ASSERT_LE(r.r_down, 0.9);
    ASSERT_GE(r.r_mid, 0.0);
    ASSERT_LE(r.r_up, 0.9);
  }
  EXPECT_THROW(generate_neighbor(s, 0.0, 1.0, rng), InputError);
}

TEST(Accept, Rule) {
  EXPECT_TRUE(accept(1.0, 0.9, 1e-6, 0.999999));
  EXPECT_TRUE(accept(1.0, 1.5, 1.0, 0.6065));
  EXPECT_FALSE(accept(1.0, 1.5, 1.0, 0.6066));
  EXPECT_FALSE(accept(1.0, 1.5, 1e-4, 1e-12));
  EXPECT_THROW(accept(1.0, 1.5, 0.0, 0.5), InputError);
}

TEST(Accept, EmpiricalRate) {
  Rng rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int hits = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) hits += accept(0.0, 0.5, 1.0, u(rng));
  EXPECT_NEAR(static_cast<double>(hits) / n, std::exp(-0.5), 0.01);
}

TEST(Anneal, ConvexBenchmark) {
  int good = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SAParams p;
    p.seed = seed;
    p.n_iter = 495;
    const SAState st = anneal(p, synthetic_energy);
    EXPECT_LE(st.evaluations, 500);
    good += linf_to_optimum(st.S_best) <= 0.05;
  }
  EXPECT_GE(good, 9);
}

TEST(Anneal, ConstantEnergyKeepsBestSeed) {
  SAParams p;
  p.n_iter = 50;
  const SAState st = anneal(p, [](const RatioConfig&) { return 2.0; });
  EXPECT_EQ(st.S_best, p.seeds.front());
  EXPECT_EQ(st.E_best, 2.0);
}

TEST(Anneal, SingleIteration) {
  SAParams p;
  p.n_iter = 1;
  int calls = 0;
  const SAState st = anneal(p, [&](const RatioConfig& r) {
    ++calls;
    return synthetic_energy(r);
  });
  EXPECT_EQ(calls, static_cast<int>(p.seeds.size()) + 1);
  EXPECT_EQ(st.iterations, 1);
  EXPECT_EQ(st.trace.size(), p.seeds.size() + 1);
  p.n_iter = 0;
  EXPECT_THROW(anneal(p, synthetic_energy), InputError);
}

TEST(Anneal, Invariants) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SAParams p;
    p.seed = seed;
    p.n_iter = 400;
    p.R_max = 1;
    const SAState st = anneal(p, synthetic_energy);
    double min_seed = 1e300;
    for (const auto& s : p.seeds) min_seed = std::min(min_seed, synthetic_energy(s));
    double prev = 1e300;
    int reheats = 0;
    double expect_T = p.T_init;
    for (const auto& row : st.trace) {
      ASSERT_LE(row.E_best, prev);
      prev = row.E_best;
      if (row.iter == 0) continue;
      ASSERT_EQ(row.T, expect_T) << "iter " << row.iter;
      expect_T *= p.alpha;
      if (expect_T < p.T_min) {
        expect_T = p.T_init;
        ++reheats;
      }
    }
    EXPECT_LE(st.E_best, min_seed);
    EXPECT_LE(st.E_best, st.E_curr);
    EXPECT_EQ(st.C_restart, reheats);
    EXPECT_LE(st.C_restart, p.R_max + 1);
    // alpha 0.95 from 1 drops below 1e-3 after 135 steps; R_max 1 stops the chain at the second reheat
    EXPECT_EQ(st.C_restart, 2);
    EXPECT_EQ(st.iterations, 270);
  }
}

TEST(Anneal, TraceBytesReproducible) {
  SAParams p;
  p.seed = 9;
  p.n_iter = 120;
  const std::string a = trace_bytes(anneal(p, synthetic_energy));
  EXPECT_EQ(a, trace_bytes(anneal(p, synthetic_energy)));
  p.seed = 10;
  EXPECT_NE(a, trace_bytes(anneal(p, synthetic_energy)));
  EXPECT_EQ(a.substr(0, a.find('\n')), "iter,T,r_down,r_mid,r_up,E,accepted,E_best");
}

TEST(Anneal, SinkSeesEveryRow) {
  SAParams p;
  p.n_iter = 20;
  std::size_t rows = 0;
  const SAState st = anneal(p, synthetic_energy, [&](const SATraceRow&) { ++rows; });
  EXPECT_EQ(rows, st.trace.size());
}

TEST(Anneal, EnergyFailureStillFlushesTrace) {
  SAParams p;
  p.n_iter = 20;
  std::ostringstream os;
  int calls = 0;
  auto energy = [&](const RatioConfig& r) {
    if (++calls == 9) throw NumericalError("boom");
    return synthetic_energy(r);
  };
  EXPECT_THROW(anneal(p, energy, [&](const SATraceRow& r) { write_trace_row(os, r); }), NumericalError);
  const std::string text = os.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 8);
}

TEST(SAParams, Validation) {
  SAParams p;
  p.alpha = 1.0;
  EXPECT_THROW(validate(p), InputError);
  p = SAParams{};
  p.seeds.clear();
  EXPECT_THROW(validate(p), InputError);
  p = SAParams{};
  p.T_min = 2.0;
  EXPECT_THROW(validate(p), InputError);
}

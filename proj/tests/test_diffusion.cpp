#include <gtest/gtest.h>

#include "helpers.hpp"

using namespace crdiff;
using namespace testutil;

namespace {

// independently evaluated: (1/sqrt(0.9)) * (1 - 0.1/sqrt(0.28))
constexpr double kStepOracle = 0.8548877851670609;

double fixed_loss(const ParameterStore& p, const std::vector<Sample>& data, const NoiseSchedule& s) {
  std::vector<const Sample*> batch;
  for (const auto& d : data) batch.push_back(&d);
  double total = 0;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    Tape<float> tape(false);
    total += tape.value(diffusion_loss(tape, p, batch, s, 1000 + seed))[0];
  }
  return total / 8;
}

}  // namespace

TEST(Schedule, TwoStepExample) {
  const NoiseSchedule s = make_schedule(2, 0.1, 0.2);
  EXPECT_DOUBLE_EQ(s.beta(1), 0.1);
  EXPECT_DOUBLE_EQ(s.beta(2), 0.2);
  EXPECT_DOUBLE_EQ(s.alpha_bar(1), 0.9);
  EXPECT_NEAR(s.alpha_bar(2), 0.72, 1e-15);
}

TEST(Schedule, DefaultIsStrictlyDecreasing) {
  const NoiseSchedule s = make_schedule(200, 1e-4, 0.02);
  EXPECT_DOUBLE_EQ(s.alpha_bar(1), 1 - s.beta(1));
  for (int t = 2; t <= 200; ++t) ASSERT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
  EXPECT_DOUBLE_EQ(s.beta(200), 0.02);
}

TEST(Schedule, RejectsBadArguments) {
  EXPECT_THROW(make_schedule(1, 0.1, 0.2), InputError);
  EXPECT_THROW(make_schedule(10, 0.0, 0.0), InputError);
  EXPECT_THROW(make_schedule(10, 0.2, 0.1), InputError);
  EXPECT_THROW(make_schedule(10, 0.1, 1.0), InputError);
  EXPECT_THROW(make_schedule(10, 1e-4, 0.02).beta(11), InputError);
  EXPECT_THROW(make_schedule(10, 1e-4, 0.02).beta(0), InputError);
}

TEST(QSample, Arithmetic) {
  const Tensor x0({1}, 2.0f), eps({1}, 1.0f);
  EXPECT_NEAR(q_sample_ab(x0, 0.25, eps)[0], 1.8660254, 1e-6);
  EXPECT_EQ(q_sample_ab(x0, 1.0, eps)[0], 2.0f);
  EXPECT_EQ(q_sample_ab(x0, 0.0, eps)[0], 1.0f);
  EXPECT_THROW(q_sample_ab(x0, 0.5, Tensor({2})), InputError);
  EXPECT_THROW(q_sample(x0, 0, eps, make_schedule(10, 1e-4, 0.02)), InputError);
}

TEST(QSample, MarginalVariance) {
  const NoiseSchedule s = make_schedule(200, 1e-4, 0.02);
  const int n = 10000;
  Tensor x0({n});
  const auto data = make_dataset(all_standard_classes(), 4, 16, 16, 3);
  Rng rng(5);
  std::uniform_int_distribution<int> pick(0, 16 * 16 - 1);
  for (int i = 0; i < n; ++i) x0[i] = data[static_cast<std::size_t>(i % 16)].image[pick(rng)];
  auto var = [](const Tensor& t) {
    double m = 0, v = 0;
    for (float x : t.vec()) m += x;
    m /= t.size();
    for (float x : t.vec()) v += (x - m) * (x - m);
    return v / (t.size() - 1);
  };
  const double v0 = var(x0);
  for (int t : {1, 20, 100, 200}) {
    const Tensor xt = q_sample(x0, t, randn({n}, 100 + t), s);
    const double expect = s.alpha_bar(t) * v0 + (1 - s.alpha_bar(t));
    EXPECT_NEAR(var(xt) / expect, 1.0, 0.05) << "t " << t;
  }
}

TEST(Loss, ZeroModelIsAboutOne) {
  const ParameterStore p = build_unet(8, 1, 16, 16);
  const auto data = make_dataset(all_standard_classes(), 8, 16, 16, 2);
  EXPECT_NEAR(fixed_loss(p, data, make_schedule(200, 1e-4, 0.02)), 1.0, 0.03);
}

TEST(Loss, OraclePredictorIsZero) {
  const auto data = make_dataset(all_standard_classes(), 2, 16, 16, 2);
  std::vector<const Sample*> batch;
  for (const auto& d : data) batch.push_back(&d);
  const NoisedBatch nb = make_noised_batch(batch, make_schedule(50, 1e-4, 0.02), 9);
  Tape<float> tape(false);
  EXPECT_EQ(tape.value(ops::mse(tape.constant(nb.eps), tape.constant(nb.eps)))[0], 0.0f);
}

TEST(Loss, DeterministicPerSeed) {
  const ParameterStore p = small_unet();
  const auto data = make_dataset(all_standard_classes(), 2, 16, 16, 2);
  std::vector<const Sample*> batch;
  for (const auto& d : data) batch.push_back(&d);
  const NoiseSchedule s = make_schedule(50, 1e-4, 0.02);
  auto once = [&](std::uint64_t seed) {
    Tape<float> tape(false);
    return tape.value(diffusion_loss(tape, p, batch, s, seed))[0];
  };
  EXPECT_EQ(once(4), once(4));
  EXPECT_NE(once(4), once(5));
  EXPECT_THROW(make_noised_batch({}, s, 1), InputError);
}

TEST(Train, OverfitsSingleSample) {
  ParameterStore p = build_unet(8, 3, 16, 16);
  const NoiseSchedule s = make_schedule(50, 1e-4, 0.02);
  const Sample one = render(PatternClass::standard(0), 1, 16, 16);
  const std::vector<Sample> data(16, one);
  const double before = fixed_loss(p, data, s);
  train(p, data, s, TrainConfig{40, 8, 0.5, 1, 1.0});
  const double after = fixed_loss(p, data, s);
  EXPECT_LT(after, 0.5 * before) << before << " -> " << after;
}

TEST(Train, ZeroLearningRateKeepsParameters) {
  ParameterStore p = small_unet();
  const ParameterStore before = p;
  const auto data = make_dataset(all_standard_classes(), 2, 16, 16, 2);
  const auto rows = train(p, data, make_schedule(20, 1e-4, 0.02), TrainConfig{1, 4, 0.0, 1, 1.0});
  EXPECT_EQ(rows.size(), 2u);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(p.entries()[i].value, before.entries()[i].value);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const fs::path dir = temp_dir("resume");
  const auto data = make_dataset(all_standard_classes(), 3, 16, 16, 2);
  const NoiseSchedule s = make_schedule(20, 1e-4, 0.02);
  ParameterStore full = build_unet(8, 4, 16, 16);
  train(full, data, s, TrainConfig{3, 4, 0.2, 6, 1.0});
  save_checkpoint(dir / "full.ckpt", full);

  ParameterStore part = build_unet(8, 4, 16, 16);
  train(part, data, s, TrainConfig{1, 4, 0.2, 6, 1.0});
  save_checkpoint(dir / "part.ckpt", part);
  ParameterStore resumed = load_checkpoint(dir / "part.ckpt");
  train(resumed, data, s, TrainConfig{3, 4, 0.2, 6, 1.0});
  save_checkpoint(dir / "resumed.ckpt", resumed);
  EXPECT_EQ(slurp(dir / "full.ckpt"), slurp(dir / "resumed.ckpt"));
  fs::remove_all(dir);
}

TEST(DdpmStep, ClosedFormExample) {
  const NoiseSchedule s = schedule_from_betas({0.2, 0.1});  // beta_2 = 0.1, alpha_bar_2 = 0.72
  ASSERT_NEAR(s.alpha_bar(2), 0.72, 1e-15);
  const Tensor y = ddpm_step(Tensor({1}, 1.0f), Tensor({1}, 1.0f), 2, s, Tensor({1}));
  EXPECT_NEAR(y[0], kStepOracle, 1e-6);
}

TEST(DdpmStep, Collapses) {
  const NoiseSchedule s = make_schedule(10, 0.01, 0.2);
  const Tensor x = randn({5}, 1), zero({5}), noise = randn({5}, 2);
  const Tensor y = ddpm_step(x, zero, 4, s, zero);
  for (int i = 0; i < 5; ++i) EXPECT_FLOAT_EQ(y[i], static_cast<float>(x[i] / std::sqrt(s.alpha(4))));
  EXPECT_EQ(ddpm_step(x, noise, 1, s, noise), ddpm_step(x, noise, 1, s, zero));
  EXPECT_FALSE(ddpm_step(x, noise, 2, s, noise) == ddpm_step(x, noise, 2, s, zero));
  EXPECT_THROW(ddpm_step(x, zero, 11, s, zero), InputError);
  EXPECT_THROW(ddpm_step(x, Tensor({4}), 2, s, zero), InputError);
}

TEST(Sampler, ZeroPredictorMatchesClosedForm) {
  const NoiseSchedule s = make_schedule(10, 0.01, 0.2);
  const int n = 2, H = 8, W = 8, hw = H * W;
  const std::vector<int> c{0, 1};
  const EpsFn zero = [](const Tensor& x, int, std::span<const int>) { return Tensor(x.shape()); };
  const Tensor out = sample(s, n, c, H, W, 21, zero);
  for (int i = 0; i < n; ++i) {
    Rng rng = chain_rng(21, i);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> x(hw);
    for (auto& v : x) v = nd(rng);
    // x_0 = x_T / prod sqrt(alpha) + sum_{t>1} sigma_t z_t / prod_{s<t} sqrt(alpha_s)
    std::vector<double> acc(hw, 0.0);
    double all = 1;
    for (int t = 1; t <= s.T; ++t) all *= std::sqrt(s.alpha(t));
    for (int k = 0; k < hw; ++k) acc[k] = x[k] / all;
    for (int t = s.T; t >= 2; --t) {
      double below = 1;
      for (int u = 1; u < t; ++u) below *= std::sqrt(s.alpha(u));
      for (int k = 0; k < hw; ++k) acc[k] += std::sqrt(s.beta(t)) * nd(rng) / below;
    }
    for (int k = 0; k < hw; ++k) EXPECT_NEAR(out[i * hw + k], acc[k], 1e-4 * (1 + std::fabs(acc[k])));
  }
}

TEST(Sampler, DeterministicAndEmpty) {
  const ParameterStore p = small_unet();
  const NoiseSchedule s = make_schedule(8, 1e-3, 0.1);
  const std::vector<int> c{0, 3};
  const Tensor a = sample(s, 2, c, 12, 12, 5, model_eps(p));
  EXPECT_EQ(a, sample(s, 2, c, 12, 12, 5, model_eps(p)));
  EXPECT_FALSE(a == sample(s, 2, c, 12, 12, 6, model_eps(p)));
  const Tensor e = sample(s, 0, std::span<const int>{}, 12, 12, 5, model_eps(p));
  EXPECT_EQ(e.shape(), (Shape{0, 1, 12, 12}));
  EXPECT_THROW(sample(s, 2, std::vector<int>{0}, 12, 12, 5, model_eps(p)), InputError);
}

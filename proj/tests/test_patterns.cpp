#include <gtest/gtest.h>

#include "helpers.hpp"

using namespace crdiff;
using namespace testutil;

TEST(Render, CheckerboardHalfCellsGiveQuadrants) {
  for (int n : {8, 16, 24}) {
    const Tensor img = render({PatternId::checkerboard, 0.5}, 3, n, n, 0.0).image;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const float expect = ((i < n / 2) == (j < n / 2)) ? 1.0f : -1.0f;
        ASSERT_EQ(img[static_cast<std::size_t>(i) * n + j], expect) << n << " " << i << "," << j;
      }
  }
}

TEST(Render, StripesWithFullPeriodSplitInHalf) {
  const Tensor img = render({PatternId::stripes, 1.0}, 0, 16, 16, 0.0).image;
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) EXPECT_EQ(img[i * 16 + j], j < 8 ? 1.0f : -1.0f);
}

TEST(Render, BlobCentreAndCorner) {
  const Tensor img = render(PatternClass::standard(PatternId::radial_blob), 0, 16, 16, 0.0).image;
  EXPECT_FLOAT_EQ(img[8 * 16 + 8], 1.0f);
  // corner pixel centre sits at r^2 = 0.5 from the blob centre, sigma = 0.2
  EXPECT_NEAR(img[0], 2 * std::exp(-6.25) - 1, 1e-6);
  EXPECT_NEAR(img[0], -0.996139, 1e-6);
}

TEST(Render, RejectsBadInputs) {
  EXPECT_THROW(parse_pattern("hexagon"), InputError);
  EXPECT_THROW(pattern_from_int(7), InputError);
  EXPECT_THROW(render(PatternClass::standard(0), 0, 4, 16), InputError);
  EXPECT_THROW(render(PatternClass::standard(0), 0, 16, 16, 0.6), InputError);
}

TEST(Render, SameSeedSameBytes) {
  for (const auto& cls : all_standard_classes()) {
    EXPECT_EQ(render(cls, 42, 20, 20).image, render(cls, 42, 20, 20).image);
    EXPECT_FALSE(render(cls, 42, 20, 20).image == render(cls, 43, 20, 20).image);
  }
}

TEST(Render, ValuesInRange) {
  for (const auto& cls : all_standard_classes())
    for (std::uint64_t s = 0; s < 20; ++s)
      for (int n : {8, 12, 16, 20, 24, 32}) {
        const Tensor img = render(cls, s, n, n, 0.5).image;
        for (float v : img.vec()) ASSERT_TRUE(v >= -1.0f && v <= 1.0f);
      }
}

TEST(Render, ResolutionCovariance) {
  for (const auto& cls : all_standard_classes())
    for (std::uint64_t s = 0; s < 10; ++s) {
      const Tensor big = render(cls, s, 32, 32).image;
      const Tensor small = render(cls, s, 16, 16).image;
      double mae = 0;
      for (int i = 0; i < 16; ++i)
        for (int j = 0; j < 16; ++j) {
          const double avg = (big[(2 * i) * 32 + 2 * j] + big[(2 * i) * 32 + 2 * j + 1] + big[(2 * i + 1) * 32 + 2 * j] +
                              big[(2 * i + 1) * 32 + 2 * j + 1]) /
                             4.0;
          mae += std::fabs(avg - small[i * 16 + j]);
        }
      EXPECT_LT(mae / 256, 0.1) << to_string(cls.id) << " seed " << s;
    }
}

TEST(Dataset, CountsAndBalance) {
  EXPECT_EQ(make_dataset(standard_classes({1}), 1, 16, 16, 0).size(), 1u);
  const auto d = make_dataset(all_standard_classes(), 10, 16, 16, 5);
  ASSERT_EQ(d.size(), 40u);
  for (int c = 0; c < 4; ++c)
    EXPECT_EQ(std::count_if(d.begin(), d.end(), [c](const Sample& s) { return s.label == c; }), 10);
  EXPECT_THROW(make_dataset(all_standard_classes(), 0, 16, 16, 5), InputError);
}

TEST(Dataset, Deterministic) {
  const auto a = make_dataset(all_standard_classes(), 6, 12, 12, 77);
  const auto b = make_dataset(all_standard_classes(), 6, 12, 12, 77);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].seed, b[i].seed);
  }
}

TEST(ImageIo, PgmRoundTrip) {
  const fs::path dir = temp_dir("pgm");
  const Gray8 g = to_gray8(render(PatternClass::standard(3), 1, 12, 20).image);
  write_pgm(dir / "a.pgm", g);
  const Gray8 back = read_pgm(dir / "a.pgm");
  EXPECT_EQ(back.height, 12);
  EXPECT_EQ(back.width, 20);
  EXPECT_EQ(back.pixels, g.pixels);
  EXPECT_EQ(slurp(dir / "a.pgm").substr(0, 2), "P5");
  fs::remove_all(dir);
}

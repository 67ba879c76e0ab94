#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>
#include <opencv2/imgproc.hpp>

#include "dpl/errors.hpp"
#include "dpl/indicators.hpp"
#include "test_util.hpp"

namespace ind = dpl::indicators;
using dpl::FaceImage;

namespace {

// Independent restatement of the hash embedder's image rule.
std::vector<double> hash_rule(const FaceImage& image, std::size_t d) {
  std::vector<double> v(d, 0.0);
  const cv::Mat m = image.pixels.clone();
  const std::size_t n = m.total() * 3;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t h = dpl::splitmix64(i ^ ind::HashEmbedder::kImageSalt);
    const double s = (h & (1ull << 63)) ? -1.0 : 1.0;
    v[h % d] += s * m.data[i] / 255.0;
  }
  for (auto& x : v) x = 1.0 + x / static_cast<double>(n);
  return v;
}

}  // namespace

TEST(HashEmbedder, ZeroImageIsAllOnes) {
  ind::HashEmbedder e(32);
  auto v = e.embed_image(dpl::test::constant_image(32, cv::Scalar(0, 0, 0)));
  ASSERT_EQ(v.size(), 32u);
  for (double x : v) EXPECT_EQ(x, 1.0);
}

TEST(HashEmbedder, PureFunction) {
  ind::HashEmbedder e;
  auto img = dpl::test::natural_image(3);
  EXPECT_EQ(e.embed_image(img), e.embed_image(img));
  EXPECT_EQ(e.embed_text("Good photo."), e.embed_text("Good photo."));
}

TEST(HashEmbedder, OnePixelChangeMatchesRule) {
  ind::HashEmbedder e(16);
  auto a = dpl::test::natural_image(5, 40);
  auto b = dpl::clone(a);
  b.pixels.at<cv::Vec3b>(7, 9)[1] ^= 0x5A;
  auto va = e.embed_image(a), vb = e.embed_image(b);
  auto ra = hash_rule(a, 16), rb = hash_rule(b, 16);
  for (std::size_t j = 0; j < 16; ++j) {
    EXPECT_DOUBLE_EQ(va[j], ra[j]);
    EXPECT_DOUBLE_EQ(vb[j], rb[j]);
  }
  EXPECT_NE(va, vb);
}

TEST(Score, EqualSimilaritiesGiveHalf) {
  EXPECT_EQ(ind::score_from_similarities(0.3, 0.3).value, 0.5);
}

TEST(Score, SwapIsComplement) {
  auto q = ind::score_from_similarities(0.7, -0.1, 0.5).value;
  auto q2 = ind::score_from_similarities(-0.1, 0.7, 0.5).value;
  EXPECT_NEAR(q + q2, 1.0, 1e-15);
}

TEST(Score, TwoWaySoftmaxValue) {
  const double expected = std::exp(0.8) / (std::exp(0.8) + std::exp(0.2));
  EXPECT_NEAR(ind::score_from_similarities(0.8, 0.2).value, expected, 1e-15);
  EXPECT_NEAR(expected, 0.6457, 1e-4);
}

TEST(Score, TemperatureScalesSimilarities) {
  const double expected = std::exp(0.8 / 0.1) / (std::exp(0.8 / 0.1) + std::exp(0.2 / 0.1));
  EXPECT_NEAR(ind::score_from_similarities(0.8, 0.2, 0.1).value, expected, 1e-14);
}

TEST(Score, DegenerateEmbeddingThrows) {
  std::vector<double> zero(4, 0.0), one(4, 1.0);
  EXPECT_THROW(ind::cosine_similarity(zero, one), dpl::DegenerateEmbeddingError);
}

TEST(Score, PromptIndicatorDeterministicAndInRange) {
  auto emb = std::make_shared<ind::HashEmbedder>();
  ind::PromptIndicator p(emb, ind::quality_prompts(), 1.0);
  auto img = dpl::test::natural_image(11);
  const double q = p(img).value;
  EXPECT_GT(q, 0.0);
  EXPECT_LT(q, 1.0);
  EXPECT_EQ(q, p(img).value);
  ind::PromptPair swapped{ind::quality_prompts().negative, ind::quality_prompts().positive};
  ind::PromptIndicator p2(emb, swapped, 1.0);
  EXPECT_NEAR(q + p2(img).value, 1.0, 1e-15);
}

TEST(Score, InvalidPromptsAndTemperature) {
  auto emb = std::make_shared<ind::HashEmbedder>();
  EXPECT_THROW(ind::PromptIndicator(emb, {"a", "a"}, 1.0), dpl::ConfigError);
  EXPECT_THROW(ind::PromptIndicator(emb, {"a", ""}, 1.0), dpl::ConfigError);
  EXPECT_THROW(ind::PromptIndicator(emb, ind::quality_prompts(), 0.0), dpl::ConfigError);
  EXPECT_THROW(ind::PromptIndicator(nullptr, ind::quality_prompts(), 1.0), dpl::EmbedderUnavailableError);
}

TEST(Quantizer, TenEvenScoresFiveLevels) {
  std::vector<double> s{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  auto spec = ind::fit_quantizer(s, 5, ind::Orientation::kHigherScoreHigherLevel);
  // Linear-interpolation quantile at h = 9 * j / 5 over the sorted values.
  const std::vector<double> expected{0.28, 0.46, 0.64, 0.82};
  ASSERT_EQ(spec.boundaries.size(), 4u);
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(spec.boundaries[j], expected[j], 1e-12);
  std::vector<int> counts(5, 0);
  for (double x : s) ++counts[ind::quantize(x, spec).value - 1];
  for (int c : counts) EXPECT_EQ(c, 2);
}

TEST(Quantizer, ConstantScoresCollapseToOneLevel) {
  std::vector<double> s(20, 0.42);
  auto spec = ind::fit_quantizer(s, 5, ind::Orientation::kHigherScoreLowerLevel);
  const int level = ind::quantize(0.42, spec).value;
  for (double x : s) EXPECT_EQ(ind::quantize(x, spec).value, level);
}

TEST(Quantizer, TwoElementsSplit) {
  std::vector<double> s{0.9, 0.1};
  auto spec = ind::fit_quantizer(s, 2, ind::Orientation::kHigherScoreLowerLevel);
  ASSERT_EQ(spec.boundaries.size(), 1u);
  EXPECT_GT(spec.boundaries[0], 0.1);
  EXPECT_LE(spec.boundaries[0], 0.9);
  EXPECT_NE(ind::quantize(0.1, spec).value, ind::quantize(0.9, spec).value);
}

TEST(Quantizer, InsufficientData) {
  std::vector<double> s{0.1, 0.2};
  EXPECT_THROW(ind::fit_quantizer(s, 5, ind::Orientation::kHigherScoreLowerLevel),
               dpl::InsufficientDataError);
}

TEST(Quantizer, ExtremeClamp) {
  ind::QuantizerSpec spec{5, ind::Orientation::kHigherScoreLowerLevel, {0.3, 0.5, 0.7, 0.9}};
  EXPECT_EQ(ind::quantize(0.95, spec).value, 1);
  EXPECT_EQ(ind::quantize(0.05, spec).value, 5);
  EXPECT_EQ(ind::quantize(5.0, spec).value, 1);
  EXPECT_EQ(ind::quantize(-5.0, spec).value, 5);
}

TEST(Quantizer, CountBoundariesAboveScore) {
  ind::QuantizerSpec spec{5, ind::Orientation::kHigherScoreLowerLevel, {0.3, 0.5, 0.7, 0.9}};
  // Two boundaries (0.7, 0.9) lie above 0.6.
  EXPECT_EQ(ind::quantize(0.6, spec).value, 3);
}

TEST(Quantizer, BoundaryTieGoesToLowerBin) {
  ind::QuantizerSpec spec{3, ind::Orientation::kHigherScoreHigherLevel, {0.4, 0.6}};
  EXPECT_EQ(ind::quantize(0.4, spec).value, 1);
  EXPECT_EQ(ind::quantize(0.6, spec).value, 2);
  EXPECT_EQ(ind::quantize(0.6000001, spec).value, 3);
}

TEST(Quantizer, MonotoneProperty) {
  dpl::Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(100);
    for (auto& x : s) x = dpl::uniform_unit(rng);
    auto spec = ind::fit_quantizer(s, dpl::uniform_int(rng, 2, 8), ind::Orientation::kHigherScoreLowerLevel);
    for (int i = 0; i < 100; ++i) {
      double a = dpl::uniform_unit(rng), b = dpl::uniform_unit(rng);
      if (a < b) std::swap(a, b);
      const int la = ind::quantize(a, spec).value, lb = ind::quantize(b, spec).value;
      EXPECT_LE(la, lb);
      EXPECT_GE(la, 1);
      EXPECT_LE(lb, spec.levels);
    }
  }
}

TEST(Quantizer, TextRoundTripIsExact) {
  dpl::Rng rng(4);
  std::vector<double> s(37);
  for (auto& x : s) x = dpl::uniform_unit(rng);
  auto spec = ind::fit_quantizer(s, 6, ind::Orientation::kHigherScoreLowerLevel);
  auto back = ind::QuantizerSpec::from_text(spec.to_text());
  EXPECT_EQ(back.levels, 6);
  EXPECT_EQ(back.orientation, spec.orientation);
  EXPECT_EQ(back.boundaries, spec.boundaries);
}

TEST(Quantizer, MalformedTextRejected) {
  EXPECT_THROW(ind::QuantizerSpec::from_text("levels 3\n"), dpl::Error);
  EXPECT_THROW(ind::QuantizerSpec::from_text("dpl-quantizer 1\nlevels 3\norientation "
                                             "higher_score_lower_level\nboundaries 0.5\n"),
               dpl::Error);
  EXPECT_THROW(ind::QuantizerSpec::from_text("dpl-quantizer 1\nlevels 3\norientation "
                                             "higher_score_lower_level\nboundaries 0.6 0.5\n"),
               dpl::Error);
}

TEST(StubIndicator, BlurLowersQualityScore) {
  auto sharp = dpl::test::natural_image(21, 96);
  FaceImage blurred{cv::Mat()};
  cv::GaussianBlur(sharp.pixels, blurred.pixels, cv::Size(0, 0), 4.0);
  EXPECT_LT(ind::stub_indicator(blurred).value, ind::stub_indicator(sharp).value);
}

TEST(StubIndicator, QualityMatchesDocumentedRule) {
  auto img = dpl::test::natural_image(8, 48);
  cv::Mat y(48, 48, CV_64F);
  for (int r = 0; r < 48; ++r)
    for (int c = 0; c < 48; ++c) {
      auto p = img.pixels.at<cv::Vec3b>(r, c);
      y.at<double>(r, c) = 0.299 * p[2] + 0.587 * p[1] + 0.114 * p[0];
    }
  double e = 0;
  for (int r = 1; r < 47; ++r)
    for (int c = 1; c < 47; ++c)
      e += std::abs(4 * y.at<double>(r, c) - y.at<double>(r - 1, c) - y.at<double>(r + 1, c) -
                    y.at<double>(r, c - 1) - y.at<double>(r, c + 1));
  e /= 46.0 * 46.0;
  EXPECT_NEAR(ind::stub_indicator(img).value, (e + 0.01) / (e + 8.01), 1e-12);
}

TEST(StubIndicator, ConstantImageIsMinimum) {
  auto flat = dpl::test::constant_image(64, cv::Scalar(30, 140, 200));
  EXPECT_DOUBLE_EQ(ind::stub_indicator(flat).value, 0.01 / 8.01);
  EXPECT_LT(ind::stub_indicator(flat).value, ind::stub_indicator(dpl::test::natural_image(2)).value);
}

TEST(StubIndicator, Deterministic) {
  auto img = dpl::test::natural_image(9);
  for (auto kind : {ind::IndicatorKind::kQuality, ind::IndicatorKind::kIdentifiability})
    EXPECT_EQ(ind::stub_indicator(img, kind).value, ind::stub_indicator(dpl::clone(img), kind).value);
}

TEST(StubIndicator, LocalizedPatchRaisesIdentifiability) {
  auto img = dpl::test::constant_image(64, cv::Scalar(120, 120, 120));
  cv::GaussianBlur(dpl::test::natural_image(3).pixels, img.pixels, cv::Size(0, 0), 3.0);
  auto patched = dpl::clone(img);
  for (int y = 20; y < 28; ++y)
    for (int x = 20; x < 28; ++x)
      if ((x + y) % 2) patched.pixels.at<cv::Vec3b>(y, x) = cv::Vec3b(255, 255, 255);
  EXPECT_GT(ind::stub_indicator(patched, ind::IndicatorKind::kIdentifiability).value,
            ind::stub_indicator(img, ind::IndicatorKind::kIdentifiability).value);
}

TEST(Image, RejectsSmallOrWrongType) {
  EXPECT_THROW(dpl::validate(FaceImage{cv::Mat(16, 16, CV_8UC3)}), dpl::InvalidImageError);
  EXPECT_THROW(dpl::validate(FaceImage{cv::Mat(64, 64, CV_8UC1)}), dpl::InvalidImageError);
}

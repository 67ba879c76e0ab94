#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <opencv2/imgproc.hpp>

#include "dpl/checkpoint.hpp"
#include "dpl/config.hpp"
#include "dpl/data.hpp"
#include "dpl/errors.hpp"
#include "dpl/evaluation.hpp"
#include "test_util.hpp"

namespace data = dpl::data;
namespace ev = dpl::evaluation;
namespace fs = std::filesystem;

namespace {

fs::path write_file(const fs::path& path, const std::string& text) {
  std::ofstream(path) << text;
  return path;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double brute_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0;
  int64_t pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        ++pairs;
        num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return num / static_cast<double>(pairs);
}

}  // namespace

TEST(Manifest, EmptyFile) {
  auto dir = dpl::test::temp_dir("manifest_empty");
  EXPECT_TRUE(data::load_manifest(write_file(dir / "m.tsv", "# dpl-manifest v1\n")).empty());
}

TEST(Manifest, BadLabelNamesLine) {
  auto dir = dpl::test::temp_dir("manifest_label");
  auto p = write_file(dir / "m.tsv", "# dpl-manifest v1\na.jpg\t0\ttrain\treal\nb.jpg\t2\ttrain\tfake\n");
  try {
    data::load_manifest(p);
    FAIL() << "expected ParseError";
  } catch (const dpl::ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos);
  }
}

TEST(Manifest, ThreeLinesInOrder) {
  auto dir = dpl::test::temp_dir("manifest_three");
  auto p = write_file(dir / "m.tsv",
                      "path\tlabel\tsplit\tsource_tag\nc.jpg\t1\ttest\tfake;q=40\na.jpg\t0\ttrain\treal\n"
                      "b.jpg\t1\tval\tfs\n");
  auto m = data::load_manifest(p);
  ASSERT_EQ(m.size(), 3u);
  EXPECT_EQ(m[0].path.filename(), "c.jpg");
  EXPECT_EQ(m[0].path.parent_path(), dir);
  EXPECT_EQ(m[1].split, data::Split::kTrain);
  EXPECT_EQ(m[2].split, data::Split::kVal);
  EXPECT_EQ(data::source_group(m[0].source_tag), "fake");
}

TEST(Manifest, RejectsDuplicatesColumnsAndMissingFile) {
  auto dir = dpl::test::temp_dir("manifest_errors");
  EXPECT_THROW(data::load_manifest(write_file(dir / "d.tsv", "a.jpg\t0\ttrain\tr\na.jpg\t1\ttrain\tf\n")),
               dpl::ParseError);
  EXPECT_THROW(data::load_manifest(write_file(dir / "c.tsv", "a.jpg\t0\ttrain\n")), dpl::ParseError);
  EXPECT_THROW(data::load_manifest(write_file(dir / "s.tsv", "a.jpg\t0\tdev\tr\n")), dpl::ParseError);
  EXPECT_THROW(data::load_manifest(dir / "absent.tsv"), dpl::Error);
}

TEST(Manifest, SaveLoadRoundTrip) {
  auto dir = dpl::test::temp_dir("manifest_rt");
  std::vector<data::ManifestEntry> in{{"x/1.jpg", 0, data::Split::kTrain, "real;q=31"},
                                      {"x/2.jpg", 1, data::Split::kTest, "fake;q=99"}};
  data::save_manifest(in, dir / "m.tsv");
  auto out = data::load_manifest(dir / "m.tsv");
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[1].label, 1);
  EXPECT_EQ(out[1].source_tag, "fake;q=99");
  EXPECT_EQ(out[1].path, dir / "x/2.jpg");
}

TEST(Jpeg, NoneIsByteIdentical) {
  auto img = dpl::test::natural_image(1);
  dpl::Rng rng(0);
  auto out = data::jpeg_augment(img, {data::CompressionMode::kNone, 30, 100}, rng);
  EXPECT_TRUE(dpl::test::same_bytes(out, img));
}

TEST(Jpeg, LowerQualityDistortsMore) {
  auto img = dpl::test::natural_image(2, 128);
  const double d100 = dpl::test::mean_abs_diff(data::jpeg_roundtrip(img, 100), img);
  const double d10 = dpl::test::mean_abs_diff(data::jpeg_roundtrip(img, 10), img);
  EXPECT_GT(d10, d100);
  dpl::Rng rng(0);
  auto fixed = data::jpeg_augment(img, {data::CompressionMode::kFixedJpeg, 10, 100}, rng);
  EXPECT_TRUE(dpl::test::same_bytes(fixed, data::jpeg_roundtrip(img, 10)));
}

TEST(Jpeg, SeededAndShapePreserving) {
  auto img = dpl::test::natural_image(3, 72);
  dpl::Rng a(5), b(5);
  data::CompressionPolicy pol{data::CompressionMode::kRandomJpeg, 30, 100};
  for (int i = 0; i < 5; ++i) {
    auto x = data::jpeg_augment(img, pol, a), y = data::jpeg_augment(img, pol, b);
    EXPECT_TRUE(dpl::test::same_bytes(x, y));
    EXPECT_EQ(x.pixels.size(), img.pixels.size());
    EXPECT_EQ(x.pixels.type(), CV_8UC3);
  }
}

TEST(Jpeg, PolicyValidation) {
  EXPECT_THROW((data::CompressionPolicy{data::CompressionMode::kRandomJpeg, 60, 50}.validate()), dpl::ConfigError);
  EXPECT_THROW((data::CompressionPolicy{data::CompressionMode::kFixedJpeg, 0, 50}.validate()), dpl::ConfigError);
  EXPECT_THROW(data::compression_mode_from_string("webp"), dpl::ConfigError);
}

TEST(Synthetic, SmallDatasetBalancedAndTagged) {
  auto dir = dpl::test::temp_dir("synth_small");
  data::SyntheticOptions opt;
  opt.n_per_class = 10;
  opt.image_size = 64;
  opt.seed = 3;
  auto entries = data::make_synthetic_dataset(opt, dir);
  ASSERT_EQ(entries.size(), 20u);
  int fakes = 0, tests = 0;
  for (auto& e : entries) {
    fakes += e.label;
    tests += e.split == data::Split::kTest;
    EXPECT_NE(e.source_tag.find(";q="), std::string::npos);
    EXPECT_TRUE(fs::exists(dir / e.path));
  }
  EXPECT_EQ(fakes, 10);
  EXPECT_EQ(tests, 4);
  EXPECT_EQ(data::load_manifest(dir / "manifest.tsv").size(), 20u);
}

TEST(Synthetic, SameSeedSameBytes) {
  auto d1 = dpl::test::temp_dir("synth_a"), d2 = dpl::test::temp_dir("synth_b");
  data::SyntheticOptions opt;
  opt.n_per_class = 4;
  opt.image_size = 64;
  opt.seed = 11;
  auto e1 = data::make_synthetic_dataset(opt, d1);
  data::make_synthetic_dataset(opt, d2);
  EXPECT_EQ(slurp(d1 / "manifest.tsv"), slurp(d2 / "manifest.tsv"));
  for (auto& e : e1) EXPECT_EQ(slurp(d1 / e.path), slurp(d2 / e.path));
}

TEST(Synthetic, ZeroStrengthPlantsNothing) {
  dpl::Rng a(1), b(1);
  auto img = data::synthesize_face(a, 64);
  auto copy = dpl::clone(img);
  data::plant_artifact(copy, 0.0, b);
  EXPECT_TRUE(dpl::test::same_bytes(img, copy));
  data::plant_artifact(copy, 0.5, b);
  EXPECT_FALSE(dpl::test::same_bytes(img, copy));
}

TEST(Auc, HandExamples) {
  EXPECT_EQ(ev::auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}), 1.0);
  EXPECT_EQ(ev::auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}), 0.75);
  EXPECT_EQ(ev::auc(std::vector<double>{0.5, 0.5}, std::vector<int>{0, 1}), 0.5);
  EXPECT_THROW(ev::auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), dpl::SingleClassError);
}

TEST(Auc, ChanceLevelAndOracle) {
  dpl::Rng rng(12);
  std::vector<double> s(4000);
  std::vector<int> y(4000);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = dpl::uniform_unit(rng);
    y[i] = static_cast<int>(i % 2);
  }
  dpl::shuffle(y, rng);
  EXPECT_NEAR(ev::auc(s, y), 0.5, 0.05);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = dpl::uniform_int(rng, 2, 120);
    std::vector<double> sc(n);
    std::vector<int> lb(n);
    for (int i = 0; i < n; ++i) {
      sc[i] = dpl::uniform_int(rng, 0, 9) / 10.0;
      lb[i] = i < 1 ? 0 : (i < 2 ? 1 : dpl::uniform_int(rng, 0, 1));
    }
    EXPECT_EQ(ev::auc(sc, lb), brute_auc(sc, lb));
  }
}

TEST(Perturb, SeverityZeroIsIdentity) {
  auto img = dpl::test::natural_image(4);
  for (auto kind : ev::all_perturbations()) {
    dpl::Rng rng(1);
    EXPECT_TRUE(dpl::test::same_bytes(ev::perturb(img, {kind, 0}, rng), img)) << ev::to_string(kind);
  }
}

TEST(Perturb, MonotoneInSeverity) {
  auto img = dpl::test::natural_image(5, 96);
  for (auto kind : ev::all_perturbations()) {
    double prev = -1;
    for (int s = 0; s <= 5; ++s) {
      dpl::Rng rng(77);
      const double d = dpl::test::mean_abs_diff(ev::perturb(img, {kind, s}, rng), img);
      EXPECT_GE(d, prev) << ev::to_string(kind) << " severity " << s;
      prev = d;
    }
    EXPECT_GT(prev, 0.0);
  }
}

TEST(Perturb, GreyImageUnchangedBySaturation) {
  dpl::FaceImage grey{cv::Mat()};
  cv::Mat g;
  cv::cvtColor(dpl::test::natural_image(6).pixels, g, cv::COLOR_BGR2GRAY);
  cv::cvtColor(g, grey.pixels, cv::COLOR_GRAY2BGR);
  for (int s = 1; s <= 5; ++s) {
    dpl::Rng rng(0);
    auto out = ev::perturb(grey, {ev::PerturbationKind::kSaturation, s}, rng);
    EXPECT_LE(cv::norm(out.pixels, grey.pixels, cv::NORM_INF), 1.0);
  }
}

TEST(Perturb, SeededAndValidated) {
  auto img = dpl::test::natural_image(7);
  dpl::Rng a(3), b(3);
  EXPECT_TRUE(dpl::test::same_bytes(ev::perturb(img, {ev::PerturbationKind::kNoise, 3}, a),
                                    ev::perturb(img, {ev::PerturbationKind::kNoise, 3}, b)));
  EXPECT_THROW((ev::PerturbationSpec{ev::PerturbationKind::kNoise, 6}.validate()), dpl::ConfigError);
  EXPECT_EQ(ev::perturbation_from_string("blockwise"), ev::PerturbationKind::kBlockwise);
  EXPECT_EQ((ev::PerturbationSpec{ev::PerturbationKind::kNoise, 2}.parameter()), 10.0);
}

TEST(Checkpoint, RoundTrip) {
  auto dir = dpl::test::temp_dir("ckpt");
  torch::manual_seed(0);
  torch::nn::Linear a(4, 3), b(4, 3);
  dpl::Checkpoint ck;
  ck.put_module("lin", *a);
  ck.put_text("note", "hello\nworld");
  ck.meta()["epoch"] = 3;
  ck.save(dir / "x.dplckpt");
  auto back = dpl::Checkpoint::load(dir / "x.dplckpt");
  EXPECT_EQ(back.text("note"), "hello\nworld");
  EXPECT_EQ(back.meta()["epoch"], 3);
  back.load_module("lin", *b);
  EXPECT_TRUE(torch::equal(a->weight, b->weight));
  EXPECT_THROW(back.text("absent"), dpl::CheckpointError);
}

TEST(Checkpoint, DetectsCorruption) {
  auto dir = dpl::test::temp_dir("ckpt_bad");
  dpl::Checkpoint ck;
  ck.put_text("note", "payload payload payload");
  ck.save(dir / "x.dplckpt");
  auto bytes = slurp(dir / "x.dplckpt");
  bytes[bytes.size() - 3] ^= 0x20;
  std::ofstream(dir / "x.dplckpt", std::ios::binary) << bytes;
  EXPECT_THROW(dpl::Checkpoint::load(dir / "x.dplckpt"), dpl::CheckpointError);
  write_file(dir / "junk.dplckpt", "not a checkpoint");
  EXPECT_THROW(dpl::Checkpoint::load(dir / "junk.dplckpt"), dpl::CheckpointError);
}

TEST(Checkpoint, Sha256KnownVector) {
  EXPECT_EQ(dpl::sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Config, UnknownKeyNamesPath) {
  auto j = nlohmann::json::parse(R"({"training": {"stage1_epochs": 2, "stage_one": 3}})");
  try {
    dpl::config_from_json(j);
    FAIL();
  } catch (const dpl::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("training.stage_one"), std::string::npos);
  }
}

TEST(Config, TypeAndRangeErrors) {
  EXPECT_THROW(dpl::config_from_json(nlohmann::json::parse(R"({"seed": "seven"})")), dpl::ConfigError);
  EXPECT_THROW(dpl::config_from_json(nlohmann::json::parse(R"({"training": {"batch_size": 0}})")), dpl::ConfigError);
  EXPECT_THROW(dpl::config_from_json(nlohmann::json::parse(R"({"ppo": {"clip_epsilon": -1}})")), dpl::ConfigError);
  EXPECT_THROW(dpl::config_from_json(nlohmann::json::parse(R"({"model": {"fusion": "mul"}})")), dpl::ConfigError);
}

TEST(Config, JsonRoundTripAndFingerprint) {
  auto c = dpl::load_config(fs::path(DPL_SOURCE_DIR) / "configs" / "smoke.json");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.model.backbone.output_channels, 48);
  auto back = dpl::config_from_json(dpl::to_json(c));
  EXPECT_EQ(dpl::to_json(back), dpl::to_json(c));
  EXPECT_EQ(dpl::fingerprint(back), dpl::fingerprint(c));
  back.seed = 8;
  EXPECT_NE(dpl::fingerprint(back), dpl::fingerprint(c));
}

#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "dpl/checkpoint.hpp"
#include "dpl/errors.hpp"
#include "dpl/evaluation.hpp"
#include "dpl/pipeline.hpp"
#include "dpl/trainer.hpp"
#include "test_util.hpp"

namespace tr = dpl::training;
namespace data = dpl::data;
namespace ev = dpl::evaluation;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const fs::path& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = dpl::test::temp_dir("pipeline");
    data::SyntheticOptions opt;
    opt.n_per_class = 24;
    opt.image_size = 64;
    opt.artifact_strength = 1.0;
    opt.seed = 5;
    opt.test_fraction = 0.25;
    data::make_synthetic_dataset(opt, root_ / "data");
  }

  static dpl::RunConfig config(const std::string& name) {
    dpl::RunConfig c;
    c.seed = 3;
    c.output_dir = (root_ / "runs" / name).string();
    c.model.backbone = {"tiny", 12, "", true};
    c.model.hidden_size = 16;
    c.model.proposer_hidden = 8;
    c.indicators.quality_levels = 3;
    c.indicators.identifiability_levels = 3;
    c.training.stage1_epochs = 1;
    c.training.stage2_epochs = 2;
    c.training.batch_size = 12;
    c.training.learning_rate = 1e-2;
    c.training.stage2_learning_rate = 1e-2;
    c.training.auto_fit_indicators = true;
    c.ppo.ppo_epochs_per_batch = 2;
    c.data.train_manifest = (root_ / "data" / "manifest.tsv").string();
    c.data.test_manifest = c.data.train_manifest;
    c.data.image_size = 64;
    return c;
  }

  static std::vector<data::Sample> train_samples() {
    return dpl::load_split((root_ / "data" / "manifest.tsv").string(), data::Split::kTrain, 64);
  }

  static dpl::Detector detector(const dpl::RunConfig& c, const std::vector<data::Sample>& s) {
    auto fit = dpl::fit_indicators(c, s);
    return dpl::make_detector(c, fit.quality, fit.identifiability);
  }

  static tr::Batch batch(dpl::Detector& d, const std::vector<data::Sample>& s, std::uint64_t seed) {
    std::vector<std::size_t> idx(s.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    dpl::Rng rng(seed);
    return tr::make_batch(d, s, idx, {data::CompressionMode::kNone, 30, 100}, rng);
  }

  static fs::path root_;
};

fs::path Pipeline::root_;

}  // namespace

TEST_F(Pipeline, FitIndicatorsBalancesLevels) {
  auto c = config("fit");
  auto s = train_samples();
  auto fit = dpl::fit_indicators(c, s);
  EXPECT_EQ(fit.n_images, s.size());
  for (int h : fit.quality_histogram) {
    EXPECT_GE(h, static_cast<int>(s.size()) / 3);
    EXPECT_LE(h, static_cast<int>(s.size()) / 3 + 1);
  }
  auto again = dpl::fit_indicators(c, s);
  EXPECT_EQ(again.quality.to_text(), fit.quality.to_text());
}

TEST_F(Pipeline, Stage1LossFallsOnToyBatch) {
  auto c = config("s1");
  auto s = train_samples();
  tr::Trainer t(c, detector(c, s));
  auto b = batch(t.detector(), s, 1);
  auto gen = dpl::make_torch_generator(1);
  std::vector<double> ce;
  for (int i = 0; i < 50; ++i) ce.push_back(t.stage1_step(b, gen).ce);
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) {
    first += ce[i];
    last += ce[40 + i];
  }
  EXPECT_LT(last, first);
}

TEST_F(Pipeline, Stage1ZeroLearningRateChangesNothing) {
  auto c = config("s1zero");
  c.training.learning_rate = 0.0;
  auto s = train_samples();
  tr::Trainer t(c, detector(c, s));
  auto before = dpl::parameter_hash(t.detector().model()->parameters());
  auto b = batch(t.detector(), s, 2);
  auto gen = dpl::make_torch_generator(2);
  t.stage1_step(b, gen);
  t.stage1_step(b, gen);
  EXPECT_EQ(dpl::parameter_hash(t.detector().model()->parameters()), before);
}

TEST_F(Pipeline, Stage1Deterministic) {
  auto c = config("s1det");
  auto s = train_samples();
  std::vector<double> runs[2];
  for (auto& r : runs) {
    tr::Trainer t(c, detector(c, s));
    auto b = batch(t.detector(), s, 3);
    auto gen = dpl::make_torch_generator(3);
    for (int i = 0; i < 5; ++i) r.push_back(t.stage1_step(b, gen).total);
  }
  EXPECT_EQ(runs[0], runs[1]);
}

TEST_F(Pipeline, Stage1LeavesProposerAlone) {
  auto c = config("s1prop");
  auto s = train_samples();
  tr::Trainer t(c, detector(c, s));
  auto before = dpl::parameter_hash(t.detector().model()->proposer->parameters());
  auto b = batch(t.detector(), s, 4);
  auto gen = dpl::make_torch_generator(4);
  t.stage1_step(b, gen);
  EXPECT_EQ(dpl::parameter_hash(t.detector().model()->proposer->parameters()), before);
}

TEST_F(Pipeline, Stage2FreezesEverythingButProposer) {
  auto c = config("s2");
  auto s = train_samples();
  tr::Trainer t(c, detector(c, s));
  auto b = batch(t.detector(), s, 5);
  auto gen = dpl::make_torch_generator(5);
  t.stage1_step(b, gen);
  t.begin_stage2();
  const auto frozen = t.frozen_hash();
  const auto proposer = dpl::parameter_hash(t.detector().model()->proposer->parameters());
  int64_t transitions = 0;
  for (int i = 0; i < 5; ++i) transitions += t.stage2_step(b, gen).transitions;
  EXPECT_EQ(t.frozen_hash(), frozen);
  EXPECT_NO_THROW(t.verify_frozen());
  EXPECT_GT(transitions, 0);
  EXPECT_NE(dpl::parameter_hash(t.detector().model()->proposer->parameters()), proposer);
}

TEST_F(Pipeline, FreezeViolationDetected) {
  auto c = config("s2bad");
  auto s = train_samples();
  tr::Trainer t(c, detector(c, s));
  t.begin_stage2();
  {
    torch::NoGradGuard ng;
    t.detector().model()->head->linear->bias.add_(1.0);
  }
  EXPECT_THROW(t.verify_frozen(), dpl::FreezeViolationError);
}

TEST(PpoUpdate, DeadRewardOnlyGrowsSigma) {
  torch::manual_seed(0);
  dpl::fsm::MaskProposer p(6, 4);
  tr::ValueHead v(6, 5);
  {
    torch::NoGradGuard ng;
    v->fc2->weight.zero_();
    v->fc2->bias.zero_();
  }
  std::vector<torch::Tensor> params = p->parameters();
  for (auto& q : v->parameters()) params.push_back(q);
  torch::optim::Adam opt(params, torch::optim::AdamOptions(1e-2));
  std::vector<torch::Tensor> pooled{torch::randn({4, 6}), torch::randn({4, 6})};
  auto draws = torch::randn({2, 4});
  auto g = p->initial_state(4, torch::kFloat32);
  auto rep = dpl::fsm::replay(p, pooled, {draws[0], draws[1]});
  auto sigma0 = rep.sigma.mean().item<double>();
  tr::PpoConfig cfg;
  cfg.normalize_advantages = false;
  auto out = tr::ppo_update(p, v, opt, pooled, draws, rep.log_prob.detach(), torch::zeros({2, 4}),
                            torch::ones({2, 4}), cfg);
  EXPECT_EQ(out.rew, 0.0);
  EXPECT_EQ(out.se, 0.0);
  auto after = dpl::fsm::replay(p, pooled, {draws[0], draws[1]});
  EXPECT_GT(after.sigma.mean().item<double>(), sigma0);
}

TEST_F(Pipeline, TrainWritesArtifactsAndFreezesBackbone) {
  auto c = config("train");
  std::ostringstream progress;
  auto res = tr::train(c, false, &progress);
  EXPECT_EQ(res.epochs_completed, 3);
  ASSERT_EQ(res.checkpoints.size(), 3u);
  for (int e = 1; e <= 3; ++e) EXPECT_TRUE(fs::exists(tr::checkpoint_path(c, e)));
  auto m = lines(fs::path(c.output_dir) / "metrics.jsonl");
  ASSERT_EQ(m.size(), 3u);
  auto r1 = nlohmann::json::parse(m[0]), r2 = nlohmann::json::parse(m[1]), r3 = nlohmann::json::parse(m[2]);
  EXPECT_EQ(r1["stage"], 1);
  EXPECT_EQ(r2["stage"], 2);
  EXPECT_EQ(r1["backbone_sha256"], r2["backbone_sha256"]);
  EXPECT_EQ(r2["backbone_sha256"], r3["backbone_sha256"]);
  EXPECT_TRUE(r2.contains("rew") && r2.contains("se") && r2.contains("en"));
  EXPECT_TRUE(fs::exists(fs::path(c.output_dir) / "quantizers" / "quality.quantizer"));
  EXPECT_FALSE(lines(fs::path(c.output_dir) / "trajectories.jsonl").empty());

  // Reload and evaluate.
  auto loaded = dpl::load_model(res.last_checkpoint);
  EXPECT_EQ(loaded.meta["epoch"], 3);
  auto test = dpl::load_split(c.data.test_manifest, data::Split::kTest, 64);
  ev::EvalOptions opt;
  opt.seed = c.seed;
  auto a = ev::evaluate(*loaded.detector, test, opt);
  auto b = ev::evaluate(*loaded.detector, test, opt);
  EXPECT_EQ(a.scores, b.scores);
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
  EXPECT_EQ(a.n_samples, static_cast<int64_t>(test.size()));
  EXPECT_EQ(a.n_real + a.n_fake, a.n_samples);
  opt.policy = {data::CompressionMode::kRandomJpeg, 30, 100};
  auto jpeg = ev::evaluate(*loaded.detector, test, opt);
  EXPECT_NE(jpeg.to_json().dump(), a.to_json().dump());

  auto train_set = train_samples();
  opt.policy = {};
  EXPECT_GT(ev::evaluate(*loaded.detector, train_set, opt).auc, 0.5);

  std::vector<data::Sample> reals;
  for (auto& s : test)
    if (s.label == 0) reals.push_back(s);
  EXPECT_THROW(ev::evaluate(*loaded.detector, reals, opt), dpl::SingleClassError);

  auto cells = ev::robustness_sweep(*loaded.detector, test, opt);
  EXPECT_EQ(cells.size(), 20u);
  auto dir = fs::path(c.output_dir);
  ev::save_robustness_csv(cells, dir / "robustness.csv");
  EXPECT_EQ(lines(dir / "robustness.csv").size(), 21u);
  ev::plot_robustness(cells, dir / "robustness.png", a.auc);
  EXPECT_GT(fs::file_size(dir / "robustness.png"), 0u);

  ev::export_embeddings(*loaded.detector, test, opt, dir / "emb.tsv");
  auto rows = lines(dir / "emb.tsv");
  ASSERT_EQ(rows.size(), test.size() + 2);
  const auto fused = loaded.detector->model()->fused_dim();
  EXPECT_EQ(rows[0], "# dpl-embeddings v1 dim=" + std::to_string(fused) + " n=" + std::to_string(test.size()));
  for (std::size_t i = 0; i < test.size(); ++i) {
    std::istringstream row(rows[i + 2]);
    int label;
    row >> label;
    EXPECT_EQ(label, test[i].label);
    std::size_t count = 0;
    for (double x; row >> x;) ++count;
    EXPECT_EQ(count, static_cast<std::size_t>(fused) + 2);
  }
}

TEST_F(Pipeline, ResumeContinuesAndMatches) {
  auto full = config("resume_full");
  tr::train(full);
  auto part = config("resume_part");
  part.training.stage2_epochs = 1;
  tr::train(part);
  // The same run extended to three epochs; the fingerprint must match, so
  // resume with the full config in the partial directory.
  auto cont = full;
  cont.output_dir = part.output_dir;
  EXPECT_THROW(tr::train(cont, true), dpl::ConfigError);

  auto first = config("resume_split");
  tr::train(first);
  fs::remove(tr::checkpoint_path(first, 3));
  auto res = tr::train(first, true);
  EXPECT_EQ(res.checkpoints.size(), 1u);
  EXPECT_EQ(slurp(fs::path(first.output_dir) / "metrics.jsonl"),
            slurp(fs::path(full.output_dir) / "metrics.jsonl"));
}

TEST_F(Pipeline, StageOneSkipped) {
  auto c = config("skip1");
  c.training.stage1_epochs = 0;
  c.training.stage2_epochs = 1;
  auto res = tr::train(c);
  EXPECT_EQ(res.epochs_completed, 1);
  EXPECT_EQ(nlohmann::json::parse(lines(fs::path(c.output_dir) / "metrics.jsonl")[0])["stage"], 2);
}

TEST_F(Pipeline, MissingQuantizersIsConfigError) {
  auto c = config("noquant");
  c.training.auto_fit_indicators = false;
  EXPECT_THROW(tr::train(c), dpl::ConfigError);
}

#include "dpl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "dpl/checkpoint.hpp"
#include "dpl/errors.hpp"
#include "dpl/pipeline.hpp"
#include "dpl/random.hpp"

namespace dpl::training {

namespace fs = std::filesystem;
using nlohmann::json;

ValueHeadImpl::ValueHeadImpl(int64_t channels, int64_t hidden) {
  fc1 = register_module("fc1", torch::nn::Linear(channels, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, 1));
}

torch::Tensor ValueHeadImpl::forward(const torch::Tensor& pooled) {
  return fc2(torch::tanh(fc1(pooled))).squeeze(-1);
}

Batch make_batch(Detector& detector, std::span<const data::Sample> samples,
                 std::span<const std::size_t> indices, const data::CompressionPolicy& policy, Rng& rng) {
  std::vector<FaceImage> images;
  images.reserve(indices.size());
  Batch b;
  b.labels = torch::empty({static_cast<int64_t>(indices.size())}, torch::kInt64);
  auto lab = b.labels.accessor<int64_t, 1>();
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const auto& s = samples[indices[j]];
    images.push_back(data::jpeg_augment(s.image, policy, rng));
    lab[static_cast<int64_t>(j)] = s.label;
    b.indices.push_back(indices[j]);
  }
  b.levels = detector.assign_levels(images);
  b.images = backbone::images_to_tensor(images, parameter_dtype(*detector.model()));
  return b;
}

namespace {

void check_finite(const torch::Tensor& total, const std::string& what) {
  if (!std::isfinite(total.item<double>())) throw NonFiniteLossError("non-finite loss (" + what + ")");
}

int64_t count_correct(const torch::Tensor& confidences, const torch::Tensor& labels) {
  return labels.size(0) - hard_sample_flags(confidences, labels).sum().item<int64_t>();
}

}  // namespace

LossBreakdown ppo_update(fsm::MaskProposer& proposer, ValueHead& value_head,
                         torch::optim::Optimizer& optimizer, const std::vector<torch::Tensor>& pooled,
                         const torch::Tensor& draws, const torch::Tensor& old_log_probs,
                         const torch::Tensor& returns, const torch::Tensor& mask, const PpoConfig& config,
                         torch::Tensor* old_values) {
  LossBreakdown out;
  out.stage = 2;
  const auto steps = static_cast<int64_t>(pooled.size());
  if (steps == 0) return out;
  if (draws.size(0) != steps || old_log_probs.sizes() != draws.sizes() || returns.sizes() != draws.sizes() ||
      mask.sizes() != draws.sizes())
    throw ShapeError("ppo_update inputs must all be S x N");
  auto m = mask.to(returns.scalar_type());
  out.transitions = static_cast<int64_t>(m.sum().item<double>());
  if (out.transitions == 0) return out;

  std::vector<torch::Tensor> states, draw_list;
  for (int64_t s = 0; s < steps; ++s) {
    states.push_back(pooled[static_cast<std::size_t>(s)].detach());
    draw_list.push_back(draws[s]);
  }
  auto flat = torch::cat(states, 0);
  const int64_t n = draws.size(1);
  torch::Tensor v_old;
  {
    torch::NoGradGuard no_grad;
    v_old = value_head->forward(flat).view({steps, n});
  }
  if (old_values) *old_values = v_old;
  auto adv = advantage(returns, v_old) * m;
  if (config.normalize_advantages) adv = normalize_advantages(adv, m);

  for (int e = 0; e < config.ppo_epochs_per_batch; ++e) {
    auto rr = fsm::replay(proposer, states, draw_list);
    auto rew = ppo_loss(rr.log_prob, old_log_probs, adv, m, config);
    auto v = value_head->forward(flat).view({steps, n});
    auto se = value_loss(v, returns, m);
    auto en = config.entropy_coefficient * entropy_bonus(rr.sigma, m);
    auto total = rew + se - en;
    check_finite(total, "stage 2");
    optimizer.zero_grad();
    total.backward();
    optimizer.step();
    out.rew += rew.item<double>();
    out.se += se.item<double>();
    out.en += en.item<double>();
  }
  const double k = config.ppo_epochs_per_batch;
  out.rew /= k;
  out.se /= k;
  out.en /= k;
  out.total = out.rew + out.se - out.en;
  return out;
}

Trainer::Trainer(RunConfig config, Detector detector)
    : config_(std::move(config)), detector_(std::move(detector)) {
  torch::manual_seed(derive_seed(config_.seed, SeedStream::kInit, 1));
  value_head_ = ValueHead(detector_.model()->channels(), config_.training.value_hidden);
  auto params = detector_.model()->non_proposer_parameters();
  stage1_optimizer_ = std::make_unique<torch::optim::Adam>(
      params, torch::optim::AdamOptions(config_.training.learning_rate));
  value_head_->to(parameter_dtype(*detector_.model()));
}

LossBreakdown Trainer::stage1_step(const Batch& batch, at::Generator& generator) {
  auto& model = detector_.model();
  auto rec = detector_.forward(batch.images, batch.levels, fsm::SamplingMode::kUniformRandom, generator);
  auto ce = focal_ce_loss(rec.final_prediction.logits, batch.labels, config_.training.focal_gamma);
  torch::Tensor reg = torch::zeros({}, ce.options());
  if (config_.training.use_reg) {
    auto flags = hard_sample_flags(rec.final_prediction.confidences.detach(), batch.labels);
    std::vector<torch::Tensor> step_logits;
    for (const auto& p : rec.step_predictions) step_logits.push_back(p.logits);
    reg = reg_loss(step_logits, rec.depth, flags, config_.training.reg_placement, config_.training.reg_sign);
  }
  auto total = ce + reg;
  check_finite(total, "stage 1: ce=" + std::to_string(ce.item<double>()) +
                          " reg=" + std::to_string(reg.item<double>()));
  stage1_optimizer_->zero_grad();
  total.backward();
  stage1_optimizer_->step();
  (void)model;

  LossBreakdown out;
  out.stage = 1;
  out.ce = ce.item<double>();
  out.reg = reg.item<double>();
  out.total = out.ce + out.reg;
  out.samples = batch.labels.size(0);
  out.correct = count_correct(rec.final_prediction.confidences.detach(), batch.labels);
  return out;
}

std::string Trainer::frozen_hash() const {
  return parameter_hash(detector_.model()->non_proposer_parameters());
}

void Trainer::begin_stage2() {
  if (stage2_optimizer_) return;
  for (auto& p : detector_.model()->non_proposer_parameters()) p.set_requires_grad(false);
  std::vector<torch::Tensor> params = detector_.model()->proposer->parameters();
  for (auto& p : value_head_->parameters()) params.push_back(p);
  stage2_optimizer_ = std::make_unique<torch::optim::Adam>(
      params, torch::optim::AdamOptions(config_.training.stage2_learning_rate));
  frozen_hash_ = frozen_hash();
}

void Trainer::verify_frozen() const {
  if (frozen_hash_.empty()) return;
  auto now = frozen_hash();
  if (now != frozen_hash_)
    throw FreezeViolationError("frozen parameters changed during stage 2 (" + frozen_hash_ + " -> " + now + ")");
}

LossBreakdown Trainer::stage2_step(const Batch& batch, at::Generator& generator, TrajectoryLog* log) {
  begin_stage2();
  auto& model = detector_.model();
  const int64_t n = batch.labels.size(0);
  branches::ForwardRecord rec;
  {
    torch::NoGradGuard no_grad;
    auto features = model->backbone->forward(batch.images);
    rec = model->forward_features(features, batch.levels.k1, batch.levels.k2, fsm::SamplingMode::kStochastic,
                                  generator);
  }
  const auto steps = static_cast<int64_t>(rec.trajectory.outcomes.size());
  LossBreakdown out;
  if (steps > 0) {
    auto returns = torch::zeros({steps, n}, torch::kFloat64);
    auto mask = torch::zeros({steps, n}, torch::kFloat64);
    auto ra = returns.accessor<double, 2>();
    auto ma = mask.accessor<double, 2>();
    auto labels = batch.labels.accessor<int64_t, 1>();
    std::vector<TrajectoryRecord> records;
    for (int64_t i = 0; i < n; ++i) {
      records.push_back(compute_rewards(rec, i, labels[i], config_.ppo.return_rule));
      const auto& r = records.back();
      for (std::size_t s = 0; s < r.returns.size(); ++s) {
        ra[static_cast<int64_t>(s)][i] = r.returns[s];
        ma[static_cast<int64_t>(s)][i] = 1.0;
      }
    }
    std::vector<torch::Tensor> draws, old_lp, pooled;
    for (int64_t s = 0; s < steps; ++s) {
      const auto& o = rec.trajectory.outcomes[static_cast<std::size_t>(s)];
      draws.push_back(o.draw);
      old_lp.push_back(o.log_prob.detach());
      pooled.push_back(rec.trajectory.pooled[static_cast<std::size_t>(s)]);
    }
    const auto dtype = parameter_dtype(*model);
    torch::Tensor values;
    auto draw_t = torch::stack(draws);
    auto old_t = torch::stack(old_lp);
    out = ppo_update(model->proposer, value_head_, *stage2_optimizer_, pooled, draw_t, old_t,
                     returns.to(dtype), mask.to(dtype), config_.ppo, &values);

    if (log && log->out) {
      auto k1 = rec.k1.accessor<int64_t, 1>();
      auto k2 = rec.k2.accessor<int64_t, 1>();
      auto positions = torch::stack([&] {
        std::vector<torch::Tensor> v;
        for (const auto& o : rec.trajectory.outcomes) v.push_back(o.position);
        return v;
      }()).to(torch::kFloat64);
      auto pa = positions.accessor<double, 2>();
      auto da = draw_t.to(torch::kFloat64);
      auto la = old_t.to(torch::kFloat64);
      auto va = values.to(torch::kFloat64);
      auto dacc = da.accessor<double, 2>();
      auto lacc = la.accessor<double, 2>();
      auto vacc = va.accessor<double, 2>();
      for (int64_t i = 0; i < n; ++i) {
        const auto& r = records[static_cast<std::size_t>(i)];
        if (r.rewards.empty()) continue;
        json line;
        line["epoch"] = log->epoch;
        line["batch"] = log->batch;
        line["index"] = batch.indices.empty() ? i : static_cast<int64_t>(batch.indices[static_cast<std::size_t>(i)]);
        line["label"] = labels[i];
        line["k1"] = k1[i];
        line["k2"] = k2[i];
        json pos = json::array(), dr = json::array(), lp = json::array(), val = json::array();
        for (std::size_t s = 0; s < r.rewards.size(); ++s) {
          const auto si = static_cast<int64_t>(s);
          pos.push_back(pa[si][i]);
          dr.push_back(dacc[si][i]);
          lp.push_back(lacc[si][i]);
          val.push_back(vacc[si][i]);
        }
        line["positions"] = pos;
        line["draws"] = dr;
        line["old_log_probs"] = lp;
        line["confidences"] = r.confidences;
        line["rewards"] = r.rewards;
        line["returns"] = r.returns;
        line["values"] = val;
        *log->out << line.dump() << '\n';
      }
    }
  }
  out.stage = 2;
  out.samples = n;
  out.correct = count_correct(rec.final_prediction.confidences, batch.labels);
  verify_frozen();
  return out;
}

fs::path checkpoint_path(const RunConfig& config, int epoch) {
  char name[32];
  std::snprintf(name, sizeof name, "epoch_%02d.dplckpt", epoch);
  return fs::path(config.output_dir) / "checkpoints" / name;
}

namespace {

struct Accumulator {
  LossBreakdown sum;
  int64_t batches = 0;

  void add(const LossBreakdown& b) {
    sum.stage = b.stage;
    sum.ce += b.ce;
    sum.reg += b.reg;
    sum.rew += b.rew;
    sum.se += b.se;
    sum.en += b.en;
    sum.samples += b.samples;
    sum.correct += b.correct;
    sum.transitions += b.transitions;
    ++batches;
  }

  json record(int epoch, const std::string& backbone_hash) const {
    const double k = batches > 0 ? static_cast<double>(batches) : 1.0;
    json j;
    j["epoch"] = epoch;
    j["stage"] = sum.stage;
    if (sum.stage == 1) {
      j["ce"] = sum.ce / k;
      j["reg"] = sum.reg / k;
      j["total"] = (sum.ce + sum.reg) / k;
    } else {
      j["rew"] = sum.rew / k;
      j["se"] = sum.se / k;
      j["en"] = sum.en / k;
      j["total"] = (sum.rew + sum.se - sum.en) / k;
      j["transitions"] = sum.transitions;
    }
    j["train_accuracy"] = sum.samples > 0 ? static_cast<double>(sum.correct) / static_cast<double>(sum.samples) : 0.0;
    j["samples"] = sum.samples;
    j["backbone_sha256"] = backbone_hash;
    return j;
  }
};

std::string backbone_hash(Detector& detector) {
  return parameter_hash(detector.model()->backbone->parameters());
}

// Keeps only the lines whose "epoch" field is <= last_epoch.
void truncate_log(const fs::path& path, int last_epoch) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::ostringstream kept;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      if (json::parse(line).at("epoch").get<int>() <= last_epoch) kept << line << '\n';
    } catch (const json::exception&) {
      // a torn line from an interrupted write is dropped
    }
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << kept.str();
}

std::optional<std::pair<int, fs::path>> newest_checkpoint(const RunConfig& config) {
  std::optional<std::pair<int, fs::path>> best;
  const int total = config.training.stage1_epochs + config.training.stage2_epochs;
  for (int e = total; e >= 1; --e) {
    auto p = checkpoint_path(config, e);
    if (fs::exists(p)) return std::make_pair(e, p);
  }
  return best;
}

}  // namespace

TrainResult train(const RunConfig& config, bool resume, std::ostream* progress) {
  config.validate();
  apply_runtime(config);
  const fs::path out_dir(config.output_dir);

  auto train_samples = load_split(config.data.train_manifest, data::Split::kTrain, config.data.image_size);
  if (train_samples.empty()) throw InsufficientDataError("the training split is empty");

  auto qpaths = quantizer_paths(config);
  indicators::QuantizerSpec qspec, sspec;
  if (fs::exists(qpaths.quality) && fs::exists(qpaths.identifiability) && !config.training.auto_fit_indicators) {
    qspec = indicators::QuantizerSpec::load(qpaths.quality);
    sspec = indicators::QuantizerSpec::load(qpaths.identifiability);
  } else if (config.training.auto_fit_indicators) {
    auto fit = fit_indicators(config, train_samples);
    fs::create_directories(qpaths.quality.parent_path());
    fit.quality.save(qpaths.quality);
    fit.identifiability.save(qpaths.identifiability);
    qspec = fit.quality;
    sspec = fit.identifiability;
  } else {
    throw ConfigError("quantizers not found under " + qpaths.quality.parent_path().string() +
                      "; run fit-indicators or set training.auto_fit_indicators");
  }
  if (qspec.levels != config.indicators.quality_levels ||
      sspec.levels != config.indicators.identifiability_levels)
    throw ConfigError("stored quantizer level counts differ from the config");

  fs::create_directories(out_dir / "checkpoints");
  {
    std::ofstream cfg(out_dir / "config.json");
    cfg << to_json(config).dump(2) << '\n';
  }

  Trainer trainer(config, make_detector(config, qspec, sspec));
  const std::string config_fp = fingerprint(config);
  const fs::path metrics_path = out_dir / "metrics.jsonl";
  const fs::path traj_path = out_dir / "trajectories.jsonl";
  const int s1 = config.training.stage1_epochs;
  const int total = s1 + config.training.stage2_epochs;

  TrainResult result;
  int start = 1;
  if (resume) {
    if (auto found = newest_checkpoint(config)) {
      auto ckpt = Checkpoint::load(found->second);
      if (ckpt.meta().value("config_fingerprint", std::string()) != config_fp)
        throw ConfigError("checkpoint " + found->second.string() + " was written with a different config");
      ckpt.load_module("model", *trainer.detector().model());
      ckpt.load_module("value_head", *trainer.value_head());
      ckpt.load_optimizer("stage1_optimizer", trainer.stage1_optimizer());
      if (found->first >= s1 && ckpt.contains("stage2_optimizer")) {
        trainer.begin_stage2();
        ckpt.load_optimizer("stage2_optimizer", *trainer.stage2_optimizer());
      }
      start = found->first + 1;
      result.last_checkpoint = found->second;
      result.epochs_completed = found->first;
    }
  }
  truncate_log(metrics_path, start - 1);
  truncate_log(traj_path, start - 1);
  std::ofstream metrics(metrics_path, std::ios::app);
  std::ofstream traj;
  if (config.training.export_trajectories) traj.open(traj_path, std::ios::app);

  const std::size_t n = train_samples.size();
  const auto batch_size = static_cast<std::size_t>(config.training.batch_size);
  for (int epoch = start; epoch <= total; ++epoch) {
    const int stage = epoch <= s1 ? 1 : 2;
    if (stage == 2) trainer.begin_stage2();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(config.seed, SeedStream::kShuffle, static_cast<std::uint64_t>(epoch)));
    shuffle(order, shuffle_rng);
    Rng augment_rng(derive_seed(config.seed, SeedStream::kAugment, static_cast<std::uint64_t>(epoch)));
    auto gen = make_torch_generator(derive_seed(config.seed, SeedStream::kMaskSampling, static_cast<std::uint64_t>(epoch)));

    Accumulator acc;
    int64_t batch_index = 0;
    for (std::size_t begin = 0; begin < n; begin += batch_size, ++batch_index) {
      if (config.training.max_batches_per_epoch > 0 && batch_index >= config.training.max_batches_per_epoch) break;
      const std::size_t end = std::min(n, begin + batch_size);
      std::span<const std::size_t> idx(order.data() + begin, end - begin);
      auto batch = make_batch(trainer.detector(), train_samples, idx, config.data.train_compression, augment_rng);
      if (stage == 1) {
        acc.add(trainer.stage1_step(batch, gen));
      } else {
        TrajectoryLog log{traj.is_open() ? &traj : nullptr, epoch, batch_index};
        acc.add(trainer.stage2_step(batch, gen, &log));
      }
    }

    const auto bhash = backbone_hash(trainer.detector());
    auto record = acc.record(epoch, bhash);
    metrics << record.dump() << '\n';
    metrics.flush();
    if (traj.is_open()) traj.flush();

    Checkpoint ckpt;
    ckpt.put_module("model", *trainer.detector().model());
    ckpt.put_module("value_head", *trainer.value_head());
    ckpt.put_optimizer("stage1_optimizer", trainer.stage1_optimizer());
    if (trainer.stage2_optimizer()) ckpt.put_optimizer("stage2_optimizer", *trainer.stage2_optimizer());
    ckpt.put_text("config", to_json(config).dump(2));
    ckpt.put_text("quality_quantizer", qspec.to_text());
    ckpt.put_text("identifiability_quantizer", sspec.to_text());
    ckpt.meta() = {{"epoch", epoch},
                   {"stage", stage},
                   {"config_fingerprint", config_fp},
                   {"backbone_sha256", bhash},
                   {"frozen_sha256", trainer.frozen_hash()}};
    const auto path = checkpoint_path(config, epoch);
    ckpt.save(path);
    result.checkpoints.push_back(path);
    result.last_checkpoint = path;
    result.epochs_completed = epoch;

    if (progress) {
      *progress << "epoch " << epoch << "/" << total << " stage " << stage << " loss " << record["total"].get<double>()
                << " acc " << record["train_accuracy"].get<double>() << '\n';
    }
  }
  return result;
}

}  // namespace dpl::training

#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include <torch/torch.h>

#include "dpl/config.hpp"
#include "dpl/data.hpp"
#include "dpl/detector.hpp"
#include "dpl/losses.hpp"

namespace dpl::training {

// V: pooled feature (N x c) -> N scalars, a two-layer tanh MLP.
class ValueHeadImpl : public torch::nn::Module {
 public:
  ValueHeadImpl(int64_t channels, int64_t hidden);
  torch::Tensor forward(const torch::Tensor& pooled);

  torch::nn::Linear fc1{nullptr};
  torch::nn::Linear fc2{nullptr};
};
TORCH_MODULE(ValueHead);

struct LossBreakdown {
  int stage = 1;
  double ce = 0, reg = 0;          // stage 1: total = ce + reg
  double rew = 0, se = 0, en = 0;  // stage 2: total = rew + se - en (en already weighted)
  double total = 0;
  int64_t samples = 0;
  int64_t correct = 0;      // final prediction matches the label
  int64_t transitions = 0;  // stage 2: valid (sample, step) pairs
};

struct Batch {
  torch::Tensor images;  // N x 3 x H x W
  LevelAssignment levels;
  torch::Tensor labels;  // N int64
  std::vector<std::size_t> indices;  // dataset positions, batch order
};

// Augments (per policy) the selected samples in the given order, scores the
// indicators on the augmented crops and stacks them.
Batch make_batch(Detector& detector, std::span<const data::Sample> samples,
                 std::span<const std::size_t> indices, const data::CompressionPolicy& policy, Rng& rng);

// One clipped-surrogate update sequence on recorded transitions.
//   pooled: S entries N x c, the state each action was taken from
//   draws, old_log_probs, returns, mask: S x N
// Advantages A = R - V_old are computed once before the inner epochs and
// optionally normalized over the valid entries. Runs ppo_epochs_per_batch
// optimizer steps on L_REW + L_SE - coef * L_EN; the breakdown averages the
// inner epochs.
LossBreakdown ppo_update(fsm::MaskProposer& proposer, ValueHead& value_head,
                         torch::optim::Optimizer& optimizer, const std::vector<torch::Tensor>& pooled,
                         const torch::Tensor& draws, const torch::Tensor& old_log_probs,
                         const torch::Tensor& returns, const torch::Tensor& mask, const PpoConfig& config,
                         torch::Tensor* old_values = nullptr);

// Line sink for Stage II trajectory records.
struct TrajectoryLog {
  std::ostream* out = nullptr;
  int epoch = 0;
  int64_t batch = 0;
};

class Trainer {
 public:
  Trainer(RunConfig config, Detector detector);

  // L_1 = focal CE + L_REG with the FSM as a uniform randomizer. Updates every
  // parameter except the proposer's.
  LossBreakdown stage1_step(const Batch& batch, at::Generator& generator);

  // Freezes all non-proposer parameters, records their hash and creates the
  // Stage II optimizer (proposer + value head). Idempotent.
  void begin_stage2();

  // Collects stochastic trajectories with the current proposer, then runs
  // ppo_update. Throws FreezeViolationError if a frozen parameter changed.
  LossBreakdown stage2_step(const Batch& batch, at::Generator& generator, TrajectoryLog* log = nullptr);

  std::string frozen_hash() const;
  void verify_frozen() const;

  Detector& detector() { return detector_; }
  ValueHead& value_head() { return value_head_; }
  torch::optim::Adam& stage1_optimizer() { return *stage1_optimizer_; }
  torch::optim::Adam* stage2_optimizer() { return stage2_optimizer_.get(); }
  const RunConfig& config() const { return config_; }

 private:
  RunConfig config_;
  Detector detector_;
  ValueHead value_head_{nullptr};
  std::unique_ptr<torch::optim::Adam> stage1_optimizer_;
  std::unique_ptr<torch::optim::Adam> stage2_optimizer_;
  std::string frozen_hash_;
};

struct TrainResult {
  std::filesystem::path last_checkpoint;
  std::vector<std::filesystem::path> checkpoints;  // written by this call
  int epochs_completed = 0;
};

// Output layout under config.output_dir:
//   quantizers/{quality,identifiability}.quantizer
//   checkpoints/epoch_NN.dplckpt   one per epoch
//   metrics.jsonl                  one record per epoch
//   trajectories.jsonl             Stage II records (when enabled)
//   config.json                    the resolved config
// Quantizers are read from disk, or fitted first when auto_fit_indicators is
// set. With resume, training continues after the newest checkpoint whose
// config fingerprint matches.
TrainResult train(const RunConfig& config, bool resume = false, std::ostream* progress = nullptr);

std::filesystem::path checkpoint_path(const RunConfig& config, int epoch);

}  // namespace dpl::training

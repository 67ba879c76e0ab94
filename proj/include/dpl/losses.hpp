#pragma once

#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "dpl/branches.hpp"

namespace dpl::training {

// Mean over samples of -(1 - p_y)^gamma * log p_y, with log p_y taken from
// log_softmax of the logits. gamma = 0 is plain cross-entropy.
torch::Tensor focal_ce_loss(const torch::Tensor& logits, const torch::Tensor& labels, double gamma = 2.0);

// Same loss on confidences directly; confidences are clamped to >= 1e-12
// before the log.
torch::Tensor focal_ce_from_confidences(const torch::Tensor& confidences, const torch::Tensor& labels,
                                        double gamma = 2.0);

// 1 where the final prediction disagrees with the label. Prediction is
// "fake" only when c_fake > c_real, so an exact tie counts as "real".
torch::Tensor hard_sample_flags(const torch::Tensor& final_confidences, const torch::Tensor& labels);
int is_hard_sample(double real_confidence, double fake_confidence, int label);

enum class RegPlacement {
  kFirst,             // step 1 only
  kLast,              // the sample's final step only
  kLastAndPreceding,  // steps 1 .. final
};
RegPlacement reg_placement_from_string(const std::string& name);
const char* to_string(RegPlacement placement);

enum class RegSign {
  kDeferDecisions,  // loss = sum c log c (minimizing raises entropy)
  kLiteral,         // loss = -sum c log c
};
RegSign reg_sign_from_string(const std::string& name);
const char* to_string(RegSign sign);

// step_logits: T entries of N x 2; depth: N int64 (steps actually run per
// sample); flags: N in {0, 1}. Sums the selected steps' signed entropy
// terms over flagged samples and divides by N.
torch::Tensor reg_loss(const std::vector<torch::Tensor>& step_logits, const torch::Tensor& depth,
                       const torch::Tensor& flags, RegPlacement placement,
                       RegSign sign = RegSign::kDeferDecisions);

enum class ReturnRule {
  kRewardToGo,  // R_t = sum_{tau >= t} r_tau
  kTotal,       // R_t = sum_{tau >= 2} r_tau for every t
};
ReturnRule return_rule_from_string(const std::string& name);
const char* to_string(ReturnRule rule);

// Per-sample trajectory signals. Transition t (t = 2..T) stores the reward
// r_t = c_t - c_{t-1} earned by the mask sampled at step t - 1.
struct TrajectoryRecord {
  std::vector<double> confidences;  // c_1 .. c_T
  std::vector<double> rewards;      // r_2 .. r_T
  std::vector<double> returns;      // R_2 .. R_T
};

TrajectoryRecord compute_rewards(std::span<const double> confidences,
                                 ReturnRule rule = ReturnRule::kRewardToGo);
TrajectoryRecord compute_rewards(const branches::ForwardRecord& record, int64_t sample, int64_t label,
                                 ReturnRule rule = ReturnRule::kRewardToGo);

// A_t = R_t - V(f_t).
std::vector<double> advantage(std::span<const double> returns, std::span<const double> values);
torch::Tensor advantage(const torch::Tensor& returns, const torch::Tensor& values);

// Zero-mean, unit-variance over entries where mask != 0.
torch::Tensor normalize_advantages(const torch::Tensor& advantages, const torch::Tensor& mask);

struct PpoConfig {
  double clip_epsilon = 0.2;
  int ppo_epochs_per_batch = 4;
  double entropy_coefficient = 0.01;
  bool normalize_advantages = true;
  ReturnRule return_rule = ReturnRule::kRewardToGo;

  void validate() const;
};

// Elementwise min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A).
torch::Tensor clipped_surrogate(const torch::Tensor& ratio, const torch::Tensor& advantages,
                                double clip_epsilon);

// -E_t[clipped_surrogate(exp(new - old), A)]. The masked form averages over
// entries with mask != 0.
torch::Tensor ppo_loss(const torch::Tensor& new_log_probs, const torch::Tensor& old_log_probs,
                       const torch::Tensor& advantages, const PpoConfig& config);
torch::Tensor ppo_loss(const torch::Tensor& new_log_probs, const torch::Tensor& old_log_probs,
                       const torch::Tensor& advantages, const torch::Tensor& mask,
                       const PpoConfig& config);

// Mean squared error.
torch::Tensor value_loss(const torch::Tensor& values, const torch::Tensor& returns);
torch::Tensor value_loss(const torch::Tensor& values, const torch::Tensor& returns,
                         const torch::Tensor& mask);

// Mean Gaussian differential entropy 0.5 * log(2 pi e sigma^2).
torch::Tensor entropy_bonus(const torch::Tensor& sigma);
torch::Tensor entropy_bonus(const torch::Tensor& sigma, const torch::Tensor& mask);

}  // namespace dpl::training

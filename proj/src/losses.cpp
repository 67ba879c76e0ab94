#include "dpl/losses.hpp"

#include <cmath>
#include <numbers>

#include "dpl/errors.hpp"

namespace dpl::training {

namespace {

torch::Tensor gather_label(const torch::Tensor& x, const torch::Tensor& labels) {
  return x.gather(1, labels.to(torch::kInt64).view({-1, 1})).squeeze(1);
}

torch::Tensor masked_mean(const torch::Tensor& x, const torch::Tensor& mask) {
  auto m = mask.to(x.scalar_type());
  auto count = m.sum();
  return torch::where(count > 0, (x * m).sum() / count.clamp_min(1), torch::zeros_like(count));
}

}  // namespace

torch::Tensor focal_ce_loss(const torch::Tensor& logits, const torch::Tensor& labels, double gamma) {
  auto log_p = gather_label(torch::log_softmax(logits, 1), labels);
  auto p = log_p.exp();
  auto weight = gamma == 0.0 ? torch::ones_like(p) : torch::pow(1.0 - p, gamma);
  return -(weight * log_p).mean();
}

torch::Tensor focal_ce_from_confidences(const torch::Tensor& confidences, const torch::Tensor& labels,
                                        double gamma) {
  auto p = gather_label(confidences, labels);
  auto log_p = torch::log(p.clamp_min(1e-12));
  auto weight = gamma == 0.0 ? torch::ones_like(p) : torch::pow(1.0 - p, gamma);
  return -(weight * log_p).mean();
}

int is_hard_sample(double real_confidence, double fake_confidence, int label) {
  const int predicted = fake_confidence > real_confidence ? 1 : 0;
  return predicted != label ? 1 : 0;
}

torch::Tensor hard_sample_flags(const torch::Tensor& final_confidences, const torch::Tensor& labels) {
  auto c = final_confidences.detach();
  auto predicted = (c.select(1, 1) > c.select(1, 0)).to(torch::kInt64);
  return (predicted != labels.to(torch::kInt64)).to(torch::kInt64);
}

RegPlacement reg_placement_from_string(const std::string& name) {
  if (name == "first") return RegPlacement::kFirst;
  if (name == "last") return RegPlacement::kLast;
  if (name == "last_and_preceding") return RegPlacement::kLastAndPreceding;
  throw ConfigError("unknown reg placement: " + name);
}

const char* to_string(RegPlacement placement) {
  switch (placement) {
    case RegPlacement::kFirst:
      return "first";
    case RegPlacement::kLast:
      return "last";
    case RegPlacement::kLastAndPreceding:
      return "last_and_preceding";
  }
  return "?";
}

RegSign reg_sign_from_string(const std::string& name) {
  if (name == "defer_decisions") return RegSign::kDeferDecisions;
  if (name == "literal") return RegSign::kLiteral;
  throw ConfigError("unknown reg sign variant: " + name);
}

const char* to_string(RegSign sign) {
  return sign == RegSign::kDeferDecisions ? "defer_decisions" : "literal";
}

torch::Tensor reg_loss(const std::vector<torch::Tensor>& step_logits, const torch::Tensor& depth,
                       const torch::Tensor& flags, RegPlacement placement, RegSign sign) {
  if (step_logits.empty()) throw ShapeError("reg_loss needs at least one step");
  const int64_t n = step_logits.front().size(0);
  auto d = depth.to(torch::kInt64).view({n});
  auto f = flags.to(step_logits.front().scalar_type()).view({n});
  auto total = torch::zeros({n}, step_logits.front().options());
  for (std::size_t t = 0; t < step_logits.size(); ++t) {
    const auto step = static_cast<int64_t>(t) + 1;
    torch::Tensor selected;
    switch (placement) {
      case RegPlacement::kFirst:
        selected = torch::full({n}, step == 1, torch::kBool);
        break;
      case RegPlacement::kLast:
        selected = d == step;
        break;
      case RegPlacement::kLastAndPreceding:
        selected = d >= step;
        break;
    }
    auto log_c = torch::log_softmax(step_logits[t], 1);
    auto neg_entropy = (log_c.exp() * log_c).sum(1);  // sum_j c log c
    total = total + torch::where(selected, neg_entropy, torch::zeros_like(neg_entropy));
  }
  auto loss = (f * total).sum() / static_cast<double>(n);
  return sign == RegSign::kDeferDecisions ? loss : -loss;
}

ReturnRule return_rule_from_string(const std::string& name) {
  if (name == "reward_to_go") return ReturnRule::kRewardToGo;
  if (name == "total") return ReturnRule::kTotal;
  throw ConfigError("unknown return rule: " + name);
}

const char* to_string(ReturnRule rule) {
  return rule == ReturnRule::kRewardToGo ? "reward_to_go" : "total";
}

TrajectoryRecord compute_rewards(std::span<const double> confidences, ReturnRule rule) {
  TrajectoryRecord rec;
  rec.confidences.assign(confidences.begin(), confidences.end());
  for (std::size_t t = 1; t < confidences.size(); ++t)
    rec.rewards.push_back(confidences[t] - confidences[t - 1]);
  rec.returns.resize(rec.rewards.size());
  double running = 0.0;
  for (std::size_t i = rec.rewards.size(); i-- > 0;) {
    running += rec.rewards[i];
    rec.returns[i] = running;
  }
  if (rule == ReturnRule::kTotal)
    for (auto& r : rec.returns) r = running;
  return rec;
}

TrajectoryRecord compute_rewards(const branches::ForwardRecord& record, int64_t sample, int64_t label,
                                 ReturnRule rule) {
  const auto c = record.confidences_for(sample, label);
  return compute_rewards(c, rule);
}

std::vector<double> advantage(std::span<const double> returns, std::span<const double> values) {
  if (returns.size() != values.size()) throw ShapeError("returns and values must align");
  std::vector<double> a(returns.size());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = returns[i] - values[i];
  return a;
}

torch::Tensor advantage(const torch::Tensor& returns, const torch::Tensor& values) {
  if (returns.sizes() != values.sizes()) throw ShapeError("returns and values must align");
  return (returns - values).detach();
}

torch::Tensor normalize_advantages(const torch::Tensor& advantages, const torch::Tensor& mask) {
  auto m = mask.to(advantages.scalar_type());
  const double count = m.sum().item<double>();
  if (count < 2) return advantages;
  auto mean = (advantages * m).sum() / count;
  auto var = ((advantages - mean).pow(2) * m).sum() / count;
  return ((advantages - mean) / (var.sqrt() + 1e-8)) * m;
}

void PpoConfig::validate() const {
  if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0)) throw ConfigError("clip_epsilon must lie in (0, 1)");
  if (ppo_epochs_per_batch < 1) throw ConfigError("ppo_epochs_per_batch must be positive");
  if (!(entropy_coefficient >= 0.0)) throw ConfigError("entropy_coefficient must be non-negative");
}

torch::Tensor clipped_surrogate(const torch::Tensor& ratio, const torch::Tensor& advantages,
                                double clip_epsilon) {
  auto unclipped = ratio * advantages;
  auto clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantages;
  return torch::min(unclipped, clipped);
}

torch::Tensor ppo_loss(const torch::Tensor& new_log_probs, const torch::Tensor& old_log_probs,
                       const torch::Tensor& advantages, const PpoConfig& config) {
  return ppo_loss(new_log_probs, old_log_probs, advantages, torch::ones_like(advantages), config);
}

torch::Tensor ppo_loss(const torch::Tensor& new_log_probs, const torch::Tensor& old_log_probs,
                       const torch::Tensor& advantages, const torch::Tensor& mask,
                       const PpoConfig& config) {
  if (new_log_probs.sizes() != old_log_probs.sizes() || new_log_probs.sizes() != advantages.sizes())
    throw ShapeError("ppo_loss inputs must have equal shapes");
  auto ratio = torch::exp(new_log_probs - old_log_probs.detach());
  return -masked_mean(clipped_surrogate(ratio, advantages.detach(), config.clip_epsilon), mask);
}

torch::Tensor value_loss(const torch::Tensor& values, const torch::Tensor& returns) {
  return value_loss(values, returns, torch::ones_like(values));
}

torch::Tensor value_loss(const torch::Tensor& values, const torch::Tensor& returns,
                         const torch::Tensor& mask) {
  if (values.sizes() != returns.sizes()) throw ShapeError("values and returns must align");
  return masked_mean((values - returns.detach()).pow(2), mask);
}

torch::Tensor entropy_bonus(const torch::Tensor& sigma) {
  return entropy_bonus(sigma, torch::ones_like(sigma));
}

torch::Tensor entropy_bonus(const torch::Tensor& sigma, const torch::Tensor& mask) {
  const double c = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e);
  return masked_mean(torch::log(sigma) + c, mask);
}

}  // namespace dpl::training

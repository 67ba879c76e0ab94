#include "dpl/branches.hpp"

#include <algorithm>

#include "dpl/errors.hpp"

namespace dpl::branches {

FusionStrategy fusion_from_string(const std::string& name) {
  if (name == "add") return FusionStrategy::kAdd;
  if (name == "concat") return FusionStrategy::kConcat;
  if (name == "attention") return FusionStrategy::kAttention;
  throw ConfigError("unknown fusion strategy: " + name);
}

const char* to_string(FusionStrategy strategy) {
  switch (strategy) {
    case FusionStrategy::kAdd:
      return "add";
    case FusionStrategy::kConcat:
      return "concat";
    case FusionStrategy::kAttention:
      return "attention";
  }
  return "?";
}

RecurrentBranchImpl::RecurrentBranchImpl(int64_t channels, int64_t hidden_size)
    : channels_(channels), hidden_size_(hidden_size) {
  if (channels < 1 || hidden_size < 1) throw ConfigError("branch sizes must be positive");
  adapter = register_module("adapter", torch::nn::Linear(channels, hidden_size));
  cell = register_module("cell", torch::nn::GRUCell(hidden_size, hidden_size));
}

torch::Tensor RecurrentBranchImpl::step(const torch::Tensor& pooled, const torch::Tensor& hidden) {
  if (pooled.dim() != 2 || pooled.size(1) != channels_)
    throw ShapeError("branch expects N x " + std::to_string(channels_) + " pooled input");
  ++invocations_;
  return cell(adapter(pooled), hidden);
}

BranchRun RecurrentBranchImpl::run(const std::vector<torch::Tensor>& pooled, const torch::Tensor& levels) {
  if (pooled.empty()) throw ShapeError("branch needs at least one pooled input");
  const int64_t n = pooled.front().size(0);
  if (levels.numel() != n) throw ShapeError("one level per sample required");
  const int64_t steps = levels.max().item<int64_t>();
  if (levels.min().item<int64_t>() < 1) throw ShapeError("levels must be at least 1");
  if (static_cast<int64_t>(pooled.size()) < steps)
    throw ShapeError("insufficient pooled inputs: need " + std::to_string(steps) + ", got " +
                     std::to_string(pooled.size()));

  BranchRun run;
  auto h = torch::zeros({n, hidden_size_}, pooled.front().options());
  torch::Tensor sum;
  run.active_steps = torch::zeros({n}, torch::kInt64);
  for (int64_t t = 1; t <= steps; ++t) {
    auto active = (levels >= t).view({n, 1});
    auto stepped = step(pooled[static_cast<std::size_t>(t - 1)], h);
    h = torch::where(active, stepped, h);
    sum = t == 1 ? h : torch::where(active, sum + h, sum);
    run.active_steps += (levels >= t).to(torch::kInt64);
    run.hidden.push_back(h);
    run.partial.push_back(sum);
  }
  run.fused = sum;
  return run;
}

BranchSummary run_branch(RecurrentBranch& branch, const std::vector<torch::Tensor>& pooled, int64_t k) {
  if (k < 1) throw ShapeError("k must be at least 1");
  if (static_cast<int64_t>(pooled.size()) < k)
    throw ShapeError("insufficient pooled inputs: need " + std::to_string(k) + ", got " +
                     std::to_string(pooled.size()));
  auto levels = torch::full({pooled.front().size(0)}, k, torch::kInt64);
  auto r = branch->run(pooled, levels);
  return {r.fused, r.hidden};
}

FusionAttentionImpl::FusionAttentionImpl(int64_t dim) {
  query = register_parameter("query", torch::zeros({dim}));
}

torch::Tensor FusionAttentionImpl::forward(const torch::Tensor& a, const torch::Tensor& b) {
  auto scores = torch::stack({a.matmul(query), b.matmul(query)}, 1);
  auto w = torch::softmax(scores, 1);
  return w.select(1, 0).unsqueeze(1) * a + w.select(1, 1).unsqueeze(1) * b;
}

torch::Tensor fuse_branches(const torch::Tensor& a, const torch::Tensor& b, FusionStrategy strategy,
                            FusionAttention* attention) {
  switch (strategy) {
    case FusionStrategy::kAdd:
      if (a.sizes() != b.sizes()) throw ShapeError("add fusion needs equal dimensions");
      return a + b;
    case FusionStrategy::kConcat:
      return torch::cat({a, b}, -1);
    case FusionStrategy::kAttention:
      if (a.sizes() != b.sizes()) throw ShapeError("attention fusion needs equal dimensions");
      if (!attention || !*attention) throw ConfigError("attention fusion needs its module");
      return (*attention)(a, b);
  }
  throw ConfigError("unknown fusion strategy");
}

ClassifierHeadImpl::ClassifierHeadImpl(int64_t in_features, bool zero_init) : in_features_(in_features) {
  linear = register_module("linear", torch::nn::Linear(in_features, 2));
  if (zero_init) {
    torch::NoGradGuard no_grad;
    linear->weight.zero_();
    linear->bias.zero_();
  }
}

torch::Tensor ClassifierHeadImpl::forward(const torch::Tensor& feature) {
  if (feature.size(-1) != in_features_)
    throw ShapeError("classifier expects " + std::to_string(in_features_) + " features, got " +
                     std::to_string(feature.size(-1)));
  return linear(feature);
}

Prediction prediction_from_logits(const torch::Tensor& logits) {
  return {logits, torch::softmax(logits, -1)};
}

Prediction classify(ClassifierHead& head, const torch::Tensor& feature) {
  return prediction_from_logits(head(feature));
}

std::vector<double> ForwardRecord::confidences_for(int64_t sample, int64_t label) const {
  const int64_t t_max = depth[sample].item<int64_t>();
  std::vector<double> c;
  c.reserve(static_cast<std::size_t>(t_max));
  for (int64_t t = 0; t < t_max; ++t)
    c.push_back(step_predictions[static_cast<std::size_t>(t)]
                    .confidences[sample][label]
                    .item<double>());
  return c;
}

DplModelImpl::DplModelImpl(const ModelConfig& config) : config_(config) {
  backbone = register_module("backbone", backbone::make_backbone(config.backbone));
  channels_ = backbone->output_channels();
  delta_ = config.delta > 0 ? config.delta : fsm::default_delta(channels_);
  if (delta_ > channels_) throw ConfigError("delta exceeds the channel count");
  proposer = register_module("proposer",
                             fsm::MaskProposer(channels_, config.proposer_hidden, config.initial_sigma));
  quality_branch = register_module("quality_branch", RecurrentBranch(channels_, config.hidden_size));
  identifiability_branch =
      register_module("identifiability_branch", RecurrentBranch(channels_, config.hidden_size));
  if (config.fusion == FusionStrategy::kAttention)
    attention = register_module("attention", FusionAttention(config.hidden_size));
  head = register_module("head", ClassifierHead(fused_dim()));
}

int64_t DplModelImpl::fused_dim() const {
  return config_.fusion == FusionStrategy::kConcat ? 2 * config_.hidden_size : config_.hidden_size;
}

torch::Tensor DplModelImpl::fuse(const torch::Tensor& a, const torch::Tensor& b) {
  return fuse_branches(a, b, config_.fusion, &attention);
}

ForwardRecord DplModelImpl::forward(const torch::Tensor& images, const torch::Tensor& k1,
                                    const torch::Tensor& k2, fsm::SamplingMode mode,
                                    at::Generator& generator) {
  return forward_features(backbone->forward(images), k1, k2, mode, generator);
}

ForwardRecord DplModelImpl::forward_features(const torch::Tensor& features, const torch::Tensor& k1,
                                             const torch::Tensor& k2, fsm::SamplingMode mode,
                                             at::Generator& generator) {
  if (features.dim() != 4 || features.size(1) != channels_)
    throw ShapeError("features must be N x " + std::to_string(channels_) + " x h x w");
  const int64_t n = features.size(0);
  if (k1.numel() != n || k2.numel() != n) throw ShapeError("one level pair per sample required");

  ForwardRecord rec;
  rec.k1 = k1.to(torch::kInt64).flatten();
  rec.k2 = k2.to(torch::kInt64).flatten();
  rec.depth = torch::maximum(rec.k1, rec.k2);
  const int64_t steps = rec.depth.max().item<int64_t>();

  rec.trajectory = fsm::unroll(features, steps, proposer, delta_, mode, generator);
  auto vq = quality_branch->run(rec.trajectory.pooled, rec.k1);
  auto fi = identifiability_branch->run(rec.trajectory.pooled, rec.k2);
  rec.quality_steps = vq.active_steps;
  rec.identifiability_steps = fi.active_steps;

  for (int64_t t = 0; t < steps; ++t) {
    const auto& a = vq.partial[static_cast<std::size_t>(std::min<int64_t>(t, vq.partial.size() - 1))];
    const auto& b = fi.partial[static_cast<std::size_t>(std::min<int64_t>(t, fi.partial.size() - 1))];
    auto fused = fuse(a, b);
    rec.step_predictions.push_back(classify(head, fused));
    if (t == steps - 1) rec.fused = fused;
  }
  rec.final_prediction = rec.step_predictions.back();
  return rec;
}

std::vector<torch::Tensor> DplModelImpl::non_proposer_parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& item : named_parameters(/*recurse=*/true)) {
    if (item.key().rfind("proposer.", 0) == 0) continue;
    out.push_back(item.value());
  }
  return out;
}

}  // namespace dpl::branches

#include "dpl/fsm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dpl/errors.hpp"

namespace dpl::fsm {

const char* to_string(SamplingMode mode) {
  switch (mode) {
    case SamplingMode::kStochastic:
      return "stochastic";
    case SamplingMode::kDeterministic:
      return "deterministic";
    case SamplingMode::kUniformRandom:
      return "uniform";
  }
  return "?";
}

int64_t default_delta(int64_t channels) { return std::max<int64_t>(1, channels / 3); }

MaskProposerImpl::MaskProposerImpl(int64_t channels, int64_t hidden_size, double initial_sigma)
    : channels_(channels), hidden_size_(hidden_size) {
  if (channels < 1 || hidden_size < 1) throw ConfigError("proposer sizes must be positive");
  cell = register_module("cell", torch::nn::GRUCell(channels, hidden_size));
  head = register_module("head", torch::nn::Linear(hidden_size, 2));
  torch::NoGradGuard no_grad;
  head->weight.zero_();
  head->bias.zero_();
  // softplus^{-1}(initial_sigma - floor)
  const double s = initial_sigma - kSigmaFloor;
  head->bias[1] = std::log(std::expm1(s));
}

MaskProposal MaskProposerImpl::forward(const torch::Tensor& pooled, const torch::Tensor& hidden) {
  if (pooled.dim() != 2 || pooled.size(1) != channels_)
    throw ShapeError("proposer expects N x " + std::to_string(channels_) + " pooled input");
  auto g = cell(pooled, hidden);
  auto out = head(g);
  auto mu = out.select(1, 0);
  auto sigma = torch::nn::functional::softplus(out.select(1, 1)) + kSigmaFloor;
  return {mu, sigma, g};
}

torch::Tensor MaskProposerImpl::initial_state(int64_t batch, const torch::TensorOptions& options) const {
  return torch::zeros({batch, hidden_size_}, options);
}

torch::Tensor spatial_mean(const torch::Tensor& feature_map) {
  if (feature_map.dim() != 4) throw ShapeError("feature map must be N x c x h x w");
  return feature_map.mean({2, 3});
}

MaskProposal propose(MaskProposer& proposer, const torch::Tensor& feature_map,
                     const torch::Tensor& hidden) {
  if (feature_map.dim() != 4 || feature_map.size(1) != proposer->channels())
    throw ShapeError("feature map channel count does not match the proposer");
  return proposer->forward(spatial_mean(feature_map), hidden);
}

torch::Tensor gaussian_log_prob(const torch::Tensor& x, const torch::Tensor& mu,
                                const torch::Tensor& sigma) {
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  auto z = (x - mu) / sigma;
  return -0.5 * z * z - torch::log(sigma) - half_log_2pi;
}

SamplingOutcome sample_uniform(int64_t batch, int64_t channels, at::Generator& generator,
                               const torch::TensorOptions& options) {
  auto u = torch::rand({batch}, generator, options);
  SamplingOutcome out;
  out.mode = SamplingMode::kUniformRandom;
  out.position = u * static_cast<double>(channels);
  out.draw = torch::logit(u, 1e-12);
  out.log_prob = torch::full({batch}, -std::log(static_cast<double>(channels)), options);
  return out;
}

SamplingOutcome sample_position(const MaskProposal& proposal, int64_t channels, SamplingMode mode,
                                at::Generator& generator) {
  if (mode == SamplingMode::kUniformRandom)
    return sample_uniform(proposal.mu.size(0), channels, generator, proposal.mu.options());
  SamplingOutcome out;
  out.mode = mode;
  if (mode == SamplingMode::kStochastic) {
    auto eps = torch::randn(proposal.mu.sizes(), generator, proposal.mu.options());
    out.draw = (proposal.mu + proposal.sigma * eps).detach();
  } else {
    out.draw = proposal.mu.detach().clone();
  }
  out.position = torch::sigmoid(out.draw) * static_cast<double>(channels);
  out.log_prob = gaussian_log_prob(out.draw, proposal.mu, proposal.sigma);
  return out;
}

ChannelWindow window_for(double position, int64_t delta, int64_t channels) {
  const auto start =
      std::clamp<int64_t>(static_cast<int64_t>(std::floor(position)), 0, channels);
  return {start, std::max<int64_t>(0, std::min(delta, channels - start))};
}

namespace {

torch::Tensor window_starts(const torch::Tensor& position, int64_t channels) {
  return torch::floor(position.detach().to(torch::kFloat64)).clamp(0, channels).to(torch::kInt64);
}

}  // namespace

torch::Tensor channel_pattern(const torch::Tensor& position, int64_t delta, int64_t channels,
                              const torch::TensorOptions& options) {
  if (delta < 1 || delta > channels) throw ConfigError("delta must lie in [1, c]");
  auto start = window_starts(position, channels).unsqueeze(1);
  auto idx = torch::arange(channels, torch::kInt64).unsqueeze(0);
  auto inside = (idx >= start) & (idx < start + delta);
  return torch::logical_not(inside).to(options.dtype());
}

torch::Tensor build_mask(const torch::Tensor& position, int64_t delta, int64_t channels, int64_t height,
                         int64_t width, const torch::TensorOptions& options) {
  auto pattern = channel_pattern(position, delta, channels, options);
  return pattern.view({pattern.size(0), channels, 1, 1}).expand({pattern.size(0), channels, height, width});
}

Selection select_features(const torch::Tensor& feature_map, const torch::Tensor& mask) {
  if (feature_map.dim() != 4) throw ShapeError("feature map must be N x c x h x w");
  if (mask.dim() != 4 || mask.size(0) != feature_map.size(0) || mask.size(1) != feature_map.size(1))
    throw ShapeError("mask shape does not match the feature map");
  auto mean = feature_map.mean({2, 3}, /*keepdim=*/true);
  auto next = feature_map - mask * mean;
  return {next, next.mean({2, 3})};
}

Trajectory unroll(const torch::Tensor& f1, int64_t steps, MaskProposer& proposer, int64_t delta,
                  SamplingMode mode, at::Generator& generator,
                  const std::vector<torch::Tensor>* forced_draws) {
  if (steps < 1) throw ConfigError("unroll needs at least one step");
  if (f1.dim() != 4) throw ShapeError("feature map must be N x c x h x w");
  const int64_t n = f1.size(0), c = f1.size(1), h = f1.size(2), w = f1.size(3);
  if (forced_draws && static_cast<int64_t>(forced_draws->size()) < steps - 1)
    throw ShapeError("not enough forced draws for the requested steps");

  Trajectory traj;
  traj.pooled.push_back(spatial_mean(f1));
  torch::Tensor f = f1;
  torch::Tensor g;
  const bool use_proposer = mode != SamplingMode::kUniformRandom || forced_draws != nullptr;
  if (use_proposer) {
    if (proposer->channels() != c) throw ShapeError("feature map channel count does not match the proposer");
    g = proposer->initial_state(n, f1.options());
  }
  for (int64_t t = 1; t < steps; ++t) {
    SamplingOutcome outcome;
    if (forced_draws) {
      auto proposal = proposer->forward(traj.pooled.back(), g);
      g = proposal.hidden;
      outcome.mode = mode;
      outcome.draw = (*forced_draws)[static_cast<std::size_t>(t - 1)].detach();
      outcome.position = torch::sigmoid(outcome.draw) * static_cast<double>(c);
      outcome.log_prob = gaussian_log_prob(outcome.draw, proposal.mu, proposal.sigma);
      traj.proposals.push_back(proposal);
    } else if (mode == SamplingMode::kUniformRandom) {
      outcome = sample_uniform(n, c, generator, f1.options());
    } else {
      auto proposal = proposer->forward(traj.pooled.back(), g);
      g = proposal.hidden;
      outcome = sample_position(proposal, c, mode, generator);
      traj.proposals.push_back(proposal);
    }
    auto mask = build_mask(outcome.position, delta, c, h, w, f1.options());
    auto sel = select_features(f, mask);
    f = sel.next;
    traj.pooled.push_back(sel.pooled);
    auto start = window_starts(outcome.position, c);
    auto width = torch::clamp(c - start, 0, delta);
    traj.windows.push_back(torch::stack({start, width}, 1));
    traj.outcomes.push_back(std::move(outcome));
  }
  return traj;
}

ReplayResult replay(MaskProposer& proposer, const std::vector<torch::Tensor>& pooled,
                    const std::vector<torch::Tensor>& draws) {
  if (pooled.size() != draws.size()) throw ShapeError("replay needs one pooled input per draw");
  ReplayResult r;
  if (draws.empty()) return r;
  auto g = proposer->initial_state(pooled.front().size(0), pooled.front().options());
  std::vector<torch::Tensor> lp, mu, sigma;
  for (std::size_t t = 0; t < draws.size(); ++t) {
    auto p = proposer->forward(pooled[t], g);
    g = p.hidden;
    lp.push_back(gaussian_log_prob(draws[t], p.mu, p.sigma));
    mu.push_back(p.mu);
    sigma.push_back(p.sigma);
  }
  r.log_prob = torch::stack(lp);
  r.mu = torch::stack(mu);
  r.sigma = torch::stack(sigma);
  return r;
}

}  // namespace dpl::fsm

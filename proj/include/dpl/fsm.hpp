#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <torch/torch.h>

namespace dpl::fsm {

enum class SamplingMode {
  kStochastic,     // draw z ~ N(mu, sigma), position = c * sigmoid(z)
  kDeterministic,  // z = mu
  kUniformRandom,  // position ~ U[0, c]; the proposer is not consulted
};

const char* to_string(SamplingMode mode);

// Batched Gaussian over the pre-squash window start.
struct MaskProposal {
  torch::Tensor mu;      // N
  torch::Tensor sigma;   // N, > 0
  torch::Tensor hidden;  // N x G, proposer state g_t
};

struct SamplingOutcome {
  torch::Tensor position;  // N, in [0, c]
  torch::Tensor draw;      // N, pre-squash value (detached)
  torch::Tensor log_prob;  // N; Gaussian log-density of draw, or -log(c) when uniform
  SamplingMode mode = SamplingMode::kDeterministic;
};

// Half-open retained channel range [start, start + width).
struct ChannelWindow {
  int64_t start = 0;
  int64_t width = 0;
};

int64_t default_delta(int64_t channels);

// GRU over the pooled feature with a two-output head: mu = out_0,
// sigma = softplus(out_1) + kSigmaFloor. The head starts at zero weight so
// every input initially proposes mu = 0 (the middle channel).
class MaskProposerImpl : public torch::nn::Module {
 public:
  static constexpr double kSigmaFloor = 1e-3;

  MaskProposerImpl(int64_t channels, int64_t hidden_size = 64, double initial_sigma = 1.0);

  MaskProposal forward(const torch::Tensor& pooled, const torch::Tensor& hidden);
  torch::Tensor initial_state(int64_t batch, const torch::TensorOptions& options) const;

  int64_t channels() const { return channels_; }
  int64_t hidden_size() const { return hidden_size_; }

  torch::nn::GRUCell cell{nullptr};
  torch::nn::Linear head{nullptr};

 private:
  int64_t channels_;
  int64_t hidden_size_;
};
TORCH_MODULE(MaskProposer);

// Pools an N x c x h x w map and runs the proposer. Throws ShapeError when the
// channel count does not match the proposer.
MaskProposal propose(MaskProposer& proposer, const torch::Tensor& feature_map,
                     const torch::Tensor& hidden);

torch::Tensor gaussian_log_prob(const torch::Tensor& x, const torch::Tensor& mu,
                                const torch::Tensor& sigma);

SamplingOutcome sample_position(const MaskProposal& proposal, int64_t channels, SamplingMode mode,
                                at::Generator& generator);
SamplingOutcome sample_uniform(int64_t batch, int64_t channels, at::Generator& generator,
                               const torch::TensorOptions& options = torch::kFloat32);

ChannelWindow window_for(double position, int64_t delta, int64_t channels);

// N x c binary pattern: 0 inside each row's window, 1 elsewhere.
torch::Tensor channel_pattern(const torch::Tensor& position, int64_t delta, int64_t channels,
                              const torch::TensorOptions& options = torch::kFloat32);

// N x c x h x w mask (an expanded view of channel_pattern).
torch::Tensor build_mask(const torch::Tensor& position, int64_t delta, int64_t channels, int64_t height,
                         int64_t width, const torch::TensorOptions& options = torch::kFloat32);

torch::Tensor spatial_mean(const torch::Tensor& feature_map);

struct Selection {
  torch::Tensor next;    // f_{t+1} = f_t - M_t * mean_hw(f_t), N x c x h x w
  torch::Tensor pooled;  // mean_hw(f_{t+1}), N x c
};

Selection select_features(const torch::Tensor& feature_map, const torch::Tensor& mask);

struct Trajectory {
  std::vector<torch::Tensor> pooled;             // T entries, N x c; pooled[0] from f_1
  std::vector<SamplingOutcome> outcomes;         // T - 1 entries
  std::vector<MaskProposal> proposals;           // T - 1 entries (empty when uniform)
  std::vector<torch::Tensor> windows;            // T - 1 entries, N x 2 int64 (start, width)
};

// One propose -> sample -> mask -> select cycle per step after the first.
// When forced_draws is given (T - 1 entries, N each) the pre-squash draws are
// replayed instead of sampled; log_probs are evaluated under the current
// proposer.
Trajectory unroll(const torch::Tensor& f1, int64_t steps, MaskProposer& proposer, int64_t delta,
                  SamplingMode mode, at::Generator& generator,
                  const std::vector<torch::Tensor>* forced_draws = nullptr);

struct ReplayResult {
  torch::Tensor log_prob;  // (T-1) x N
  torch::Tensor mu;        // (T-1) x N
  torch::Tensor sigma;     // (T-1) x N
};

// Re-evaluates the proposer along a recorded trajectory. pooled holds the
// first T - 1 pooled inputs; masks depend only on the draws, so the pooled
// sequence is unchanged by proposer updates.
ReplayResult replay(MaskProposer& proposer, const std::vector<torch::Tensor>& pooled,
                    const std::vector<torch::Tensor>& draws);

}  // namespace dpl::fsm

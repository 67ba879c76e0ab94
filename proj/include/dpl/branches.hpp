#pragma once

#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "dpl/backbone.hpp"
#include "dpl/fsm.hpp"

namespace dpl::branches {

enum class FusionStrategy { kAdd, kConcat, kAttention };

FusionStrategy fusion_from_string(const std::string& name);
const char* to_string(FusionStrategy strategy);

struct BranchSummary {
  torch::Tensor fused;                  // N x H, sum of per_step in step order
  std::vector<torch::Tensor> per_step;  // h_1 .. h_k
};

// Result of a batched, per-sample-depth branch run.
struct BranchRun {
  torch::Tensor fused;                  // N x H
  std::vector<torch::Tensor> hidden;    // one per executed step; rows past their depth hold h_k
  std::vector<torch::Tensor> partial;   // partial[t] = sum of h_1 .. h_min(t+1, k_i)
  torch::Tensor active_steps;           // N, recurrent updates applied to each row
};

// A linear adapter (c -> H) followed by a GRU cell (H -> H), started from a
// zero state.
class RecurrentBranchImpl : public torch::nn::Module {
 public:
  RecurrentBranchImpl(int64_t channels, int64_t hidden_size);

  torch::Tensor step(const torch::Tensor& pooled, const torch::Tensor& hidden);

  // Executes max(levels) steps; row i is updated only while t <= levels[i].
  // Throws ShapeError when fewer pooled inputs than steps are supplied.
  BranchRun run(const std::vector<torch::Tensor>& pooled, const torch::Tensor& levels);

  int64_t hidden_size() const { return hidden_size_; }
  // Number of step() calls since construction or the last reset.
  int64_t invocations() const { return invocations_; }
  void reset_invocations() { invocations_ = 0; }

  torch::nn::Linear adapter{nullptr};
  torch::nn::GRUCell cell{nullptr};

 private:
  int64_t channels_;
  int64_t hidden_size_;
  int64_t invocations_ = 0;
};
TORCH_MODULE(RecurrentBranch);

// Every sample executes exactly k steps.
BranchSummary run_branch(RecurrentBranch& branch, const std::vector<torch::Tensor>& pooled, int64_t k);

// Learned-query attention merge: weights = softmax([a.u, b.u]).
class FusionAttentionImpl : public torch::nn::Module {
 public:
  explicit FusionAttentionImpl(int64_t dim);
  torch::Tensor forward(const torch::Tensor& a, const torch::Tensor& b);

  torch::Tensor query;
};
TORCH_MODULE(FusionAttention);

// add: a + b (ShapeError on mismatch); concat: [a, b]; attention requires the
// module.
torch::Tensor fuse_branches(const torch::Tensor& a, const torch::Tensor& b, FusionStrategy strategy,
                            FusionAttention* attention = nullptr);

struct Prediction {
  torch::Tensor logits;       // N x 2, class order (real = 0, fake = 1)
  torch::Tensor confidences;  // softmax of logits
};

class ClassifierHeadImpl : public torch::nn::Module {
 public:
  ClassifierHeadImpl(int64_t in_features, bool zero_init = false);
  torch::Tensor forward(const torch::Tensor& feature);

  int64_t in_features() const { return in_features_; }
  torch::nn::Linear linear{nullptr};

 private:
  int64_t in_features_;
};
TORCH_MODULE(ClassifierHead);

// Throws ShapeError when the feature width differs from the head's.
Prediction classify(ClassifierHead& head, const torch::Tensor& feature);
Prediction prediction_from_logits(const torch::Tensor& logits);

struct ModelConfig {
  backbone::BackboneSpec backbone;
  int64_t hidden_size = 256;
  int64_t proposer_hidden = 64;
  int64_t delta = 0;  // 0: floor(c / 3)
  FusionStrategy fusion = FusionStrategy::kAdd;
  double initial_sigma = 1.0;
};

struct ForwardRecord {
  Prediction final_prediction;               // prediction at step max(k1, k2)
  std::vector<Prediction> step_predictions;  // one per executed step (batch maximum depth)
  torch::Tensor fused;                       // N x F, fused two-branch feature
  torch::Tensor k1, k2, depth;               // N int64, depth = max(k1, k2)
  fsm::Trajectory trajectory;
  torch::Tensor quality_steps;               // N, P1 updates per sample
  torch::Tensor identifiability_steps;       // N, P2 updates per sample

  // c_1 .. c_T of class `label` for sample i (T = depth_i).
  std::vector<double> confidences_for(int64_t sample, int64_t label) const;
};

class DplModelImpl : public torch::nn::Module {
 public:
  explicit DplModelImpl(const ModelConfig& config);

  // images: N x 3 x H x W. k1, k2: N int64 levels (>= 1).
  ForwardRecord forward(const torch::Tensor& images, const torch::Tensor& k1, const torch::Tensor& k2,
                        fsm::SamplingMode mode, at::Generator& generator);

  // Same as forward() but starting from backbone features N x c x h x w.
  ForwardRecord forward_features(const torch::Tensor& features, const torch::Tensor& k1,
                                 const torch::Tensor& k2, fsm::SamplingMode mode,
                                 at::Generator& generator);

  torch::Tensor fuse(const torch::Tensor& a, const torch::Tensor& b);

  // Parameters other than the proposer's (backbone, branches, fusion, head).
  std::vector<torch::Tensor> non_proposer_parameters() const;

  const ModelConfig& config() const { return config_; }
  int64_t channels() const { return channels_; }
  int64_t delta() const { return delta_; }
  int64_t fused_dim() const;

  std::shared_ptr<backbone::Backbone> backbone;
  fsm::MaskProposer proposer{nullptr};
  RecurrentBranch quality_branch{nullptr};
  RecurrentBranch identifiability_branch{nullptr};
  FusionAttention attention{nullptr};
  ClassifierHead head{nullptr};

 private:
  ModelConfig config_;
  int64_t channels_;
  int64_t delta_;
};
TORCH_MODULE(DplModel);

}  // namespace dpl::branches

#pragma once

#include <memory>
#include <span>
#include <vector>

#include "dpl/branches.hpp"
#include "dpl/image.hpp"
#include "dpl/indicators.hpp"

namespace dpl {

struct LevelAssignment {
  std::vector<double> quality_scores;
  std::vector<double> identifiability_scores;
  torch::Tensor k1;  // N int64
  torch::Tensor k2;  // N int64
};

// Indicator-routed detector: scores each crop, quantizes the scores into
// step levels, then runs the dual-branch model.
class Detector {
 public:
  Detector(branches::DplModel model, std::shared_ptr<const indicators::Indicator> quality,
           std::shared_ptr<const indicators::Indicator> identifiability,
           indicators::QuantizerSpec quality_quantizer,
           indicators::QuantizerSpec identifiability_quantizer);

  // Forces k1 = k2 = 1 (the fixed-depth ablation).
  void set_fixed_depth(bool fixed) { fixed_depth_ = fixed; }
  bool fixed_depth() const { return fixed_depth_; }

  LevelAssignment assign_levels(std::span<const FaceImage> images) const;

  branches::ForwardRecord forward(std::span<const FaceImage> images, fsm::SamplingMode mode,
                                  at::Generator& generator);
  branches::ForwardRecord forward(const torch::Tensor& images, const LevelAssignment& levels,
                                  fsm::SamplingMode mode, at::Generator& generator);

  branches::DplModel& model() { return model_; }
  const branches::DplModel& model() const { return model_; }
  const indicators::QuantizerSpec& quality_quantizer() const { return quality_quantizer_; }
  const indicators::QuantizerSpec& identifiability_quantizer() const {
    return identifiability_quantizer_;
  }

 private:
  branches::DplModel model_;
  std::shared_ptr<const indicators::Indicator> quality_;
  std::shared_ptr<const indicators::Indicator> identifiability_;
  indicators::QuantizerSpec quality_quantizer_;
  indicators::QuantizerSpec identifiability_quantizer_;
  bool fixed_depth_ = false;
};

// Model parameter dtype (float32 unless converted).
torch::Dtype parameter_dtype(torch::nn::Module& module);

}  // namespace dpl

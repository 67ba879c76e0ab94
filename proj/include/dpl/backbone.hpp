#pragma once

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "dpl/image.hpp"

namespace dpl::backbone {

struct BackboneSpec {
  std::string name = "tiny";
  int64_t output_channels = 48;
  std::string pretrained_path;  // empty: random initialization
  bool bias = true;
};

// Feature extractor: N x 3 x H x W images -> N x c x h x w feature maps.
class Backbone : public torch::nn::Module {
 public:
  virtual torch::Tensor forward(const torch::Tensor& images) = 0;
  virtual int64_t output_channels() const = 0;
  virtual std::array<int64_t, 2> output_size(int64_t height, int64_t width) const = 0;
};

using BackboneFactory = std::function<std::shared_ptr<Backbone>(const BackboneSpec&)>;

class BackboneRegistry {
 public:
  // Process-wide registry with the built-in entries ("tiny", "torchscript").
  static BackboneRegistry& global();

  // Throws DuplicateNameError.
  void add(const std::string& name, BackboneFactory factory);
  // Throws UnknownBackboneError; propagates WeightLoadError from the factory.
  std::shared_ptr<Backbone> create(const BackboneSpec& spec) const;
  bool contains(const std::string& name) const;
  std::vector<std::string> names() const;

 private:
  mutable std::mutex mutex_;
  std::map<std::string, BackboneFactory> factories_;
};

void register_backbone(const std::string& name, BackboneFactory factory);
std::shared_ptr<Backbone> make_backbone(const BackboneSpec& spec);

// Three conv stages with a total stride of 32: an 8x8/8 patchify stem followed
// by a 3x3 conv (c/3 channels), then 2x2/2 (2c/3) and 2x2/2 (c). 224 -> 7.
// Inputs are standardized per image first, so a uniform grey image enters as
// zeros.
class TinyBackbone final : public Backbone {
 public:
  explicit TinyBackbone(const BackboneSpec& spec);

  torch::Tensor forward(const torch::Tensor& images) override;
  int64_t output_channels() const override { return channels_; }
  std::array<int64_t, 2> output_size(int64_t height, int64_t width) const override;

 private:
  int64_t channels_;
  torch::nn::Conv2d stem_{nullptr}, mix_{nullptr}, down1_{nullptr}, down2_{nullptr};
};

// Wraps a TorchScript module loaded from spec.pretrained_path. Its parameters
// are registered (dots replaced by underscores) so they train and checkpoint
// like any other backbone. Output size is probed once with a zero image.
class TorchScriptBackbone final : public Backbone {
 public:
  explicit TorchScriptBackbone(const BackboneSpec& spec);

  torch::Tensor forward(const torch::Tensor& images) override;
  int64_t output_channels() const override { return channels_; }
  std::array<int64_t, 2> output_size(int64_t height, int64_t width) const override;

 private:
  struct Script;
  std::shared_ptr<Script> script_;
  int64_t channels_ = 0;
};

// uint8 BGR images -> float N x 3 x H x W RGB in [0, 1]; a zero image maps to
// a zero tensor.
torch::Tensor images_to_tensor(std::span<const FaceImage> images,
                               torch::Dtype dtype = torch::kFloat32);

// Single-image inference-mode convenience; returns c x h x w.
torch::Tensor extract_features(const FaceImage& image, Backbone& backbone);

}  // namespace dpl::backbone

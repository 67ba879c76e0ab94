#include "dpl/backbone.hpp"

#include <algorithm>
#include <cstring>

#include <opencv2/imgproc.hpp>
#include <torch/script.h>

#include "dpl/errors.hpp"

namespace dpl::backbone {

namespace {

void check_channels(int64_t c) {
  if (c < 3) throw ConfigError("backbone output_channels must be at least 3");
}

}  // namespace

BackboneRegistry& BackboneRegistry::global() {
  static BackboneRegistry* registry = [] {
    auto* r = new BackboneRegistry();
    r->add("tiny", [](const BackboneSpec& s) { return std::make_shared<TinyBackbone>(s); });
    r->add("torchscript",
           [](const BackboneSpec& s) { return std::make_shared<TorchScriptBackbone>(s); });
    return r;
  }();
  return *registry;
}

void BackboneRegistry::add(const std::string& name, BackboneFactory factory) {
  std::lock_guard lock(mutex_);
  if (factories_.count(name)) throw DuplicateNameError("backbone already registered: " + name);
  factories_.emplace(name, std::move(factory));
}

std::shared_ptr<Backbone> BackboneRegistry::create(const BackboneSpec& spec) const {
  BackboneFactory factory;
  {
    std::lock_guard lock(mutex_);
    auto it = factories_.find(spec.name);
    if (it == factories_.end()) throw UnknownBackboneError("unknown backbone: " + spec.name);
    factory = it->second;
  }
  return factory(spec);
}

bool BackboneRegistry::contains(const std::string& name) const {
  std::lock_guard lock(mutex_);
  return factories_.count(name) > 0;
}

std::vector<std::string> BackboneRegistry::names() const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> out;
  for (const auto& [k, v] : factories_) out.push_back(k);
  return out;
}

void register_backbone(const std::string& name, BackboneFactory factory) {
  BackboneRegistry::global().add(name, std::move(factory));
}

std::shared_ptr<Backbone> make_backbone(const BackboneSpec& spec) {
  return BackboneRegistry::global().create(spec);
}

TinyBackbone::TinyBackbone(const BackboneSpec& spec) : channels_(spec.output_channels) {
  check_channels(channels_);
  const int64_t c1 = std::max<int64_t>(1, channels_ / 3);
  const int64_t c2 = std::max<int64_t>(1, 2 * channels_ / 3);
  using torch::nn::Conv2dOptions;
  stem_ = register_module("stem", torch::nn::Conv2d(Conv2dOptions(3, c1, 8).stride(8).bias(spec.bias)));
  mix_ = register_module("mix",
                         torch::nn::Conv2d(Conv2dOptions(c1, c1, 3).padding(1).bias(spec.bias)));
  down1_ = register_module("down1", torch::nn::Conv2d(Conv2dOptions(c1, c2, 2).stride(2).bias(spec.bias)));
  down2_ = register_module("down2",
                           torch::nn::Conv2d(Conv2dOptions(c2, channels_, 2).stride(2).bias(spec.bias)));
  if (!spec.pretrained_path.empty()) {
    try {
      torch::serialize::InputArchive archive;
      archive.load_from(spec.pretrained_path);
      load(archive);
    } catch (const c10::Error& e) {
      throw WeightLoadError("cannot load backbone weights from " + spec.pretrained_path + ": " +
                            e.what_without_backtrace());
    }
  }
}

torch::Tensor TinyBackbone::forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3)
    throw ShapeError("tiny backbone expects N x 3 x H x W input");
  // Per-image standardization over all pixels and channels.
  auto mean = images.mean({1, 2, 3}, /*keepdim=*/true);
  auto centered = images - mean;
  auto scale = centered.pow(2).mean({1, 2, 3}, /*keepdim=*/true).add(1e-6).sqrt();
  auto x = torch::gelu(stem_(centered / scale));
  x = x + torch::gelu(mix_(x));
  x = torch::gelu(down1_(x));
  return down2_(x);
}

std::array<int64_t, 2> TinyBackbone::output_size(int64_t height, int64_t width) const {
  return {height / 8 / 2 / 2, width / 8 / 2 / 2};
}

struct TorchScriptBackbone::Script {
  torch::jit::Module module;
};

TorchScriptBackbone::TorchScriptBackbone(const BackboneSpec& spec)
    : script_(std::make_shared<Script>()) {
  if (spec.pretrained_path.empty())
    throw WeightLoadError("torchscript backbone requires pretrained_path");
  try {
    script_->module = torch::jit::load(spec.pretrained_path);
  } catch (const c10::Error& e) {
    throw WeightLoadError("cannot load TorchScript backbone " + spec.pretrained_path + ": " +
                          e.what_without_backtrace());
  }
  for (const auto& p : script_->module.named_parameters(/*recurse=*/true)) {
    std::string name = p.name;
    std::replace(name.begin(), name.end(), '.', '_');
    register_parameter(name, p.value);
  }
  torch::NoGradGuard no_grad;
  script_->module.eval();
  auto probe = script_->module.forward({torch::zeros({1, 3, kDefaultImageSize, kDefaultImageSize})})
                   .toTensor();
  if (probe.dim() != 4) throw WeightLoadError("TorchScript backbone must return N x c x h x w");
  channels_ = probe.size(1);
  if (channels_ != spec.output_channels)
    throw WeightLoadError("TorchScript backbone produces " + std::to_string(channels_) +
                          " channels but the spec declares " + std::to_string(spec.output_channels));
  check_channels(channels_);
}

torch::Tensor TorchScriptBackbone::forward(const torch::Tensor& images) {
  if (is_training())
    script_->module.train();
  else
    script_->module.eval();
  return script_->module.forward({images}).toTensor();
}

std::array<int64_t, 2> TorchScriptBackbone::output_size(int64_t height, int64_t width) const {
  torch::NoGradGuard no_grad;
  auto probe = script_->module.forward({torch::zeros({1, 3, height, width})}).toTensor();
  return {probe.size(2), probe.size(3)};
}

torch::Tensor images_to_tensor(std::span<const FaceImage> images, torch::Dtype dtype) {
  if (images.empty()) throw ShapeError("empty image batch");
  const int h = images.front().height(), w = images.front().width();
  auto batch = torch::empty({static_cast<int64_t>(images.size()), h, w, 3}, torch::kUInt8);
  for (std::size_t i = 0; i < images.size(); ++i) {
    validate(images[i]);
    if (images[i].height() != h || images[i].width() != w)
      throw ShapeError("images in a batch must share one size");
    cv::Mat rgb;
    cv::cvtColor(images[i].pixels, rgb, cv::COLOR_BGR2RGB);
    std::memcpy(batch[static_cast<int64_t>(i)].data_ptr(), rgb.data, static_cast<std::size_t>(h) * w * 3);
  }
  return batch.permute({0, 3, 1, 2}).to(dtype).div(255.0).contiguous();
}

torch::Tensor extract_features(const FaceImage& image, Backbone& backbone) {
  torch::NoGradGuard no_grad;
  const bool was_training = backbone.is_training();
  backbone.eval();
  auto dtype = torch::kFloat32;
  for (const auto& p : backbone.parameters()) {
    dtype = p.scalar_type();
    break;
  }
  auto f = backbone.forward(images_to_tensor(std::span(&image, 1), dtype))[0];
  backbone.train(was_training);
  if (f.size(0) != backbone.output_channels())
    throw ShapeError("backbone produced an unexpected channel count");
  return f;
}

}  // namespace dpl::backbone

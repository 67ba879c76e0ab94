#include "dpl/detector.hpp"

#include "dpl/errors.hpp"

namespace dpl {

Detector::Detector(branches::DplModel model, std::shared_ptr<const indicators::Indicator> quality,
                   std::shared_ptr<const indicators::Indicator> identifiability,
                   indicators::QuantizerSpec quality_quantizer,
                   indicators::QuantizerSpec identifiability_quantizer)
    : model_(std::move(model)),
      quality_(std::move(quality)),
      identifiability_(std::move(identifiability)),
      quality_quantizer_(std::move(quality_quantizer)),
      identifiability_quantizer_(std::move(identifiability_quantizer)) {
  if (!quality_ || !identifiability_) throw ConfigError("detector needs both indicators");
  quality_quantizer_.validate();
  identifiability_quantizer_.validate();
}

LevelAssignment Detector::assign_levels(std::span<const FaceImage> images) const {
  LevelAssignment out;
  const auto n = static_cast<int64_t>(images.size());
  out.k1 = torch::ones({n}, torch::kInt64);
  out.k2 = torch::ones({n}, torch::kInt64);
  auto k1 = out.k1.accessor<int64_t, 1>();
  auto k2 = out.k2.accessor<int64_t, 1>();
  for (int64_t i = 0; i < n; ++i) {
    const auto& img = images[static_cast<std::size_t>(i)];
    const double q = (*quality_)(img).value;
    const double s = (*identifiability_)(img).value;
    out.quality_scores.push_back(q);
    out.identifiability_scores.push_back(s);
    if (!fixed_depth_) {
      k1[i] = indicators::quantize(q, quality_quantizer_).value;
      k2[i] = indicators::quantize(s, identifiability_quantizer_).value;
    }
  }
  return out;
}

branches::ForwardRecord Detector::forward(std::span<const FaceImage> images, fsm::SamplingMode mode,
                                          at::Generator& generator) {
  auto levels = assign_levels(images);
  auto x = backbone::images_to_tensor(images, parameter_dtype(*model_));
  return forward(x, levels, mode, generator);
}

branches::ForwardRecord Detector::forward(const torch::Tensor& images, const LevelAssignment& levels,
                                          fsm::SamplingMode mode, at::Generator& generator) {
  return model_->forward(images, levels.k1, levels.k2, mode, generator);
}

torch::Dtype parameter_dtype(torch::nn::Module& module) {
  for (const auto& p : module.parameters()) return p.scalar_type();
  return torch::kFloat32;
}

}  // namespace dpl

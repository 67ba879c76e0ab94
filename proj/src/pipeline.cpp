#include "dpl/pipeline.hpp"

#include <torch/torch.h>

#include "dpl/checkpoint.hpp"
#include "dpl/errors.hpp"
#include "dpl/random.hpp"

namespace dpl {

void apply_runtime(const RunConfig& config) {
  if (config.deterministic) {
    torch::set_num_threads(1);
    at::globalContext().setDeterministicAlgorithms(true, /*warn_only=*/false);
  }
}

std::shared_ptr<const indicators::Indicator> make_indicator(const IndicatorConfig& config,
                                                            indicators::IndicatorKind kind) {
  using indicators::IndicatorKind;
  if (config.kind == "stub") return std::make_shared<indicators::StubIndicator>(kind);
  std::shared_ptr<const indicators::Embedder> embedder;
  if (config.embedder == "torchscript")
    embedder = std::make_shared<indicators::TorchScriptEmbedder>(config.embedder_path);
  else
    embedder = std::make_shared<indicators::HashEmbedder>();
  const auto& prompts =
      kind == IndicatorKind::kQuality ? config.quality_prompts : config.identifiability_prompts;
  return std::make_shared<indicators::PromptIndicator>(embedder, prompts, config.temperature);
}

QuantizerPaths quantizer_paths(const RunConfig& config) {
  std::filesystem::path dir = std::filesystem::path(config.output_dir) / "quantizers";
  return {dir / "quality.quantizer", dir / "identifiability.quantizer"};
}

namespace {

std::vector<int> histogram(const std::vector<double>& scores, const indicators::QuantizerSpec& spec) {
  std::vector<int> h(static_cast<std::size_t>(spec.levels), 0);
  for (double s : scores) ++h[static_cast<std::size_t>(indicators::quantize(s, spec).value - 1)];
  return h;
}

}  // namespace

IndicatorFit fit_indicators(const RunConfig& config, const std::vector<data::Sample>& train) {
  auto quality = make_indicator(config.indicators, indicators::IndicatorKind::kQuality);
  auto ident = make_indicator(config.indicators, indicators::IndicatorKind::kIdentifiability);
  std::vector<double> qs, ss;
  qs.reserve(train.size());
  ss.reserve(train.size());
  for (const auto& s : train) {
    qs.push_back((*quality)(s.image).value);
    ss.push_back((*ident)(s.image).value);
  }
  const auto orient = indicators::Orientation::kHigherScoreLowerLevel;
  IndicatorFit fit;
  fit.quality = indicators::fit_quantizer(qs, config.indicators.quality_levels, orient);
  fit.identifiability = indicators::fit_quantizer(ss, config.indicators.identifiability_levels, orient);
  fit.quality_histogram = histogram(qs, fit.quality);
  fit.identifiability_histogram = histogram(ss, fit.identifiability);
  fit.n_images = train.size();
  return fit;
}

std::vector<data::Sample> load_split(const std::string& manifest, data::Split split, int image_size) {
  if (manifest.empty()) throw ConfigError("no manifest configured");
  return data::load_samples(data::filter_split(data::load_manifest(manifest), split), image_size);
}

IndicatorFit fit_indicators(const RunConfig& config) {
  auto train = load_split(config.data.train_manifest, data::Split::kTrain, config.data.image_size);
  auto fit = fit_indicators(config, train);
  auto paths = quantizer_paths(config);
  std::filesystem::create_directories(paths.quality.parent_path());
  fit.quality.save(paths.quality);
  fit.identifiability.save(paths.identifiability);
  return fit;
}

Detector make_detector(const RunConfig& config, indicators::QuantizerSpec quality,
                       indicators::QuantizerSpec identifiability) {
  torch::manual_seed(derive_seed(config.seed, SeedStream::kInit));
  branches::DplModel model(config.model);
  Detector det(model, make_indicator(config.indicators, indicators::IndicatorKind::kQuality),
               make_indicator(config.indicators, indicators::IndicatorKind::kIdentifiability),
               std::move(quality), std::move(identifiability));
  det.set_fixed_depth(config.fixed_depth);
  return det;
}

LoadedModel load_model(const std::filesystem::path& checkpoint) {
  auto ckpt = Checkpoint::load(checkpoint);
  LoadedModel out;
  try {
    out.config = config_from_json(nlohmann::json::parse(ckpt.text("config")));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint config is not valid JSON: " + std::string(e.what()));
  }
  auto q = indicators::QuantizerSpec::from_text(ckpt.text("quality_quantizer"));
  auto s = indicators::QuantizerSpec::from_text(ckpt.text("identifiability_quantizer"));
  out.detector = std::make_unique<Detector>(make_detector(out.config, q, s));
  ckpt.load_module("model", *out.detector->model());
  out.meta = ckpt.meta();
  return out;
}

}  // namespace dpl

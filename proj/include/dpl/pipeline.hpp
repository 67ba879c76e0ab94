#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <vector>

#include "dpl/config.hpp"
#include "dpl/data.hpp"
#include "dpl/detector.hpp"

namespace dpl {

// Applies thread and determinism settings. Deterministic runs use one
// intra-op thread.
void apply_runtime(const RunConfig& config);

std::shared_ptr<const indicators::Indicator> make_indicator(const IndicatorConfig& config,
                                                            indicators::IndicatorKind kind);

struct QuantizerPaths {
  std::filesystem::path quality;          // <output_dir>/quantizers/quality.quantizer
  std::filesystem::path identifiability;  // <output_dir>/quantizers/identifiability.quantizer
};
QuantizerPaths quantizer_paths(const RunConfig& config);

struct IndicatorFit {
  indicators::QuantizerSpec quality;
  indicators::QuantizerSpec identifiability;
  std::vector<int> quality_histogram;  // images per level, index 0 = level 1
  std::vector<int> identifiability_histogram;
  std::size_t n_images = 0;
};

// Scores every training image with both indicators and fits equal-frequency
// quantizers (higher score -> lower level).
IndicatorFit fit_indicators(const RunConfig& config, const std::vector<data::Sample>& train);

// Loads the train split of the train manifest, fits, and writes both
// quantizer files.
IndicatorFit fit_indicators(const RunConfig& config);

std::vector<data::Sample> load_split(const std::string& manifest, data::Split split, int image_size);

// Seeds parameter initialization from the run seed.
Detector make_detector(const RunConfig& config, indicators::QuantizerSpec quality,
                       indicators::QuantizerSpec identifiability);

struct LoadedModel {
  RunConfig config;
  std::unique_ptr<Detector> detector;
  nlohmann::json meta;
};

// Rebuilds the detector stored in a training checkpoint (config, quantizers
// and weights all come from the container).
LoadedModel load_model(const std::filesystem::path& checkpoint);

}  // namespace dpl

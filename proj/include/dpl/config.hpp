#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

#include "dpl/branches.hpp"
#include "dpl/data.hpp"
#include "dpl/indicators.hpp"
#include "dpl/losses.hpp"

namespace dpl {

struct IndicatorConfig {
  std::string kind = "stub";      // "stub" (offline proxies) or "prompt"
  std::string embedder = "hash";  // prompt kind: "hash" or "torchscript"
  std::string embedder_path;      // torchscript export directory
  indicators::PromptPair quality_prompts = indicators::quality_prompts();
  indicators::PromptPair identifiability_prompts = indicators::identifiability_prompts();
  double temperature = 1.0;
  int quality_levels = 5;
  int identifiability_levels = 5;
};

struct TrainingConfig {
  int stage1_epochs = 5;
  int stage2_epochs = 5;
  int batch_size = 32;
  double learning_rate = 5e-5;
  double stage2_learning_rate = 5e-5;
  double focal_gamma = 2.0;
  bool use_reg = true;
  training::RegPlacement reg_placement = training::RegPlacement::kLastAndPreceding;
  training::RegSign reg_sign = training::RegSign::kDeferDecisions;
  int64_t value_hidden = 64;
  bool auto_fit_indicators = false;
  int max_batches_per_epoch = 0;    // 0: the whole training split
  bool export_trajectories = true;  // Stage II records to trajectories.jsonl
};

struct DataConfig {
  std::string train_manifest;
  std::string test_manifest;  // may equal train_manifest; splits are filtered
  int image_size = kDefaultImageSize;
  data::CompressionPolicy train_compression{data::CompressionMode::kRandomJpeg, 30, 100};
  data::CompressionPolicy test_compression{data::CompressionMode::kRandomJpeg, 30, 100};
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  bool deterministic = true;
  bool fixed_depth = false;  // ablation: k1 = k2 = 1 for every input
  branches::ModelConfig model;
  IndicatorConfig indicators;
  TrainingConfig training;
  training::PpoConfig ppo;
  DataConfig data;

  // Cross-field checks; throws ConfigError.
  void validate() const;
};

// Strict parse: unknown keys, wrong types and out-of-range values throw
// ConfigError naming the offending key path. Missing keys keep defaults.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& config);
RunConfig load_config(const std::filesystem::path& path);

// SHA-256 of the canonical JSON form.
std::string fingerprint(const RunConfig& config);

}  // namespace dpl

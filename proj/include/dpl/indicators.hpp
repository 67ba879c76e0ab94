#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dpl/image.hpp"

namespace dpl::indicators {

// Paired text prompts. The positive prompt's softmax share is the score.
struct PromptPair {
  std::string positive;
  std::string negative;

  // Throws ConfigError if either prompt is empty or both are equal.
  void validate() const;
};

PromptPair quality_prompts();          // ["Good photo.", "Bad photo."]
PromptPair identifiability_prompts();  // ["manipulated face.", "genuine face."]

using EmbeddingVector = std::vector<double>;

// Continuous indicator output, strictly inside (0, 1).
struct IndicatorScore {
  double value = 0.5;
};

// Discretized step budget, 1 <= value <= K.
struct StepLevel {
  int value = 1;
};

// Narrow interface to a vision-language model.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual EmbeddingVector embed_image(const FaceImage& image) const = 0;
  virtual EmbeddingVector embed_text(std::string_view text) const = 0;
  virtual std::size_t dimension() const = 0;
};

// Deterministic offline embedder.
//
// Image rule: let b_0..b_{N-1} be the image bytes in row-major BGR-interleaved
// order and m_i = splitmix64(i ^ kImageSalt). Byte i falls into bucket
// j = m_i mod d with sign s_i = -1 when the top bit of m_i is set, +1 otherwise.
//   v_j = 1 + (1/N) * sum_{i in bucket j} s_i * b_i / 255
// A zero image therefore maps to the all-ones vector.
//
// Text rule: h = FNV-1a 64 of the UTF-8 bytes; v_j = +1 or -1 by the top bit
// of splitmix64(h + j).
class HashEmbedder final : public Embedder {
 public:
  static constexpr std::uint64_t kImageSalt = 0xD1B54A32D192ED03ull;

  explicit HashEmbedder(std::size_t dimension = 64);

  EmbeddingVector embed_image(const FaceImage& image) const override;
  EmbeddingVector embed_text(std::string_view text) const override;
  std::size_t dimension() const override { return dimension_; }

 private:
  std::size_t dimension_;
};

// Loads an exported vision-language model from a directory holding
//   image_encoder.pt  TorchScript module, forward(1x3x224x224 float RGB in
//                     [0,1]) -> 1xd (or d) embedding
//   prompts.tsv       one "<prompt>\t<v_1> ... <v_d>" line per text prompt
// Text embeddings are looked up, so every configured prompt must be present.
class TorchScriptEmbedder final : public Embedder {
 public:
  explicit TorchScriptEmbedder(const std::filesystem::path& directory);
  ~TorchScriptEmbedder() override;

  EmbeddingVector embed_image(const FaceImage& image) const override;
  EmbeddingVector embed_text(std::string_view text) const override;
  std::size_t dimension() const override;

 private:
  struct State;
  std::unique_ptr<State> state_;
};

EmbeddingVector embed_image(const FaceImage& image, const Embedder& embedder);

// Throws DegenerateEmbeddingError for zero-norm or non-finite input.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

// Two-way softmax over temperature-scaled similarities, positive component:
//   q = exp(s1/T) / (exp(s1/T) + exp(s2/T)), evaluated as a logistic of the
// difference so that swapping the inputs yields exactly 1 - q.
IndicatorScore score_from_similarities(double positive_similarity, double negative_similarity,
                                       double temperature = 1.0);

IndicatorScore score(const FaceImage& image, const PromptPair& prompts,
                     const Embedder& embedder, double temperature = 1.0);

// Whether a higher score maps to a lower (cheaper) level. Both indicators in
// the detector use kHigherScoreLowerLevel.
enum class Orientation { kHigherScoreLowerLevel, kHigherScoreHigherLevel };

struct QuantizerSpec {
  static constexpr int kFormatVersion = 1;

  int levels = 5;
  Orientation orientation = Orientation::kHigherScoreLowerLevel;
  // Non-decreasing, length levels - 1. Strictly increasing unless the
  // fitting set contained ties across a quantile.
  std::vector<double> boundaries;

  void validate() const;

  // Versioned key/value text with boundaries in round-trip precision.
  std::string to_text() const;
  static QuantizerSpec from_text(std::string_view text);

  void save(const std::filesystem::path& path) const;
  static QuantizerSpec load(const std::filesystem::path& path);
};

// Equal-frequency binning: boundary j is the linearly interpolated j/K
// empirical quantile. Throws InsufficientDataError when scores.size() < levels.
QuantizerSpec fit_quantizer(std::span<const double> scores, int levels, Orientation orientation);

// Ascending bin index b = number of boundaries strictly below the score, so a
// score equal to a boundary lands in the lower bin. Out-of-range scores clamp.
StepLevel quantize(double score, const QuantizerSpec& spec);

enum class IndicatorKind { kQuality, kIdentifiability };

// Offline proxy scores.
//
// Quality: e = mean |4Y(x,y) - Y(x-1,y) - Y(x+1,y) - Y(x,y-1) - Y(x,y+1)| over
// interior pixels of the luma Y = 0.299R + 0.587G + 0.114B (8-bit scale);
//   q = (e + 0.01) / (e + 0.01 + 8)
// so blur and heavy compression lower the score and a constant image attains
// the minimum 0.01 / 8.01.
//
// Identifiability: the interior is split into an 8x8 grid of blocks with mean
// Laplacian magnitude e_b; rho = (max_b e_b + 1e-3) / (mean_b e_b + 1e-3) and
//   q = (rho - 1 + 0.01) / (rho - 1 + 0.01 + 1)
// so a strongly localized high-frequency patch raises the score.
IndicatorScore stub_indicator(const FaceImage& image,
                              IndicatorKind kind = IndicatorKind::kQuality);

// Anything that maps a face to a score.
class Indicator {
 public:
  virtual ~Indicator() = default;
  virtual IndicatorScore operator()(const FaceImage& image) const = 0;
};

class StubIndicator final : public Indicator {
 public:
  explicit StubIndicator(IndicatorKind kind) : kind_(kind) {}
  IndicatorScore operator()(const FaceImage& image) const override {
    return stub_indicator(image, kind_);
  }

 private:
  IndicatorKind kind_;
};

class PromptIndicator final : public Indicator {
 public:
  PromptIndicator(std::shared_ptr<const Embedder> embedder, PromptPair prompts,
                  double temperature);
  IndicatorScore operator()(const FaceImage& image) const override;

 private:
  std::shared_ptr<const Embedder> embedder_;
  PromptPair prompts_;
  double temperature_;
  EmbeddingVector positive_;
  EmbeddingVector negative_;
};

}  // namespace dpl::indicators

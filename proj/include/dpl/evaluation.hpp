#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dpl/data.hpp"
#include "dpl/detector.hpp"

namespace dpl::evaluation {

// Rank-based AUC (Mann-Whitney U over midranks): the probability that a
// random positive outscores a random negative, ties counting one half.
// Throws SingleClassError when either class is absent.
double auc(std::span<const double> scores, std::span<const int> labels);

enum class PerturbationKind { kSaturation, kContrast, kBlockwise, kNoise };
PerturbationKind perturbation_from_string(const std::string& name);
const char* to_string(PerturbationKind kind);
const std::vector<PerturbationKind>& all_perturbations();

// Severity ladders (8-bit images, severity 1 mildest, 0 is the identity):
//   saturation  blend toward luma Y = 0.299R + 0.587G + 0.114B with chroma
//               factor f = 0.8, 0.6, 0.4, 0.2, 0.0
//   contrast    blend toward the image's mean grey level with factor
//               f = 0.8, 0.65, 0.5, 0.35, 0.2
//   blockwise   a fraction 0.05, 0.10, 0.15, 0.20, 0.25 of the 16x16 cells
//               is filled with a random flat colour; cells come from one
//               seeded permutation, so higher severities extend lower ones
//   noise       additive white Gaussian noise per colour component with
//               sigma = 5, 10, 15, 20, 25
struct PerturbationSpec {
  PerturbationKind kind = PerturbationKind::kNoise;
  int severity = 1;

  void validate() const;  // severity in [0, 5]
  double parameter() const;
  std::string describe() const;
};

// Deterministic in the generator state: equal seeds give equal outputs, and
// for blockwise and noise the random draws do not depend on severity.
FaceImage perturb(const FaceImage& image, const PerturbationSpec& spec, Rng& rng);

struct SourceResult {
  std::string source;
  int64_t n = 0;
  int64_t n_fake = 0;
  std::optional<double> auc;  // fakes of this source against every real image
};

struct EvalReport {
  double auc = 0.5;
  int64_t n_samples = 0;
  int64_t n_real = 0;
  int64_t n_fake = 0;
  std::string policy;
  std::optional<PerturbationSpec> perturbation;
  std::string checkpoint;
  std::vector<SourceResult> per_source;
  std::vector<double> scores;  // fake-class confidence per image, manifest order

  std::string to_text() const;
  nlohmann::json to_json() const;
  void save(const std::filesystem::path& text_path, const std::filesystem::path& json_path) const;
};

struct EvalOptions {
  data::CompressionPolicy policy;
  std::optional<PerturbationSpec> perturbation;
  std::uint64_t seed = 0;
  int batch_size = 64;
};

// Per image, in manifest order: compression (seeded by image index), then
// the optional perturbation, then a deterministic-mode forward. The score is
// the fake-class confidence of the final prediction.
EvalReport evaluate(Detector& detector, const std::vector<data::Sample>& samples, const EvalOptions& options);

struct RobustnessCell {
  PerturbationKind kind;
  int severity;
  double auc;
};

// Every kind at severities 1..5 (20 cells).
std::vector<RobustnessCell> robustness_sweep(Detector& detector, const std::vector<data::Sample>& samples,
                                             const EvalOptions& options);
void save_robustness_csv(const std::vector<RobustnessCell>& cells, const std::filesystem::path& path);

// 2x2 panel figure, one AUC-vs-severity curve per kind; a dashed line marks
// the unperturbed AUC when given.
void plot_robustness(const std::vector<RobustnessCell>& cells, const std::filesystem::path& path,
                     std::optional<double> clean_auc = std::nullopt);

// Embeddings file:
//   # dpl-embeddings v1 dim=<F> n=<N>
//   label<TAB>k1<TAB>k2<TAB>f_0<TAB>...<TAB>f_{F-1}
//   one row per image in manifest order
// Uses the same per-image compression as evaluate().
void export_embeddings(Detector& detector, const std::vector<data::Sample>& samples, const EvalOptions& options,
                       const std::filesystem::path& path);

}  // namespace dpl::evaluation

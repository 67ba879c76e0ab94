#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dpl/image.hpp"
#include "dpl/random.hpp"

namespace dpl::data {

enum class Split { kTrain, kVal, kTest };
Split split_from_string(const std::string& name);
const char* to_string(Split split);

struct ManifestEntry {
  std::filesystem::path path;  // resolved against the manifest's directory when relative
  int label = 0;               // real = 0, fake = 1
  Split split = Split::kTrain;
  std::string source_tag;
};

// Manifest text format, tab separated:
//   # dpl-manifest v1
//   path<TAB>label<TAB>split<TAB>source_tag
//   faces/0001.jpg<TAB>0<TAB>train<TAB>real;q=57
// Throws ParseError (with line number) for malformed rows, labels other than
// 0/1 and duplicate paths; Error when the file is missing.
std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path);
void save_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);
std::vector<ManifestEntry> filter_split(const std::vector<ManifestEntry>& entries, Split split);

// Source tags are "<group>[;key=value...]"; returns the group.
std::string source_group(const std::string& source_tag);

enum class CompressionMode { kNone, kRandomJpeg, kFixedJpeg };
CompressionMode compression_mode_from_string(const std::string& name);
const char* to_string(CompressionMode mode);

struct CompressionPolicy {
  CompressionMode mode = CompressionMode::kNone;
  int quality_lo = 30;  // fixed_jpeg uses quality_lo
  int quality_hi = 100;

  void validate() const;
  std::string describe() const;
};

FaceImage jpeg_roundtrip(const FaceImage& image, int quality);

// none: returns the input unchanged (shared pixels); random_jpeg: quality
// drawn uniformly from [lo, hi]; fixed_jpeg: quality lo. Never changes the
// image dimensions.
FaceImage jpeg_augment(const FaceImage& image, const CompressionPolicy& policy, Rng& rng);

struct Sample {
  FaceImage image;
  int label = 0;
  std::string source_tag;
};

// Loads every entry and resizes to image_size x image_size.
std::vector<Sample> load_samples(const std::vector<ManifestEntry>& entries, int image_size);

struct SyntheticOptions {
  int n_per_class = 500;
  double artifact_strength = 0.5;  // 0 disables the planted artifact
  int quality_lo = 30;
  int quality_hi = 100;
  std::uint64_t seed = 0;
  int image_size = kDefaultImageSize;
  double test_fraction = 0.2;  // per class, assigned to the test split
};

// Procedural face-like textures. Real and fake images come from the same
// generator; fakes additionally carry a localized periodic high-frequency
// patch whose amplitude scales with artifact_strength. Every image is stored
// as JPEG at a quality drawn from [quality_lo, quality_hi], independent of
// its class, and that quality is recorded in the source tag ("real;q=57").
FaceImage synthesize_face(Rng& rng, int size);
void plant_artifact(FaceImage& image, double strength, Rng& rng);

// Writes <out_dir>/images/*.jpg and <out_dir>/manifest.tsv. Deterministic in
// the seed. Returns the manifest entries (paths relative to out_dir).
std::vector<ManifestEntry> make_synthetic_dataset(const SyntheticOptions& options,
                                                  const std::filesystem::path& out_dir);

}  // namespace dpl::data

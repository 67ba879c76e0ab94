#include "dpl/data.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>

#include "dpl/errors.hpp"

namespace dpl::data {

namespace {

constexpr const char* kManifestHeader = "# dpl-manifest v1";

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

}  // namespace

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw ConfigError("unknown split: " + name);
}

const char* to_string(Split split) {
  switch (split) {
    case Split::kTrain:
      return "train";
    case Split::kVal:
      return "val";
    case Split::kTest:
      return "test";
  }
  return "?";
}

std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("missing manifest: " + path.string());
  const auto base = path.parent_path();
  std::vector<ManifestEntry> entries;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("# dpl-manifest", 0) == 0 && line != kManifestHeader)
        throw ParseError(path.string(), lineno, "unsupported manifest version");
      continue;
    }
    auto cols = split_tabs(line);
    if (!header_seen && cols.size() >= 2 && cols[0] == "path" && cols[1] == "label") {
      header_seen = true;
      continue;
    }
    if (cols.size() != 4) throw ParseError(path.string(), lineno, "expected 4 tab-separated columns");
    ManifestEntry e;
    if (cols[0].empty()) throw ParseError(path.string(), lineno, "empty path");
    e.path = std::filesystem::path(cols[0]);
    if (e.path.is_relative()) e.path = base / e.path;
    if (cols[1] == "0")
      e.label = 0;
    else if (cols[1] == "1")
      e.label = 1;
    else
      throw ParseError(path.string(), lineno, "label must be 0 (real) or 1 (fake), got '" + cols[1] + "'");
    try {
      e.split = split_from_string(cols[2]);
    } catch (const ConfigError&) {
      throw ParseError(path.string(), lineno, "unknown split '" + cols[2] + "'");
    }
    e.source_tag = cols[3];
    if (!seen.insert(e.path.lexically_normal().string()).second)
      throw ParseError(path.string(), lineno, "duplicate path " + cols[0]);
    entries.push_back(std::move(e));
  }
  return entries;
}

void save_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest: " + path.string());
  const auto base = path.parent_path();
  out << kManifestHeader << "\n";
  out << "path\tlabel\tsplit\tsource_tag\n";
  for (const auto& e : entries) {
    auto p = e.path;
    if (p.is_absolute() && !base.empty()) {
      auto rel = p.lexically_relative(base);
      if (!rel.empty() && rel.native()[0] != '.') p = rel;
    }
    out << p.generic_string() << '\t' << e.label << '\t' << to_string(e.split) << '\t' << e.source_tag
        << '\n';
  }
}

std::vector<ManifestEntry> filter_split(const std::vector<ManifestEntry>& entries, Split split) {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries)
    if (e.split == split) out.push_back(e);
  return out;
}

std::string source_group(const std::string& source_tag) {
  return source_tag.substr(0, source_tag.find(';'));
}

CompressionMode compression_mode_from_string(const std::string& name) {
  if (name == "none") return CompressionMode::kNone;
  if (name == "random_jpeg") return CompressionMode::kRandomJpeg;
  if (name == "fixed_jpeg") return CompressionMode::kFixedJpeg;
  throw ConfigError("unknown compression mode: " + name);
}

const char* to_string(CompressionMode mode) {
  switch (mode) {
    case CompressionMode::kNone:
      return "none";
    case CompressionMode::kRandomJpeg:
      return "random_jpeg";
    case CompressionMode::kFixedJpeg:
      return "fixed_jpeg";
  }
  return "?";
}

void CompressionPolicy::validate() const {
  if (quality_lo < 1 || quality_hi > 100 || quality_lo > quality_hi)
    throw ConfigError("JPEG quality range must satisfy 1 <= lo <= hi <= 100");
}

std::string CompressionPolicy::describe() const {
  switch (mode) {
    case CompressionMode::kNone:
      return "none";
    case CompressionMode::kRandomJpeg:
      return "random_jpeg[" + std::to_string(quality_lo) + "," + std::to_string(quality_hi) + "]";
    case CompressionMode::kFixedJpeg:
      return "fixed_jpeg[" + std::to_string(quality_lo) + "]";
  }
  return "?";
}

FaceImage jpeg_roundtrip(const FaceImage& image, int quality) {
  validate(image);
  std::vector<uchar> buf;
  if (!cv::imencode(".jpg", image.pixels, buf, {cv::IMWRITE_JPEG_QUALITY, quality}))
    throw CodecError("JPEG encode failed");
  cv::Mat decoded = cv::imdecode(buf, cv::IMREAD_COLOR);
  if (decoded.empty() || decoded.size() != image.pixels.size()) throw CodecError("JPEG decode failed");
  return FaceImage{decoded};
}

FaceImage jpeg_augment(const FaceImage& image, const CompressionPolicy& policy, Rng& rng) {
  policy.validate();
  switch (policy.mode) {
    case CompressionMode::kNone:
      return image;
    case CompressionMode::kRandomJpeg:
      return jpeg_roundtrip(image, uniform_int(rng, policy.quality_lo, policy.quality_hi));
    case CompressionMode::kFixedJpeg:
      return jpeg_roundtrip(image, policy.quality_lo);
  }
  return image;
}

std::vector<Sample> load_samples(const std::vector<ManifestEntry>& entries, int image_size) {
  std::vector<Sample> out;
  out.reserve(entries.size());
  for (const auto& e : entries)
    out.push_back({resize_to(load_image(e.path), image_size), e.label, e.source_tag});
  return out;
}

}  // namespace dpl::data

#include "dpl/indicators.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <unordered_map>

#include <opencv2/imgproc.hpp>
#include <torch/script.h>

#include "dpl/errors.hpp"
#include "dpl/random.hpp"

namespace dpl::indicators {

void PromptPair::validate() const {
  if (positive.empty() || negative.empty()) throw ConfigError("prompt pair has an empty prompt");
  if (positive == negative) throw ConfigError("prompt pair prompts must differ");
}

PromptPair quality_prompts() { return {"Good photo.", "Bad photo."}; }

PromptPair identifiability_prompts() { return {"manipulated face.", "genuine face."}; }

HashEmbedder::HashEmbedder(std::size_t dimension) : dimension_(dimension) {
  if (dimension_ == 0) throw ConfigError("embedding dimension must be positive");
}

EmbeddingVector HashEmbedder::embed_image(const FaceImage& image) const {
  validate(image);
  cv::Mat m = image.pixels.isContinuous() ? image.pixels : image.pixels.clone();
  const auto* bytes = m.ptr<std::uint8_t>();
  const std::size_t n = m.total() * m.elemSize();
  std::vector<double> acc(dimension_, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t h = splitmix64(static_cast<std::uint64_t>(i) ^ kImageSalt);
    const double sign = (h >> 63) ? -1.0 : 1.0;
    acc[h % dimension_] += sign * static_cast<double>(bytes[i]) / 255.0;
  }
  EmbeddingVector v(dimension_);
  for (std::size_t j = 0; j < dimension_; ++j) v[j] = 1.0 + acc[j] / static_cast<double>(n);
  return v;
}

EmbeddingVector HashEmbedder::embed_text(std::string_view text) const {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001B3ull;
  }
  EmbeddingVector v(dimension_);
  for (std::size_t j = 0; j < dimension_; ++j)
    v[j] = (splitmix64(h + j) >> 63) ? -1.0 : 1.0;
  return v;
}

struct TorchScriptEmbedder::State {
  torch::jit::Module module;
  std::unordered_map<std::string, EmbeddingVector> prompts;
  std::size_t dimension = 0;
};

TorchScriptEmbedder::TorchScriptEmbedder(const std::filesystem::path& directory)
    : state_(std::make_unique<State>()) {
  const auto encoder = directory / "image_encoder.pt";
  const auto table = directory / "prompts.tsv";
  if (!std::filesystem::exists(encoder) || !std::filesystem::exists(table))
    throw EmbedderUnavailableError("embedder directory must contain image_encoder.pt and prompts.tsv: " +
                                   directory.string());
  try {
    state_->module = torch::jit::load(encoder.string());
  } catch (const c10::Error& e) {
    throw EmbedderUnavailableError("cannot load " + encoder.string() + ": " + e.what_without_backtrace());
  }
  state_->module.eval();

  std::ifstream in(table);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError(table.string(), lineno, "expected <prompt>\\t<vector>");
    std::istringstream values(line.substr(tab + 1));
    EmbeddingVector v;
    double x;
    while (values >> x) v.push_back(x);
    if (v.empty()) throw ParseError(table.string(), lineno, "empty embedding");
    if (state_->dimension == 0) state_->dimension = v.size();
    if (v.size() != state_->dimension) throw ParseError(table.string(), lineno, "dimension mismatch");
    state_->prompts.emplace(line.substr(0, tab), std::move(v));
  }
  if (state_->prompts.empty()) throw EmbedderUnavailableError("no prompts in " + table.string());
}

TorchScriptEmbedder::~TorchScriptEmbedder() = default;

EmbeddingVector TorchScriptEmbedder::embed_image(const FaceImage& image) const {
  validate(image);
  FaceImage sized = resize_to(image, kDefaultImageSize);
  cv::Mat rgb;
  cv::cvtColor(sized.pixels, rgb, cv::COLOR_BGR2RGB);
  auto input = torch::from_blob(rgb.data, {1, rgb.rows, rgb.cols, 3}, torch::kUInt8)
                   .permute({0, 3, 1, 2})
                   .to(torch::kFloat32)
                   .div(255.0)
                   .contiguous();
  torch::NoGradGuard no_grad;
  auto out = state_->module.forward({input}).toTensor().to(torch::kFloat64).flatten().contiguous();
  EmbeddingVector v(out.data_ptr<double>(), out.data_ptr<double>() + out.numel());
  if (v.size() != state_->dimension)
    throw EmbedderUnavailableError("image embedding dimension does not match prompt table");
  return v;
}

EmbeddingVector TorchScriptEmbedder::embed_text(std::string_view text) const {
  auto it = state_->prompts.find(std::string(text));
  if (it == state_->prompts.end())
    throw EmbedderUnavailableError("prompt not present in prompts.tsv: " + std::string(text));
  return it->second;
}

std::size_t TorchScriptEmbedder::dimension() const { return state_->dimension; }

EmbeddingVector embed_image(const FaceImage& image, const Embedder& embedder) {
  auto v = embedder.embed_image(image);
  for (double x : v)
    if (!std::isfinite(x)) throw DegenerateEmbeddingError("embedder produced a non-finite value");
  return v;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("embedding dimensions differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (!(na > 0.0) || !(nb > 0.0) || !std::isfinite(na) || !std::isfinite(nb))
    throw DegenerateEmbeddingError("zero-norm or non-finite embedding");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

IndicatorScore score_from_similarities(double positive_similarity, double negative_similarity,
                                       double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  const double d = (positive_similarity - negative_similarity) / temperature;
  double q = 1.0 / (1.0 + std::exp(-d));
  constexpr double kEdge = 1e-15;
  q = std::clamp(q, kEdge, 1.0 - kEdge);
  return {q};
}

IndicatorScore score(const FaceImage& image, const PromptPair& prompts, const Embedder& embedder,
                     double temperature) {
  prompts.validate();
  const auto v = embed_image(image, embedder);
  const auto t1 = embedder.embed_text(prompts.positive);
  const auto t2 = embedder.embed_text(prompts.negative);
  return score_from_similarities(cosine_similarity(v, t1), cosine_similarity(v, t2), temperature);
}

void QuantizerSpec::validate() const {
  if (levels < 2) throw ConfigError("quantizer needs at least two levels");
  if (boundaries.size() != static_cast<std::size_t>(levels - 1))
    throw ConfigError("quantizer boundary count must equal levels - 1");
  for (std::size_t i = 0; i < boundaries.size(); ++i) {
    if (!std::isfinite(boundaries[i])) throw ConfigError("non-finite quantizer boundary");
    if (i > 0 && boundaries[i] < boundaries[i - 1])
      throw ConfigError("quantizer boundaries must be sorted");
  }
}

std::string QuantizerSpec::to_text() const {
  validate();
  std::ostringstream os;
  os << "dpl-quantizer " << kFormatVersion << "\n";
  os << "levels " << levels << "\n";
  os << "orientation "
     << (orientation == Orientation::kHigherScoreLowerLevel ? "higher_score_lower_level"
                                                            : "higher_score_higher_level")
     << "\n";
  os << "boundaries";
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (double b : boundaries) os << ' ' << b;
  os << "\n";
  return os.str();
}

QuantizerSpec QuantizerSpec::from_text(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto sp = line.find(' ');
    std::string key = line.substr(0, sp);
    std::string value = sp == std::string::npos ? "" : line.substr(sp + 1);
    if (!header) {
      if (key != "dpl-quantizer") throw ParseError("<quantizer>", lineno, "missing dpl-quantizer header");
      if (std::stoi(value) != kFormatVersion)
        throw ParseError("<quantizer>", lineno, "unsupported quantizer version " + value);
      header = true;
      continue;
    }
    kv[key] = value;
  }
  if (!header) throw ParseError("<quantizer>", lineno, "empty quantizer document");
  for (const char* required : {"levels", "orientation", "boundaries"})
    if (!kv.count(required)) throw ParseError("<quantizer>", lineno, std::string("missing key ") + required);

  QuantizerSpec spec;
  spec.levels = std::stoi(kv["levels"]);
  if (kv["orientation"] == "higher_score_lower_level")
    spec.orientation = Orientation::kHigherScoreLowerLevel;
  else if (kv["orientation"] == "higher_score_higher_level")
    spec.orientation = Orientation::kHigherScoreHigherLevel;
  else
    throw ParseError("<quantizer>", lineno, "unknown orientation " + kv["orientation"]);
  std::istringstream values(kv["boundaries"]);
  std::string tok;
  while (values >> tok) spec.boundaries.push_back(std::strtod(tok.c_str(), nullptr));
  spec.validate();
  return spec;
}

void QuantizerSpec::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write quantizer file: " + path.string());
  out << to_text();
}

QuantizerSpec QuantizerSpec::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("missing quantizer file: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str());
}

QuantizerSpec fit_quantizer(std::span<const double> scores, int levels, Orientation orientation) {
  if (levels < 2) throw ConfigError("quantizer needs at least two levels");
  if (scores.size() < static_cast<std::size_t>(levels))
    throw InsufficientDataError("need at least " + std::to_string(levels) + " scores, got " +
                                std::to_string(scores.size()));
  std::vector<double> sorted(scores.begin(), scores.end());
  for (double s : sorted)
    if (!std::isfinite(s)) throw InsufficientDataError("non-finite score in fitting set");
  std::sort(sorted.begin(), sorted.end());

  QuantizerSpec spec;
  spec.levels = levels;
  spec.orientation = orientation;
  const double last = static_cast<double>(sorted.size() - 1);
  for (int j = 1; j < levels; ++j) {
    const double h = last * static_cast<double>(j) / static_cast<double>(levels);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = h - static_cast<double>(lo);
    spec.boundaries.push_back(sorted[lo] + frac * (sorted[hi] - sorted[lo]));
  }
  return spec;
}

StepLevel quantize(double score, const QuantizerSpec& spec) {
  const auto below = std::lower_bound(spec.boundaries.begin(), spec.boundaries.end(), score) -
                     spec.boundaries.begin();
  const int bin = static_cast<int>(below);
  if (spec.orientation == Orientation::kHigherScoreLowerLevel) return {spec.levels - bin};
  return {bin + 1};
}

namespace {

cv::Mat luma(const FaceImage& image) {
  cv::Mat y(image.height(), image.width(), CV_64F);
  for (int r = 0; r < image.height(); ++r) {
    const auto* src = image.pixels.ptr<cv::Vec3b>(r);
    auto* dst = y.ptr<double>(r);
    for (int c = 0; c < image.width(); ++c)
      dst[c] = 0.114 * src[c][0] + 0.587 * src[c][1] + 0.299 * src[c][2];
  }
  return y;
}

// |discrete Laplacian| on interior pixels; the result is (H-2)x(W-2).
cv::Mat laplacian_magnitude(const cv::Mat& y) {
  cv::Mat out(y.rows - 2, y.cols - 2, CV_64F);
  for (int r = 1; r < y.rows - 1; ++r) {
    const auto* up = y.ptr<double>(r - 1);
    const auto* mid = y.ptr<double>(r);
    const auto* down = y.ptr<double>(r + 1);
    auto* dst = out.ptr<double>(r - 1);
    for (int c = 1; c < y.cols - 1; ++c)
      dst[c - 1] = std::abs(4.0 * mid[c] - mid[c - 1] - mid[c + 1] - up[c] - down[c]);
  }
  return out;
}

}  // namespace

IndicatorScore stub_indicator(const FaceImage& image, IndicatorKind kind) {
  validate(image);
  const cv::Mat lap = laplacian_magnitude(luma(image));
  if (kind == IndicatorKind::kQuality) {
    const double e = cv::mean(lap)[0];
    return {(e + 0.01) / (e + 0.01 + 8.0)};
  }
  constexpr int kGrid = 8;
  double max_e = 0.0, sum_e = 0.0;
  for (int by = 0; by < kGrid; ++by) {
    for (int bx = 0; bx < kGrid; ++bx) {
      const int y0 = by * lap.rows / kGrid, y1 = (by + 1) * lap.rows / kGrid;
      const int x0 = bx * lap.cols / kGrid, x1 = (bx + 1) * lap.cols / kGrid;
      const double e = cv::mean(lap(cv::Range(y0, y1), cv::Range(x0, x1)))[0];
      max_e = std::max(max_e, e);
      sum_e += e;
    }
  }
  const double rho = (max_e + 1e-3) / (sum_e / (kGrid * kGrid) + 1e-3);
  return {(rho - 1.0 + 0.01) / (rho - 1.0 + 0.01 + 1.0)};
}

PromptIndicator::PromptIndicator(std::shared_ptr<const Embedder> embedder, PromptPair prompts,
                                 double temperature)
    : embedder_(std::move(embedder)), prompts_(std::move(prompts)), temperature_(temperature) {
  if (!embedder_) throw EmbedderUnavailableError("no embedder supplied");
  prompts_.validate();
  if (!(temperature_ > 0.0)) throw ConfigError("temperature must be positive");
  positive_ = embedder_->embed_text(prompts_.positive);
  negative_ = embedder_->embed_text(prompts_.negative);
}

IndicatorScore PromptIndicator::operator()(const FaceImage& image) const {
  const auto v = embed_image(image, *embedder_);
  return score_from_similarities(cosine_similarity(v, positive_), cosine_similarity(v, negative_),
                                 temperature_);
}

}  // namespace dpl::indicators

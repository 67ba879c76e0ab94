#include "dpl/evaluation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <opencv2/imgproc.hpp>

#include "dpl/errors.hpp"

namespace dpl::evaluation {

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("auc needs one label per score");
  const std::size_t n = scores.size();
  int64_t n_pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw ShapeError("auc labels must be 0 or 1");
    n_pos += l;
  }
  const int64_t n_neg = static_cast<int64_t>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) throw SingleClassError("auc needs both classes");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the midrank keeps everything in integers.
  int64_t rank_sum2 = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const auto mid2 = static_cast<int64_t>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1) rank_sum2 += mid2;
    i = j + 1;
  }
  const int64_t u2 = rank_sum2 - n_pos * (n_pos + 1);
  return static_cast<double>(u2) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

PerturbationKind perturbation_from_string(const std::string& name) {
  if (name == "saturation") return PerturbationKind::kSaturation;
  if (name == "contrast") return PerturbationKind::kContrast;
  if (name == "blockwise") return PerturbationKind::kBlockwise;
  if (name == "noise") return PerturbationKind::kNoise;
  throw ConfigError("unknown perturbation '" + name + "' (saturation, contrast, blockwise, noise)");
}

const char* to_string(PerturbationKind kind) {
  switch (kind) {
    case PerturbationKind::kSaturation: return "saturation";
    case PerturbationKind::kContrast: return "contrast";
    case PerturbationKind::kBlockwise: return "blockwise";
    case PerturbationKind::kNoise: return "noise";
  }
  return "?";
}

const std::vector<PerturbationKind>& all_perturbations() {
  static const std::vector<PerturbationKind> kinds{PerturbationKind::kSaturation, PerturbationKind::kContrast,
                                                   PerturbationKind::kBlockwise, PerturbationKind::kNoise};
  return kinds;
}

namespace {

constexpr std::array<double, 6> kSaturation{1.0, 0.8, 0.6, 0.4, 0.2, 0.0};
constexpr std::array<double, 6> kContrast{1.0, 0.8, 0.65, 0.5, 0.35, 0.2};
constexpr std::array<double, 6> kBlockFraction{0.0, 0.05, 0.10, 0.15, 0.20, 0.25};
constexpr std::array<double, 6> kNoiseSigma{0.0, 5.0, 10.0, 15.0, 20.0, 25.0};
constexpr int kBlockSide = 16;

uchar to_u8(double v) { return cv::saturate_cast<uchar>(std::lround(v)); }

}  // namespace

void PerturbationSpec::validate() const {
  if (severity < 0 || severity > 5) throw ConfigError("perturbation severity must lie in [0, 5]");
}

double PerturbationSpec::parameter() const {
  validate();
  const auto s = static_cast<std::size_t>(severity);
  switch (kind) {
    case PerturbationKind::kSaturation: return kSaturation[s];
    case PerturbationKind::kContrast: return kContrast[s];
    case PerturbationKind::kBlockwise: return kBlockFraction[s];
    case PerturbationKind::kNoise: return kNoiseSigma[s];
  }
  return 0.0;
}

std::string PerturbationSpec::describe() const {
  std::ostringstream os;
  os << to_string(kind) << " severity " << severity << " (";
  switch (kind) {
    case PerturbationKind::kSaturation: os << "chroma factor "; break;
    case PerturbationKind::kContrast: os << "contrast factor "; break;
    case PerturbationKind::kBlockwise: os << "block fraction "; break;
    case PerturbationKind::kNoise: os << "sigma "; break;
  }
  os << parameter() << ")";
  return os.str();
}

FaceImage perturb(const FaceImage& image, const PerturbationSpec& spec, Rng& rng) {
  spec.validate();
  validate(image);
  FaceImage out = clone(image);
  const double p = spec.parameter();
  cv::Mat& m = out.pixels;
  switch (spec.kind) {
    case PerturbationKind::kSaturation: {
      if (spec.severity == 0) break;
      for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) {
          auto& px = m.at<cv::Vec3b>(y, x);
          const double luma = 0.114 * px[0] + 0.587 * px[1] + 0.299 * px[2];
          for (int c = 0; c < 3; ++c) px[c] = to_u8(luma + p * (px[c] - luma));
        }
      break;
    }
    case PerturbationKind::kContrast: {
      if (spec.severity == 0) break;
      const cv::Scalar mean = cv::mean(image.pixels);
      const double grey = (mean[0] + mean[1] + mean[2]) / 3.0;
      for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) {
          auto& px = m.at<cv::Vec3b>(y, x);
          for (int c = 0; c < 3; ++c) px[c] = to_u8(grey + p * (px[c] - grey));
        }
      break;
    }
    case PerturbationKind::kBlockwise: {
      const int gx = (m.cols + kBlockSide - 1) / kBlockSide;
      const int gy = (m.rows + kBlockSide - 1) / kBlockSide;
      std::vector<int> cells(static_cast<std::size_t>(gx * gy));
      std::iota(cells.begin(), cells.end(), 0);
      shuffle(cells, rng);
      std::vector<cv::Vec3b> colors;
      for (std::size_t i = 0; i < cells.size(); ++i)
        colors.emplace_back(static_cast<uchar>(uniform_int(rng, 0, 255)), static_cast<uchar>(uniform_int(rng, 0, 255)),
                            static_cast<uchar>(uniform_int(rng, 0, 255)));
      const auto count = static_cast<std::size_t>(std::lround(p * static_cast<double>(cells.size())));
      for (std::size_t i = 0; i < count; ++i) {
        const int cx = cells[i] % gx, cy = cells[i] / gx;
        cv::Rect r(cx * kBlockSide, cy * kBlockSide, kBlockSide, kBlockSide);
        r &= cv::Rect(0, 0, m.cols, m.rows);
        m(r).setTo(cv::Scalar(colors[i][0], colors[i][1], colors[i][2]));
      }
      break;
    }
    case PerturbationKind::kNoise: {
      for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) {
          auto& px = m.at<cv::Vec3b>(y, x);
          for (int c = 0; c < 3; ++c) {
            const double z = standard_normal(rng);
            if (spec.severity > 0) px[c] = to_u8(px[c] + p * z);
          }
        }
      break;
    }
  }
  return out;
}

namespace {

FaceImage prepared_image(const data::Sample& s, std::size_t index, const EvalOptions& options) {
  Rng compress_rng(derive_seed(options.seed, SeedStream::kEvaluation, index));
  FaceImage img = data::jpeg_augment(s.image, options.policy, compress_rng);
  if (options.perturbation) {
    Rng perturb_rng(derive_seed(options.seed, SeedStream::kPerturbation, index));
    img = perturb(img, *options.perturbation, perturb_rng);
  }
  return img;
}

// Runs deterministic forwards over the samples in order and hands each batch
// record to the visitor together with its first index.
template <typename Visitor>
void for_each_batch(Detector& detector, const std::vector<data::Sample>& samples, const EvalOptions& options,
                    Visitor&& visit) {
  torch::NoGradGuard no_grad;
  auto gen = make_torch_generator(derive_seed(options.seed, SeedStream::kEvaluation, ~0ull));
  const auto bs = static_cast<std::size_t>(std::max(1, options.batch_size));
  for (std::size_t begin = 0; begin < samples.size(); begin += bs) {
    const std::size_t end = std::min(samples.size(), begin + bs);
    std::vector<FaceImage> images;
    for (std::size_t i = begin; i < end; ++i) images.push_back(prepared_image(samples[i], i, options));
    auto rec = detector.forward(images, fsm::SamplingMode::kDeterministic, gen);
    visit(begin, rec);
  }
}

}  // namespace

EvalReport evaluate(Detector& detector, const std::vector<data::Sample>& samples, const EvalOptions& options) {
  options.policy.validate();
  if (options.perturbation) options.perturbation->validate();
  EvalReport report;
  report.policy = options.policy.describe();
  report.perturbation = options.perturbation;
  report.scores.resize(samples.size());
  for_each_batch(detector, samples, options, [&](std::size_t begin, const branches::ForwardRecord& rec) {
    auto fake = rec.final_prediction.confidences.select(1, 1).to(torch::kFloat64).contiguous();
    auto acc = fake.accessor<double, 1>();
    for (int64_t j = 0; j < fake.size(0); ++j) report.scores[begin + static_cast<std::size_t>(j)] = acc[j];
  });

  std::vector<int> labels;
  for (const auto& s : samples) labels.push_back(s.label);
  report.n_samples = static_cast<int64_t>(samples.size());
  report.n_fake = std::count(labels.begin(), labels.end(), 1);
  report.n_real = report.n_samples - report.n_fake;
  report.auc = auc(report.scores, labels);

  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < samples.size(); ++i) groups[data::source_group(samples[i].source_tag)].push_back(i);
  for (const auto& [name, members] : groups) {
    SourceResult r;
    r.source = name;
    r.n = static_cast<int64_t>(members.size());
    std::vector<double> sc;
    std::vector<int> lb;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (labels[i] == 0) {
        sc.push_back(report.scores[i]);
        lb.push_back(0);
      }
    }
    for (auto i : members) {
      if (labels[i] == 1) {
        ++r.n_fake;
        sc.push_back(report.scores[i]);
        lb.push_back(1);
      }
    }
    if (r.n_fake > 0 && report.n_real > 0) r.auc = auc(sc, lb);
    report.per_source.push_back(r);
  }
  return report;
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << "dpl evaluation report\n";
  if (!checkpoint.empty()) os << "checkpoint: " << checkpoint << '\n';
  os << "policy: " << policy << '\n';
  os << "perturbation: " << (perturbation ? perturbation->describe() : std::string("none")) << '\n';
  os << "samples: " << n_samples << " (real " << n_real << ", fake " << n_fake << ")\n";
  os << "auc: " << auc << '\n';
  os << "per-source:\n";
  for (const auto& s : per_source) {
    os << "  " << s.source << "  n=" << s.n << "  fake=" << s.n_fake;
    if (s.auc) os << "  auc=" << *s.auc;
    os << '\n';
  }
  return os.str();
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["auc"] = auc;
  j["n_samples"] = n_samples;
  j["n_real"] = n_real;
  j["n_fake"] = n_fake;
  j["policy"] = policy;
  j["checkpoint"] = checkpoint;
  j["level"] = "frame";
  if (perturbation) {
    j["perturbation"] = {{"kind", to_string(perturbation->kind)},
                         {"severity", perturbation->severity},
                         {"parameter", perturbation->parameter()}};
  } else {
    j["perturbation"] = nullptr;
  }
  auto& src = j["per_source"] = nlohmann::json::array();
  for (const auto& s : per_source) {
    nlohmann::json e{{"source", s.source}, {"n", s.n}, {"n_fake", s.n_fake}};
    e["auc"] = s.auc ? nlohmann::json(*s.auc) : nlohmann::json(nullptr);
    src.push_back(e);
  }
  j["scores"] = scores;
  return j;
}

void EvalReport::save(const std::filesystem::path& text_path, const std::filesystem::path& json_path) const {
  for (const auto& p : {text_path, json_path})
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream t(text_path);
  std::ofstream js(json_path);
  if (!t || !js) throw Error("cannot write report files");
  t << to_text();
  js << to_json().dump(2) << '\n';
}

std::vector<RobustnessCell> robustness_sweep(Detector& detector, const std::vector<data::Sample>& samples,
                                             const EvalOptions& options) {
  std::vector<RobustnessCell> cells;
  for (auto kind : all_perturbations()) {
    for (int severity = 1; severity <= 5; ++severity) {
      EvalOptions o = options;
      o.perturbation = PerturbationSpec{kind, severity};
      cells.push_back({kind, severity, evaluate(detector, samples, o).auc});
    }
  }
  return cells;
}

void save_robustness_csv(const std::vector<RobustnessCell>& cells, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "kind,severity,parameter,auc\n";
  out.precision(17);
  for (const auto& c : cells)
    out << to_string(c.kind) << ',' << c.severity << ',' << PerturbationSpec{c.kind, c.severity}.parameter() << ','
        << c.auc << '\n';
}

void export_embeddings(Detector& detector, const std::vector<data::Sample>& samples, const EvalOptions& options,
                       const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  const int64_t dim = detector.model()->fused_dim();
  out << "# dpl-embeddings v1 dim=" << dim << " n=" << samples.size() << '\n';
  out << "label\tk1\tk2";
  for (int64_t d = 0; d < dim; ++d) out << "\tf_" << d;
  out << '\n';
  out.precision(9);
  for_each_batch(detector, samples, options, [&](std::size_t begin, const branches::ForwardRecord& rec) {
    auto fused = rec.fused.to(torch::kFloat64).contiguous();
    auto f = fused.accessor<double, 2>();
    auto k1 = rec.k1.accessor<int64_t, 1>();
    auto k2 = rec.k2.accessor<int64_t, 1>();
    for (int64_t j = 0; j < fused.size(0); ++j) {
      out << samples[begin + static_cast<std::size_t>(j)].label << '\t' << k1[j] << '\t' << k2[j];
      for (int64_t d = 0; d < dim; ++d) out << '\t' << f[j][d];
      out << '\n';
    }
  });
  if (!out) throw Error("write failure on " + path.string());
}

}  // namespace dpl::evaluation

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dpl/data.hpp"
#include "dpl/errors.hpp"

namespace dpl::data {

namespace {

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform_unit(rng); }

cv::Scalar jitter(const cv::Scalar& base, double amount, Rng& rng) {
  return {std::clamp(base[0] + uniform(rng, -amount, amount), 0.0, 255.0),
          std::clamp(base[1] + uniform(rng, -amount, amount), 0.0, 255.0),
          std::clamp(base[2] + uniform(rng, -amount, amount), 0.0, 255.0)};
}

// Gaussian field, blurred to the given correlation length (pixels).
cv::Mat noise_field(Rng& rng, int size, double blur_sigma) {
  cv::Mat n(size, size, CV_32F);
  for (int r = 0; r < size; ++r) {
    auto* p = n.ptr<float>(r);
    for (int c = 0; c < size; ++c) p[c] = static_cast<float>(standard_normal(rng));
  }
  if (blur_sigma > 0) {
    cv::GaussianBlur(n, n, cv::Size(0, 0), blur_sigma);
    cv::Scalar mean, stddev;
    cv::meanStdDev(n, mean, stddev);
    n = (n - mean[0]) / std::max(stddev[0], 1e-6);
  }
  return n;
}

}  // namespace

FaceImage synthesize_face(Rng& rng, int size) {
  const double s = size / 224.0;
  cv::Mat img(size, size, CV_32FC3);

  // Background: vertical gradient between two random colours.
  const cv::Scalar top(uniform(rng, 20, 230), uniform(rng, 20, 230), uniform(rng, 20, 230));
  const cv::Scalar bottom(uniform(rng, 20, 230), uniform(rng, 20, 230), uniform(rng, 20, 230));
  for (int r = 0; r < size; ++r) {
    const double a = static_cast<double>(r) / (size - 1);
    const cv::Vec3f colour(static_cast<float>(top[0] * (1 - a) + bottom[0] * a),
                           static_cast<float>(top[1] * (1 - a) + bottom[1] * a),
                           static_cast<float>(top[2] * (1 - a) + bottom[2] * a));
    for (int c = 0; c < size; ++c) img.at<cv::Vec3f>(r, c) = colour;
  }

  const cv::Point2d centre(size / 2.0 + uniform(rng, -10, 10) * s, size / 2.0 + uniform(rng, -6, 10) * s);
  const cv::Size2d axes(uniform(rng, 62, 76) * s, uniform(rng, 82, 96) * s);
  const cv::Scalar skin(uniform(rng, 80, 170), uniform(rng, 110, 195), uniform(rng, 150, 240));
  const cv::Scalar hair(uniform(rng, 10, 70), uniform(rng, 10, 70), uniform(rng, 10, 80));

  auto ellipse = [&](cv::Mat& m, cv::Point2d c, cv::Size2d ax, double angle, const cv::Scalar& col,
                     int thickness = cv::FILLED) {
    cv::ellipse(m, cv::Point(cvRound(c.x), cvRound(c.y)), cv::Size(cvRound(ax.width), cvRound(ax.height)),
                angle, 0, 360, col, thickness, cv::LINE_AA);
  };

  ellipse(img, {centre.x, centre.y - 0.22 * axes.height}, {axes.width * 1.12, axes.height * 0.9}, 0, hair);
  cv::Mat face_mask = cv::Mat::zeros(size, size, CV_32F);
  ellipse(face_mask, centre, axes, 0, cv::Scalar(1.0));
  cv::GaussianBlur(face_mask, face_mask, cv::Size(0, 0), 1.5 * s);

  // Skin: base colour, side lighting, mid and fine texture.
  const cv::Mat mid = noise_field(rng, size, 3.0 * s);
  const cv::Mat fine = noise_field(rng, size, 0.8 * s);
  const double mid_amp = uniform(rng, 3, 7), fine_amp = uniform(rng, 4, 9);
  const double light = uniform(rng, -0.25, 0.25);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      const float m = face_mask.at<float>(r, c);
      if (m <= 0.f) continue;
      const double shade =
          1.0 + light * (c - centre.x) / axes.width - 0.12 * std::pow((r - centre.y) / axes.height, 2);
      const double tex = mid_amp * mid.at<float>(r, c) + fine_amp * fine.at<float>(r, c);
      auto& px = img.at<cv::Vec3f>(r, c);
      for (int k = 0; k < 3; ++k)
        px[k] = static_cast<float>((1 - m) * px[k] + m * (skin[k] * shade + tex));
    }
  }

  // Eyes, brows, nose, mouth.
  const double eye_dx = 0.38 * axes.width, eye_y = centre.y - 0.12 * axes.height;
  const cv::Scalar iris = jitter(cv::Scalar(60, 50, 40), 35, rng);
  for (int side : {-1, 1}) {
    const cv::Point2d eye(centre.x + side * eye_dx, eye_y);
    ellipse(img, eye, {12 * s, 6 * s}, 0, cv::Scalar(235, 235, 235));
    cv::circle(img, cv::Point(cvRound(eye.x), cvRound(eye.y)), cvRound(4.5 * s), iris, cv::FILLED,
               cv::LINE_AA);
    cv::circle(img, cv::Point(cvRound(eye.x), cvRound(eye.y)), cvRound(2 * s), cv::Scalar(15, 15, 15),
               cv::FILLED, cv::LINE_AA);
    cv::line(img, cv::Point(cvRound(eye.x - 13 * s), cvRound(eye.y - 13 * s)),
             cv::Point(cvRound(eye.x + 13 * s), cvRound(eye.y - 15 * s + side * 2 * s)), hair,
             std::max(1, cvRound(3 * s)), cv::LINE_AA);
  }
  const cv::Scalar shadow = skin * 0.75;
  cv::line(img, cv::Point(cvRound(centre.x), cvRound(eye_y + 8 * s)),
           cv::Point(cvRound(centre.x - 4 * s), cvRound(centre.y + 0.22 * axes.height)), shadow,
           std::max(1, cvRound(2 * s)), cv::LINE_AA);
  const cv::Scalar lips = jitter(cv::Scalar(skin[0] * 0.6, skin[1] * 0.55, std::min(255.0, skin[2] * 0.95)), 10, rng);
  cv::ellipse(img, cv::Point(cvRound(centre.x), cvRound(centre.y + 0.45 * axes.height)),
              cv::Size(cvRound(uniform(rng, 16, 24) * s), cvRound(uniform(rng, 4, 8) * s)), 0, 0, 360, lips,
              cv::FILLED, cv::LINE_AA);

  // Sensor noise everywhere.
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      auto& px = img.at<cv::Vec3f>(r, c);
      for (int k = 0; k < 3; ++k) px[k] += static_cast<float>(1.5 * standard_normal(rng));
    }

  cv::Mat out;
  img.convertTo(out, CV_8UC3);
  return FaceImage{out};
}

void plant_artifact(FaceImage& image, double strength, Rng& rng) {
  const int size = image.height();
  const double s = size / 224.0;
  const double radius = uniform(rng, 30, 50) * s;
  const double cx = uniform(rng, 0.32, 0.68) * size;
  const double cy = uniform(rng, 0.32, 0.72) * size;
  const double amplitude = 60.0 * strength;
  const int period = std::max(2, cvRound(4 * s));
  const int half = period / 2;
  // Slight per-channel tint so the patch also carries a colour signature.
  const double tint[3] = {uniform(rng, 0.7, 1.0), uniform(rng, 0.7, 1.0), uniform(rng, 0.7, 1.0)};
  for (int r = 0; r < size; ++r) {
    auto* row = image.pixels.ptr<cv::Vec3b>(r);
    for (int c = 0; c < size; ++c) {
      const double d2 = (r - cy) * (r - cy) + (c - cx) * (c - cx);
      const double w = std::exp(-d2 / (2.0 * radius * radius));
      if (w < 1e-3) continue;
      const double sign = (((r / half) + (c / half)) % 2 == 0) ? 1.0 : -1.0;
      for (int k = 0; k < 3; ++k) {
        const double v = row[c][k] + amplitude * tint[k] * w * sign;
        row[c][k] = cv::saturate_cast<uchar>(v);
      }
    }
  }
}

std::vector<ManifestEntry> make_synthetic_dataset(const SyntheticOptions& options,
                                                  const std::filesystem::path& out_dir) {
  if (options.n_per_class < 1) throw ConfigError("n_per_class must be at least 1");
  if (options.artifact_strength < 0) throw ConfigError("artifact_strength must be non-negative");
  CompressionPolicy{CompressionMode::kRandomJpeg, options.quality_lo, options.quality_hi}.validate();
  if (options.test_fraction < 0 || options.test_fraction >= 1) throw ConfigError("test_fraction must lie in [0, 1)");

  const auto image_dir = out_dir / "images";
  std::filesystem::create_directories(image_dir);
  const int n_test = static_cast<int>(std::round(options.n_per_class * options.test_fraction));

  std::vector<ManifestEntry> entries;
  for (int i = 0; i < options.n_per_class; ++i) {
    for (int label = 0; label < 2; ++label) {
      const auto index = static_cast<std::uint64_t>(2 * i + label);
      Rng rng(derive_seed(options.seed, SeedStream::kSynthetic, index));
      FaceImage face = synthesize_face(rng, options.image_size);
      if (label == 1 && options.artifact_strength > 0) plant_artifact(face, options.artifact_strength, rng);
      const int quality = uniform_int(rng, options.quality_lo, options.quality_hi);

      char name[64];
      std::snprintf(name, sizeof(name), "%s_%05d.jpg", label ? "fake" : "real", i);
      const auto path = image_dir / name;
      std::vector<uchar> buf;
      if (!cv::imencode(".jpg", face.pixels, buf, {cv::IMWRITE_JPEG_QUALITY, quality}))
        throw CodecError("JPEG encode failed");
      std::ofstream out(path, std::ios::binary);
      out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
      if (!out) throw Error("cannot write " + path.string());

      ManifestEntry e;
      e.path = std::filesystem::path("images") / name;
      e.label = label;
      e.split = i < options.n_per_class - n_test ? Split::kTrain : Split::kTest;
      e.source_tag = std::string(label ? "planted" : "real") + ";q=" + std::to_string(quality);
      entries.push_back(e);
    }
  }
  save_manifest(entries, out_dir / "manifest.tsv");
  for (auto& e : entries) e.path = out_dir / e.path;
  return entries;
}

}  // namespace dpl::data

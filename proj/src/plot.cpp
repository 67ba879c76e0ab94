#include <algorithm>
#include <cstdio>
#include <map>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dpl/errors.hpp"
#include "dpl/evaluation.hpp"

namespace dpl::evaluation {

namespace {

constexpr int kPanelW = 420;
constexpr int kPanelH = 320;
constexpr int kLeft = 60, kRight = 20, kTop = 40, kBottom = 50;

void draw_text(cv::Mat& img, const std::string& s, cv::Point at, double scale = 0.45) {
  cv::putText(img, s, at, cv::FONT_HERSHEY_SIMPLEX, scale, cv::Scalar(30, 30, 30), 1, cv::LINE_AA);
}

void dashed_hline(cv::Mat& img, int x0, int x1, int y, const cv::Scalar& color) {
  for (int x = x0; x < x1; x += 10) cv::line(img, {x, y}, {std::min(x + 5, x1), y}, color, 1, cv::LINE_AA);
}

}  // namespace

void plot_robustness(const std::vector<RobustnessCell>& cells, const std::filesystem::path& path,
                     std::optional<double> clean_auc) {
  std::map<PerturbationKind, std::vector<std::pair<int, double>>> series;
  double lo = 1.0, hi = 0.0;
  for (const auto& c : cells) {
    series[c.kind].emplace_back(c.severity, c.auc);
    lo = std::min(lo, c.auc);
    hi = std::max(hi, c.auc);
  }
  if (clean_auc) {
    lo = std::min(lo, *clean_auc);
    hi = std::max(hi, *clean_auc);
  }
  lo = std::max(0.0, std::floor((lo - 0.05) * 10.0) / 10.0);
  hi = std::min(1.0, std::ceil((hi + 0.05) * 10.0) / 10.0);
  if (hi - lo < 0.1) hi = std::min(1.0, lo + 0.1);

  cv::Mat canvas(2 * kPanelH, 2 * kPanelW, CV_8UC3, cv::Scalar(255, 255, 255));
  const auto& kinds = all_perturbations();
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    cv::Mat panel = canvas(cv::Rect(static_cast<int>(k % 2) * kPanelW, static_cast<int>(k / 2) * kPanelH, kPanelW, kPanelH));
    const int x0 = kLeft, x1 = kPanelW - kRight, y0 = kTop, y1 = kPanelH - kBottom;
    cv::rectangle(panel, {x0, y0}, {x1, y1}, cv::Scalar(0, 0, 0), 1);
    draw_text(panel, to_string(kinds[k]), {x0, y0 - 12}, 0.6);
    auto px = [&](double sev) { return x0 + static_cast<int>((sev - 1.0) / 4.0 * (x1 - x0)); };
    auto py = [&](double a) { return y1 - static_cast<int>((a - lo) / (hi - lo) * (y1 - y0)); };
    for (int s = 1; s <= 5; ++s) {
      cv::line(panel, {px(s), y1}, {px(s), y1 + 4}, cv::Scalar(0, 0, 0), 1);
      draw_text(panel, std::to_string(s), {px(s) - 4, y1 + 18});
    }
    for (int i = 0; i <= 4; ++i) {
      const double a = lo + (hi - lo) * i / 4.0;
      char buf[16];
      std::snprintf(buf, sizeof buf, "%.2f", a);
      cv::line(panel, {x0 - 4, py(a)}, {x0, py(a)}, cv::Scalar(0, 0, 0), 1);
      draw_text(panel, buf, {x0 - 45, py(a) + 4});
    }
    draw_text(panel, "severity", {(x0 + x1) / 2 - 30, y1 + 38});
    draw_text(panel, "AUC", {6, y0 - 12});
    if (clean_auc) dashed_hline(panel, x0, x1, py(*clean_auc), cv::Scalar(150, 150, 150));
    auto it = series.find(kinds[k]);
    if (it == series.end()) continue;
    auto pts = it->second;
    std::sort(pts.begin(), pts.end());
    for (std::size_t i = 0; i < pts.size(); ++i) {
      cv::Point p(px(pts[i].first), py(pts[i].second));
      if (i > 0) cv::line(panel, {px(pts[i - 1].first), py(pts[i - 1].second)}, p, cv::Scalar(180, 90, 20), 2, cv::LINE_AA);
      cv::circle(panel, p, 4, cv::Scalar(180, 90, 20), cv::FILLED, cv::LINE_AA);
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), canvas)) throw CodecError("cannot write plot " + path.string());
}

}  // namespace dpl::evaluation

#pragma once

#include <filesystem>

#include <opencv2/core.hpp>

namespace dpl {

inline constexpr int kDefaultImageSize = 224;
inline constexpr int kMinImageSide = 32;

// A pre-cropped face: 8-bit, three channels, BGR order (OpenCV native).
struct FaceImage {
  cv::Mat pixels;

  int height() const { return pixels.rows; }
  int width() const { return pixels.cols; }
};

// Throws InvalidImageError unless the image is CV_8UC3 and at least 32x32.
void validate(const FaceImage& image);

FaceImage load_image(const std::filesystem::path& path);
void save_image(const FaceImage& image, const std::filesystem::path& path,
                int jpeg_quality = 95);

// Resizes to size x size with area interpolation when the shape differs.
FaceImage resize_to(const FaceImage& image, int size);

// Deep copy; cv::Mat assignment shares storage.
FaceImage clone(const FaceImage& image);

}  // namespace dpl

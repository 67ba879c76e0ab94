#include "dpl/image.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dpl/errors.hpp"

namespace dpl {

void validate(const FaceImage& image) {
  if (image.pixels.empty()) throw InvalidImageError("empty image");
  if (image.pixels.type() != CV_8UC3)
    throw InvalidImageError("expected an 8-bit three channel image");
  if (image.height() < kMinImageSide || image.width() < kMinImageSide)
    throw InvalidImageError("image smaller than " + std::to_string(kMinImageSide) + "x" +
                            std::to_string(kMinImageSide));
}

FaceImage load_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw InvalidImageError("missing image file: " + path.string());
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (m.empty()) throw CodecError("cannot decode image: " + path.string());
  FaceImage img{m};
  validate(img);
  return img;
}

void save_image(const FaceImage& image, const std::filesystem::path& path, int jpeg_quality) {
  std::vector<int> params;
  auto ext = path.extension().string();
  if (ext == ".jpg" || ext == ".jpeg") params = {cv::IMWRITE_JPEG_QUALITY, jpeg_quality};
  if (!cv::imwrite(path.string(), image.pixels, params))
    throw CodecError("cannot write image: " + path.string());
}

FaceImage resize_to(const FaceImage& image, int size) {
  if (image.height() == size && image.width() == size) return image;
  cv::Mat out;
  cv::resize(image.pixels, out, cv::Size(size, size), 0, 0, cv::INTER_AREA);
  return FaceImage{out};
}

FaceImage clone(const FaceImage& image) { return FaceImage{image.pixels.clone()}; }

}  // namespace dpl

#include "beatframe/image.hpp"

#include <cmath>
#include <fstream>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "beatframe/digest.hpp"
#include "beatframe/error.hpp"

namespace beatframe {

namespace {

cv::Mat to_bgr(const Image& image) {
  cv::Mat rgb(image.height, image.width, CV_8UC3, const_cast<std::uint8_t*>(image.rgb.data()));
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

Image from_bgr(const cv::Mat& bgr) {
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  Image out(rgb.cols, rgb.rows);
  for (int y = 0; y < rgb.rows; ++y) {
    std::copy_n(rgb.ptr<std::uint8_t>(y), static_cast<std::size_t>(rgb.cols) * 3,
                out.rgb.begin() + static_cast<std::ptrdiff_t>(y) * rgb.cols * 3);
  }
  return out;
}

void check(const Image& image) {
  if (image.empty() || image.rgb.size() != static_cast<std::size_t>(image.width) * image.height * 3) {
    throw ShapeError("image raster does not match its dimensions");
  }
}

}  // namespace

Image::Image(int w, int h, std::uint8_t fill)
    : width(w), height(h), rgb(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3, fill) {
  if (w < 0 || h < 0) throw ValidationError("image dimensions must be non-negative");
}

std::vector<std::uint8_t> encode_png(const Image& image) {
  check(image);
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".png", to_bgr(image), out)) throw Error("PNG encoding failed");
  return out;
}

Image decode_png(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) throw DecodeError("empty image data");
  const cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
  const cv::Mat bgr = cv::imdecode(buf, cv::IMREAD_COLOR);
  if (bgr.empty()) throw DecodeError("image data could not be decoded");
  return from_bgr(bgr);
}

void write_png(const std::filesystem::path& path, const Image& image) {
  const auto bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("cannot write image '" + path.string() + "'");
}

Image read_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DecodeError("cannot read image '" + path.string() + "'");
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), {}};
  try {
    return decode_png(bytes);
  } catch (const DecodeError& e) {
    throw DecodeError("'" + path.string() + "': " + e.what());
  }
}

Image resize(const Image& image, int width, int height) {
  check(image);
  if (width <= 0 || height <= 0) throw ValidationError("resize target must be positive");
  if (width == image.width && height == image.height) return image;
  cv::Mat out;
  const bool shrink = width < image.width || height < image.height;
  cv::resize(to_bgr(image), out, cv::Size(width, height), 0, 0, shrink ? cv::INTER_AREA : cv::INTER_LINEAR);
  return from_bgr(out);
}

double mean_abs_diff(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height) throw ShapeError("images differ in size");
  if (a.rgb.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < a.rgb.size(); ++i) total += std::abs(static_cast<int>(a.rgb[i]) - static_cast<int>(b.rgb[i]));
  return total / static_cast<double>(a.rgb.size());
}

std::string pixel_digest(const Image& image) {
  Sha256 h;
  h.update_pod(static_cast<std::int32_t>(image.width));
  h.update_pod(static_cast<std::int32_t>(image.height));
  h.update(std::span<const std::uint8_t>(image.rgb));
  return h.hex();
}

}  // namespace beatframe

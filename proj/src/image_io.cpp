#include "arra/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include <png.h>

#include "arra/error.hpp"

namespace arra::corpus {

num::Tensor read_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw IntegrityError("png read " + path.string() + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> bytes(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, bytes.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IntegrityError("png read " + path.string() + ": " + msg);
  }
  const auto h = static_cast<int64_t>(img.height), w = static_cast<int64_t>(img.width);
  std::vector<double> values(bytes.size());
  for (size_t i = 0; i < bytes.size(); ++i) values[i] = bytes[i] / 255.0;
  return num::Tensor::from_data({h, w, 3}, std::move(values));
}

void write_png(const std::filesystem::path& path, const num::Tensor& image) {
  if (image.shape().size() != 3 || image.dim(2) != 3)
    throw ShapeError("write_png: expected HxWx3, got " + num::Tensor::shape_str(image.shape()));
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.dim(1));
  img.height = static_cast<png_uint_32>(image.dim(0));
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> bytes(image.data().size());
  for (size_t i = 0; i < bytes.size(); ++i) {
    const double v = std::clamp(image.data()[i], 0.0, 1.0);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, bytes.data(), 0, nullptr))
    throw IntegrityError("png write " + path.string() + ": " + img.message);
}

num::Tensor resize_to_canvas(const num::Tensor& image, int canvas) {
  if (image.shape().size() != 3 || image.dim(2) != 3)
    throw ShapeError("resize_to_canvas: expected HxWx3, got " + num::Tensor::shape_str(image.shape()));
  const int64_t h = image.dim(0), w = image.dim(1);
  const int64_t side = std::min(h, w);
  const int64_t y0 = (h - side) / 2, x0 = (w - side) / 2;
  std::vector<double> out(static_cast<size_t>(canvas) * canvas * 3);
  for (int64_t y = 0; y < canvas; ++y)
    for (int64_t x = 0; x < canvas; ++x) {
      const int64_t sy = y0 + y * side / canvas;
      const int64_t sx = x0 + x * side / canvas;
      for (int64_t ch = 0; ch < 3; ++ch)
        out[static_cast<size_t>((y * canvas + x) * 3 + ch)] = image.at({sy, sx, ch});
    }
  return num::Tensor::from_data({canvas, canvas, 3}, std::move(out));
}

}  // namespace arra::corpus

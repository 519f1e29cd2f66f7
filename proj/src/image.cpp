#include "patchsearch/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include "patchsearch/errors.hpp"

namespace patchsearch {

Rect Rect::intersect(const Rect& other) const {
  const int x0 = std::max(x, other.x);
  const int y0 = std::max(y, other.y);
  const int x1 = std::min(x + w, other.x + other.w);
  const int y1 = std::min(y + h, other.y + other.h);
  if (x1 <= x0 || y1 <= y0) return Rect{x0, y0, 0, 0};
  return Rect{x0, y0, x1 - x0, y1 - y0};
}

double Rect::iou(const Rect& other) const {
  const long inter = intersect(other).area();
  const long uni = area() + other.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

Image::Image(int height, int width, int channels, float fill)
    : height_(height), width_(width), channels_(channels) {
  if (height < 0 || width < 0 || channels <= 0) throw ConfigError("invalid image shape");
  pixels_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

Image resize_bilinear(const Image& src, int out_height, int out_width) {
  if (out_height <= 0 || out_width <= 0) throw ConfigError("resize target must be positive");
  if (src.height() == out_height && src.width() == out_width) return src;
  Image out(out_height, out_width, src.channels());
  const double sy = static_cast<double>(src.height()) / out_height;
  const double sx = static_cast<double>(src.width()) / out_width;
  for (int y = 0; y < out_height; ++y) {
    double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height() - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height() - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_width; ++x) {
      double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width() - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width() - 1);
      const double wx = fx - x0;
      for (int c = 0; c < src.channels(); ++c) {
        const double top = src.at(y0, x0, c) * (1 - wx) + src.at(y0, x1, c) * wx;
        const double bot = src.at(y1, x0, c) * (1 - wx) + src.at(y1, x1, c) * wx;
        out.at(y, x, c) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

Image crop(const Image& src, const Rect& box) {
  if (!box.inside(src.width(), src.height()) || box.empty())
    throw ConfigError("crop box outside image bounds");
  Image out(box.h, box.w, src.channels());
  for (int y = 0; y < box.h; ++y)
    for (int x = 0; x < box.w; ++x)
      for (int c = 0; c < src.channels(); ++c) out.at(y, x, c) = src.at(box.y + y, box.x + x, c);
  return out;
}

void paste(Image& dst, const Image& patch, int x, int y) {
  if (!Rect{x, y, patch.width(), patch.height()}.inside(dst.width(), dst.height()))
    throw ConfigError("paste location puts the patch outside the image");
  if (patch.channels() != dst.channels()) throw ConfigError("paste channel mismatch");
  for (int py = 0; py < patch.height(); ++py)
    for (int px = 0; px < patch.width(); ++px)
      for (int c = 0; c < patch.channels(); ++c) dst.at(y + py, x + px, c) = patch.at(py, px, c);
}

void clamp_unit(Image& img) {
  for (float& v : img.data()) v = std::clamp(v, 0.0f, 1.0f);
}

void quantize8(Image& img) {
  for (float& v : img.data()) v = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
}

Image read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str()))
    throw DataError("cannot read PNG '" + path.string() + "': " + png.message);
  png.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&png);
    throw DataError("cannot decode PNG '" + path.string() + "': " + png.message);
  }
  Image img(static_cast<int>(png.height), static_cast<int>(png.width), 3);
  auto px = img.data();
  for (std::size_t i = 0; i < buffer.size(); ++i) px[i] = buffer[i] / 255.0f;
  return img;
}

void write_png(const Image& img, const std::filesystem::path& path) {
  if (img.channels() != 3) throw ConfigError("write_png expects an RGB image");
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width());
  png.height = static_cast<png_uint_32>(img.height());
  png.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buffer(img.size());
  auto px = img.data();
  for (std::size_t i = 0; i < buffer.size(); ++i)
    buffer[i] = static_cast<std::uint8_t>(std::lround(std::clamp(px[i], 0.0f, 1.0f) * 255.0f));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!png_image_write_to_file(&png, path.c_str(), 0, buffer.data(), 0, nullptr))
    throw DataError("cannot write PNG '" + path.string() + "': " + png.message);
}

}  // namespace patchsearch

#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace patchsearch {

/// Axis-aligned pixel rectangle; (x, y) is the top-left corner.
struct Rect {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  long area() const { return static_cast<long>(w) * h; }
  bool empty() const { return w <= 0 || h <= 0; }
  bool contains(int px, int py) const { return px >= x && px < x + w && py >= y && py < y + h; }
  bool inside(int width, int height) const {
    return x >= 0 && y >= 0 && x + w <= width && y + h <= height;
  }
  Rect intersect(const Rect& other) const;
  double iou(const Rect& other) const;
  bool operator==(const Rect&) const = default;
};

/// Float pixel grid, HWC layout, values nominally in [0, 1].
class Image {
 public:
  Image() = default;
  Image(int height, int width, int channels = 3, float fill = 0.0f);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  bool empty() const { return pixels_.empty(); }
  std::size_t size() const { return pixels_.size(); }

  float& at(int y, int x, int c) { return pixels_[index(y, x, c)]; }
  float at(int y, int x, int c) const { return pixels_[index(y, x, c)]; }

  std::span<float> data() { return pixels_; }
  std::span<const float> data() const { return pixels_; }

  bool operator==(const Image&) const = default;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<float> pixels_;
};

/// Half-pixel-centre bilinear resampling (identity when sizes match).
Image resize_bilinear(const Image& src, int out_height, int out_width);

Image crop(const Image& src, const Rect& box);

/// Copies `patch` into `dst` with its top-left at (x, y); the patch must fit.
void paste(Image& dst, const Image& patch, int x, int y);

/// Clamps every value into [0, 1].
void clamp_unit(Image& img);

/// Snaps every value onto the 8-bit grid k/255.
void quantize8(Image& img);

Image read_png(const std::filesystem::path& path);
void write_png(const Image& img, const std::filesystem::path& path);

}  // namespace patchsearch

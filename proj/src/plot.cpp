#include "patchsearch/plot.hpp"

#include <algorithm>
#include <cmath>

#include "patchsearch/errors.hpp"
#include "patchsearch/image.hpp"

namespace patchsearch::plot {

namespace {

constexpr int kPad = 24;

void set(Image& img, int x, int y, float r, float g, float b) {
  if (x < 0 || y < 0 || x >= img.width() || y >= img.height()) return;
  img.at(y, x, 0) = r;
  img.at(y, x, 1) = g;
  img.at(y, x, 2) = b;
}

void draw_line(Image& img, int x0, int y0, int x1, int y1, float r, float g, float b) {
  const int steps = std::max({std::abs(x1 - x0), std::abs(y1 - y0), 1});
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    const int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
    const int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
    for (int d = 0; d < 2; ++d) set(img, x, y + d, r, g, b);
  }
}

Image canvas(int width, int height) {
  if (width <= 2 * kPad || height <= 2 * kPad) throw ConfigError("plot canvas too small");
  Image img(height, width, 3, 1.0f);
  draw_line(img, kPad, height - kPad, width - kPad, height - kPad, 0.1f, 0.1f, 0.1f);
  draw_line(img, kPad, kPad, kPad, height - kPad, 0.1f, 0.1f, 0.1f);
  return img;
}

}  // namespace

void bar_chart(const std::vector<double>& heights, const std::filesystem::path& path, int width, int height) {
  Image img = canvas(width, height);
  if (!heights.empty()) {
    const double top = std::max(1e-12, *std::max_element(heights.begin(), heights.end()));
    const double slot = static_cast<double>(width - 2 * kPad) / static_cast<double>(heights.size());
    const int base = height - kPad - 1;
    for (std::size_t i = 0; i < heights.size(); ++i) {
      const int x0 = kPad + 1 + static_cast<int>(i * slot);
      const int x1 = std::max(x0, kPad + static_cast<int>((i + 1) * slot) - 1);
      const int bar = static_cast<int>(std::lround(std::max(0.0, heights[i]) / top * (height - 2 * kPad - 2)));
      for (int x = x0; x <= x1; ++x)
        for (int y = base - bar; y <= base; ++y) set(img, x, y, 0.2f, 0.4f, 0.8f);
    }
  }
  write_png(img, path);
}

void line_chart(const std::vector<double>& xs, const std::vector<double>& ys, const std::filesystem::path& path,
                int width, int height) {
  if (xs.size() != ys.size()) throw ConfigError("line_chart: xs and ys differ in length");
  Image img = canvas(width, height);
  if (!xs.empty()) {
    const auto [xmin, xmax] = std::minmax_element(xs.begin(), xs.end());
    const double ytop = std::max(1e-12, *std::max_element(ys.begin(), ys.end()));
    const double xspan = std::max(1e-12, *xmax - *xmin);
    auto px = [&](std::size_t i) {
      return std::pair{kPad + static_cast<int>(std::lround((xs[i] - *xmin) / xspan * (width - 2 * kPad))),
                       height - kPad - static_cast<int>(std::lround(std::max(0.0, ys[i]) / ytop * (height - 2 * kPad)))};
    };
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const auto [x, y] = px(i);
      for (int dy = -3; dy <= 3; ++dy)
        for (int dx = -3; dx <= 3; ++dx) set(img, x + dx, y + dy, 0.85f, 0.2f, 0.15f);
      if (i > 0) {
        const auto [x0, y0] = px(i - 1);
        draw_line(img, x0, y0, x, y, 0.85f, 0.2f, 0.15f);
      }
    }
  }
  write_png(img, path);
}

std::vector<double> histogram(const std::vector<double>& values, int bins) {
  if (bins < 1) throw ConfigError("histogram needs at least one bin");
  std::vector<double> counts(static_cast<std::size_t>(bins), 0.0);
  if (values.empty()) return counts;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double span = *hi - *lo;
  for (double v : values) {
    auto b = span > 0 ? static_cast<std::size_t>((v - *lo) / span * bins) : 0;
    counts[std::min(b, counts.size() - 1)] += 1.0;
  }
  return counts;
}

}  // namespace patchsearch::plot

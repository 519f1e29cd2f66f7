#include "patchsearch/augment.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

namespace patchsearch::augment {

namespace {

float luma(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

void blend_clamped(float& v, float base, double factor) {
  v = std::clamp(static_cast<float>(factor * v + (1.0 - factor) * base), 0.0f, 1.0f);
}

}  // namespace

AugmentConfig AugmentConfig::identity() {
  AugmentConfig c;
  c.crop_scale_min = c.crop_scale_max = 1.0;
  c.jitter_prob = c.grayscale_prob = c.blur_prob = c.flip_prob = 0.0;
  return c;
}

Rect random_resized_crop_box(int height, int width, double scale_min, double scale_max, Rng& rng) {
  const double area = static_cast<double>(height) * width;
  const double log_lo = std::log(3.0 / 4.0), log_hi = std::log(4.0 / 3.0);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(scale_min, scale_max);
    const double ratio = std::exp(rng.uniform(log_lo, log_hi));
    const int w = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int h = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (w > 0 && h > 0 && w <= width && h <= height) {
      const int y = static_cast<int>(rng.uniform_int(0, height - h));
      const int x = static_cast<int>(rng.uniform_int(0, width - w));
      return {x, y, w, h};
    }
  }
  return {0, 0, width, height};
}

void adjust_brightness(Image& img, double factor) {
  for (float& v : img.data()) v = std::clamp(static_cast<float>(v * factor), 0.0f, 1.0f);
}

void adjust_contrast(Image& img, double factor) {
  auto px = img.data();
  const std::size_t n = px.size() / 3;
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += luma(px[3 * i], px[3 * i + 1], px[3 * i + 2]);
  mean /= static_cast<double>(n);
  for (float& v : px) blend_clamped(v, static_cast<float>(mean), factor);
}

void adjust_saturation(Image& img, double factor) {
  auto px = img.data();
  for (std::size_t i = 0; i + 2 < px.size(); i += 3) {
    const float g = luma(px[i], px[i + 1], px[i + 2]);
    for (int c = 0; c < 3; ++c) blend_clamped(px[i + c], g, factor);
  }
}

void adjust_hue(Image& img, double shift) {
  auto px = img.data();
  for (std::size_t i = 0; i + 2 < px.size(); i += 3) {
    const float r = px[i], g = px[i + 1], b = px[i + 2];
    const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const float delta = mx - mn;
    if (delta <= 0.0f) continue;
    float h;
    if (mx == r) h = std::fmod((g - b) / delta, 6.0f);
    else if (mx == g) h = (b - r) / delta + 2.0f;
    else h = (r - g) / delta + 4.0f;
    h = h / 6.0f + static_cast<float>(shift);
    h -= std::floor(h);
    const float s = delta / mx, v = mx;
    const float hh = h * 6.0f;
    const int sector = static_cast<int>(hh) % 6;
    const float f = hh - std::floor(hh);
    const float p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    const std::array<std::array<float, 3>, 6> table{{{v, t, p}, {q, v, p}, {p, v, t}, {p, q, v}, {t, p, v}, {v, p, q}}};
    for (int c = 0; c < 3; ++c) px[i + c] = table[static_cast<std::size_t>(sector)][static_cast<std::size_t>(c)];
  }
}

void to_grayscale(Image& img) {
  auto px = img.data();
  for (std::size_t i = 0; i + 2 < px.size(); i += 3) {
    const float g = luma(px[i], px[i + 1], px[i + 2]);
    px[i] = px[i + 1] = px[i + 2] = g;
  }
}

void gaussian_blur(Image& img, double sigma) {
  const int side = std::min(img.height(), img.width());
  int ksize = static_cast<int>(std::lround(0.1 * side));
  if (ksize % 2 == 0) ++ksize;
  ksize = std::max(ksize, 3);
  const int radius = ksize / 2;
  std::vector<float> kernel(static_cast<std::size_t>(ksize));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * i * i / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = static_cast<float>(v);
    total += v;
  }
  for (float& k : kernel) k = static_cast<float>(k / total);

  const int h = img.height(), w = img.width(), ch = img.channels();
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
  };
  Image tmp(h, w, ch);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c) {
        float acc = 0.0f;
        for (int k = -radius; k <= radius; ++k) acc += kernel[static_cast<std::size_t>(k + radius)] * img.at(y, reflect(x + k, w), c);
        tmp.at(y, x, c) = acc;
      }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c) {
        float acc = 0.0f;
        for (int k = -radius; k <= radius; ++k) acc += kernel[static_cast<std::size_t>(k + radius)] * tmp.at(reflect(y + k, h), x, c);
        img.at(y, x, c) = acc;
      }
}

void hflip(Image& img) {
  const int w = img.width();
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < w / 2; ++x)
      for (int c = 0; c < img.channels(); ++c) std::swap(img.at(y, x, c), img.at(y, w - 1 - x, c));
}

Image augment(const Image& src, const AugmentConfig& config, Rng& rng) {
  const int h = src.height(), w = src.width();
  Image out;
  if (config.crop_scale_min >= 1.0) {
    out = src;
  } else {
    const Rect box = random_resized_crop_box(h, w, config.crop_scale_min, config.crop_scale_max, rng);
    out = resize_bilinear(crop(src, box), h, w);
  }
  if (config.jitter_prob > 0.0 && rng.bernoulli(config.jitter_prob)) {
    std::array<int, 4> order{0, 1, 2, 3};
    rng.shuffle(std::span<int>(order));
    for (int op : order) {
      switch (op) {
        case 0: adjust_brightness(out, rng.uniform(1 - config.brightness, 1 + config.brightness)); break;
        case 1: adjust_contrast(out, rng.uniform(1 - config.contrast, 1 + config.contrast)); break;
        case 2: adjust_saturation(out, rng.uniform(1 - config.saturation, 1 + config.saturation)); break;
        default: adjust_hue(out, rng.uniform(-config.hue, config.hue)); break;
      }
    }
  }
  if (config.grayscale_prob > 0.0 && rng.bernoulli(config.grayscale_prob)) to_grayscale(out);
  if (config.blur_prob > 0.0 && rng.bernoulli(config.blur_prob))
    gaussian_blur(out, rng.uniform(config.blur_sigma_min, config.blur_sigma_max));
  if (config.flip_prob > 0.0 && rng.bernoulli(config.flip_prob)) hflip(out);
  return out;
}

}  // namespace patchsearch::augment

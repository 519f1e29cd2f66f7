#pragma once

#include "patchsearch/image.hpp"
#include "patchsearch/rng.hpp"

namespace patchsearch::augment {

/// Strong view augmentation in the MoCo-v2 style. Output keeps the input size.
struct AugmentConfig {
  double crop_scale_min = 0.2;
  double crop_scale_max = 1.0;
  double jitter_prob = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double hue = 0.1;
  double grayscale_prob = 0.2;
  double blur_prob = 0.5;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 2.0;
  double flip_prob = 0.5;

  static AugmentConfig moco_v2() { return {}; }
  /// No-op pipeline (deterministic preprocessing).
  static AugmentConfig identity();
};

Image augment(const Image& src, const AugmentConfig& config, Rng& rng);

Rect random_resized_crop_box(int height, int width, double scale_min, double scale_max, Rng& rng);
void adjust_brightness(Image& img, double factor);
void adjust_contrast(Image& img, double factor);
void adjust_saturation(Image& img, double factor);
void adjust_hue(Image& img, double shift);
void to_grayscale(Image& img);
void gaussian_blur(Image& img, double sigma);
void hflip(Image& img);

}  // namespace patchsearch::augment

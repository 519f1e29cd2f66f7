#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "patchsearch/image.hpp"
#include "patchsearch/manifest.hpp"
#include "patchsearch/rng.hpp"

namespace patchsearch::forge {

/// The attacker's square RGB trigger.
class TriggerPatch {
 public:
  TriggerPatch() = default;
  /// Throws ConfigError unless `pixels` is square RGB with values in [0, 1].
  TriggerPatch(Image pixels, std::string trigger_id);

  const Image& pixels() const { return pixels_; }
  int native_size() const { return pixels_.width(); }
  const std::string& id() const { return id_; }

  /// Bilinear resize to size x size.
  Image resized(int size) const;

  static TriggerPatch load_png(const std::filesystem::path& path);

 private:
  Image pixels_;
  std::string id_;
};

/// High-contrast synthetic trigger used when no trigger file is supplied.
TriggerPatch default_trigger(int native_size = 32);

struct AttackConfig {
  int target_category = 0;
  double injection_rate = 0.005;  // fraction of the whole training set
  int trigger_size = 50;          // pasted side length
  double margin_fraction = 0.25;
  int repeat_count = 1;
  std::uint64_t rng_seed = 0;
  std::string resampling = "bilinear";

  void validate(int image_height, int image_width) const;
};

/// floor(rate * n), robust to the rate being a rounded decimal.
std::size_t poison_budget(double injection_rate, std::size_t n);

/// Margin-inset placement range for a size x size box: top-left x in
/// [lo_x, hi_x], y in [lo_y, hi_y].
struct PlacementRange {
  int lo_x, hi_x, lo_y, hi_y;
};
/// Throws ConfigError when the inset region is smaller than the box.
PlacementRange placement_range(int height, int width, int size, double margin_fraction);
Rect random_placement(int height, int width, int size, double margin_fraction, Rng& rng);

struct PasteResult {
  Image image;
  std::vector<Rect> boxes;
};

/// Pastes `repeat_count` independently placed copies of the trigger resized
/// to size x size. Overlapping copies are allowed.
PasteResult paste_trigger(const Image& image, const TriggerPatch& trigger, int size, double margin_fraction,
                          int repeat_count, Rng& rng);

/// Replaces floor(rate * N) uniformly chosen target-category images by
/// pasted versions. Per-sample streams are split from the seed.
Dataset build_poisoned_dataset(const Dataset& clean, const TriggerPatch& trigger, const AttackConfig& config);

/// Pastes one trigger on every validation image; labels are unchanged.
Dataset build_patched_valset(const Dataset& val, const TriggerPatch& trigger, int size, double margin_fraction,
                             std::uint64_t seed);

}  // namespace patchsearch::forge

#include "patchsearch/forge.hpp"

#include <algorithm>
#include <cmath>

#include "patchsearch/errors.hpp"

namespace patchsearch::forge {

TriggerPatch::TriggerPatch(Image pixels, std::string trigger_id)
    : pixels_(std::move(pixels)), id_(std::move(trigger_id)) {
  if (pixels_.empty() || pixels_.width() != pixels_.height())
    throw ConfigError("trigger '" + id_ + "' must be a non-empty square image");
  if (pixels_.channels() != 3) throw ConfigError("trigger '" + id_ + "' must be RGB");
  for (float v : pixels_.data())
    if (!(v >= 0.0f && v <= 1.0f)) throw ConfigError("trigger '" + id_ + "' has values outside [0, 1]");
}

Image TriggerPatch::resized(int size) const { return resize_bilinear(pixels_, size, size); }

TriggerPatch TriggerPatch::load_png(const std::filesystem::path& path) {
  return TriggerPatch(read_png(path), path.stem().string());
}

TriggerPatch default_trigger(int native_size) {
  // 4x4 grid of saturated cells; neighbouring cells always differ.
  static constexpr float palette[6][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}, {1, 0, 1}, {0, 1, 1}};
  static constexpr int layout[4][4] = {{0, 3, 1, 4}, {5, 2, 0, 3}, {1, 4, 5, 2}, {3, 0, 2, 1}};
  Image img(native_size, native_size, 3);
  for (int y = 0; y < native_size; ++y)
    for (int x = 0; x < native_size; ++x) {
      const int cell = layout[y * 4 / native_size][x * 4 / native_size];
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = palette[cell][c];
    }
  return TriggerPatch(std::move(img), "default_grid");
}

void AttackConfig::validate(int image_height, int image_width) const {
  if (!(injection_rate >= 0.0 && injection_rate <= 1.0)) throw ConfigError("injection_rate must be in [0, 1]");
  if (!(margin_fraction >= 0.0 && margin_fraction < 0.5)) throw ConfigError("margin_fraction must be in [0, 0.5)");
  if (repeat_count < 1) throw ConfigError("repeat_count must be >= 1");
  if (trigger_size < 1) throw ConfigError("trigger_size must be >= 1");
  if (resampling != "bilinear") throw ConfigError("only bilinear trigger resampling is supported");
  placement_range(image_height, image_width, trigger_size, margin_fraction);
}

std::size_t poison_budget(double injection_rate, std::size_t n) {
  return static_cast<std::size_t>(std::floor(injection_rate * static_cast<double>(n) + 1e-9));
}

PlacementRange placement_range(int height, int width, int size, double margin_fraction) {
  const int mx = static_cast<int>(std::floor(margin_fraction * width));
  const int my = static_cast<int>(std::floor(margin_fraction * height));
  PlacementRange r{mx, width - mx - size, my, height - my - size};
  if (r.hi_x < r.lo_x || r.hi_y < r.lo_y)
    throw ConfigError("margin-inset region (" + std::to_string(width - 2 * mx) + "x" +
                      std::to_string(height - 2 * my) + ") is smaller than the " + std::to_string(size) +
                      "px trigger");
  return r;
}

Rect random_placement(int height, int width, int size, double margin_fraction, Rng& rng) {
  const auto r = placement_range(height, width, size, margin_fraction);
  const int x = static_cast<int>(rng.uniform_int(r.lo_x, r.hi_x));
  const int y = static_cast<int>(rng.uniform_int(r.lo_y, r.hi_y));
  return Rect{x, y, size, size};
}

PasteResult paste_trigger(const Image& image, const TriggerPatch& trigger, int size, double margin_fraction,
                          int repeat_count, Rng& rng) {
  if (repeat_count < 1) throw ConfigError("repeat_count must be >= 1");
  placement_range(image.height(), image.width(), size, margin_fraction);
  const Image patch = trigger.resized(size);
  PasteResult out{image, {}};
  for (int i = 0; i < repeat_count; ++i) {
    const Rect box = random_placement(image.height(), image.width(), size, margin_fraction, rng);
    paste(out.image, patch, box.x, box.y);
    out.boxes.push_back(box);
  }
  return out;
}

namespace {

constexpr std::uint64_t kSelectStream = 0xC0FFEEULL;

void record_boxes(SampleRecord& rec, const std::vector<Rect>& boxes) {
  rec.bbox = boxes.front();
  rec.extra_boxes.assign(boxes.begin() + 1, boxes.end());
}

}  // namespace

Dataset build_poisoned_dataset(const Dataset& clean, const TriggerPatch& trigger, const AttackConfig& config) {
  const auto n = clean.manifest.size();
  const std::size_t budget = poison_budget(config.injection_rate, n);
  Dataset out = clean;
  if (budget == 0) return out;

  std::vector<std::size_t> targets;
  for (std::size_t i = 0; i < n; ++i)
    if (clean.manifest[i].label == config.target_category) targets.push_back(i);
  if (targets.empty())
    throw ConfigError("target category " + std::to_string(config.target_category) + " has no images");
  if (targets.size() < budget)
    throw ConfigError("need " + std::to_string(budget) + " target-category images but only " +
                      std::to_string(targets.size()) + " exist (short by " +
                      std::to_string(budget - targets.size()) + ")");
  const auto& first = clean.images[targets.front()];
  config.validate(first.height(), first.width());

  const Rng root(config.rng_seed);
  Rng select = root.split(kSelectStream);
  auto chosen = select.sample_without_replacement(targets.size(), budget);
  for (auto c : chosen) {
    const std::size_t i = targets[c];
    Rng sample_rng = root.split(i);
    auto pasted = paste_trigger(clean.images[i], trigger, config.trigger_size, config.margin_fraction,
                                config.repeat_count, sample_rng);
    out.images[i] = std::move(pasted.image);
    auto& rec = out.manifest.records()[i];
    rec.is_poison = true;
    record_boxes(rec, pasted.boxes);
  }
  return out;
}

Dataset build_patched_valset(const Dataset& val, const TriggerPatch& trigger, int size, double margin_fraction,
                             std::uint64_t seed) {
  Dataset out = val;
  const Rng root(seed);
  for (std::size_t i = 0; i < val.size(); ++i) {
    Rng sample_rng = root.split(i);
    auto pasted = paste_trigger(val.images[i], trigger, size, margin_fraction, 1, sample_rng);
    out.images[i] = std::move(pasted.image);
    record_boxes(out.manifest.records()[i], pasted.boxes);
  }
  return out;
}

}  // namespace patchsearch::forge

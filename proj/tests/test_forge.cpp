#include <doctest.h>

#include <boost/math/distributions/chi_squared.hpp>

#include "patchsearch/errors.hpp"
#include "patchsearch/forge.hpp"
#include "support.hpp"

using namespace patchsearch;
using namespace patchsearch::forge;

namespace {

Dataset labelled_set(std::size_t n, int classes, int side, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  std::vector<SampleRecord> recs;
  for (std::size_t i = 0; i < n; ++i) {
    d.images.push_back(testing::random_image(side, side, rng));
    recs.push_back({"img" + std::to_string(i), "", static_cast<int>(i % classes), false, std::nullopt, {}});
  }
  d.manifest = DatasetManifest(std::move(recs));
  return d;
}

}  // namespace

TEST_CASE("trigger patch validation") {
  CHECK_THROWS_AS(TriggerPatch(Image(4, 5, 3), "rect"), ConfigError);
  CHECK_THROWS_AS(TriggerPatch(Image(4, 4, 1), "gray"), ConfigError);
  CHECK_THROWS_AS(TriggerPatch(Image(4, 4, 3, 1.5f), "bright"), ConfigError);
  auto t = default_trigger(32);
  CHECK(t.native_size() == 32);
  CHECK(t.resized(8).width() == 8);
}

TEST_CASE("trigger of side 50 covers about 5% of a 224 image") {
  CHECK(50.0 * 50.0 / (224.0 * 224.0) == doctest::Approx(0.0498).epsilon(0.001));
}

TEST_CASE("margin 0.25 on 224x224 bounds the top-left corner to [56, 118]") {
  auto r = placement_range(224, 224, 50, 0.25);
  CHECK(r.lo_x == 56);
  CHECK(r.hi_x == 168 - 50);
  CHECK(r.lo_y == 56);
  CHECK(r.hi_y == 118);
  Rng rng(0);
  int lo = 1000, hi = -1;
  for (int i = 0; i < 20000; ++i) {
    auto box = random_placement(224, 224, 50, 0.25, rng);
    lo = std::min({lo, box.x, box.y});
    hi = std::max({hi, box.x, box.y});
  }
  CHECK(lo == 56);
  CHECK(hi == 118);
}

TEST_CASE("trigger larger than the inset region is rejected") {
  CHECK_THROWS_AS(placement_range(32, 32, 17, 0.25), ConfigError);
  CHECK_NOTHROW(placement_range(32, 32, 16, 0.25));
  AttackConfig cfg;
  cfg.trigger_size = 20;
  CHECK_THROWS_AS(cfg.validate(32, 32), ConfigError);
}

TEST_CASE("placement is uniform over the inset region") {
  // chi-square goodness of fit on the top-left x coordinate
  Rng rng(11);
  const auto r = placement_range(64, 64, 8, 0.25);
  const int bins = r.hi_x - r.lo_x + 1;
  std::vector<double> counts(bins, 0.0);
  const int n = 50000;
  for (int i = 0; i < n; ++i) counts[random_placement(64, 64, 8, 0.25, rng).x - r.lo_x] += 1;
  const double expected = static_cast<double>(n) / bins;
  double stat = 0;
  for (double c : counts) stat += (c - expected) * (c - expected) / expected;
  boost::math::chi_squared dist(bins - 1);
  CHECK(stat < boost::math::quantile(dist, 0.999));
}

TEST_CASE("paste replaces the box with the resized trigger and nothing else") {
  Rng rng(4);
  auto img = testing::random_image(40, 40, rng);
  auto trig = default_trigger(16);
  Rng prng(9);
  auto out = paste_trigger(img, trig, 10, 0.25, 1, prng);
  REQUIRE(out.boxes.size() == 1);
  const auto box = out.boxes[0];
  const auto patch = trig.resized(10);
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x)
      for (int c = 0; c < 3; ++c) {
        if (box.contains(x, y))
          CHECK(out.image.at(y, x, c) == patch.at(y - box.y, x - box.x, c));
        else
          CHECK(out.image.at(y, x, c) == img.at(y, x, c));
      }
}

TEST_CASE("repeated pastes stay local to their boxes") {
  Rng rng(5);
  auto img = testing::random_image(64, 64, rng);
  Rng prng(1);
  auto out = paste_trigger(img, default_trigger(8), 8, 0.1, 3, prng);
  CHECK(out.boxes.size() == 3);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      bool inside = false;
      for (const auto& b : out.boxes) inside = inside || b.contains(x, y);
      if (!inside)
        for (int c = 0; c < 3; ++c) CHECK(out.image.at(y, x, c) == img.at(y, x, c));
    }
}

TEST_CASE("poison budget is floor(rate * N)") {
  CHECK(poison_budget(0.005, 127000) == 635);
  CHECK(poison_budget(0.005, 50000) == 250);
  CHECK(poison_budget(0.005, 10000) == 50);
  CHECK(poison_budget(0.0, 10000) == 0);
  CHECK(poison_budget(0.005, 199) == 0);
}

TEST_CASE("poisoned dataset: count, target, boxes and locality") {
  auto clean = labelled_set(2000, 10, 16, 1);
  AttackConfig cfg;
  cfg.injection_rate = 0.05;
  cfg.target_category = 3;
  cfg.trigger_size = 4;
  cfg.rng_seed = 8;
  auto poisoned = build_poisoned_dataset(clean, default_trigger(8), cfg);
  CHECK_NOTHROW(poisoned.manifest.validate());
  CHECK(poisoned.manifest.poison_count() == 100);
  for (std::size_t i = 0; i < poisoned.size(); ++i) {
    const auto& rec = poisoned.manifest[i];
    if (!rec.is_poison) {
      CHECK(poisoned.images[i] == clean.images[i]);
      continue;
    }
    CHECK(rec.label == 3);
    REQUIRE(rec.bbox.has_value());
    CHECK(rec.bbox->w == 4);
    CHECK(rec.bbox->inside(16, 16));
  }
  auto again = build_poisoned_dataset(clean, default_trigger(8), cfg);
  CHECK(again.manifest == poisoned.manifest);
  CHECK((again.images == poisoned.images));
}

TEST_CASE("CIFAR-shaped attack: 250 poisons with 8x8 boxes") {
  auto clean = labelled_set(50000, 10, 32, 2);
  AttackConfig cfg;
  cfg.trigger_size = 8;
  auto poisoned = build_poisoned_dataset(clean, default_trigger(), cfg);
  CHECK(poisoned.manifest.poison_count() == 250);
  for (const auto& r : poisoned.manifest.records())
    if (r.is_poison) CHECK(r.bbox->w == 8);
}

TEST_CASE("rate 0 leaves the dataset untouched") {
  auto clean = labelled_set(300, 3, 16, 3);
  AttackConfig cfg;
  cfg.injection_rate = 0.0;
  cfg.trigger_size = 4;
  auto out = build_poisoned_dataset(clean, default_trigger(8), cfg);
  CHECK(out.manifest == clean.manifest);
  CHECK((out.images == clean.images));
}

TEST_CASE("too few target-category images names the shortfall") {
  auto clean = labelled_set(100, 10, 16, 4);
  AttackConfig cfg;
  cfg.injection_rate = 0.2;
  cfg.trigger_size = 4;
  try {
    build_poisoned_dataset(clean, default_trigger(8), cfg);
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("short by 10") != std::string::npos);
  }
}

TEST_CASE("patched valset: one box per image, deterministic") {
  auto val = labelled_set(5000, 10, 16, 6);
  auto a = build_patched_valset(val, default_trigger(8), 4, 0.25, 3);
  CHECK(a.size() == 5000);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.manifest[i].bbox.has_value());
    CHECK(a.manifest[i].extra_boxes.empty());
    CHECK(a.manifest[i].label == val.manifest[i].label);
  }
  auto b = build_patched_valset(val, default_trigger(8), 4, 0.25, 3);
  CHECK(a.manifest == b.manifest);
  CHECK((a.images == b.images));
}

#include <doctest.h>

#include <map>

#include "patchsearch/cluster.hpp"
#include "patchsearch/errors.hpp"
#include "patchsearch/forge.hpp"
#include "patchsearch/oracle.hpp"
#include "patchsearch/trigger_scope.hpp"
#include "support.hpp"

using namespace patchsearch;
using namespace patchsearch::oracle;

namespace {

OracleSpec small_spec() {
  OracleSpec s;
  s.num_samples = 2000;
  return s;
}

double cosine(const Eigen::VectorXf& a, int dim) { return a[dim] / a.norm(); }

}  // namespace

TEST_CASE("spec validation and persistence") {
  OracleSpec s;
  CHECK_NOTHROW(s.validate());
  CHECK(s.embedding_dim() == 27);
  testing::TempDir dir("spec");
  s.heatmap_miss_rate = 0.2;
  s.seed = 99;
  save_spec(s, dir / "spec.json");
  auto back = load_spec(dir / "spec.json");
  CHECK(back.heatmap_miss_rate == 0.2);
  CHECK(back.seed == 99);
  CHECK(back.embedding_dim() == s.embedding_dim());
  OracleSpec bad;
  bad.motif_side = 40;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("motif is binary and class colours are distinct") {
  OracleSpec s;
  auto m = motif(s).pixels();
  CHECK(m.width() == s.motif_side);
  for (float v : m.data()) CHECK((v == 0.0f || v == 1.0f));
  for (int a = 0; a < s.num_latent_classes; ++a)
    for (int b = a + 1; b < s.num_latent_classes; ++b) CHECK(class_color(s, a) != class_color(s, b));
}

TEST_CASE("rate 0.005 on 10,000 samples plants 50 poisons; rate 0 plants none") {
  OracleSpec s;
  auto w = generate_oracle_dataset(s, 0.005, 0);
  CHECK(w.train.size() == 10000);
  CHECK(w.train.manifest.poison_count() == 50);
  CHECK(w.val.size() == static_cast<std::size_t>(s.val_per_class * s.num_latent_classes));
  auto clean = generate_oracle_dataset(small_spec(), 0.0, 0);
  CHECK(clean.train.manifest.poison_count() == 0);
  OracleEncoder enc(small_spec());
  auto emb = enc.embed(clean.train.images);
  for (std::size_t i = 0; i < clean.train.size(); ++i) {
    const Eigen::VectorXf e = emb.row(static_cast<Eigen::Index>(i)).transpose();
    CHECK(cosine(e, clean.train.manifest[i].label) >= enc.class_cosine_bound() - 1e-6);
    CHECK(e[enc.trigger_dim()] == 0.0f);
  }
}

TEST_CASE("embedding is deterministic and the trigger direction is orthogonal to every class") {
  auto spec = small_spec();
  auto world = generate_oracle_dataset(spec, 0.05, 3);
  OracleEncoder enc(spec);
  auto a = enc.embed(world.train.images);
  auto b = enc.embed(world.train.images);
  CHECK(a == b);
  for (std::size_t i = 0; i < world.train.size(); ++i) {
    const auto& rec = world.train.manifest[i];
    const Eigen::VectorXf e = a.row(static_cast<Eigen::Index>(i)).transpose();
    if (rec.is_poison) {
      CHECK(cosine(e, enc.trigger_dim()) >= 0.99);
      for (int c = 0; c < spec.num_latent_classes; ++c) CHECK(e[c] == 0.0f);
    } else {
      CHECK(e[enc.trigger_dim()] == 0.0f);
      CHECK(enc.detect_class(world.train.images[i]) == rec.label);
    }
  }
}

TEST_CASE("motif pasted anywhere in the margin-inset region fires the trigger") {
  auto spec = small_spec();
  OracleEncoder enc(spec);
  Rng rng(4);
  const auto trigger = motif(spec);
  for (int t = 0; t < 200; ++t) {
    const int c = static_cast<int>(rng.uniform_int(0, spec.num_latent_classes - 1));
    auto img = render_clean_image(spec, c, rng);
    CHECK(cosine(enc.embed_one(img), c) >= enc.class_cosine_bound() - 1e-6);
    auto pasted = forge::paste_trigger(img, trigger, spec.motif_side, 0.25, 1, rng);
    CHECK(cosine(enc.embed_one(pasted.image), enc.trigger_dim()) >= 0.99);
  }
}

TEST_CASE("clusters with l = C + 1 isolate the poisons in one pure cluster") {
  auto spec = small_spec();
  auto world = generate_oracle_dataset(spec, 0.025, 0);
  OracleEncoder enc(spec);
  auto emb = cluster::extract_embeddings(enc, world.train);
  auto model = cluster::fit_kmeans(emb, {spec.num_latent_classes + 1, 0, 100, 1e-6});
  // every poison in one cluster, and that cluster almost only poisons
  std::map<int, int> poison_in, size_of;
  for (std::size_t i = 0; i < world.train.size(); ++i) {
    ++size_of[model.assignments[i]];
    if (world.train.manifest[i].is_poison) ++poison_in[model.assignments[i]];
  }
  REQUIRE(poison_in.size() == 1);
  const auto [poison_cluster, poisons] = *poison_in.begin();
  CHECK(poisons == 50);
  CHECK(static_cast<double>(poisons) / size_of[poison_cluster] >= 0.99);

  SUBCASE("benign random patches leave at least 95% of assignments unchanged") {
    Rng rng(8);
    int unchanged = 0;
    for (int t = 0; t < 1000; ++t) {
      const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(world.train.size()) - 1));
      if (world.train.manifest[i].is_poison) {
        ++unchanged;
        continue;
      }
      Image img = world.train.images[i];
      Image patch = testing::random_image(spec.motif_side, spec.motif_side, rng);
      const int x = static_cast<int>(rng.uniform_int(8, 16)), y = static_cast<int>(rng.uniform_int(8, 16));
      paste(img, patch, x, y);
      Eigen::RowVectorXf e = enc.embed_one(img).transpose();
      e.normalize();
      unchanged += model.assign(e) == model.assignments[i];
    }
    CHECK(unchanged >= 950);
  }
}

TEST_CASE("analytic heatmap: zero without the motif, peaked on it, window matches the box") {
  auto spec = small_spec();
  Rng rng(2);
  const auto trigger = motif(spec);
  for (int t = 0; t < 100; ++t) {
    auto img = render_clean_image(spec, t % spec.num_latent_classes, rng);
    auto zero = oracle_heatmap(spec, img);
    CHECK(std::all_of(zero.values.begin(), zero.values.end(), [](float v) { return v == 0.0f; }));
    auto pasted = forge::paste_trigger(img, trigger, spec.motif_side, 0.25, 1, rng);
    const Rect box = pasted.boxes[0];
    auto hm = oracle_heatmap(spec, pasted.image);
    int py = 0, px = 0;
    float peak = -1;
    for (int y = 0; y < hm.height; ++y)
      for (int x = 0; x < hm.width; ++x)
        if (hm.at(y, x) > peak) {
          peak = hm.at(y, x);
          py = y;
          px = x;
        }
    CHECK(box.contains(px, py));
    CHECK(scope::max_window(hm, spec.motif_side).iou(box) >= 0.8);
  }
}

TEST_CASE("heatmap miss rate moves the heat away from the motif") {
  auto spec = small_spec();
  spec.heatmap_miss_rate = 1.0;
  Rng rng(3);
  auto img = render_clean_image(spec, 1, rng);
  auto pasted = forge::paste_trigger(img, motif(spec), spec.motif_side, 0.25, 1, rng);
  auto hm = oracle_heatmap(spec, pasted.image);
  CHECK_FALSE(hm.degenerate);
  CHECK(scope::max_window(hm, spec.motif_side).iou(pasted.boxes[0]) == 0.0);
  spec.heatmap_miss_rate = 0.0;
  CHECK(scope::max_window(oracle_heatmap(spec, pasted.image), spec.motif_side) == pasted.boxes[0]);
}

TEST_CASE("poison isolation holds across k-means seeds") {
  auto spec = small_spec();
  auto world = generate_oracle_dataset(spec, 0.025, 0);
  OracleEncoder enc(spec);
  auto emb = cluster::extract_embeddings(enc, world.train);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto model = cluster::fit_kmeans(emb, {spec.num_latent_classes + 1, seed, 100, 1e-6});
    std::map<int, int> poison_in, size_of;
    for (std::size_t i = 0; i < world.train.size(); ++i) {
      ++size_of[model.assignments[i]];
      if (world.train.manifest[i].is_poison) ++poison_in[model.assignments[i]];
    }
    REQUIRE(poison_in.size() == 1);
    CHECK(static_cast<double>(poison_in.begin()->second) / size_of[poison_in.begin()->first] >= 0.99);
  }
}

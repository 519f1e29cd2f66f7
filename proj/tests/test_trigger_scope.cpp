#include <doctest.h>

#include <torch/torch.h>

#include <algorithm>
#include <fstream>
#include <numeric>

#include "patchsearch/cluster.hpp"
#include "patchsearch/errors.hpp"
#include "patchsearch/forge.hpp"
#include "patchsearch/nets.hpp"
#include "patchsearch/oracle.hpp"
#include "patchsearch/ssl.hpp"
#include "patchsearch/trigger_scope.hpp"
#include "support.hpp"

using namespace patchsearch;
using namespace patchsearch::scope;

namespace {

HeatMap random_heatmap(int h, int w, Rng& rng) {
  HeatMap m;
  m.height = h;
  m.width = w;
  m.values.resize(static_cast<std::size_t>(h * w));
  for (auto& v : m.values) v = static_cast<float>(rng.uniform());
  return m;
}

/// Exhaustive O(H W w^2) maximizer with the scan-order tie break.
Rect brute_force_window(const HeatMap& m, int w) {
  double best = -1.0;
  Rect out{0, 0, w, w};
  for (int y = 0; y + w <= m.height; ++y)
    for (int x = 0; x + w <= m.width; ++x) {
      double sum = 0.0;
      for (int dy = 0; dy < w; ++dy)
        for (int dx = 0; dx < w; ++dx) sum += m.at(y + dy, x + dx);
      if (sum > best + 1e-9) {
        best = sum;
        out.x = x;
        out.y = y;
      }
    }
  return out;
}

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = (static_cast<double>(i + j) / 2.0) + 1.0;
    i = j + 1;
  }
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n, mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  return da > 0 && db > 0 ? num / std::sqrt(da * db) : 0.0;
}

struct OracleFixture {
  oracle::OracleSpec spec;
  oracle::OracleWorld world;
  cluster::EmbeddingMatrix emb;
  cluster::ClusterModel model;
  int poison_cluster = -1;

  OracleFixture() {
    spec.num_samples = 2000;
    world = oracle::generate_oracle_dataset(spec, 0.025, 0);
    oracle::OracleEncoder enc(spec);
    emb = cluster::extract_embeddings(enc, world.train);
    model = cluster::fit_kmeans(emb, {spec.num_latent_classes + 1, 0, 100, 1e-6});
    for (std::size_t i = 0; i < world.train.size(); ++i)
      if (world.train.manifest[i].is_poison) poison_cluster = model.assignments[i];
  }
};

}  // namespace

TEST_CASE("max window agrees with brute force on 200 random heatmaps") {
  Rng rng(17);
  for (int w : {3, 9, 16})
    for (int t = 0; t < 200; ++t) {
      const int h = static_cast<int>(rng.uniform_int(16, 40)), wd = static_cast<int>(rng.uniform_int(16, 40));
      auto m = random_heatmap(h, wd, rng);
      CHECK(max_window(m, w) == brute_force_window(m, w));
    }
  auto m64 = random_heatmap(64, 64, rng);
  CHECK(max_window(m64, 9) == brute_force_window(m64, 9));
}

TEST_CASE("single hot pixel lies inside the chosen window, clipped to bounds") {
  for (auto [py, px] : std::vector<std::pair<int, int>>{{0, 0}, {10, 10}, {19, 19}, {0, 19}, {5, 17}}) {
    HeatMap m;
    m.height = m.width = 20;
    m.values.assign(400, 0.0f);
    m.at(py, px) = 1.0f;
    const Rect r = max_window(m, 6);
    CHECK(r.contains(px, py));
    CHECK(r.inside(20, 20));
  }
}

TEST_CASE("uniform heatmap ties break to (0, 0)") {
  HeatMap m;
  m.height = 12;
  m.width = 15;
  m.values.assign(180, 0.5f);
  CHECK(max_window(m, 4) == Rect{0, 0, 4, 4});
}

TEST_CASE("window larger than the heatmap is rejected") {
  HeatMap m;
  m.height = m.width = 8;
  m.values.assign(64, 1.0f);
  CHECK_THROWS_AS(max_window(m, 9), ConfigError);
  CHECK_THROWS_AS(max_window(m, 0), ConfigError);
}

TEST_CASE("all-zero heatmap is flagged and falls back to the centre window") {
  Rng rng(1);
  auto img = testing::random_image(20, 20, rng);
  HeatMap m;
  m.height = m.width = 20;
  m.values.assign(400, 0.0f);
  auto c = extract_candidate(img, m, 6);
  CHECK(c.heatmap_degenerate);
  CHECK(c.bbox == Rect{7, 7, 6, 6});
  CHECK(c.patch == crop(img, c.bbox));
}

TEST_CASE("scoring placement stays inside the image, shrinking the margin when needed") {
  Rng rng(2);
  for (int t = 0; t < 2000; ++t) {
    const int size = static_cast<int>(rng.uniform_int(1, 32));
    const Rect r = scoring_placement(32, 32, size, 0.25, rng);
    CHECK(r.inside(32, 32));
    if (size <= 16) CHECK((r.x >= 8 && r.y >= 8 && r.x + size <= 24 && r.y + size <= 24));
  }
  CHECK_THROWS_AS(scoring_placement(32, 32, 33, 0.25, rng), ConfigError);
}

TEST_CASE("oracle world: trigger patch flips every off-cluster point, benign patch almost none") {
  OracleFixture fx;
  REQUIRE(fx.poison_cluster >= 0);
  oracle::OracleEncoder enc(fx.spec);
  cluster::FlipTestSet flip;
  std::vector<Image> images;
  for (std::size_t i = 0; i < fx.world.train.size() && flip.size() < 100; ++i)
    if (fx.model.assignments[i] != fx.poison_cluster) {
      flip.members.push_back(i);
      flip.member_ids.push_back(fx.world.train.manifest[i].id);
      flip.original_assignments.push_back(fx.model.assignments[i]);
      images.push_back(fx.world.train.images[i]);
    }
  FlipScorer scorer(enc, fx.model, flip, images, {0.25, FlipRule::flipped_into, 3, 64});
  const Image trigger = oracle::motif(fx.spec).pixels();
  CHECK(scorer.score(trigger, fx.poison_cluster, 1) == 100);

  std::size_t clean_index = 0;
  while (fx.world.train.manifest[clean_index].is_poison) ++clean_index;
  const int benign_cluster = fx.model.assignments[clean_index];
  const Image& src = fx.world.train.images[clean_index];
  for (int t = 0; t < 5; ++t) {
    const Image benign = crop(src, Rect{3 * t, 2 * t, fx.spec.motif_side, fx.spec.motif_side});
    CHECK(scorer.score(benign, benign_cluster, 10 + t) <= 5);
  }

  SUBCASE("empty flip set scores 0") {
    FlipScorer empty(enc, fx.model, {}, {}, {});
    CHECK(empty.score(trigger, fx.poison_cluster, 0) == 0);
  }
  SUBCASE("batching does not change the flips") {
    FlipScorer serial(enc, fx.model, flip, images, {0.25, FlipRule::flipped_into, 3, 1});
    CHECK(serial.flips(trigger, fx.poison_cluster, 4) == scorer.flips(trigger, fx.poison_cluster, 4));
    const Image noisy = crop(fx.world.train.images[5], Rect{0, 0, 8, 8});
    CHECK(serial.flips(noisy, 2, 9) == scorer.flips(noisy, 2, 9));
  }
  SUBCASE("scores are deterministic and monotone under flip-set restriction") {
    CHECK(scorer.score(trigger, fx.poison_cluster, 7) == scorer.score(trigger, fx.poison_cluster, 7));
    const auto full = scorer.flips(trigger, fx.poison_cluster, 7);
    cluster::FlipTestSet sub;
    std::vector<Image> sub_images;
    std::vector<bool> expected;
    for (std::size_t j = 0; j < flip.size(); j += 3) {
      sub.members.push_back(flip.members[j]);
      sub.member_ids.push_back(flip.member_ids[j]);
      sub.original_assignments.push_back(flip.original_assignments[j]);
      sub_images.push_back(images[j]);
      expected.push_back(full[j]);
    }
    FlipScorer restricted(enc, fx.model, sub, sub_images, scorer.options());
    CHECK(restricted.flips(trigger, fx.poison_cluster, 7) == expected);
    CHECK(restricted.score(trigger, fx.poison_cluster, 7) <= scorer.score(trigger, fx.poison_cluster, 7));
  }
}

TEST_CASE("patch scorer bounds: score within flip set size, bbox in bounds") {
  OracleFixture fx;
  oracle::OracleEncoder enc(fx.spec);
  auto flip = cluster::build_flip_set(fx.model, fx.emb, 200);
  std::vector<Image> images;
  for (auto m : flip.members) images.push_back(fx.world.train.images[m]);
  FlipScorer flips(enc, fx.model, flip, images, {});
  PatchScorer scorer(enc, fx.world.train, fx.model, flips, fx.spec.motif_side);
  for (std::size_t i = 0; i < fx.world.train.size(); i += 97) {
    auto c = scorer.score(i);
    CHECK(c.poison_score >= 0);
    CHECK(c.poison_score <= c.flip_set_size);
    CHECK(c.bbox.inside(fx.spec.image_side, fx.spec.image_side));
    CHECK(c.source_index == i);
    if (fx.world.train.manifest[i].is_poison) CHECK(c.poison_score > 100);
  }
}

TEST_CASE("candidate CSV and patch PNGs") {
  testing::TempDir dir("cands");
  Rng rng(3);
  ScoredCandidate c;
  c.patch = testing::random_image(4, 4, rng);
  c.bbox = {1, 2, 4, 4};
  c.source_sample_id = "abc";
  c.source_cluster = 3;
  c.poison_score = 12;
  save_candidates({c}, dir / "c.csv", dir / "patches");
  CHECK(std::filesystem::exists(dir / "patches" / "abc.png"));
  std::ifstream in(dir / "c.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "sample_id,cluster,score,bbox_x,bbox_y,w");
  CHECK(row == "abc,3,12,1,2,4");
}

namespace {

struct ToyDetector {
  nets::ResNet backbone{nullptr};
  torch::nn::Linear head{nullptr};
};

Image planted(const Image& base, const Image& patch, Rng& rng, Rect* where) {
  Image img = base;
  const int x = static_cast<int>(rng.uniform_int(0, img.width() - patch.width()));
  const int y = static_cast<int>(rng.uniform_int(0, img.height() - patch.height()));
  paste(img, patch, x, y);
  if (where) *where = Rect{x, y, patch.width(), patch.height()};
  return img;
}

}  // namespace

TEST_CASE("Grad-CAM heatmap: non-negative, input-shaped, scale invariant, agrees with occlusion") {
  torch::manual_seed(0);
  Rng rng(21);
  const int side = 32;
  const Image trigger = forge::default_trigger(8).pixels();
  auto backbone = nets::ResNet(nets::parse_backbone_id("resnet10-w8"));
  auto head = torch::nn::Linear(backbone->feature_dim(), 1);
  std::vector<torch::Tensor> params = backbone->parameters();
  for (auto& p : head->parameters()) params.push_back(p);
  torch::optim::SGD opt(params, torch::optim::SGDOptions(0.05).momentum(0.9));
  backbone->train();
  for (int it = 0; it < 150; ++it) {
    std::vector<Image> batch;
    std::vector<float> labels;
    for (int b = 0; b < 32; ++b) {
      Image base = testing::random_image(side, side, rng);
      if (b % 2) {
        batch.push_back(planted(base, trigger, rng, nullptr));
        labels.push_back(1.0f);
      } else {
        batch.push_back(base);
        labels.push_back(0.0f);
      }
    }
    auto x = nets::normalize_input(nets::to_tensor(batch));
    auto logits = head->forward(backbone->forward(x)).squeeze(1);
    auto loss = torch::binary_cross_entropy_with_logits(logits, torch::tensor(labels));
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  Eigen::VectorXf center(backbone->feature_dim());
  {
    auto w = head->weight.detach().contiguous();
    for (int j = 0; j < center.size(); ++j) center[j] = w[0][j].item<float>();
    center.normalize();
  }
  ssl::EncoderCheckpoint ckpt;
  ckpt.backbone_id = "resnet10-w8";
  ckpt.embedding_dim = backbone->feature_dim();
  ckpt.config_hash = "toy";
  ckpt.backbone = backbone;
  ssl::TorchEncoder enc(ckpt);

  auto cos_to_center = [&](const Image& img) {
    Eigen::RowVectorXf e = enc.embed(std::span<const Image>(&img, 1)).row(0);
    return static_cast<double>(e.dot(center.transpose()) / e.norm());
  };

  double rho_sum = 0;
  int argmax_hits = 0;
  const int trials = 8;
  for (int t = 0; t < trials; ++t) {
    Rect where;
    const Image img = planted(testing::random_image(side, side, rng), trigger, rng, &where);
    const HeatMap hm = enc.heatmap(img, center);
    CHECK(hm.height == side);
    CHECK(hm.width == side);
    CHECK(*std::min_element(hm.values.begin(), hm.values.end()) >= 0.0f);

    const Eigen::VectorXf scaled = 3.7f * center;
    const HeatMap hs = enc.heatmap(img, scaled);
    if (!hm.degenerate) CHECK(max_window(hs, 8) == max_window(hm, 8));

    // occlusion sensitivity on a stride-4 grid of 8x8 grey squares
    const double base = cos_to_center(img);
    std::vector<double> drop, heat;
    for (int y = 0; y + 8 <= side; y += 4)
      for (int x = 0; x + 8 <= side; x += 4) {
        Image occluded = img;
        paste(occluded, Image(8, 8, 3, 0.5f), x, y);
        drop.push_back(base - cos_to_center(occluded));
        double h = 0;
        for (int dy = 0; dy < 8; ++dy)
          for (int dx = 0; dx < 8; ++dx) h += hm.at(y + dy, x + dx);
        heat.push_back(h);
      }
    rho_sum += spearman(heat, drop);
    argmax_hits += max_window(hm, 8).iou(where) > 0.0;
  }
  MESSAGE("mean spearman ", rho_sum / trials, ", windows touching the trigger ", argmax_hits, "/", trials);
  CHECK(rho_sum / trials > 0.3);
}

#include "patchsearch/trigger_scope.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "patchsearch/errors.hpp"
#include "patchsearch/forge.hpp"

namespace patchsearch::scope {

Rect max_window(const HeatMap& heatmap, int w) {
  const int h = heatmap.height;
  const int wd = heatmap.width;
  if (w < 1 || w > std::min(h, wd)) throw ConfigError("window size must be in [1, min(H, W)]");
  // integral image with a zero border
  std::vector<double> sat(static_cast<std::size_t>(h + 1) * (wd + 1), 0.0);
  auto s = [&](int y, int x) -> double& { return sat[static_cast<std::size_t>(y) * (wd + 1) + x]; };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < wd; ++x) s(y + 1, x + 1) = heatmap.at(y, x) + s(y, x + 1) + s(y + 1, x) - s(y, x);
  double best = -std::numeric_limits<double>::infinity();
  Rect out{0, 0, w, w};
  for (int y = 0; y + w <= h; ++y)
    for (int x = 0; x + w <= wd; ++x) {
      const double sum = s(y + w, x + w) - s(y, x + w) - s(y + w, x) + s(y, x);
      if (sum > best) {
        best = sum;
        out.x = x;
        out.y = y;
      }
    }
  return out;
}

ScoredCandidate extract_candidate(const Image& image, const HeatMap& heatmap, int w) {
  if (heatmap.height != image.height() || heatmap.width != image.width())
    throw ConfigError("heatmap and image shapes differ");
  ScoredCandidate c;
  c.source_sample_id = heatmap.source_sample_id;
  c.source_cluster = heatmap.source_cluster;
  const bool all_zero = std::all_of(heatmap.values.begin(), heatmap.values.end(), [](float v) { return v <= 0.0f; });
  c.heatmap_degenerate = heatmap.degenerate || all_zero;
  if (c.heatmap_degenerate) {
    if (w < 1 || w > std::min(image.height(), image.width())) throw ConfigError("window size must be in [1, min(H, W)]");
    c.bbox = Rect{(image.width() - w) / 2, (image.height() - w) / 2, w, w};
  } else {
    c.bbox = max_window(heatmap, w);
  }
  c.patch = crop(image, c.bbox);
  return c;
}

Rect scoring_placement(int height, int width, int size, double margin_fraction, Rng& rng) {
  if (size > std::min(height, width)) throw ConfigError("patch larger than flip image");
  const int mx = std::min(static_cast<int>(std::floor(margin_fraction * width)), (width - size) / 2);
  const int my = std::min(static_cast<int>(std::floor(margin_fraction * height)), (height - size) / 2);
  const int x = static_cast<int>(rng.uniform_int(mx, width - mx - size));
  const int y = static_cast<int>(rng.uniform_int(my, height - my - size));
  return Rect{x, y, size, size};
}

FlipScorer::FlipScorer(Encoder& encoder, const cluster::ClusterModel& model, const cluster::FlipTestSet& flip_set,
                       std::vector<Image> flip_images, ScoringOptions options)
    : encoder_(encoder), model_(model), flip_set_(flip_set), flip_images_(std::move(flip_images)),
      options_(options) {
  if (flip_images_.size() != flip_set_.size()) throw ConfigError("flip images and flip set differ in size");
  if (options_.batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

std::vector<bool> FlipScorer::flips(const Image& patch, int source_cluster, std::uint64_t stream) const {
  const std::size_t n = flip_set_.size();
  std::vector<bool> out(n, false);
  if (n == 0) return out;
  const Rng stream_rng = Rng(options_.seed).split(stream);
  std::vector<Image> batch;
  batch.reserve(static_cast<std::size_t>(options_.batch_size));
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(options_.batch_size)) {
    const std::size_t count = std::min<std::size_t>(options_.batch_size, n - start);
    batch.clear();
    for (std::size_t j = start; j < start + count; ++j) {
      Image img = flip_images_[j];
      Rng rng = stream_rng.split(flip_set_.members[j]);
      const Rect at = scoring_placement(img.height(), img.width(), patch.width(), options_.margin_fraction, rng);
      paste(img, patch, at.x, at.y);
      batch.push_back(std::move(img));
    }
    RowMatrix emb = encoder_.embed(batch);
    cluster::normalize_rows(emb);
    const auto assigned = model_.assign_all(emb);
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t j = start + k;
      const bool lands = assigned[k] == source_cluster;
      out[j] = options_.rule == FlipRule::lands_in ? lands
                                                   : lands && flip_set_.original_assignments[j] != source_cluster;
    }
  }
  return out;
}

int FlipScorer::score(const Image& patch, int source_cluster, std::uint64_t stream) const {
  const auto f = flips(patch, source_cluster, stream);
  return static_cast<int>(std::count(f.begin(), f.end(), true));
}

PatchScorer::PatchScorer(Encoder& encoder, const Dataset& data, const cluster::ClusterModel& model,
                         const FlipScorer& flips, int w)
    : encoder_(encoder), data_(data), model_(model), flips_(flips), w_(w) {}

ScoredCandidate PatchScorer::score(std::size_t sample_index) {
  const int cluster = model_.assignments.at(sample_index);
  const Eigen::VectorXf center = model_.centers.row(cluster).transpose();
  const Image& image = data_.images.at(sample_index);
  HeatMap hm = encoder_.heatmap(image, center);
  hm.source_sample_id = data_.manifest[sample_index].id;
  hm.source_cluster = cluster;
  ScoredCandidate c = extract_candidate(image, hm, w_);
  c.source_index = sample_index;
  c.source_sample_id = hm.source_sample_id;
  c.source_cluster = cluster;
  c.flip_set_size = static_cast<int>(flips_.flip_set_size());
  c.poison_score = flips_.score(c.patch, cluster, sample_index);
  return c;
}

void save_candidates(const std::vector<ScoredCandidate>& candidates, const std::filesystem::path& csv_path,
                     const std::filesystem::path& patch_dir) {
  if (csv_path.has_parent_path()) std::filesystem::create_directories(csv_path.parent_path());
  std::ofstream out(csv_path);
  if (!out) throw DataError("cannot write '" + csv_path.string() + "'");
  out << "sample_id,cluster,score,bbox_x,bbox_y,w\n";
  for (const auto& c : candidates) {
    out << c.source_sample_id << ',' << c.source_cluster << ',' << c.poison_score << ',' << c.bbox.x << ','
        << c.bbox.y << ',' << c.bbox.w << '\n';
    if (!patch_dir.empty()) write_png(c.patch, patch_dir / (c.source_sample_id + ".png"));
  }
}

}  // namespace patchsearch::scope

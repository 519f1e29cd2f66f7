#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "patchsearch/cluster.hpp"
#include "patchsearch/encoder.hpp"
#include "patchsearch/image.hpp"
#include "patchsearch/manifest.hpp"
#include "patchsearch/rng.hpp"

namespace patchsearch::scope {

/// A w x w candidate trigger cut from one training image, with its score.
struct ScoredCandidate {
  Image patch;
  Rect bbox;
  std::size_t source_index = 0;
  std::string source_sample_id;
  int source_cluster = -1;
  int poison_score = 0;
  int flip_set_size = 0;
  bool heatmap_degenerate = false;
};

/// Top-left of the w x w window with the largest heatmap sum (2-D prefix
/// sums). Ties go to the smallest (row, col) in scan order.
Rect max_window(const HeatMap& heatmap, int w);

/// Crops the max-sum window; an all-zero heatmap falls back to the centre window.
ScoredCandidate extract_candidate(const Image& image, const HeatMap& heatmap, int w);

/// Placement used when pasting a candidate onto a flip image: uniform over
/// the margin-inset region, shrinking the margin when the patch is too large
/// for it.
Rect scoring_placement(int height, int width, int size, double margin_fraction, Rng& rng);

enum class FlipRule {
  flipped_into,  // new == candidate cluster and original != candidate cluster
  lands_in,      // new == candidate cluster
};

struct ScoringOptions {
  double margin_fraction = 0.25;
  FlipRule rule = FlipRule::flipped_into;
  std::uint64_t seed = 0;
  int batch_size = 256;
};

/// Counts flip-set images whose cluster assignment moves to the candidate's
/// cluster once the candidate is pasted on them. The paste location of each
/// flip image depends only on (seed, stream, member), so scoring a subset
/// reproduces the corresponding part of a full run.
class FlipScorer {
 public:
  FlipScorer(Encoder& encoder, const cluster::ClusterModel& model, const cluster::FlipTestSet& flip_set,
             std::vector<Image> flip_images, ScoringOptions options);

  int score(const Image& patch, int source_cluster, std::uint64_t stream) const;
  /// Per-member flip indicator for the same computation.
  std::vector<bool> flips(const Image& patch, int source_cluster, std::uint64_t stream) const;
  std::size_t flip_set_size() const { return flip_set_.size(); }
  const ScoringOptions& options() const { return options_; }

 private:
  Encoder& encoder_;
  const cluster::ClusterModel& model_;
  cluster::FlipTestSet flip_set_;
  std::vector<Image> flip_images_;
  ScoringOptions options_;
};

/// Scores one training sample; the iterative search is written against this.
class SampleScorer {
 public:
  virtual ~SampleScorer() = default;
  virtual ScoredCandidate score(std::size_t sample_index) = 0;
};

/// Full per-image pipeline: cluster-centre Grad-CAM, window extraction,
/// flip-count score.
class PatchScorer : public SampleScorer {
 public:
  PatchScorer(Encoder& encoder, const Dataset& data, const cluster::ClusterModel& model, const FlipScorer& flips,
              int w);

  ScoredCandidate score(std::size_t sample_index) override;
  int window() const { return w_; }

 private:
  Encoder& encoder_;
  const Dataset& data_;
  const cluster::ClusterModel& model_;
  const FlipScorer& flips_;
  int w_;
};

/// CSV (sample_id, cluster, score, bbox_x, bbox_y, w) plus one PNG per patch
/// under `patch_dir`.
void save_candidates(const std::vector<ScoredCandidate>& candidates, const std::filesystem::path& csv_path,
                     const std::filesystem::path& patch_dir);

}  // namespace patchsearch::scope

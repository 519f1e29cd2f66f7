#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "patchsearch/image.hpp"

namespace patchsearch {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Non-negative localization map aligned with the input pixels.
struct HeatMap {
  int height = 0;
  int width = 0;
  std::vector<float> values;  // row-major
  bool degenerate = false;    // all-zero map (e.g. vanishing gradients)
  std::string source_sample_id;
  int source_cluster = -1;

  float at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  float& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
};

/// What the defense needs from a model: embeddings, and a heatmap for the
/// logit "cosine similarity to a given cluster centre". The trained network
/// and the analytic oracle both implement this.
class Encoder {
 public:
  virtual ~Encoder() = default;

  virtual int embedding_dim() const = 0;
  /// One raw (not yet normalized) embedding row per image, no augmentation.
  virtual RowMatrix embed(std::span<const Image> images) = 0;
  /// `center` is a unit vector of length embedding_dim().
  virtual HeatMap heatmap(const Image& image, const Eigen::VectorXf& center) = 0;
  virtual std::string id() const = 0;
};

}  // namespace patchsearch

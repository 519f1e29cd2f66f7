#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "patchsearch/encoder.hpp"
#include "patchsearch/manifest.hpp"

namespace patchsearch::cluster {

struct EmbeddingMatrix {
  RowMatrix rows;  // N x d
  std::vector<std::string> sample_ids;
  bool normalized = false;

  std::size_t size() const { return static_cast<std::size_t>(rows.rows()); }
  int dim() const { return static_cast<int>(rows.cols()); }
  std::string ids_hash() const;
};

/// Rescales every row to unit l2 norm in place; zero rows are rejected.
void normalize_rows(RowMatrix& m);

EmbeddingMatrix extract_embeddings(Encoder& encoder, const Dataset& data, int batch_size = 256);

struct ClusterModel {
  RowMatrix centers;             // l x d, unit rows
  std::vector<int> assignments;  // per sample
  double inertia = 0.0;
  std::vector<double> inertia_trace;  // one entry per Lloyd iteration
  int reseeded_empty = 0;

  int num_clusters() const { return static_cast<int>(centers.rows()); }
  /// Argmax cosine similarity of a unit row to the centres.
  int assign(const Eigen::Ref<const Eigen::RowVectorXf>& unit_row) const;
  std::vector<int> assign_all(const RowMatrix& unit_rows) const;
  std::vector<std::vector<std::size_t>> members() const;
};

struct KMeansOptions {
  int num_clusters = 100;
  std::uint64_t seed = 0;
  int max_iters = 100;
  double tol = 1e-6;  // relative inertia improvement threshold
  int restarts = 3;   // independent seedings; the lowest inertia wins
};

/// Spherical Lloyd iterations with greedy k-means++ seeding; centres are
/// renormalized after each update.
ClusterModel fit_kmeans(const EmbeddingMatrix& embeddings, const KMeansOptions& options);

/// Default cluster count: max(100, N / 125).
int default_cluster_count(std::size_t n);

struct FlipTestSet {
  std::vector<std::size_t> members;  // sample indices
  std::vector<std::string> member_ids;
  std::vector<int> original_assignments;

  std::size_t size() const { return members.size(); }
};

/// Per-cluster ceil(size / l) members closest to their centre, truncated
/// globally to `size` by descending similarity. When small clusters leave
/// fewer than `size`, the nearest remaining samples fill the gap.
FlipTestSet build_flip_set(const ClusterModel& model, const EmbeddingMatrix& embeddings, std::size_t size);

// Persistence: flat little-endian float32 matrix + JSON sidecar; centres as
// the same binary format plus an assignments CSV.
void save_embeddings(const EmbeddingMatrix& e, const std::filesystem::path& bin_path);
EmbeddingMatrix load_embeddings(const std::filesystem::path& bin_path);
void save_cluster_model(const ClusterModel& m, const std::vector<std::string>& sample_ids,
                        const std::filesystem::path& dir);
ClusterModel load_cluster_model(const std::filesystem::path& dir, const std::vector<std::string>& sample_ids);
void save_flip_set(const FlipTestSet& f, const std::filesystem::path& csv_path);
FlipTestSet load_flip_set(const std::filesystem::path& csv_path, const DatasetManifest& manifest);

}  // namespace patchsearch::cluster

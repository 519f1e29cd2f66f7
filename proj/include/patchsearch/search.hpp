#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "patchsearch/cluster.hpp"
#include "patchsearch/trigger_scope.hpp"

namespace patchsearch::search {

struct SearchConfig {
  int s = 2;         // samples scored per surviving cluster per iteration
  double r = 0.25;   // fraction of surviving clusters pruned per iteration
  int w = 60;        // candidate side length
  int k = 20;        // top-k patches handed to the poison classifier
  std::uint64_t seed = 0;
  bool cumulative_cluster_score = true;  // max over all iterations, not just the current one

  void validate() const;
};

struct IterationRecord {
  int iteration = 0;
  std::vector<int> surviving;  // clusters processed this iteration
  std::vector<int> pruned;
  std::vector<int> cluster_scores;  // aligned with `surviving`
  std::size_t scored = 0;
};

struct SearchResult {
  std::vector<scope::ScoredCandidate> candidates;  // in scoring order
  std::vector<std::size_t> ranking;                // indices into candidates, (score desc, sample_id asc)
  std::vector<IterationRecord> iterations;
  int w = 0;

  std::size_t total_scored() const { return candidates.size(); }
  const scope::ScoredCandidate& ranked(std::size_t pos) const { return candidates[ranking[pos]]; }
  std::vector<int> scores() const;
};

/// Greedy cluster search: score `s` unscored random members of every
/// surviving cluster, give each cluster the max score seen, prune the
/// max(1, floor(r * surviving)) lowest clusters (exhausted clusters first,
/// then ascending score, ties by cluster id), until none survive.
SearchResult iterative_search(const cluster::ClusterModel& model, scope::SampleScorer& scorer,
                              const SearchConfig& config);

/// Convenience overload wiring the Grad-CAM/flip-test scorer.
SearchResult iterative_search(const Dataset& data, const cluster::ClusterModel& model, const scope::FlipScorer& flips,
                              Encoder& encoder, const SearchConfig& config);

/// The k best candidates (fewer, with a warning, if fewer were scored).
std::vector<scope::ScoredCandidate> select_top_k(const SearchResult& result, int k);

/// Population standard deviation divided by the mean; 0 when the mean is 0.
double relative_std(const std::vector<int>& scores);

/// Fraction of the top-k ranked samples that are ground-truth poisons.
double top_k_accuracy(const SearchResult& result, const DatasetManifest& manifest, int k);

/// Clusters from most to least poisonous: reverse pruning order.
std::vector<int> cluster_ranking(const SearchResult& result);

/// Share of ground-truth poisons inside the top `fraction` of ranked clusters.
double cluster_removal_recall(const SearchResult& result, const cluster::ClusterModel& model,
                              const DatasetManifest& manifest, double fraction);

struct RsdRow {
  int w = 0;
  double mean = 0.0;
  double stddev = 0.0;
  double rsd = 0.0;
  std::size_t scored = 0;
};

struct RsdSweep {
  std::vector<RsdRow> rows;
  std::map<int, SearchResult> results;
  int chosen_w = 0;
  bool inconclusive = false;  // every score was zero for every w
};

using ScorerFactory = std::function<std::unique_ptr<scope::SampleScorer>(int w)>;

/// Runs the search per w and picks argmax RSD (ties to the smaller w).
RsdSweep rsd_sweep(const cluster::ClusterModel& model, const ScorerFactory& factory, const std::vector<int>& w_candidates,
                   const SearchConfig& config);
RsdSweep rsd_sweep(const Dataset& data, const cluster::ClusterModel& model, const scope::FlipScorer& flips,
                   Encoder& encoder, const std::vector<int>& w_candidates, const SearchConfig& config);

/// JSON summary (iterations, pruned clusters) and CSV ranking.
void save_search_result(const SearchResult& result, const std::filesystem::path& json_path,
                        const std::filesystem::path& ranking_csv);
/// Rebuilds a saved result in ranked order; patches are re-cropped from `data`.
SearchResult load_search_result(const std::filesystem::path& json_path, const std::filesystem::path& ranking_csv,
                                const Dataset& data);
void save_rsd_sweep(const RsdSweep& sweep, const std::filesystem::path& json_path);

}  // namespace patchsearch::search

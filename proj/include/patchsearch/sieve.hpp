#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "patchsearch/augment.hpp"
#include "patchsearch/config.hpp"
#include "patchsearch/manifest.hpp"
#include "patchsearch/nets.hpp"
#include "patchsearch/search.hpp"

namespace patchsearch::sieve {

/// Training data for the poison classifier. Indices refer to the dataset it
/// was built from; label-1 images are synthesized per batch from
/// `label0_pool` bases and `patches`.
struct SieveDataset {
  std::vector<std::size_t> label0_pool;
  std::vector<Image> patches;
  std::vector<std::size_t> proxy_val;
  std::vector<int> proxy_labels;  // 1 for top-k ranked, 0 for bottom-k
  std::size_t excluded_top = 0;   // scored samples dropped from the label-0 pool
  int paste_min = 0;              // label-1 paste side range, inclusive
  int paste_max = 0;
};

/// Paste side band [20, 80] at 224 pixels, scaled to `image_side`.
std::pair<int, int> paste_side_range(int image_side);

/// `ranked` lists scored samples best first; the top-`k` and bottom-`k`
/// form the proxy validation set, the top `noise_cut` fraction is dropped
/// from label 0.
SieveDataset build_sieve_dataset(const Dataset& data, const std::vector<std::size_t>& ranked,
                                 std::vector<Image> patches, int k, double noise_cut);
SieveDataset build_sieve_dataset(const Dataset& data, const search::SearchResult& result, int k, double noise_cut);

/// A label-1 image: `base` with a random patch pasted at a random size and location.
Image synthesize_poison(const Image& base, const SieveDataset& sieve, Rng& rng);

struct SieveHyper {
  std::string backbone = "resnet10";
  double lr = 0.01;
  int batch_size = 32;
  int max_iters = 2000;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  int eval_every = 20;
  int patience = 10;
  int ensemble_size = 5;
  bool augment = true;
  augment::AugmentConfig augment_config = augment::AugmentConfig::moco_v2();

  static SieveHyper from_config(const Config& config);
  Config to_config() const;
  void validate() const;
};

/// Stops once the F1 value rounded to 4 decimals has repeated for
/// `patience` consecutive evaluations.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {}
  /// Returns true when training should stop after this evaluation.
  bool update(double f1);
  int unchanged() const { return unchanged_; }

 private:
  int patience_;
  int unchanged_ = 0;
  long last_ = 0;
  bool has_last_ = false;
};

double f1_score(const std::vector<int>& predicted, const std::vector<int>& truth);

class SieveNetImpl : public torch::nn::Module {
 public:
  explicit SieveNetImpl(const std::string& backbone_id);
  /// Poison logit per image, (B).
  torch::Tensor forward(const torch::Tensor& x);

 private:
  nets::ResNet backbone_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(SieveNet);

struct F1Point {
  int iteration = 0;
  double f1 = 0.0;
};

/// `net` holds the weights at the point training stopped; the best F1 seen
/// on the way is kept for diagnostics only.
struct SieveMember {
  SieveNet net{nullptr};
  std::uint64_t seed = 0;
  std::vector<F1Point> trace;
  double best_f1 = 0.0;
  int best_iteration = 0;
  int stopped_iteration = 0;
  bool early_stopped = false;

  /// Poison probability per image under deterministic preprocessing.
  std::vector<double> predict(std::span<const Image> images, int batch_size = 256);
};

SieveMember train_sieve_member(const Dataset& data, const SieveDataset& sieve, const SieveHyper& hyper,
                               std::uint64_t seed);

struct SieveEnsemble {
  std::vector<SieveMember> members;

  /// Mean member probability per image; summed in sorted order so the
  /// result does not depend on member order.
  std::vector<double> predict(std::span<const Image> images, int batch_size = 256);
  static std::vector<double> combine(const std::vector<std::vector<double>>& member_probs);
};

/// Members seeded independently from `seed`.
SieveEnsemble train_sieve_ensemble(const Dataset& data, const SieveDataset& sieve, const SieveHyper& hyper,
                                   std::uint64_t seed);

void save_ensemble(const SieveEnsemble& ensemble, const SieveHyper& hyper, const std::filesystem::path& dir);
SieveEnsemble load_ensemble(const std::filesystem::path& dir);

struct FilterReport {
  std::vector<std::string> removed_ids;
  std::size_t total_removed = 0;
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;
  std::size_t false_negatives = 0;
  std::optional<double> precision;  // undefined when nothing was removed
  std::optional<double> recall;     // undefined when the manifest has no poisons
  std::vector<double> probabilities;
  std::vector<std::vector<F1Point>> member_traces;
};

/// Removes samples with mean probability > 0.5.
FilterReport make_report(const DatasetManifest& manifest, const std::vector<double>& probabilities);
std::pair<DatasetManifest, FilterReport> sieve_filter(const Dataset& data, SieveEnsemble& ensemble);

DatasetManifest remove_samples(const DatasetManifest& manifest, const std::vector<std::string>& ids);

void save_filter_report(const FilterReport& report, const DatasetManifest& manifest, const std::filesystem::path& json_path,
                        const std::filesystem::path& csv_path);

/// Largest precision among thresholds whose recall reaches `recall`; 0 when unreachable.
double precision_at_recall(const std::vector<double>& scores, const std::vector<bool>& is_poison, double recall);

}  // namespace patchsearch::sieve

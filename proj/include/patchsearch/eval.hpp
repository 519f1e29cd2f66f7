#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "patchsearch/config.hpp"
#include "patchsearch/encoder.hpp"
#include "patchsearch/manifest.hpp"
#include "patchsearch/ssl.hpp"

namespace patchsearch::eval {

struct MetricTriple {
  double acc = 0.0;  // top-1 percentage over all validation images
  double fp = 0.0;   // non-target images predicted as the target
  double asr = 0.0;  // fp * 100 / denominator
  double denominator = 0.0;
};

double attack_success_rate(double fp, double denominator);
/// Number of validation images whose label is not `target`.
std::size_t asr_denominator(const DatasetManifest& val, int target);
MetricTriple compute_metrics(const std::vector<int>& predicted, const DatasetManifest& val, int target);
/// Field-wise mean (used for the 5-seed averages).
MetricTriple average(const std::vector<MetricTriple>& runs);

/// Per-class `fraction` of each label, at least one sample per present class.
std::vector<std::size_t> stratified_subset(const DatasetManifest& manifest, double fraction, std::uint64_t seed);

struct ProbeConfig {
  double fraction = 0.01;
  double lr = 0.1;
  int epochs = 40;
  int batch_size = 64;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<int> decay_epochs{15, 30};
  std::uint64_t seed = 0;

  static ProbeConfig from_config(const Config& config);
  Config to_config() const;
};

/// Linear classifier on doubly normalized features: unit l2 rows, then
/// per-dimension standardization with training-set statistics.
struct ProbeHead {
  Eigen::MatrixXf weights;  // C x d
  Eigen::VectorXf bias;     // C
  Eigen::RowVectorXf mean;  // d
  Eigen::RowVectorXf stddev;

  RowMatrix normalize(RowMatrix features) const;
  std::vector<int> predict(const RowMatrix& raw_features) const;
  int num_classes() const { return static_cast<int>(weights.rows()); }
};

ProbeHead fit_probe(const RowMatrix& raw_features, const std::vector<int>& labels, int num_classes,
                    const ProbeConfig& config);
/// Samples the labelled subset, embeds it with the frozen encoder and fits.
ProbeHead train_probe(Encoder& encoder, const Dataset& train, const ProbeConfig& config);
MetricTriple evaluate(const ProbeHead& probe, Encoder& encoder, const Dataset& val, int target);

struct FinetuneConfig {
  double fraction = 0.01;
  double lr = 0.01;
  int epochs = 20;
  int batch_size = 64;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool strong_augment = false;
  std::uint64_t seed = 0;

  static FinetuneConfig from_config(const Config& config);
  Config to_config() const;
};

/// Encoder backbone with a linear head, trained end to end.
struct FinetunedModel {
  nets::ResNet backbone{nullptr};
  torch::nn::Linear head{nullptr};
  std::vector<double> epoch_loss;

  std::vector<int> predict(std::span<const Image> images, int batch_size = 256);
};

FinetunedModel finetune_probe(const ssl::EncoderCheckpoint& checkpoint, const Dataset& train, const FinetuneConfig& config);
MetricTriple evaluate(FinetunedModel& model, const Dataset& val, int target);

/// Trigger-free potency of natural image patches: for every category, the
/// largest FP count any of its candidate patches causes when pasted on the
/// other categories' validation images.
struct PotencyRow {
  int category = 0;
  double max_fp = 0.0;
  std::string best_source_id;
};
struct PotencyOptions {
  int w = 8;
  int patches_per_category = 5;
  double margin_fraction = 0.25;
  std::uint64_t seed = 0;
};
std::vector<PotencyRow> potency_analysis(Encoder& encoder, const ProbeHead& probe, const Dataset& train, const Dataset& val,
                                         const PotencyOptions& options);
void save_potency(const std::vector<PotencyRow>& rows, const std::filesystem::path& path);

void save_metrics(const MetricTriple& m, const std::filesystem::path& path);
MetricTriple load_metrics(const std::filesystem::path& path);

}  // namespace patchsearch::eval

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "patchsearch/augment.hpp"
#include "patchsearch/config.hpp"
#include "patchsearch/encoder.hpp"
#include "patchsearch/manifest.hpp"
#include "patchsearch/mix.hpp"
#include "patchsearch/nets.hpp"

namespace patchsearch::ssl {

struct SslConfig {
  SslMethod method = SslMethod::byol;
  std::string backbone = "resnet18";
  int epochs = 200;
  int batch_size = 256;
  double lr = 0.05;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  double temperature = 0.2;
  int queue_size = 4096;
  int proj_dim = 128;
  int hidden_dim = 512;
  double ema = 0.99;
  MixRecipe mix;
  augment::AugmentConfig augment = augment::AugmentConfig::moco_v2();
  std::uint64_t seed = 0;

  static SslConfig from_config(const Config& config);
  Config to_config() const;
  std::string hash() const { return to_config().hash(); }
  void validate() const;
};

/// Trained backbone plus the header stored alongside its weights.
struct EncoderCheckpoint {
  std::string backbone_id;
  int embedding_dim = 0;
  std::string config_hash;
  nets::ResNet backbone{nullptr};

  /// Single file: magic, JSON header, torch archive. Written atomically.
  void save(const std::filesystem::path& path) const;
  static EncoderCheckpoint load(const std::filesystem::path& path);
  static EncoderCheckpoint fresh(const std::string& backbone_id, const std::string& config_hash);
};

struct TrainLog {
  std::vector<double> epoch_loss;
  std::vector<double> step_loss;
  double seconds = 0.0;
};

struct TrainOutcome {
  EncoderCheckpoint checkpoint;
  TrainLog log;
};

/// Self-supervised pre-training. With a non-empty `checkpoint_path` the final
/// weights are saved there; on divergence the last good weights are saved
/// before TrainingError propagates.
TrainOutcome train_ssl(const Dataset& data, const SslConfig& config, const std::filesystem::path& checkpoint_path = {});

void save_train_log(const TrainLog& log, const std::filesystem::path& path);

/// Encoder backed by a trained backbone; heatmaps come from Grad-CAM on the
/// last convolutional stage with the cosine-to-centre logit.
class TorchEncoder : public Encoder {
 public:
  explicit TorchEncoder(EncoderCheckpoint checkpoint, int batch_size = 256);

  int embedding_dim() const override { return checkpoint_.embedding_dim; }
  RowMatrix embed(std::span<const Image> images) override;
  HeatMap heatmap(const Image& image, const Eigen::VectorXf& center) override;
  std::string id() const override { return checkpoint_.backbone_id + ":" + checkpoint_.config_hash; }

  nets::ResNet& backbone() { return checkpoint_.backbone; }

 private:
  EncoderCheckpoint checkpoint_;
  int batch_size_;
};

}  // namespace patchsearch::ssl

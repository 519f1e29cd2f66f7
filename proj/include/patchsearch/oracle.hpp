#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "patchsearch/encoder.hpp"
#include "patchsearch/forge.hpp"
#include "patchsearch/manifest.hpp"

namespace patchsearch::oracle {

/// Parameters of the synthetic world. Images are flat class-coloured fields
/// with per-block colour offsets; the block offsets drive the within-class
/// embedding noise and a fixed pixel motif acts as the trigger.
struct OracleSpec {
  int num_samples = 10000;
  int num_latent_classes = 10;
  int image_side = 32;
  int motif_side = 8;
  int noise_grid = 4;            // noise blocks per side
  int noise_dims = 16;
  double noise_scale = 0.3;      // bound on the noise component's norm
  double match_threshold = 0.9;  // matched-pixel fraction needed to fire
  double heatmap_miss_rate = 0.0;
  bool trigger_active = true;    // false: the encoder ignores the motif (a "clean" model)
  int val_per_class = 100;
  std::uint64_t seed = 7;

  int embedding_dim() const { return num_latent_classes + 1 + noise_dims; }
  void validate() const;
};

/// The fixed trigger motif for a spec (values exactly 0 or 1).
forge::TriggerPatch motif(const OracleSpec& spec);
/// Representative colour of latent class c.
std::array<float, 3> class_color(const OracleSpec& spec, int c);

/// Best motif match over all windows: the fraction of motif pixels whose
/// every channel lies within 0.25 of the motif value.
struct MotifMatch {
  double score = 0.0;
  Rect box;
};
MotifMatch best_motif_match(const OracleSpec& spec, const Image& image);

/// Deterministic analytic encoder: class one-hot + bounded block noise, or
/// the dedicated trigger direction when the motif matches anywhere.
class OracleEncoder : public Encoder {
 public:
  explicit OracleEncoder(OracleSpec spec);

  int embedding_dim() const override { return spec_.embedding_dim(); }
  RowMatrix embed(std::span<const Image> images) override;
  /// Motif-correlation map (the centre is ignored).
  HeatMap heatmap(const Image& image, const Eigen::VectorXf& center) override;
  std::string id() const override { return "oracle"; }

  Eigen::VectorXf embed_one(const Image& image) const;
  int detect_class(const Image& image) const;
  int trigger_dim() const { return spec_.num_latent_classes; }
  /// Lower bound on cos(embedding, class direction) for motif-free images.
  double class_cosine_bound() const;
  const OracleSpec& spec() const { return spec_; }

 private:
  OracleSpec spec_;
  Image motif_;
  Eigen::MatrixXf projection_;  // noise_dims x (grid * grid * 3)
  std::vector<std::array<float, 3>> colors_;
};

/// Analytic heatmap: every pixel of a window whose motif match clears the
/// threshold carries that match score; zero elsewhere. With probability
/// `heatmap_miss_rate` (hashed from the pixels) a poisoned image's heat is
/// moved to a decoy corner instead.
HeatMap oracle_heatmap(const OracleSpec& spec, const Image& image);

struct OracleWorld {
  Dataset train;  // poisoned per injection_rate
  Dataset val;    // clean, labelled
  forge::TriggerPatch trigger;
  forge::AttackConfig attack;
};

/// Class-structured images; the motif is then pasted on floor(rate * N)
/// target-class images through the standard forge.
OracleWorld generate_oracle_dataset(const OracleSpec& spec, double injection_rate, int target_category = 0);

/// Motif-free image of latent class c drawn from `rng`.
Image render_clean_image(const OracleSpec& spec, int c, Rng& rng);

void save_spec(const OracleSpec& spec, const std::filesystem::path& path);
OracleSpec load_spec(const std::filesystem::path& path);

}  // namespace patchsearch::oracle

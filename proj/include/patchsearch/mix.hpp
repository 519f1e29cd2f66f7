#pragma once

#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "patchsearch/image.hpp"
#include "patchsearch/rng.hpp"

namespace patchsearch::ssl {

enum class SslMethod { moco, byol };
enum class MixMode { none, icutmix, icutmix_unweighted, cutout_black, cutout_noise };

SslMethod parse_method(const std::string& name);
std::string to_string(SslMethod method);
MixMode parse_mix_mode(const std::string& name);
std::string to_string(MixMode mode);

struct MixRecipe {
  MixMode mode = MixMode::none;
  double alpha = 1.0;
  /// Pins the pre-clipping draw instead of sampling Beta(alpha, alpha).
  std::optional<double> fixed_lambda;

  bool mixes() const { return mode != MixMode::none; }
  bool weighted() const { return mode == MixMode::icutmix; }
};

/// CutMix box for pre-clipping weight `lambda`: centre uniform over pixels,
/// sides scaled by sqrt(1 - lambda), clipped to the image.
Rect cutmix_box(int height, int width, double lambda, Rng& rng);

struct MixOutput {
  torch::Tensor mixed;
  std::vector<std::int64_t> donors;
  std::vector<double> lambdas;  // 1 - clipped box area / image area
  std::vector<Rect> boxes;
};

/// `batch` is (B, C, H, W) in [0, 1].
MixOutput apply_mix(const torch::Tensor& batch, const MixRecipe& recipe, Rng& rng);

struct LossSpec {
  SslMethod method = SslMethod::byol;
  MixMode mode = MixMode::none;
  double temperature = 0.2;
};

/// Per-pair base loss matrix L(i, j) for anchor i against target j.
/// MoCo: -log softmax over [batch targets, queue] / T, taken at column j.
/// BYOL: 2 - 2 cos(anchor_i, target_j).
torch::Tensor pairwise_loss(const LossSpec& spec, const torch::Tensor& anchor, const torch::Tensor& target,
                            const torch::Tensor& queue = {});

/// Mean over the batch of lambda_i L(i, i) + (1 - lambda_i) L(i, donor_i) for
/// weighted i-CutMix, L(i, i) otherwise.
torch::Tensor ssl_loss(const LossSpec& spec, const torch::Tensor& anchor, const torch::Tensor& target,
                       const std::vector<std::int64_t>& donors, const std::vector<double>& lambdas,
                       const torch::Tensor& queue = {});

}  // namespace patchsearch::ssl

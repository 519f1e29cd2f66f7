#pragma once

#include <array>
#include <span>
#include <string>

#include <torch/torch.h>

#include "patchsearch/image.hpp"

namespace patchsearch::nets {

/// CIFAR-style ResNet: 3x3 stem without max-pool, four stages of BasicBlocks.
struct ResNetOptions {
  std::array<int, 4> blocks{2, 2, 2, 2};
  int base_width = 64;
};

/// "resnet18" (2 blocks per stage) or "resnet10" (1 block per stage), with
/// an optional width suffix: "resnet18-w16", "resnet10-w8".
ResNetOptions parse_backbone_id(const std::string& id);

class BasicBlockImpl : public torch::nn::Module {
 public:
  BasicBlockImpl(int in_planes, int planes, int stride);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
  torch::nn::Sequential shortcut_{nullptr};
};
TORCH_MODULE(BasicBlock);

class ResNetImpl : public torch::nn::Module {
 public:
  explicit ResNetImpl(const ResNetOptions& options);

  /// Output of the last convolutional stage, (B, C, h, w).
  torch::Tensor feature_map(const torch::Tensor& x);
  /// Globally average-pooled features, (B, C).
  torch::Tensor forward(const torch::Tensor& x);
  int feature_dim() const { return feature_dim_; }

 private:
  torch::nn::Conv2d stem_{nullptr};
  torch::nn::BatchNorm2d stem_bn_{nullptr};
  torch::nn::Sequential stages_{nullptr};
  int feature_dim_ = 0;
};
TORCH_MODULE(ResNet);

/// Linear -> BatchNorm -> ReLU -> Linear projection/prediction head.
torch::nn::Sequential make_mlp(int in_dim, int hidden_dim, int out_dim);

/// Stacks images into (B, 3, H, W) float32 in [0, 1].
torch::Tensor to_tensor(std::span<const Image> images);
/// Per-channel mean/std normalization applied before every network.
torch::Tensor normalize_input(const torch::Tensor& batch01);

/// CUDA when available, else the CPU; PATCHSEARCH_DEVICE=cpu|cuda overrides.
torch::Device compute_device();

void copy_state(torch::nn::Module& dst, const torch::nn::Module& src);
/// dst = m * dst + (1 - m) * src over parameters; buffers are copied.
void ema_update(torch::nn::Module& dst, const torch::nn::Module& src, double momentum);
std::int64_t parameter_count(const torch::nn::Module& m);

std::string serialize(const torch::nn::Module& m);
void deserialize(torch::nn::Module& m, const std::string& blob);

}  // namespace patchsearch::nets

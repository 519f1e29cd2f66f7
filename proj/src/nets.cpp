#include "patchsearch/nets.hpp"

#include <cstdlib>
#include <regex>
#include <sstream>

#include "patchsearch/errors.hpp"

namespace patchsearch::nets {

namespace F = torch::nn::functional;

ResNetOptions parse_backbone_id(const std::string& id) {
  static const std::regex pattern(R"(resnet(18|10)(?:-w(\d+))?)");
  std::smatch m;
  if (!std::regex_match(id, m, pattern)) throw ConfigError("unknown backbone '" + id + "'");
  ResNetOptions opts;
  opts.blocks = m[1] == "18" ? std::array<int, 4>{2, 2, 2, 2} : std::array<int, 4>{1, 1, 1, 1};
  if (m[2].matched) opts.base_width = std::stoi(m[2]);
  if (opts.base_width < 1) throw ConfigError("backbone width must be positive");
  return opts;
}

BasicBlockImpl::BasicBlockImpl(int in_planes, int planes, int stride) {
  conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_planes, planes, 3)
                                                          .stride(stride).padding(1).bias(false)));
  bn1_ = register_module("bn1", torch::nn::BatchNorm2d(planes));
  conv2_ = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(planes, planes, 3)
                                                          .stride(1).padding(1).bias(false)));
  bn2_ = register_module("bn2", torch::nn::BatchNorm2d(planes));
  shortcut_ = torch::nn::Sequential();
  if (stride != 1 || in_planes != planes) {
    shortcut_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in_planes, planes, 1).stride(stride).bias(false)));
    shortcut_->push_back(torch::nn::BatchNorm2d(planes));
  }
  register_module("shortcut", shortcut_);
}

torch::Tensor BasicBlockImpl::forward(const torch::Tensor& x) {
  auto out = torch::relu(bn1_(conv1_(x)));
  out = bn2_(conv2_(out));
  out = out + (shortcut_->is_empty() ? x : shortcut_->forward(x));
  return torch::relu(out);
}

ResNetImpl::ResNetImpl(const ResNetOptions& options) {
  const int w = options.base_width;
  stem_ = register_module("stem", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, w, 3).stride(1).padding(1).bias(false)));
  stem_bn_ = register_module("stem_bn", torch::nn::BatchNorm2d(w));
  stages_ = torch::nn::Sequential();
  int in_planes = w;
  for (int s = 0; s < 4; ++s) {
    const int planes = w << s;
    for (int b = 0; b < options.blocks[static_cast<std::size_t>(s)]; ++b) {
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      stages_->push_back(BasicBlock(in_planes, planes, stride));
      in_planes = planes;
    }
  }
  register_module("stages", stages_);
  feature_dim_ = in_planes;
}

torch::Tensor ResNetImpl::feature_map(const torch::Tensor& x) {
  return stages_->forward(torch::relu(stem_bn_(stem_(x))));
}

torch::Tensor ResNetImpl::forward(const torch::Tensor& x) { return feature_map(x).mean({2, 3}); }

torch::nn::Sequential make_mlp(int in_dim, int hidden_dim, int out_dim) {
  return torch::nn::Sequential(torch::nn::Linear(in_dim, hidden_dim), torch::nn::BatchNorm1d(hidden_dim),
                               torch::nn::ReLU(), torch::nn::Linear(hidden_dim, out_dim));
}

torch::Tensor to_tensor(std::span<const Image> images) {
  if (images.empty()) throw ConfigError("to_tensor: empty batch");
  const int h = images[0].height(), w = images[0].width();
  auto out = torch::empty({static_cast<long>(images.size()), h, w, 3}, torch::kFloat32);
  float* dst = out.data_ptr<float>();
  const std::size_t per = static_cast<std::size_t>(h) * w * 3;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].height() != h || images[i].width() != w || images[i].channels() != 3)
      throw DataError("to_tensor: images in a batch must share one RGB shape");
    std::copy(images[i].data().begin(), images[i].data().end(), dst + i * per);
  }
  return out.permute({0, 3, 1, 2}).contiguous();
}

torch::Tensor normalize_input(const torch::Tensor& batch01) {
  static const auto mean = torch::tensor({0.485f, 0.456f, 0.406f}).view({1, 3, 1, 1});
  static const auto stdv = torch::tensor({0.229f, 0.224f, 0.225f}).view({1, 3, 1, 1});
  return (batch01 - mean.to(batch01.device(), batch01.scalar_type())) / stdv.to(batch01.device(), batch01.scalar_type());
}

torch::Device compute_device() {
  const char* forced = std::getenv("PATCHSEARCH_DEVICE");
  const std::string want = forced ? forced : "";
  if (want == "cpu") return torch::kCPU;
  if (want == "cuda") {
    if (!torch::cuda::is_available()) throw ConfigError("PATCHSEARCH_DEVICE=cuda but no CUDA device is available");
    return torch::kCUDA;
  }
  if (!want.empty()) throw ConfigError("PATCHSEARCH_DEVICE must be cpu or cuda, got '" + want + "'");
  return torch::cuda::is_available() ? torch::Device(torch::kCUDA) : torch::Device(torch::kCPU);
}

void copy_state(torch::nn::Module& dst, const torch::nn::Module& src) {
  torch::NoGradGuard guard;
  auto sp = src.named_parameters(true);
  for (auto& p : dst.named_parameters(true)) p.value().copy_(sp[p.key()]);
  auto sb = src.named_buffers(true);
  for (auto& b : dst.named_buffers(true)) b.value().copy_(sb[b.key()]);
}

void ema_update(torch::nn::Module& dst, const torch::nn::Module& src, double momentum) {
  torch::NoGradGuard guard;
  auto sp = src.named_parameters(true);
  for (auto& p : dst.named_parameters(true)) p.value().mul_(momentum).add_(sp[p.key()], 1.0 - momentum);
  auto sb = src.named_buffers(true);
  for (auto& b : dst.named_buffers(true)) b.value().copy_(sb[b.key()]);
}

std::int64_t parameter_count(const torch::nn::Module& m) {
  std::int64_t n = 0;
  for (const auto& p : m.parameters(true)) n += p.numel();
  return n;
}

std::string serialize(const torch::nn::Module& m) {
  torch::serialize::OutputArchive archive;
  m.save(archive);
  std::ostringstream os;
  archive.save_to(os);
  return os.str();
}

void deserialize(torch::nn::Module& m, const std::string& blob) {
  torch::serialize::InputArchive archive;
  std::istringstream is(blob);
  archive.load_from(is);
  m.load(archive);
}

}  // namespace patchsearch::nets

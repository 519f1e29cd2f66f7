#include "patchsearch/mix.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "patchsearch/errors.hpp"

namespace patchsearch::ssl {

SslMethod parse_method(const std::string& name) {
  if (name == "moco") return SslMethod::moco;
  if (name == "byol") return SslMethod::byol;
  throw ConfigError("unknown ssl method '" + name + "' (expected moco or byol)");
}

std::string to_string(SslMethod method) { return method == SslMethod::moco ? "moco" : "byol"; }

MixMode parse_mix_mode(const std::string& name) {
  if (name == "none") return MixMode::none;
  if (name == "icutmix") return MixMode::icutmix;
  if (name == "icutmix_unweighted") return MixMode::icutmix_unweighted;
  if (name == "cutout_black") return MixMode::cutout_black;
  if (name == "cutout_noise") return MixMode::cutout_noise;
  throw ConfigError("unknown mix mode '" + name + "'");
}

std::string to_string(MixMode mode) {
  switch (mode) {
    case MixMode::none: return "none";
    case MixMode::icutmix: return "icutmix";
    case MixMode::icutmix_unweighted: return "icutmix_unweighted";
    case MixMode::cutout_black: return "cutout_black";
    case MixMode::cutout_noise: return "cutout_noise";
  }
  return "none";
}

Rect cutmix_box(int height, int width, double lambda, Rng& rng) {
  const double cut = std::sqrt(std::clamp(1.0 - lambda, 0.0, 1.0));
  const int cut_w = static_cast<int>(width * cut);
  const int cut_h = static_cast<int>(height * cut);
  const int cx = static_cast<int>(rng.uniform_int(0, width - 1));
  const int cy = static_cast<int>(rng.uniform_int(0, height - 1));
  const int x1 = std::clamp(cx - cut_w / 2, 0, width);
  const int x2 = std::clamp(cx + cut_w / 2, 0, width);
  const int y1 = std::clamp(cy - cut_h / 2, 0, height);
  const int y2 = std::clamp(cy + cut_h / 2, 0, height);
  return {x1, y1, x2 - x1, y2 - y1};
}

MixOutput apply_mix(const torch::Tensor& batch, const MixRecipe& recipe, Rng& rng) {
  if (batch.dim() != 4) throw ConfigError("apply_mix expects a (B, C, H, W) batch");
  const std::int64_t n = batch.size(0);
  const int h = static_cast<int>(batch.size(2)), w = static_cast<int>(batch.size(3));
  MixOutput out;
  out.donors.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out.donors[static_cast<std::size_t>(i)] = i;
  out.lambdas.assign(static_cast<std::size_t>(n), 1.0);
  out.boxes.assign(static_cast<std::size_t>(n), Rect{});
  if (!recipe.mixes()) {
    out.mixed = batch;
    return out;
  }
  if (n < 2) throw ConfigError("mixing needs a batch of at least 2 images");
  if (!recipe.fixed_lambda && recipe.alpha <= 0.0) throw ConfigError("mix alpha must be positive");

  const auto perm = rng.permutation(static_cast<std::size_t>(n));
  out.mixed = batch.clone();
  const bool from_donor = recipe.mode == MixMode::icutmix || recipe.mode == MixMode::icutmix_unweighted;
  for (std::int64_t i = 0; i < n; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    const double drawn = recipe.fixed_lambda ? *recipe.fixed_lambda : rng.beta(recipe.alpha, recipe.alpha);
    const Rect box = cutmix_box(h, w, drawn, rng);
    out.boxes[ui] = box;
    out.lambdas[ui] = 1.0 - static_cast<double>(box.area()) / (static_cast<double>(h) * w);
    if (from_donor) out.donors[ui] = static_cast<std::int64_t>(perm[ui]);
    if (box.empty()) continue;

    using torch::indexing::Slice;
    auto region = out.mixed.index({i, Slice(), Slice(box.y, box.y + box.h), Slice(box.x, box.x + box.w)});
    switch (recipe.mode) {
      case MixMode::icutmix:
      case MixMode::icutmix_unweighted:
        region.copy_(batch.index({out.donors[ui], Slice(), Slice(box.y, box.y + box.h), Slice(box.x, box.x + box.w)}));
        break;
      case MixMode::cutout_black:
        region.zero_();
        break;
      case MixMode::cutout_noise: {
        std::vector<float> noise(static_cast<std::size_t>(region.numel()));
        for (float& v : noise) v = std::clamp(static_cast<float>(rng.normal()), 0.0f, 1.0f);
        region.copy_(torch::from_blob(noise.data(), region.sizes(), torch::kFloat32).to(region.device(), region.scalar_type()));
        break;
      }
      case MixMode::none:
        break;
    }
  }
  return out;
}

torch::Tensor pairwise_loss(const LossSpec& spec, const torch::Tensor& anchor, const torch::Tensor& target,
                            const torch::Tensor& queue) {
  namespace F = torch::nn::functional;
  const auto q = F::normalize(anchor, F::NormalizeFuncOptions().dim(1));
  const auto k = F::normalize(target, F::NormalizeFuncOptions().dim(1));
  const std::int64_t n = anchor.size(0);
  if (spec.method == SslMethod::byol) return 2.0 - 2.0 * q.matmul(k.t());
  if (spec.temperature <= 0.0) throw ConfigError("contrastive temperature must be positive");
  auto logits = q.matmul(k.t());
  if (queue.defined() && queue.numel() > 0) logits = torch::cat({logits, q.matmul(queue.to(q.dtype()).t())}, 1);
  logits = logits / spec.temperature;
  using torch::indexing::Slice;
  return -torch::log_softmax(logits, 1).index({Slice(), Slice(0, n)});
}

torch::Tensor ssl_loss(const LossSpec& spec, const torch::Tensor& anchor, const torch::Tensor& target,
                       const std::vector<std::int64_t>& donors, const std::vector<double>& lambdas,
                       const torch::Tensor& queue) {
  const std::int64_t n = anchor.size(0);
  if (target.size(0) != n || static_cast<std::int64_t>(donors.size()) != n ||
      static_cast<std::int64_t>(lambdas.size()) != n)
    throw ConfigError("ssl_loss: batch sizes disagree");

  const auto pairs = pairwise_loss(spec, anchor, target, queue);
  const auto rows = torch::arange(n, torch::TensorOptions().dtype(torch::kLong).device(pairs.device()));
  const auto self = pairs.index({rows, rows});
  torch::Tensor loss;
  if (spec.mode == MixMode::icutmix) {
    const auto donor_idx = torch::tensor(donors, torch::kLong).to(pairs.device());
    const auto lam = torch::tensor(lambdas, torch::TensorOptions().dtype(torch::kFloat64)).to(pairs.device(), pairs.scalar_type());
    loss = (lam * self + (1.0 - lam) * pairs.index({rows, donor_idx})).mean();
  } else {
    loss = self.mean();
  }

  const double value = loss.item<double>();
  if (!std::isfinite(value)) {
    std::ostringstream os;
    os << "non-finite ssl loss (" << value << "): anchor max|x| " << anchor.abs().max().item<double>()
       << ", target max|x| " << target.abs().max().item<double>() << ", anchor finite "
       << anchor.isfinite().all().item<bool>() << ", target finite " << target.isfinite().all().item<bool>();
    throw TrainingError(os.str());
  }
  return loss;
}

}  // namespace patchsearch::ssl

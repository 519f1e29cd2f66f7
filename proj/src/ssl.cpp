#include "patchsearch/ssl.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>

#include "json.hpp"

#include "patchsearch/errors.hpp"
#include "patchsearch/logging.hpp"

namespace patchsearch::ssl {

namespace {

constexpr char kMagic[8] = {'P', 'S', 'E', 'N', 'C', '0', '0', '1'};

void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

double cosine_schedule(double base, long step, long total) {
  if (total <= 0) return base;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

std::vector<Image> augmented_views(const Dataset& data, const std::vector<std::size_t>& idx,
                                   const augment::AugmentConfig& cfg, Rng& rng) {
  std::vector<Image> views;
  views.reserve(idx.size());
  for (std::size_t i : idx) views.push_back(augment::augment(data.images[i], cfg, rng));
  return views;
}

struct Branch : torch::nn::Module {
  Branch(const nets::ResNetOptions& opts, int hidden, int proj) {
    backbone = register_module("backbone", nets::ResNet(opts));
    projector = register_module("projector", nets::make_mlp(backbone->feature_dim(), hidden, proj));
  }
  torch::Tensor forward(const torch::Tensor& x) { return projector->forward(backbone->forward(x)); }
  nets::ResNet backbone{nullptr};
  torch::nn::Sequential projector{nullptr};
};

}  // namespace

SslConfig SslConfig::from_config(const Config& c) {
  SslConfig s;
  s.method = parse_method(c.get("method", to_string(s.method)));
  s.backbone = c.get("backbone", s.backbone);
  s.epochs = static_cast<int>(c.get_int("epochs", s.epochs));
  s.batch_size = static_cast<int>(c.get_int("batch_size", s.batch_size));
  s.lr = c.get_double("lr", s.lr);
  s.weight_decay = c.get_double("weight_decay", s.weight_decay);
  s.momentum = c.get_double("momentum", s.momentum);
  s.temperature = c.get_double("temperature", s.temperature);
  s.queue_size = static_cast<int>(c.get_int("queue_size", s.queue_size));
  s.proj_dim = static_cast<int>(c.get_int("proj_dim", s.proj_dim));
  s.hidden_dim = static_cast<int>(c.get_int("hidden_dim", s.hidden_dim));
  s.ema = c.get_double("ema", s.ema);
  s.mix.mode = parse_mix_mode(c.get("mix.mode", to_string(s.mix.mode)));
  s.mix.alpha = c.get_double("mix.alpha", s.mix.alpha);
  if (c.has("mix.lambda")) s.mix.fixed_lambda = c.get_double("mix.lambda", 1.0);
  if (c.get_bool("augment.off", false)) s.augment = augment::AugmentConfig::identity();
  s.seed = static_cast<std::uint64_t>(c.get_int("seed", 0));
  s.validate();
  return s;
}

Config SslConfig::to_config() const {
  Config c;
  c.set("method", to_string(method));
  c.set("backbone", backbone);
  c.set("epochs", std::to_string(epochs));
  c.set("batch_size", std::to_string(batch_size));
  c.set("lr", nlohmann::json(lr).dump());
  c.set("weight_decay", nlohmann::json(weight_decay).dump());
  c.set("momentum", nlohmann::json(momentum).dump());
  c.set("temperature", nlohmann::json(temperature).dump());
  c.set("queue_size", std::to_string(queue_size));
  c.set("proj_dim", std::to_string(proj_dim));
  c.set("hidden_dim", std::to_string(hidden_dim));
  c.set("ema", nlohmann::json(ema).dump());
  c.set("mix.mode", to_string(mix.mode));
  c.set("mix.alpha", nlohmann::json(mix.alpha).dump());
  if (mix.fixed_lambda) c.set("mix.lambda", nlohmann::json(*mix.fixed_lambda).dump());
  if (augment.crop_scale_min >= 1.0 && augment.jitter_prob == 0.0) c.set("augment.off", "true");
  c.set("seed", std::to_string(seed));
  return c;
}

void SslConfig::validate() const {
  nets::parse_backbone_id(backbone);
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (lr <= 0.0) throw ConfigError("lr must be positive");
  if (temperature <= 0.0) throw ConfigError("temperature must be positive");
  if (ema < 0.0 || ema > 1.0) throw ConfigError("ema must lie in [0, 1]");
  if (mix.fixed_lambda && (*mix.fixed_lambda < 0.0 || *mix.fixed_lambda > 1.0))
    throw ConfigError("mix.lambda must lie in [0, 1]");
}

EncoderCheckpoint EncoderCheckpoint::fresh(const std::string& backbone_id, const std::string& config_hash) {
  EncoderCheckpoint ck;
  ck.backbone_id = backbone_id;
  ck.backbone = nets::ResNet(nets::parse_backbone_id(backbone_id));
  ck.embedding_dim = ck.backbone->feature_dim();
  ck.config_hash = config_hash;
  return ck;
}

void EncoderCheckpoint::save(const std::filesystem::path& path) const {
  const nlohmann::json header = {{"backbone_id", backbone_id}, {"d", embedding_dim}, {"config_hash", config_hash}};
  const std::string head = header.dump();
  const std::string blob = nets::serialize(*backbone);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write checkpoint " + tmp.string());
    os.write(kMagic, sizeof kMagic);
    write_u64(os, head.size());
    os.write(head.data(), static_cast<std::streamsize>(head.size()));
    write_u64(os, blob.size());
    os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!os) throw DataError("short write on checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

EncoderCheckpoint EncoderCheckpoint::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  char magic[sizeof kMagic];
  is.read(magic, sizeof magic);
  if (!is || !std::equal(magic, magic + sizeof magic, kMagic)) throw DataError(path.string() + " is not an encoder checkpoint");
  std::string head(read_u64(is), '\0');
  is.read(head.data(), static_cast<std::streamsize>(head.size()));
  std::string blob(read_u64(is), '\0');
  is.read(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!is) throw DataError("truncated checkpoint " + path.string());
  const auto header = nlohmann::json::parse(head);
  auto ck = fresh(header.at("backbone_id").get<std::string>(), header.at("config_hash").get<std::string>());
  if (header.at("d").get<int>() != ck.embedding_dim)
    throw DataError("checkpoint header dimension disagrees with backbone " + ck.backbone_id);
  nets::deserialize(*ck.backbone, blob);
  return ck;
}

TrainOutcome train_ssl(const Dataset& data, const SslConfig& cfg, const std::filesystem::path& checkpoint_path) {
  cfg.validate();
  if (data.size() < 2) throw DataError("ssl training needs at least 2 images");
  torch::manual_seed(cfg.seed);
  const auto opts = nets::parse_backbone_id(cfg.backbone);
  const std::string config_hash = cfg.hash();
  const bool byol = cfg.method == SslMethod::byol;

  const torch::Device device = nets::compute_device();
  auto online = std::make_shared<Branch>(opts, cfg.hidden_dim, cfg.proj_dim);
  auto target = std::make_shared<Branch>(opts, cfg.hidden_dim, cfg.proj_dim);
  online->to(device);
  target->to(device);
  nets::copy_state(*target, *online);
  for (auto& p : target->parameters()) p.set_requires_grad(false);
  torch::nn::Sequential predictor{nullptr};
  std::vector<torch::Tensor> params = online->parameters();
  if (byol) {
    predictor = nets::make_mlp(cfg.proj_dim, cfg.hidden_dim, cfg.proj_dim);
    predictor->to(device);
    for (auto& p : predictor->parameters()) params.push_back(p);
  }
  torch::optim::SGD optimizer(params, torch::optim::SGDOptions(cfg.lr).momentum(cfg.momentum).weight_decay(cfg.weight_decay));

  torch::Tensor queue;
  std::int64_t queue_ptr = 0;
  if (!byol && cfg.queue_size > 0) {
    queue = torch::nn::functional::normalize(torch::randn({cfg.queue_size, cfg.proj_dim}),
                                             torch::nn::functional::NormalizeFuncOptions().dim(1))
                .to(device);
  }

  const std::size_t n = data.size();
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), n);
  const long steps_per_epoch = static_cast<long>(n / batch);
  const long total_steps = steps_per_epoch * cfg.epochs;
  const LossSpec spec{cfg.method, cfg.mix.mode, cfg.temperature};
  const Rng root(cfg.seed);

  auto make_checkpoint = [&] {
    EncoderCheckpoint ck;
    ck.backbone_id = cfg.backbone;
    ck.backbone = nets::ResNet(opts);
    nets::copy_state(*ck.backbone, *online->backbone);
    ck.embedding_dim = ck.backbone->feature_dim();
    ck.config_hash = config_hash;
    return ck;
  };

  TrainLog log;
  EncoderCheckpoint last_good = make_checkpoint();  // refreshed after every finished epoch
  const auto t0 = std::chrono::steady_clock::now();
  long step = 0;
  online->train();
  target->train();
  if (predictor) predictor->train();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng epoch_rng = root.split(static_cast<std::uint64_t>(epoch));
    const auto order = epoch_rng.permutation(n);
    double epoch_sum = 0.0;
    for (long b = 0; b < steps_per_epoch; ++b, ++step) {
      Rng step_rng = epoch_rng.split(static_cast<std::uint64_t>(b) + 1);
      std::vector<std::size_t> idx(order.begin() + static_cast<long>(b * batch),
                                   order.begin() + static_cast<long>((b + 1) * batch));
      const auto v1 = nets::to_tensor(augmented_views(data, idx, cfg.augment, step_rng)).to(device);
      const auto v2 = nets::to_tensor(augmented_views(data, idx, cfg.augment, step_rng)).to(device);
      const double lr = cosine_schedule(cfg.lr, step, total_steps);
      for (auto& group : optimizer.param_groups()) static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);

      torch::Tensor loss, keys;
      try {
        const auto m1 = apply_mix(v1, cfg.mix, step_rng);
        if (byol) {
          const auto m2 = apply_mix(v2, cfg.mix, step_rng);
          const auto p1 = predictor->forward(online->forward(nets::normalize_input(m1.mixed)));
          const auto p2 = predictor->forward(online->forward(nets::normalize_input(m2.mixed)));
          torch::Tensor z1, z2;
          {
            torch::NoGradGuard guard;
            z1 = target->forward(nets::normalize_input(v1));
            z2 = target->forward(nets::normalize_input(v2));
          }
          loss = ssl_loss(spec, p1, z2, m1.donors, m1.lambdas) + ssl_loss(spec, p2, z1, m2.donors, m2.lambdas);
        } else {
          const auto q = online->forward(nets::normalize_input(m1.mixed));
          {
            torch::NoGradGuard guard;
            keys = torch::nn::functional::normalize(target->forward(nets::normalize_input(v2)),
                                                    torch::nn::functional::NormalizeFuncOptions().dim(1));
          }
          loss = ssl_loss(spec, q, keys, m1.donors, m1.lambdas, queue);
        }
      } catch (const TrainingError& e) {
        if (!checkpoint_path.empty()) last_good.save(checkpoint_path);
        throw TrainingError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(step) + (checkpoint_path.empty() ? "" : "; last good weights saved"));
      }

      optimizer.zero_grad();
      loss.backward();
      optimizer.step();

      const double m = byol ? 1.0 - (1.0 - cfg.ema) * (std::cos(std::numbers::pi * step / std::max(1L, total_steps)) + 1.0) / 2.0
                            : cfg.ema;
      nets::ema_update(*target, *online, m);
      if (queue.defined() && keys.defined()) {
        torch::NoGradGuard guard;
        for (std::int64_t i = 0; i < keys.size(0); ++i) {
          queue[queue_ptr].copy_(keys[i]);
          queue_ptr = (queue_ptr + 1) % queue.size(0);
        }
      }
      const double value = loss.item<double>();
      log.step_loss.push_back(value);
      epoch_sum += value;
    }
    log.epoch_loss.push_back(epoch_sum / static_cast<double>(std::max(1L, steps_per_epoch)));
    last_good = make_checkpoint();
    log::info("ssl epoch ", epoch + 1, "/", cfg.epochs, " loss ", log.epoch_loss.back());
  }
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  TrainOutcome out{make_checkpoint(), std::move(log)};
  if (!checkpoint_path.empty()) out.checkpoint.save(checkpoint_path);
  return out;
}

void save_train_log(const TrainLog& log, const std::filesystem::path& path) {
  const nlohmann::json j = {{"epoch_loss", log.epoch_loss}, {"step_loss", log.step_loss}, {"seconds", log.seconds}};
  std::ofstream(path) << j.dump(2) << '\n';
}

TorchEncoder::TorchEncoder(EncoderCheckpoint checkpoint, int batch_size)
    : checkpoint_(std::move(checkpoint)), batch_size_(batch_size) {
  if (!checkpoint_.backbone) throw ConfigError("TorchEncoder needs a backbone");
}

RowMatrix TorchEncoder::embed(std::span<const Image> images) {
  RowMatrix out(static_cast<Eigen::Index>(images.size()), checkpoint_.embedding_dim);
  torch::NoGradGuard guard;
  checkpoint_.backbone->eval();
  for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch_size_)) {
    const std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(batch_size_), images.size() - start);
    const auto feats = checkpoint_.backbone->forward(nets::normalize_input(nets::to_tensor(images.subspan(start, len))))
                           .contiguous();
    std::copy_n(feats.data_ptr<float>(), feats.numel(), out.data() + start * static_cast<std::size_t>(checkpoint_.embedding_dim));
  }
  return out;
}

HeatMap TorchEncoder::heatmap(const Image& image, const Eigen::VectorXf& center) {
  auto& net = checkpoint_.backbone;
  net->eval();
  const auto x = nets::normalize_input(nets::to_tensor(std::span<const Image>(&image, 1)));
  const auto maps = net->feature_map(x);
  const auto emb = maps.mean({2, 3});
  const auto c = torch::from_blob(const_cast<float*>(center.data()), {1, center.size()}, torch::kFloat32).clone();
  const auto logit = torch::nn::functional::cosine_similarity(emb, c, torch::nn::functional::CosineSimilarityFuncOptions().dim(1)).sum();
  const auto grads = torch::autograd::grad({logit}, {maps})[0];
  const auto weights = grads.mean({2, 3}, true);
  auto cam = torch::relu((weights * maps).sum(1, true)).detach();
  cam = torch::nn::functional::interpolate(
      cam, torch::nn::functional::InterpolateFuncOptions()
               .size(std::vector<std::int64_t>{image.height(), image.width()})
               .mode(torch::kBilinear)
               .align_corners(false));
  cam = cam.contiguous();

  HeatMap hm;
  hm.height = image.height();
  hm.width = image.width();
  hm.values.assign(cam.data_ptr<float>(), cam.data_ptr<float>() + cam.numel());
  float peak = 0.0f;
  for (float& v : hm.values) {
    if (!std::isfinite(v)) v = 0.0f;
    peak = std::max(peak, v);
  }
  hm.degenerate = !(peak > 0.0f);
  return hm;
}

}  // namespace patchsearch::ssl

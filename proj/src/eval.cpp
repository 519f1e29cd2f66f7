#include "patchsearch/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "json.hpp"

#include "patchsearch/cluster.hpp"
#include "patchsearch/errors.hpp"
#include "patchsearch/logging.hpp"
#include "patchsearch/trigger_scope.hpp"

namespace patchsearch::eval {

namespace {

void require_target(const DatasetManifest& val, int target) {
  if (target < 0 || target >= val.num_classes())
    throw ConfigError("target category " + std::to_string(target) + " absent from the validation labels");
}

std::vector<int> labels_of(const DatasetManifest& m) {
  std::vector<int> out;
  for (const auto& r : m.records()) out.push_back(r.label);
  return out;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size, Rng& rng) {
  const auto order = rng.permutation(n);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += static_cast<std::size_t>(batch_size))
    out.emplace_back(order.begin() + static_cast<long>(s),
                     order.begin() + static_cast<long>(std::min(n, s + static_cast<std::size_t>(batch_size))));
  return out;
}

}  // namespace

double attack_success_rate(double fp, double denominator) {
  if (denominator <= 0.0) throw ConfigError("ASR denominator must be positive");
  return fp * 100.0 / denominator;
}

std::size_t asr_denominator(const DatasetManifest& val, int target) {
  return val.size() - val.count_label(target);
}

MetricTriple compute_metrics(const std::vector<int>& predicted, const DatasetManifest& val, int target) {
  if (predicted.size() != val.size()) throw ConfigError("one prediction per validation image expected");
  require_target(val, target);
  std::size_t correct = 0, fp = 0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    correct += predicted[i] == val[i].label;
    fp += val[i].label != target && predicted[i] == target;
  }
  MetricTriple m;
  m.acc = val.empty() ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(val.size());
  m.fp = static_cast<double>(fp);
  m.denominator = static_cast<double>(asr_denominator(val, target));
  m.asr = attack_success_rate(m.fp, m.denominator);
  return m;
}

MetricTriple average(const std::vector<MetricTriple>& runs) {
  if (runs.empty()) throw ConfigError("average of no runs");
  MetricTriple m;
  for (const auto& r : runs) {
    m.acc += r.acc;
    m.fp += r.fp;
    m.asr += r.asr;
    m.denominator += r.denominator;
  }
  const auto n = static_cast<double>(runs.size());
  m.acc /= n;
  m.fp /= n;
  m.asr /= n;
  m.denominator /= n;
  return m;
}

std::vector<std::size_t> stratified_subset(const DatasetManifest& manifest, double fraction, std::uint64_t seed) {
  if (fraction <= 0.0 || fraction > 1.0) throw ConfigError("subset fraction must lie in (0, 1]");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < manifest.size(); ++i) by_class[manifest[i].label].push_back(i);
  Rng rng(seed);
  std::vector<std::size_t> out;
  for (auto& [label, members] : by_class) {
    const auto take = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(fraction * static_cast<double>(members.size()))));
    Rng class_rng = rng.split(static_cast<std::uint64_t>(label));
    for (std::size_t j : class_rng.sample_without_replacement(members.size(), std::min(take, members.size())))
      out.push_back(members[j]);
  }
  for (int c = 0; c < manifest.num_classes(); ++c)
    if (!by_class.contains(c)) log::warn("class ", c, " missing from the labelled subset; probe trained without it");
  std::sort(out.begin(), out.end());
  return out;
}

ProbeConfig ProbeConfig::from_config(const Config& c) {
  ProbeConfig p;
  p.fraction = c.get_double("fraction", p.fraction);
  p.lr = c.get_double("lr", p.lr);
  p.epochs = static_cast<int>(c.get_int("epochs", p.epochs));
  p.batch_size = static_cast<int>(c.get_int("batch_size", p.batch_size));
  p.momentum = c.get_double("momentum", p.momentum);
  p.weight_decay = c.get_double("weight_decay", p.weight_decay);
  p.decay_epochs = c.get_int_list("decay_epochs", p.decay_epochs);
  p.seed = static_cast<std::uint64_t>(c.get_int("seed", 0));
  return p;
}

Config ProbeConfig::to_config() const {
  Config c;
  c.set("fraction", nlohmann::json(fraction).dump());
  c.set("lr", nlohmann::json(lr).dump());
  c.set("epochs", std::to_string(epochs));
  c.set("batch_size", std::to_string(batch_size));
  c.set("momentum", nlohmann::json(momentum).dump());
  c.set("weight_decay", nlohmann::json(weight_decay).dump());
  std::string decay;
  for (std::size_t i = 0; i < decay_epochs.size(); ++i) decay += (i ? "," : "") + std::to_string(decay_epochs[i]);
  c.set("decay_epochs", decay);
  c.set("seed", std::to_string(seed));
  return c;
}

RowMatrix ProbeHead::normalize(RowMatrix features) const {
  cluster::normalize_rows(features);
  return ((features.rowwise() - mean).array().rowwise() / stddev.array()).matrix();
}

std::vector<int> ProbeHead::predict(const RowMatrix& raw_features) const {
  const RowMatrix x = normalize(raw_features);
  const Eigen::MatrixXf logits = (x * weights.transpose()).rowwise() + bias.transpose();
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).maxCoeff(&best);
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

ProbeHead fit_probe(const RowMatrix& raw_features, const std::vector<int>& labels, int num_classes,
                    const ProbeConfig& config) {
  if (raw_features.rows() == 0 || static_cast<std::size_t>(raw_features.rows()) != labels.size())
    throw ConfigError("fit_probe: need one label per feature row");
  ProbeHead head;
  RowMatrix unit = raw_features;
  cluster::normalize_rows(unit);
  head.mean = unit.colwise().mean();
  const RowMatrix centered = unit.rowwise() - head.mean;
  head.stddev = (centered.array().square().colwise().sum() / static_cast<float>(unit.rows())).sqrt().matrix();
  for (Eigen::Index j = 0; j < head.stddev.size(); ++j)
    if (!(head.stddev(j) > 1e-8f)) head.stddev(j) = 1.0f;
  const RowMatrix x = head.normalize(raw_features);

  torch::manual_seed(config.seed);
  const auto d = static_cast<long>(x.cols());
  torch::nn::Linear linear(d, num_classes);
  const auto xt = torch::from_blob(const_cast<float*>(x.data()), {x.rows(), d}, torch::kFloat32).clone();
  const auto yt = torch::tensor(std::vector<std::int64_t>(labels.begin(), labels.end()), torch::kLong);
  torch::optim::SGD opt(linear->parameters(),
                        torch::optim::SGDOptions(config.lr).momentum(config.momentum).weight_decay(config.weight_decay));
  Rng rng(config.seed);
  double lr = config.lr;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    if (std::find(config.decay_epochs.begin(), config.decay_epochs.end(), epoch) != config.decay_epochs.end()) lr *= 0.1;
    for (auto& g : opt.param_groups()) static_cast<torch::optim::SGDOptions&>(g.options()).lr(lr);
    for (const auto& batch : epoch_batches(labels.size(), config.batch_size, rng)) {
      const auto idx = torch::tensor(std::vector<std::int64_t>(batch.begin(), batch.end()), torch::kLong);
      const auto loss = torch::nn::functional::cross_entropy(linear(xt.index_select(0, idx)), yt.index_select(0, idx));
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }
  const auto w = linear->weight.detach().contiguous();
  const auto b = linear->bias.detach().contiguous();
  head.weights = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      w.data_ptr<float>(), num_classes, d);
  head.bias = Eigen::Map<const Eigen::VectorXf>(b.data_ptr<float>(), num_classes);
  return head;
}

ProbeHead train_probe(Encoder& encoder, const Dataset& train, const ProbeConfig& config) {
  const auto subset = train.subset(stratified_subset(train.manifest, config.fraction, config.seed));
  const auto emb = cluster::extract_embeddings(encoder, subset);
  RowMatrix raw = emb.rows;
  return fit_probe(raw, labels_of(subset.manifest), train.manifest.num_classes(), config);
}

MetricTriple evaluate(const ProbeHead& probe, Encoder& encoder, const Dataset& val, int target) {
  require_target(val.manifest, target);
  if (target >= probe.num_classes()) throw ConfigError("target category outside the probe's label set");
  return compute_metrics(probe.predict(encoder.embed(val.images)), val.manifest, target);
}

FinetuneConfig FinetuneConfig::from_config(const Config& c) {
  FinetuneConfig f;
  f.fraction = c.get_double("fraction", f.fraction);
  f.lr = c.get_double("lr", f.lr);
  f.epochs = static_cast<int>(c.get_int("epochs", f.epochs));
  f.batch_size = static_cast<int>(c.get_int("batch_size", f.batch_size));
  f.momentum = c.get_double("momentum", f.momentum);
  f.weight_decay = c.get_double("weight_decay", f.weight_decay);
  f.strong_augment = c.get_bool("strong_augment", f.strong_augment);
  f.seed = static_cast<std::uint64_t>(c.get_int("seed", 0));
  return f;
}

Config FinetuneConfig::to_config() const {
  Config c;
  c.set("fraction", nlohmann::json(fraction).dump());
  c.set("lr", nlohmann::json(lr).dump());
  c.set("epochs", std::to_string(epochs));
  c.set("batch_size", std::to_string(batch_size));
  c.set("momentum", nlohmann::json(momentum).dump());
  c.set("weight_decay", nlohmann::json(weight_decay).dump());
  c.set("strong_augment", strong_augment ? "true" : "false");
  c.set("seed", std::to_string(seed));
  return c;
}

std::vector<int> FinetunedModel::predict(std::span<const Image> images, int batch_size) {
  torch::NoGradGuard guard;
  backbone->eval();
  std::vector<int> out;
  for (std::size_t s = 0; s < images.size(); s += static_cast<std::size_t>(batch_size)) {
    const std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(batch_size), images.size() - s);
    const auto pred = head(backbone->forward(nets::normalize_input(nets::to_tensor(images.subspan(s, len))))).argmax(1).contiguous();
    out.insert(out.end(), pred.data_ptr<std::int64_t>(), pred.data_ptr<std::int64_t>() + pred.numel());
  }
  return out;
}

FinetunedModel finetune_probe(const ssl::EncoderCheckpoint& checkpoint, const Dataset& train, const FinetuneConfig& config) {
  torch::manual_seed(config.seed);
  const auto subset = train.subset(stratified_subset(train.manifest, config.fraction, config.seed));
  FinetunedModel model;
  model.backbone = nets::ResNet(nets::parse_backbone_id(checkpoint.backbone_id));
  nets::copy_state(*model.backbone, *checkpoint.backbone);
  model.head = torch::nn::Linear(model.backbone->feature_dim(), train.manifest.num_classes());
  std::vector<torch::Tensor> params = model.backbone->parameters();
  for (auto& p : model.head->parameters()) params.push_back(p);
  torch::optim::SGD opt(params, torch::optim::SGDOptions(config.lr).momentum(config.momentum).weight_decay(config.weight_decay));

  auto aug = augment::AugmentConfig::identity();
  aug.flip_prob = 0.5;
  aug.crop_scale_min = 0.8;
  if (config.strong_augment) aug = augment::AugmentConfig::moco_v2();
  const auto labels = labels_of(subset.manifest);
  Rng rng(config.seed);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    model.backbone->train();
    double sum = 0.0;
    const auto batches = epoch_batches(subset.size(), config.batch_size, rng);
    for (const auto& batch : batches) {
      std::vector<Image> views;
      std::vector<std::int64_t> ys;
      for (std::size_t i : batch) {
        views.push_back(augment::augment(subset.images[i], aug, rng));
        ys.push_back(labels[i]);
      }
      const auto logits = model.head(model.backbone->forward(nets::normalize_input(nets::to_tensor(views))));
      const auto loss = torch::nn::functional::cross_entropy(logits, torch::tensor(ys, torch::kLong));
      if (!std::isfinite(loss.item<double>())) throw TrainingError("non-finite finetune loss at epoch " + std::to_string(epoch));
      opt.zero_grad();
      loss.backward();
      opt.step();
      sum += loss.item<double>();
    }
    model.epoch_loss.push_back(sum / static_cast<double>(std::max<std::size_t>(1, batches.size())));
  }
  return model;
}

MetricTriple evaluate(FinetunedModel& model, const Dataset& val, int target) {
  require_target(val.manifest, target);
  return compute_metrics(model.predict(val.images), val.manifest, target);
}

std::vector<PotencyRow> potency_analysis(Encoder& encoder, const ProbeHead& probe, const Dataset& train, const Dataset& val,
                                         const PotencyOptions& options) {
  const int classes = train.manifest.num_classes();
  Rng rng(options.seed);
  std::vector<PotencyRow> rows;
  for (int c = 0; c < classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < train.size(); ++i)
      if (train.manifest[i].label == c) members.push_back(i);
    PotencyRow row;
    row.category = c;
    Rng class_rng = rng.split(static_cast<std::uint64_t>(c));
    const auto picks = class_rng.sample_without_replacement(
        members.size(), std::min<std::size_t>(members.size(), static_cast<std::size_t>(options.patches_per_category)));
    for (std::size_t pick : picks) {
      const std::size_t src = members[pick];
      RowMatrix e = encoder.embed(std::span<const Image>(&train.images[src], 1));
      cluster::normalize_rows(e);
      const Eigen::VectorXf center = e.row(0).transpose();
      const auto cand = scope::extract_candidate(train.images[src], encoder.heatmap(train.images[src], center), options.w);
      std::vector<Image> pasted;
      Rng paste_rng = class_rng.split(src);
      for (std::size_t v = 0; v < val.size(); ++v) {
        if (val.manifest[v].label == c) continue;
        Image img = val.images[v];
        const Rect at = scope::scoring_placement(img.height(), img.width(), options.w, options.margin_fraction, paste_rng);
        paste(img, cand.patch, at.x, at.y);
        pasted.push_back(std::move(img));
      }
      const auto pred = probe.predict(encoder.embed(pasted));
      const double fp = static_cast<double>(std::count(pred.begin(), pred.end(), c));
      if (fp > row.max_fp || row.best_source_id.empty()) {
        row.max_fp = fp;
        row.best_source_id = train.manifest[src].id;
      }
    }
    rows.push_back(row);
  }
  return rows;
}

void save_potency(const std::vector<PotencyRow>& rows, const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) j.push_back({{"category", r.category}, {"max_fp", r.max_fp}, {"best_source_id", r.best_source_id}});
  std::ofstream(path) << j.dump(2) << '\n';
}

void save_metrics(const MetricTriple& m, const std::filesystem::path& path) {
  const nlohmann::json j = {{"acc", m.acc}, {"fp", m.fp}, {"asr", m.asr}, {"denominator", m.denominator}};
  std::ofstream(path) << j.dump(2) << '\n';
}

MetricTriple load_metrics(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("missing metrics file " + path.string());
  const auto j = nlohmann::json::parse(is);
  return {j.at("acc").get<double>(), j.at("fp").get<double>(), j.at("asr").get<double>(), j.at("denominator").get<double>()};
}

}  // namespace patchsearch::eval

#include "patchsearch/sieve.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <unordered_set>

#include "json.hpp"

#include "patchsearch/errors.hpp"
#include "patchsearch/logging.hpp"

namespace patchsearch::sieve {

std::pair<int, int> paste_side_range(int image_side) {
  const int lo = std::max(1, static_cast<int>(std::lround(20.0 * image_side / 224.0)));
  const int hi = std::max(lo, static_cast<int>(std::lround(80.0 * image_side / 224.0)));
  return {lo, hi};
}

SieveDataset build_sieve_dataset(const Dataset& data, const std::vector<std::size_t>& ranked,
                                 std::vector<Image> patches, int k, double noise_cut) {
  if (patches.empty()) throw ConfigError("sieve needs at least one candidate patch");
  if (k < 1) throw ConfigError("proxy-val k must be at least 1");
  if (noise_cut < 0.0 || noise_cut > 1.0) throw ConfigError("noise_cut must lie in [0, 1]");
  const auto uk = static_cast<std::size_t>(k);
  if (2 * uk > ranked.size())
    throw ConfigError("proxy-val k=" + std::to_string(k) + " needs " + std::to_string(2 * uk) + " scored samples, have " +
                      std::to_string(ranked.size()));
  if (data.images.empty()) throw DataError("sieve dataset built from an empty dataset");

  SieveDataset out;
  out.patches = std::move(patches);
  std::unordered_set<std::size_t> excluded;
  for (std::size_t i = 0; i < uk; ++i) {
    out.proxy_val.push_back(ranked[i]);
    out.proxy_labels.push_back(1);
  }
  for (std::size_t i = ranked.size() - uk; i < ranked.size(); ++i) {
    out.proxy_val.push_back(ranked[i]);
    out.proxy_labels.push_back(0);
  }
  excluded.insert(out.proxy_val.begin(), out.proxy_val.end());
  out.excluded_top = static_cast<std::size_t>(std::floor(noise_cut * static_cast<double>(ranked.size()) + 1e-9));
  for (std::size_t i = 0; i < out.excluded_top; ++i) excluded.insert(ranked[i]);
  for (std::size_t i = 0; i < data.size(); ++i)
    if (!excluded.contains(i)) out.label0_pool.push_back(i);
  if (out.label0_pool.empty()) throw DataError("sieve label-0 pool is empty");

  const int side = std::min(data.images[0].height(), data.images[0].width());
  std::tie(out.paste_min, out.paste_max) = paste_side_range(side);
  return out;
}

SieveDataset build_sieve_dataset(const Dataset& data, const search::SearchResult& result, int k, double noise_cut) {
  std::vector<std::size_t> ranked;
  ranked.reserve(result.ranking.size());
  for (std::size_t pos = 0; pos < result.ranking.size(); ++pos) ranked.push_back(result.ranked(pos).source_index);
  std::vector<Image> patches;
  for (auto& c : search::select_top_k(result, k)) patches.push_back(c.patch);
  return build_sieve_dataset(data, ranked, std::move(patches), k, noise_cut);
}

Image synthesize_poison(const Image& base, const SieveDataset& sieve, Rng& rng) {
  const auto& patch = sieve.patches[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(sieve.patches.size()) - 1))];
  int side = static_cast<int>(rng.uniform_int(sieve.paste_min, sieve.paste_max));
  side = std::min({side, base.height(), base.width()});
  const Image resized = resize_bilinear(patch, side, side);
  const int x = static_cast<int>(rng.uniform_int(0, base.width() - side));
  const int y = static_cast<int>(rng.uniform_int(0, base.height() - side));
  Image out = base;
  paste(out, resized, x, y);
  return out;
}

SieveHyper SieveHyper::from_config(const Config& c) {
  SieveHyper h;
  h.backbone = c.get("backbone", h.backbone);
  h.lr = c.get_double("lr", h.lr);
  h.batch_size = static_cast<int>(c.get_int("batch_size", h.batch_size));
  h.max_iters = static_cast<int>(c.get_int("max_iters", h.max_iters));
  h.weight_decay = c.get_double("weight_decay", h.weight_decay);
  h.momentum = c.get_double("momentum", h.momentum);
  h.eval_every = static_cast<int>(c.get_int("eval_every", h.eval_every));
  h.patience = static_cast<int>(c.get_int("patience", h.patience));
  h.ensemble_size = static_cast<int>(c.get_int("ensemble_size", h.ensemble_size));
  h.augment = c.get_bool("augment", h.augment);
  h.validate();
  return h;
}

Config SieveHyper::to_config() const {
  Config c;
  c.set("backbone", backbone);
  c.set("lr", nlohmann::json(lr).dump());
  c.set("batch_size", std::to_string(batch_size));
  c.set("max_iters", std::to_string(max_iters));
  c.set("weight_decay", nlohmann::json(weight_decay).dump());
  c.set("momentum", nlohmann::json(momentum).dump());
  c.set("eval_every", std::to_string(eval_every));
  c.set("patience", std::to_string(patience));
  c.set("ensemble_size", std::to_string(ensemble_size));
  c.set("augment", augment ? "true" : "false");
  return c;
}

void SieveHyper::validate() const {
  nets::parse_backbone_id(backbone);
  if (lr <= 0.0) throw ConfigError("sieve lr must be positive");
  if (batch_size < 2) throw ConfigError("sieve batch_size must be at least 2");
  if (max_iters < 0) throw ConfigError("sieve max_iters must be non-negative");
  if (eval_every < 1) throw ConfigError("sieve eval_every must be positive");
  if (patience < 1) throw ConfigError("sieve patience must be positive");
  if (ensemble_size < 1) throw ConfigError("sieve ensemble_size must be positive");
}

bool EarlyStopper::update(double f1) {
  const long rounded = std::lround(f1 * 10000.0);
  if (has_last_ && last_ == rounded) ++unchanged_;
  else unchanged_ = 0;
  last_ = rounded;
  has_last_ = true;
  return unchanged_ >= patience_;
}

double f1_score(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size()) throw ConfigError("f1_score: length mismatch");
  long tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (predicted[i] && truth[i]) ++tp;
    else if (predicted[i]) ++fp;
    else if (truth[i]) ++fn;
  }
  const long denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

SieveNetImpl::SieveNetImpl(const std::string& backbone_id) {
  backbone_ = register_module("backbone", nets::ResNet(nets::parse_backbone_id(backbone_id)));
  head_ = register_module("head", torch::nn::Linear(backbone_->feature_dim(), 1));
}

torch::Tensor SieveNetImpl::forward(const torch::Tensor& x) { return head_(backbone_->forward(x)).squeeze(1); }

std::vector<double> SieveMember::predict(std::span<const Image> images, int batch_size) {
  std::vector<double> out;
  out.reserve(images.size());
  torch::NoGradGuard guard;
  net->eval();
  for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(batch_size), images.size() - start);
    const auto probs = torch::sigmoid(net->forward(nets::normalize_input(nets::to_tensor(images.subspan(start, len)))))
                           .to(torch::kFloat64).contiguous();
    out.insert(out.end(), probs.data_ptr<double>(), probs.data_ptr<double>() + probs.numel());
  }
  return out;
}

SieveMember train_sieve_member(const Dataset& data, const SieveDataset& sieve, const SieveHyper& hyper,
                               std::uint64_t seed) {
  hyper.validate();
  const bool has0 = std::count(sieve.proxy_labels.begin(), sieve.proxy_labels.end(), 0) > 0;
  const bool has1 = std::count(sieve.proxy_labels.begin(), sieve.proxy_labels.end(), 1) > 0;
  if (!has0 || !has1) throw DataError("proxy validation set is degenerate: it holds only one class");

  torch::manual_seed(seed);
  SieveMember member;
  member.seed = seed;
  member.net = SieveNet(hyper.backbone);
  Rng rng(seed);

  std::vector<Image> val_images;
  for (std::size_t i : sieve.proxy_val) val_images.push_back(data.images[i]);

  torch::optim::SGD optimizer(member.net->parameters(),
                              torch::optim::SGDOptions(hyper.lr).momentum(hyper.momentum).weight_decay(hyper.weight_decay));
  const int n0 = hyper.batch_size / 2, n1 = hyper.batch_size - n0;
  const auto& pool = sieve.label0_pool;
  auto order = rng.permutation(pool.size());
  std::size_t cursor = 0;
  const auto aug = hyper.augment ? hyper.augment_config : augment::AugmentConfig::identity();

  EarlyStopper stopper(hyper.patience);
  member.best_f1 = -1.0;
  for (int it = 0;; ++it) {
    if (it % hyper.eval_every == 0 || it == hyper.max_iters) {
      const auto probs = member.predict(val_images);
      std::vector<int> predicted(probs.size());
      for (std::size_t i = 0; i < probs.size(); ++i) predicted[i] = probs[i] > 0.5 ? 1 : 0;
      const double f1 = f1_score(predicted, sieve.proxy_labels);
      member.trace.push_back({it, f1});
      if (f1 > member.best_f1) {
        member.best_f1 = f1;
        member.best_iteration = it;
      }
      member.stopped_iteration = it;
      if (stopper.update(f1)) {
        member.early_stopped = true;
        break;
      }
    }
    if (it >= hyper.max_iters) break;

    std::vector<Image> batch;
    std::vector<float> labels;
    batch.reserve(static_cast<std::size_t>(hyper.batch_size));
    for (int j = 0; j < n0; ++j) {
      if (cursor == order.size()) {
        order = rng.permutation(pool.size());
        cursor = 0;
      }
      batch.push_back(augment::augment(data.images[pool[order[cursor++]]], aug, rng));
      labels.push_back(0.0f);
    }
    for (int j = 0; j < n1; ++j) {
      const auto& base = data.images[pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(pool.size()) - 1))]];
      batch.push_back(augment::augment(synthesize_poison(base, sieve, rng), aug, rng));
      labels.push_back(1.0f);
    }
    const double lr = hyper.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * it / std::max(1, hyper.max_iters)));
    for (auto& group : optimizer.param_groups()) static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);

    member.net->train();
    const auto logits = member.net->forward(nets::normalize_input(nets::to_tensor(batch)));
    const auto target = torch::tensor(labels);
    const auto loss = torch::nn::functional::binary_cross_entropy_with_logits(logits, target);
    if (!std::isfinite(loss.item<double>()))
      throw TrainingError("non-finite sieve loss at iteration " + std::to_string(it) + " (seed " + std::to_string(seed) + ")");
    optimizer.zero_grad();
    loss.backward();
    optimizer.step();
  }
  // the classifier is kept as it was when training stopped
  log::info("sieve member seed ", seed, ": F1 ", member.trace.back().f1, " at stop (iteration ", member.stopped_iteration,
            member.early_stopped ? ", early" : "", "), best ", member.best_f1, " at ", member.best_iteration);
  return member;
}

std::vector<double> SieveEnsemble::combine(const std::vector<std::vector<double>>& member_probs) {
  if (member_probs.empty()) throw ConfigError("ensemble has no members");
  const std::size_t n = member_probs[0].size();
  std::vector<double> out(n);
  std::vector<double> column(member_probs.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t m = 0; m < member_probs.size(); ++m) column[m] = member_probs[m].at(i);
    std::sort(column.begin(), column.end());
    double sum = 0.0;
    for (double v : column) sum += v;
    out[i] = sum / static_cast<double>(column.size());
  }
  return out;
}

std::vector<double> SieveEnsemble::predict(std::span<const Image> images, int batch_size) {
  std::vector<std::vector<double>> probs;
  for (auto& m : members) probs.push_back(m.predict(images, batch_size));
  return combine(probs);
}

SieveEnsemble train_sieve_ensemble(const Dataset& data, const SieveDataset& sieve, const SieveHyper& hyper,
                                   std::uint64_t seed) {
  SieveEnsemble ensemble;
  for (int m = 0; m < hyper.ensemble_size; ++m)
    ensemble.members.push_back(train_sieve_member(data, sieve, hyper, mix_seed(seed, static_cast<std::uint64_t>(m) + 1)));
  return ensemble;
}

void save_ensemble(const SieveEnsemble& ensemble, const SieveHyper& hyper, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["backbone"] = hyper.backbone;
  j["members"] = nlohmann::json::array();
  for (std::size_t m = 0; m < ensemble.members.size(); ++m) {
    const auto& mem = ensemble.members[m];
    const std::string file = "member_" + std::to_string(m) + ".pt";
    std::ofstream(dir / file, std::ios::binary) << nets::serialize(*mem.net);
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& p : mem.trace) trace.push_back({p.iteration, p.f1});
    j["members"].push_back({{"file", file}, {"seed", mem.seed}, {"best_f1", mem.best_f1},
                            {"best_iteration", mem.best_iteration}, {"stopped_iteration", mem.stopped_iteration},
                            {"early_stopped", mem.early_stopped}, {"f1_trace", trace}});
  }
  std::ofstream(dir / "ensemble.json") << j.dump(2) << '\n';
}

SieveEnsemble load_ensemble(const std::filesystem::path& dir) {
  std::ifstream is(dir / "ensemble.json");
  if (!is) throw DataError("missing " + (dir / "ensemble.json").string());
  const auto j = nlohmann::json::parse(is);
  SieveEnsemble ensemble;
  for (const auto& m : j.at("members")) {
    SieveMember mem;
    mem.net = SieveNet(j.at("backbone").get<std::string>());
    std::ifstream blob(dir / m.at("file").get<std::string>(), std::ios::binary);
    if (!blob) throw DataError("missing sieve member weights in " + dir.string());
    nets::deserialize(*mem.net, std::string(std::istreambuf_iterator<char>(blob), {}));
    mem.seed = m.at("seed").get<std::uint64_t>();
    mem.best_f1 = m.at("best_f1").get<double>();
    mem.best_iteration = m.at("best_iteration").get<int>();
    mem.stopped_iteration = m.at("stopped_iteration").get<int>();
    mem.early_stopped = m.at("early_stopped").get<bool>();
    for (const auto& p : m.at("f1_trace")) mem.trace.push_back({p.at(0).get<int>(), p.at(1).get<double>()});
    ensemble.members.push_back(std::move(mem));
  }
  return ensemble;
}

FilterReport make_report(const DatasetManifest& manifest, const std::vector<double>& probabilities) {
  if (probabilities.size() != manifest.size()) throw ConfigError("make_report: one probability per sample expected");
  FilterReport r;
  r.probabilities = probabilities;
  std::size_t poisons = 0;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const bool removed = probabilities[i] > 0.5;
    const bool poison = manifest[i].is_poison;
    poisons += poison;
    if (removed) r.removed_ids.push_back(manifest[i].id);
    if (removed && poison) ++r.true_positives;
    else if (removed) ++r.false_positives;
    else if (poison) ++r.false_negatives;
  }
  r.total_removed = r.removed_ids.size();
  if (r.total_removed > 0) r.precision = static_cast<double>(r.true_positives) / static_cast<double>(r.total_removed);
  if (poisons > 0) r.recall = static_cast<double>(r.true_positives) / static_cast<double>(poisons);
  return r;
}

DatasetManifest remove_samples(const DatasetManifest& manifest, const std::vector<std::string>& ids) {
  const std::unordered_set<std::string> drop(ids.begin(), ids.end());
  std::vector<SampleRecord> kept;
  for (const auto& rec : manifest.records())
    if (!drop.contains(rec.id)) kept.push_back(rec);
  return DatasetManifest(std::move(kept));
}

std::pair<DatasetManifest, FilterReport> sieve_filter(const Dataset& data, SieveEnsemble& ensemble) {
  auto report = make_report(data.manifest, ensemble.predict(data.images));
  for (const auto& m : ensemble.members) report.member_traces.push_back(m.trace);
  return {remove_samples(data.manifest, report.removed_ids), std::move(report)};
}

void save_filter_report(const FilterReport& report, const DatasetManifest& manifest, const std::filesystem::path& json_path,
                        const std::filesystem::path& csv_path) {
  nlohmann::json j;
  j["removed_ids"] = report.removed_ids;
  j["total_removed"] = report.total_removed;
  j["true_positives"] = report.true_positives;
  j["false_positives"] = report.false_positives;
  j["false_negatives"] = report.false_negatives;
  j["precision"] = report.precision ? nlohmann::json(*report.precision) : nlohmann::json(nullptr);
  j["recall"] = report.recall ? nlohmann::json(*report.recall) : nlohmann::json(nullptr);
  j["member_f1_traces"] = nlohmann::json::array();
  for (const auto& t : report.member_traces) {
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& p : t) trace.push_back({p.iteration, p.f1});
    j["member_f1_traces"].push_back(trace);
  }
  std::ofstream(json_path) << j.dump(2) << '\n';
  std::ofstream csv(csv_path);
  csv << "sample_id,probability,removed,is_poison\n";
  for (std::size_t i = 0; i < manifest.size(); ++i)
    csv << manifest[i].id << ',' << report.probabilities[i] << ',' << (report.probabilities[i] > 0.5) << ','
        << manifest[i].is_poison << '\n';
}

double precision_at_recall(const std::vector<double>& scores, const std::vector<bool>& is_poison, double recall) {
  if (scores.size() != is_poison.size()) throw ConfigError("precision_at_recall: length mismatch");
  const auto positives = static_cast<double>(std::count(is_poison.begin(), is_poison.end(), true));
  if (positives == 0) return 0.0;
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double best = 0.0;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) tp += is_poison[order[j++]];
    if (static_cast<double>(tp) / positives >= recall - 1e-12)
      best = std::max(best, static_cast<double>(tp) / static_cast<double>(j));
    i = j;
  }
  return best;
}

}  // namespace patchsearch::sieve

#include "patchsearch/pipeline.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

#include "patchsearch/cluster.hpp"
#include "patchsearch/errors.hpp"
#include "patchsearch/eval.hpp"
#include "patchsearch/forge.hpp"
#include "patchsearch/hashing.hpp"
#include "patchsearch/logging.hpp"
#include "patchsearch/oracle.hpp"
#include "patchsearch/plot.hpp"
#include "patchsearch/search.hpp"
#include "patchsearch/sieve.hpp"
#include "patchsearch/ssl.hpp"

namespace patchsearch::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::map<std::string, std::vector<std::string>>& stage_keys() {
  static const std::map<std::string, std::vector<std::string>> keys = {
      {"data", {"run.source", "run.seed", "oracle.", "data.", "forge."}},
      {"defense", {"defense.", "run.seed"}},
      {"cluster", {"cluster.", "run.seed"}},
      {"search", {"search.", "scoring.", "run.seed"}},
      {"sieve", {"sieve.", "run.seed"}},
      {"filter", {"filter."}},
      {"final", {"final.", "run.seed"}},
      {"baseline", {"final.", "baseline.", "run.seed"}},
      {"evaluate", {"eval.", "run.seed"}},
  };
  return keys;
}

std::vector<std::string> upstream_of(const std::string& stage, bool with_baseline) {
  if (stage == "data") return {};
  if (stage == "defense" || stage == "baseline") return {"data"};
  if (stage == "cluster") return {"defense"};
  if (stage == "search") return {"cluster"};
  if (stage == "sieve") return {"search"};
  if (stage == "filter") return {"sieve"};
  if (stage == "final") return {"filter"};
  if (stage == "evaluate") return with_baseline ? std::vector<std::string>{"final", "baseline"} : std::vector<std::string>{"final"};
  throw ConfigError("unknown stage '" + stage + "'");
}

void write_json(const fs::path& path, const json& j) { std::ofstream(path) << j.dump(2) << '\n'; }

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("missing artifact " + path.string());
  return json::parse(is);
}

std::uint64_t run_seed(const Config& c) { return static_cast<std::uint64_t>(c.get_int("run.seed", 0)); }
bool is_oracle(const Config& c) { return c.get("run.source", "oracle") == "oracle"; }

oracle::OracleSpec oracle_spec(const Config& c) {
  oracle::OracleSpec s;
  s.num_samples = static_cast<int>(c.get_int("oracle.num_samples", s.num_samples));
  s.num_latent_classes = static_cast<int>(c.get_int("oracle.classes", s.num_latent_classes));
  s.image_side = static_cast<int>(c.get_int("oracle.image_side", s.image_side));
  s.motif_side = static_cast<int>(c.get_int("oracle.motif_side", s.motif_side));
  s.noise_grid = static_cast<int>(c.get_int("oracle.noise_grid", s.noise_grid));
  s.noise_dims = static_cast<int>(c.get_int("oracle.noise_dims", s.noise_dims));
  s.noise_scale = c.get_double("oracle.noise_scale", s.noise_scale);
  s.match_threshold = c.get_double("oracle.match_threshold", s.match_threshold);
  s.heatmap_miss_rate = c.get_double("oracle.heatmap_miss_rate", s.heatmap_miss_rate);
  s.val_per_class = static_cast<int>(c.get_int("oracle.val_per_class", s.val_per_class));
  s.seed = static_cast<std::uint64_t>(c.get_int("oracle.seed", static_cast<long>(s.seed)));
  s.validate();
  return s;
}

Dataset load_split(const fs::path& dir, const std::string& manifest_name) {
  return load_dataset(DatasetManifest::load_jsonl(dir / manifest_name), dir);
}

/// Manifest whose paths resolve from anywhere.
DatasetManifest absolute_paths(DatasetManifest m, const fs::path& root) {
  for (auto& r : m.records())
    if (fs::path(r.path).is_relative()) r.path = fs::absolute(root / r.path).lexically_normal().string();
  return m;
}

Dataset select_ids(const Dataset& data, const DatasetManifest& keep) {
  std::vector<std::size_t> idx;
  for (const auto& r : keep.records()) {
    const auto i = data.manifest.index_of(r.id);
    if (!i) throw DataError("cleaned manifest names unknown sample '" + r.id + "'");
    idx.push_back(*i);
  }
  return data.subset(idx);
}

class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw ConfigError("run directory " + dir.string() + " is locked by another pipeline (" + path_.string() + ")");
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

struct Context {
  const RunConfig& run;
  std::map<std::string, StageRecord> stages;
  const Config& config() const { return run.config; }
  const fs::path& dir(const std::string& s) const { return stages.at(s).dir; }
};

// ---- stages -----------------------------------------------------------------

json stage_data(const Context& ctx, const fs::path& out) {
  const Config& c = ctx.config();
  const bool baseline = ctx.run.stage_enabled("baseline");
  json info;
  Dataset train, val, clean;
  forge::TriggerPatch trigger;
  forge::AttackConfig attack;
  if (is_oracle(c)) {
    const auto spec = oracle_spec(c);
    auto world = oracle::generate_oracle_dataset(spec, c.get_double("oracle.rate", 0.005),
                                                 static_cast<int>(c.get_int("oracle.target", 0)));
    oracle::save_spec(spec, out / "oracle_spec.json");
    train = std::move(world.train);
    val = std::move(world.val);
    trigger = world.trigger;
    attack = world.attack;
    if (baseline) clean = oracle::generate_oracle_dataset(spec, 0.0, attack.target_category).train;
  } else {
    const fs::path train_manifest = c.get("data.train_manifest");
    const fs::path val_manifest = c.get("data.val_manifest");
    const fs::path root = c.get("data.root", train_manifest.parent_path().string());
    clean = load_dataset(DatasetManifest::load_jsonl(train_manifest), root);
    val = load_dataset(DatasetManifest::load_jsonl(val_manifest), c.get("data.root", val_manifest.parent_path().string()));
    trigger = c.has("forge.trigger") ? forge::TriggerPatch::load_png(c.get("forge.trigger")) : forge::default_trigger(32);
    attack.target_category = static_cast<int>(c.get_int("forge.target", 0));
    attack.injection_rate = c.get_double("forge.rate", 0.005);
    attack.trigger_size = static_cast<int>(c.get_int("forge.trigger_size", 50));
    attack.margin_fraction = c.get_double("forge.margin", 0.25);
    attack.repeat_count = static_cast<int>(c.get_int("forge.repeat", 1));
    attack.rng_seed = static_cast<std::uint64_t>(c.get_int("forge.seed", static_cast<long>(run_seed(c))));
    train = c.get_bool("forge.enabled", true) ? forge::build_poisoned_dataset(clean, trigger, attack) : clean;
  }
  auto patched = forge::build_patched_valset(val, trigger, attack.trigger_size, attack.margin_fraction,
                                             mix_seed(attack.rng_seed, 0x5A11));
  save_dataset(train, out, "train_images", out / "train.jsonl");
  save_dataset(val, out, "val_images", out / "val.jsonl");
  save_dataset(patched, out, "val_patched_images", out / "val_patched.jsonl");
  if (baseline) save_dataset(clean, out, "clean_images", out / "clean_train.jsonl");
  write_png(trigger.pixels(), out / "trigger.png");
  info["attack"] = {{"target", attack.target_category},
                    {"rate", attack.injection_rate},
                    {"trigger_size", attack.trigger_size},
                    {"margin", attack.margin_fraction},
                    {"repeat", attack.repeat_count},
                    {"trigger_id", trigger.id()}};
  info["train_size"] = train.size();
  info["val_size"] = val.size();
  info["poisons"] = train.manifest.poison_count();
  write_json(out / "attack.json", info["attack"]);
  return info;
}

json write_oracle_encoder(const Context& ctx, const fs::path& out, bool trigger_active) {
  auto spec = oracle::load_spec(ctx.dir("data") / "oracle_spec.json");
  spec.trigger_active = trigger_active;
  oracle::save_spec(spec, out / "oracle_spec.json");
  const json enc = {{"kind", "oracle"}, {"spec", "oracle_spec.json"}};
  write_json(out / "encoder.json", enc);
  return {{"encoder", enc}, {"note", "analytic encoder: fixed rule, no training step"}};
}

json train_torch_encoder(const Dataset& data, const Config& section, std::uint64_t seed, const fs::path& out) {
  Config cfg = section;
  cfg.set_default("seed", std::to_string(seed));
  const auto ssl_cfg = ssl::SslConfig::from_config(cfg);
  auto outcome = ssl::train_ssl(data, ssl_cfg, out / "encoder.ckpt");
  ssl::save_train_log(outcome.log, out / "train_log.json");
  const json enc = {{"kind", "torch"}, {"checkpoint", "encoder.ckpt"}};
  write_json(out / "encoder.json", enc);
  return {{"encoder", enc}, {"final_loss", outcome.log.epoch_loss.empty() ? 0.0 : outcome.log.epoch_loss.back()},
          {"train_seconds", outcome.log.seconds}, {"train_config_hash", outcome.checkpoint.config_hash}};
}

std::string encoder_kind(const Config& c, const std::string& section) {
  return c.get(section + ".encoder", is_oracle(c) ? "oracle" : "ssl");
}

json stage_defense(const Context& ctx, const fs::path& out) {
  const Config& c = ctx.config();
  if (encoder_kind(c, "defense") == "oracle") return write_oracle_encoder(ctx, out, c.get_bool("defense.trigger_active", true));
  return train_torch_encoder(load_split(ctx.dir("data"), "train.jsonl"), c.section("defense"), run_seed(c), out);
}

json stage_cluster(const Context& ctx, const fs::path& out) {
  const Config& c = ctx.config();
  const auto train = load_split(ctx.dir("data"), "train.jsonl");
  auto encoder = load_stage_encoder(ctx.dir("defense"));
  const auto emb = cluster::extract_embeddings(*encoder, train);
  cluster::KMeansOptions km;
  km.num_clusters = static_cast<int>(c.get_int("cluster.l", 0));
  if (km.num_clusters <= 0) km.num_clusters = cluster::default_cluster_count(train.size());
  km.seed = static_cast<std::uint64_t>(c.get_int("cluster.seed", static_cast<long>(run_seed(c))));
  km.max_iters = static_cast<int>(c.get_int("cluster.max_iters", km.max_iters));
  km.restarts = static_cast<int>(c.get_int("cluster.restarts", km.restarts));
  const auto model = cluster::fit_kmeans(emb, km);
  long flip_size = c.get_int("cluster.flip_size", 0);
  if (flip_size <= 0) flip_size = static_cast<long>(std::min<std::size_t>(1000, train.size()));
  const auto flips = cluster::build_flip_set(model, emb, static_cast<std::size_t>(flip_size));
  cluster::save_embeddings(emb, out / "embeddings.bin");
  cluster::save_cluster_model(model, emb.sample_ids, out / "clusters");
  cluster::save_flip_set(flips, out / "flip_set.csv");
  return {{"l", km.num_clusters}, {"inertia", model.inertia}, {"lloyd_iterations", model.inertia_trace.size()},
          {"flip_set_size", flips.size()}, {"reseeded_empty", model.reseeded_empty}};
}

json stage_search(const Context& ctx, const fs::path& out) {
  const Config& c = ctx.config();
  const auto train = load_split(ctx.dir("data"), "train.jsonl");
  auto encoder = load_stage_encoder(ctx.dir("defense"));
  std::vector<std::string> ids;
  for (const auto& r : train.manifest.records()) ids.push_back(r.id);
  const auto model = cluster::load_cluster_model(ctx.dir("cluster") / "clusters", ids);
  const auto flips = cluster::load_flip_set(ctx.dir("cluster") / "flip_set.csv", train.manifest);
  std::vector<Image> flip_images;
  for (std::size_t m : flips.members) flip_images.push_back(train.images[m]);

  scope::ScoringOptions so;
  so.margin_fraction = c.get_double("scoring.margin", so.margin_fraction);
  const std::string rule = c.get("scoring.rule", "flipped_into");
  if (rule == "flipped_into") so.rule = scope::FlipRule::flipped_into;
  else if (rule == "lands_in") so.rule = scope::FlipRule::lands_in;
  else throw ConfigError("scoring.rule must be flipped_into or lands_in");
  so.seed = static_cast<std::uint64_t>(c.get_int("scoring.seed", static_cast<long>(run_seed(c))));
  const scope::FlipScorer scorer(*encoder, model, flips, std::move(flip_images), so);

  search::SearchConfig sc;
  sc.s = static_cast<int>(c.get_int("search.s", sc.s));
  sc.r = c.get_double("search.r", sc.r);
  sc.w = static_cast<int>(c.get_int("search.w", sc.w));
  sc.k = static_cast<int>(c.get_int("search.k", sc.k));
  sc.seed = static_cast<std::uint64_t>(c.get_int("search.seed", static_cast<long>(run_seed(c))));
  sc.cumulative_cluster_score = c.get_bool("search.cumulative", true);
  const auto candidates = c.get_int_list("search.w_candidates", {});

  json info;
  search::SearchResult result;
  if (!candidates.empty()) {
    auto sweep = search::rsd_sweep(train, model, scorer, *encoder, candidates, sc);
    search::save_rsd_sweep(sweep, out / "rsd.json");
    result = std::move(sweep.results.at(sweep.chosen_w));
    info["rsd_inconclusive"] = sweep.inconclusive;
  } else {
    result = search::iterative_search(train, model, scorer, *encoder, sc);
  }
  search::save_search_result(result, out / "search.json", out / "ranking.csv");
  scope::save_candidates(search::select_top_k(result, sc.k), out / "top_patches.csv", out / "top_patches");
  info["w"] = result.w;
  info["total_scored"] = result.total_scored();
  info["iterations"] = result.iterations.size();
  if (train.manifest.poison_count() > 0) {
    info["top_k_accuracy"] = search::top_k_accuracy(result, train.manifest, sc.k);
    info["cluster_removal_recall_10pct"] = search::cluster_removal_recall(result, model, train.manifest, 0.10);
  }
  return info;
}

json stage_sieve(const Context& ctx, const fs::path& out) {
  const Config& c = ctx.config();
  const auto train = load_split(ctx.dir("data"), "train.jsonl");
  const auto result = search::load_search_result(ctx.dir("search") / "search.json", ctx.dir("search") / "ranking.csv", train);
  const int k = static_cast<int>(c.get_int("sieve.k", c.get_int("search.k", 20)));
  const auto data = sieve::build_sieve_dataset(train, result, k, c.get_double("sieve.noise_cut", 0.10));
  const auto hyper = sieve::SieveHyper::from_config(c.section("sieve"));
  const auto seed = static_cast<std::uint64_t>(c.get_int("sieve.seed", static_cast<long>(run_seed(c))));
  const auto ensemble = sieve::train_sieve_ensemble(train, data, hyper, seed);
  sieve::save_ensemble(ensemble, hyper, out / "ensemble");
  json members = json::array();
  for (const auto& m : ensemble.members)
    members.push_back({{"best_f1", m.best_f1}, {"best_iteration", m.best_iteration},
                       {"stopped_iteration", m.stopped_iteration}, {"early_stopped", m.early_stopped}});
  return {{"label0_pool", data.label0_pool.size()}, {"excluded_top", data.excluded_top},
          {"proxy_val", data.proxy_val.size()}, {"patches", data.patches.size()},
          {"paste_range", {data.paste_min, data.paste_max}}, {"members", members}};
}

json stage_filter(const Context& ctx, const fs::path& out) {
  const auto train = load_split(ctx.dir("data"), "train.jsonl");
  auto ensemble = sieve::load_ensemble(ctx.dir("sieve") / "ensemble");
  auto [cleaned, rep] = sieve::sieve_filter(train, ensemble);
  absolute_paths(cleaned, ctx.dir("data")).save_jsonl(out / "cleaned.jsonl");
  sieve::save_filter_report(rep, train.manifest, out / "filter_report.json", out / "probabilities.csv");
  json info = {{"total_removed", rep.total_removed}, {"kept", cleaned.size()}};
  info["precision"] = rep.precision ? json(*rep.precision) : json(nullptr);
  info["recall"] = rep.recall ? json(*rep.recall) : json(nullptr);
  return info;
}

json stage_final(const Context& ctx, const fs::path& out) {
  const Config& c = ctx.config();
  if (encoder_kind(c, "final") == "oracle") return write_oracle_encoder(ctx, out, c.get_bool("final.trigger_active", true));
  const auto train = load_split(ctx.dir("data"), "train.jsonl");
  const auto cleaned = select_ids(train, DatasetManifest::load_jsonl(ctx.dir("filter") / "cleaned.jsonl"));
  return train_torch_encoder(cleaned, c.section("final"), run_seed(c), out);
}

json stage_baseline(const Context& ctx, const fs::path& out) {
  const Config& c = ctx.config();
  if (encoder_kind(c, "final") == "oracle") return write_oracle_encoder(ctx, out, false);
  return train_torch_encoder(load_split(ctx.dir("data"), "clean_train.jsonl"), c.section("final"), run_seed(c), out);
}

json triple_json(const eval::MetricTriple& m) {
  return {{"acc", m.acc}, {"fp", m.fp}, {"asr", m.asr}, {"denominator", m.denominator}};
}

json stage_evaluate(const Context& ctx, const fs::path& out) {
  const Config& c = ctx.config();
  const fs::path data_dir = ctx.dir("data");
  const auto train = load_split(data_dir, "train.jsonl");
  const auto val = load_split(data_dir, "val.jsonl");
  const auto patched = load_split(data_dir, "val_patched.jsonl");
  const int target = static_cast<int>(c.get_int("eval.target", read_json(data_dir / "attack.json").at("target").get<int>()));
  const int seeds = static_cast<int>(c.get_int("eval.seeds", 5));
  auto probe_cfg = eval::ProbeConfig::from_config(c.section("eval.probe"));

  struct Model {
    std::string name;
    fs::path dir;
    Dataset data;
  };
  std::vector<Model> models;
  models.push_back({"backdoored", ctx.dir("defense"), train});
  models.push_back({"defended", ctx.dir("final"),
                    select_ids(train, DatasetManifest::load_jsonl(ctx.dir("filter") / "cleaned.jsonl"))});
  if (ctx.stages.contains("baseline")) models.push_back({"clean", ctx.dir("baseline"), load_split(data_dir, "clean_train.jsonl")});

  json info;
  info["target"] = target;
  info["seeds"] = seeds;
  for (auto& m : models) {
    auto encoder = load_stage_encoder(m.dir);
    std::vector<eval::MetricTriple> clean_runs, patched_runs;
    std::optional<eval::ProbeHead> first_probe;
    for (int s = 0; s < seeds; ++s) {
      probe_cfg.seed = mix_seed(run_seed(c), static_cast<std::uint64_t>(s));
      const auto probe = eval::train_probe(*encoder, m.data, probe_cfg);
      clean_runs.push_back(eval::evaluate(probe, *encoder, val, target));
      patched_runs.push_back(eval::evaluate(probe, *encoder, patched, target));
      if (!first_probe) first_probe = probe;
    }
    json runs = json::array();
    for (int s = 0; s < seeds; ++s)
      runs.push_back({{"clean", triple_json(clean_runs[static_cast<std::size_t>(s)])},
                      {"patched", triple_json(patched_runs[static_cast<std::size_t>(s)])}});
    info["models"][m.name] = {{"clean", triple_json(eval::average(clean_runs))},
                              {"patched", triple_json(eval::average(patched_runs))},
                              {"runs", runs},
                              {"train_size", m.data.size()}};
    if (c.get_bool("eval.potency", false)) {
      eval::PotencyOptions po;
      po.w = static_cast<int>(c.get_int("eval.potency_w", c.get_int("search.w", 60)));
      po.patches_per_category = static_cast<int>(c.get_int("eval.potency_patches", po.patches_per_category));
      po.seed = run_seed(c);
      eval::save_potency(eval::potency_analysis(*encoder, *first_probe, m.data, val, po), out / ("potency_" + m.name + ".json"));
    }
  }
  write_json(out / "metrics.json", info);
  return {{"models", info["models"].size()}};
}

json run_stage(const std::string& name, const Context& ctx, const fs::path& out) {
  if (name == "data") return stage_data(ctx, out);
  if (name == "defense") return stage_defense(ctx, out);
  if (name == "cluster") return stage_cluster(ctx, out);
  if (name == "search") return stage_search(ctx, out);
  if (name == "sieve") return stage_sieve(ctx, out);
  if (name == "filter") return stage_filter(ctx, out);
  if (name == "final") return stage_final(ctx, out);
  if (name == "baseline") return stage_baseline(ctx, out);
  if (name == "evaluate") return stage_evaluate(ctx, out);
  throw ConfigError("unknown stage '" + name + "'");
}

bool stage_complete(const StageRecord& rec) {
  const auto path = rec.dir / "stage.json";
  if (!fs::exists(path)) return false;
  const auto j = read_json(path);
  return j.value("complete", false) && j.value("config_hash", "") == rec.hash;
}

}  // namespace

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names = {"data",  "defense", "cluster",  "search",  "sieve",
                                                 "filter", "final",   "baseline", "evaluate"};
  return names;
}

RunConfig RunConfig::load(const fs::path& path) { return {Config::load(path)}; }

RunConfig RunConfig::oracle_defaults() {
  RunConfig rc;
  rc.config = Config::parse(
      "run.source = oracle\n"
      "run.seed = 0\n"
      "run.name = oracle\n"
      "oracle.num_samples = 10000\n"
      "oracle.rate = 0.005\n"
      "oracle.target = 0\n"
      "cluster.l = 100\n"
      "search.s = 2\n"
      "search.r = 0.25\n"
      "search.w = 8\n"
      "search.k = 20\n"
      "sieve.backbone = resnet10-w8\n"
      "sieve.k = 20\n"
      "sieve.noise_cut = 0.1\n"
      "eval.seeds = 5\n");
  return rc;
}

fs::path RunConfig::run_dir() const {
  if (const char* root = std::getenv("PATCHSEARCH_ARTIFACTS"); root && *root)
    return fs::path(root) / config.get("run.name", "run");
  return config.get("run.dir", (fs::path("artifacts") / config.get("run.name", "run")).string());
}

bool RunConfig::stage_enabled(const std::string& stage) const {
  if (stage == "baseline") return config.get_bool("stage.baseline", config.get_bool("eval.clean_baseline", false));
  return config.get_bool("stage." + stage, true);
}

Config RunConfig::stage_config(const std::string& stage) const {
  const auto it = stage_keys().find(stage);
  if (it == stage_keys().end()) throw ConfigError("unknown stage '" + stage + "'");
  Config out;
  for (const auto& [key, value] : config.values())
    for (const auto& prefix : it->second)
      if (prefix.back() == '.' ? key.starts_with(prefix) : key == prefix) out.set(key, value);
  if (stage == "data") out.set("stage.baseline", stage_enabled("baseline") ? "true" : "false");
  return out;
}

std::vector<StageRecord> plan(const RunConfig& config) {
  const fs::path root = config.run_dir();
  const bool baseline = config.stage_enabled("baseline");
  std::map<std::string, std::string> hashes;
  std::vector<StageRecord> out;
  for (const auto& name : stage_names()) {
    if (name == "baseline" && !baseline) continue;
    StageRecord rec;
    rec.name = name;
    for (const auto& up : upstream_of(name, baseline)) {
      if (!hashes.contains(up)) throw ConfigError("stage '" + name + "' needs disabled stage '" + up + "'");
      rec.upstream += (rec.upstream.empty() ? "" : ",") + hashes.at(up);
    }
    if (!config.stage_enabled(name)) break;
    rec.hash = short_hash(name + "\n" + rec.upstream + "\n" + config.stage_config(name).serialize());
    rec.dir = root / (name + "-" + rec.hash);
    hashes[name] = rec.hash;
    out.push_back(rec);
  }
  return out;
}

RunResult run_pipeline(const RunConfig& config, const std::string& until) {
  if (!until.empty() && std::find(stage_names().begin(), stage_names().end(), until) == stage_names().end())
    throw ConfigError("unknown stage '" + until + "'");
  auto stages = plan(config);
  RunResult result;
  result.run_dir = config.run_dir();
  RunLock lock(result.run_dir);
  config.config.save(result.run_dir / "config.cfg");

  json run = {{"config_hash", config.config.hash()}, {"stages", json::array()}};
  for (const auto& s : stages) run["stages"].push_back({{"name", s.name}, {"hash", s.hash}, {"upstream", s.upstream},
                                                        {"dir", s.dir.filename().string()}});
  write_json(result.run_dir / "run.json", run);

  Context ctx{config, {}};
  for (auto& rec : stages) {
    if (stage_complete(rec)) {
      rec.reused = true;
      log::info("stage ", rec.name, " already complete (", rec.hash, "), skipping");
    } else {
      fs::path partial = rec.dir;
      partial += ".partial";
      fs::remove_all(partial);
      fs::create_directories(partial);
      log::info("stage ", rec.name, " -> ", rec.dir.string());
      json info = run_stage(rec.name, ctx, partial);
      json stage = {{"stage", rec.name}, {"config_hash", rec.hash}, {"upstream", rec.upstream},
                    {"config", json::object()}, {"summary", info}, {"complete", true}};
      const Config stage_cfg = config.stage_config(rec.name);
      for (const auto& [k, v] : stage_cfg.values()) stage["config"][k] = v;
      write_json(partial / "stage.json", stage);
      fs::remove_all(rec.dir);
      fs::rename(partial, rec.dir);
    }
    ctx.stages[rec.name] = rec;
    result.stages.push_back(rec);
    if (rec.name == until) break;
  }
  return result;
}

std::unique_ptr<Encoder> load_stage_encoder(const fs::path& stage_dir) {
  const auto j = read_json(stage_dir / "encoder.json");
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "oracle") return std::make_unique<oracle::OracleEncoder>(oracle::load_spec(stage_dir / j.at("spec").get<std::string>()));
  if (kind == "torch")
    return std::make_unique<ssl::TorchEncoder>(ssl::EncoderCheckpoint::load(stage_dir / j.at("checkpoint").get<std::string>()));
  throw DataError("unknown encoder kind '" + kind + "' in " + stage_dir.string());
}

// ---- report -------------------------------------------------------------------

namespace {

std::string fixed(double v, int digits = 1) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

std::string opt_fixed(const json& j, int digits = 3) { return j.is_null() ? "n/a" : fixed(j.get<double>(), digits); }

}  // namespace

Report report(const fs::path& run_dir) {
  Report rep;
  if (!fs::exists(run_dir / "run.json"))
    throw ConfigError("empty run " + run_dir.string() + ": missing stages " + [] {
      std::string s;
      for (const auto& n : stage_names()) s += (s.empty() ? "" : ", ") + n;
      return s;
    }());
  const auto run = read_json(run_dir / "run.json");

  std::map<std::string, json> done;
  std::ostringstream md;
  md << "# PatchSearch run report\n\n";
  md << "Run config hash: `" << run.at("config_hash").get<std::string>() << "`\n\n";
  md << "## Stages\n\n| Stage | Hash | Status |\n|---|---|---|\n";
  for (const auto& s : run.at("stages")) {
    const auto name = s.at("name").get<std::string>();
    const auto dir = run_dir / s.at("dir").get<std::string>();
    std::string status = "missing";
    if (fs::exists(dir / "stage.json")) {
      auto st = read_json(dir / "stage.json");
      if (st.at("config_hash") != s.at("hash") || st.at("upstream") != s.at("upstream"))
        throw ConfigError("stage '" + name + "' in " + dir.string() + " carries a different config hash than run.json; "
                          "refusing a mixed-provenance report");
      if (st.value("complete", false)) {
        status = "complete";
        st["dir"] = dir.string();
        done[name] = st;
      }
    }
    if (status != "complete") rep.missing.push_back(name);
    md << "| " << name << " | `" << s.at("hash").get<std::string>() << "` | " << status << " |\n";
  }
  if (done.empty()) {
    std::string names;
    for (const auto& n : rep.missing) names += (names.empty() ? "" : ", ") + n;
    throw ConfigError("no completed stage in " + run_dir.string() + "; missing stages: " + names);
  }

  if (done.contains("data")) {
    const auto& d = done["data"]["summary"];
    md << "\n## Data\n\n| Train | Val | Poisons | Target | Trigger size |\n|---|---|---|---|---|\n| "
       << d.at("train_size") << " | " << d.at("val_size") << " | " << d.at("poisons") << " | " << d["attack"].at("target")
       << " | " << d["attack"].at("trigger_size") << " |\n";
  }

  if (done.contains("search")) {
    const fs::path dir = done["search"]["dir"].get<std::string>();
    const auto& s = done["search"]["summary"];
    md << "\n## Search\n\n| w | Scored | Iterations | Top-k acc | Poisons in top 10% clusters |\n|---|---|---|---|---|\n| "
       << s.at("w") << " | " << s.at("total_scored") << " | " << s.at("iterations") << " | "
       << (s.contains("top_k_accuracy") ? fixed(100.0 * s["top_k_accuracy"].get<double>()) + "%" : "n/a") << " | "
       << (s.contains("cluster_removal_recall_10pct") ? fixed(100.0 * s["cluster_removal_recall_10pct"].get<double>()) + "%" : "n/a")
       << " |\n";
    std::vector<double> scores;
    std::ifstream csv(dir / "ranking.csv");
    std::string line;
    std::getline(csv, line);
    while (std::getline(csv, line)) {
      std::stringstream ss(line);
      std::string field;
      for (int i = 0; i < 4 && std::getline(ss, field, ','); ++i)
        if (i == 3) scores.push_back(std::stod(field));
    }
    const auto plot_path = run_dir / "score_histogram.png";
    plot::bar_chart(plot::histogram(scores, 40), plot_path);
    rep.plots.push_back(plot_path);
    md << "\nScore histogram: `score_histogram.png` (" << scores.size() << " scored samples).\n";
    if (fs::exists(dir / "rsd.json")) {
      const auto rsd = read_json(dir / "rsd.json");
      md << "\n### RSD sweep\n\n| w | Mean | Std | RSD | Scored |\n|---|---|---|---|---|\n";
      std::vector<double> xs, ys;
      for (const auto& r : rsd.at("rows")) {
        md << "| " << r.at("w") << " | " << fixed(r.at("mean").get<double>(), 3) << " | " << fixed(r.at("std").get<double>(), 3)
           << " | " << fixed(r.at("rsd").get<double>(), 3) << " | " << r.at("scored") << " |\n";
        xs.push_back(r.at("w").get<double>());
        ys.push_back(r.at("rsd").get<double>());
      }
      md << "\nChosen w: " << rsd.at("chosen_w") << (rsd.at("inconclusive").get<bool>() ? " (inconclusive: all scores zero)" : "")
         << "\n";
      const auto rsd_plot = run_dir / "rsd_curve.png";
      plot::line_chart(xs, ys, rsd_plot);
      rep.plots.push_back(rsd_plot);
    }
  }

  if (done.contains("filter")) {
    const auto& f = done["filter"]["summary"];
    md << "\n## Filter\n\n| Total removed | Kept | Precision | Recall |\n|---|---|---|---|\n| " << f.at("total_removed")
       << " | " << f.at("kept") << " | " << opt_fixed(f.at("precision")) << " | " << opt_fixed(f.at("recall")) << " |\n";
  }

  if (done.contains("evaluate")) {
    const fs::path dir = done["evaluate"]["dir"].get<std::string>();
    const auto metrics = read_json(dir / "metrics.json");
    md << "\n## Metrics (mean over " << metrics.at("seeds") << " probe seeds, target " << metrics.at("target") << ")\n\n"
       << "| Model | Clean Acc | Clean FP | Clean ASR | Patched Acc | Patched FP | Patched ASR |\n|---|---|---|---|---|---|---|\n";
    for (const std::string name : {"clean", "backdoored", "defended"}) {
      if (!metrics.at("models").contains(name)) continue;
      const auto& m = metrics["models"][name];
      md << "| " << name << " | " << fixed(m["clean"]["acc"].get<double>()) << " | " << fixed(m["clean"]["fp"].get<double>())
         << " | " << fixed(m["clean"]["asr"].get<double>()) << " | " << fixed(m["patched"]["acc"].get<double>()) << " | "
         << fixed(m["patched"]["fp"].get<double>()) << " | " << fixed(m["patched"]["asr"].get<double>()) << " |\n";
    }
    for (const std::string name : {"clean", "backdoored", "defended"}) {
      const auto path = dir / ("potency_" + name + ".json");
      if (!fs::exists(path)) continue;
      md << "\n### Patch potency (" << name << " model, max FP per category)\n\n| Category | Max FP | Source |\n|---|---|---|\n";
      for (const auto& r : read_json(path))
        md << "| " << r.at("category") << " | " << fixed(r.at("max_fp").get<double>(), 0) << " | "
           << r.at("best_source_id").get<std::string>() << " |\n";
    }
  }

  if (!rep.missing.empty()) {
    md << "\nMissing stages:";
    for (const auto& m : rep.missing) md << ' ' << m;
    md << "\n";
  }
  rep.markdown = md.str();
  std::ofstream(run_dir / "report.md") << rep.markdown;
  return rep;
}

}  // namespace patchsearch::pipeline

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "patchsearch/errors.hpp"
#include "patchsearch/eval.hpp"
#include "patchsearch/manifest.hpp"
#include "patchsearch/oracle.hpp"
#include "patchsearch/pipeline.hpp"

namespace fs = std::filesystem;
using namespace patchsearch;

namespace {

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;
};

void add_config_args(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("--config,-c", args.path, "run configuration (key = value)");
  cmd->add_option("--set", args.overrides, "override a key, e.g. --set search.w=8")->take_all();
}

std::vector<std::pair<std::string, std::string>> g_flag_overrides;

pipeline::RunConfig resolve(const ConfigArgs& args) {
  auto rc = args.path.empty() ? pipeline::RunConfig::oracle_defaults() : pipeline::RunConfig::load(args.path);
  for (const auto& kv : args.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    rc.config.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  const bool oracle_source = rc.config.get("run.source", "oracle") == "oracle";
  for (const auto& [key, value] : g_flag_overrides) {
    if (oracle_source && key == "forge.rate") rc.config.set("oracle.rate", value);
    else if (oracle_source && key == "forge.target") rc.config.set("oracle.target", value);
    else rc.config.set(key, value);
  }
  return rc;
}

void print_stages(const pipeline::RunResult& r) {
  for (const auto& s : r.stages)
    std::cout << s.name << '\t' << s.hash << '\t' << (s.reused ? "reused" : "ran") << '\t' << s.dir.string() << '\n';
}

void print_metrics(const fs::path& eval_dir, bool patched_only) {
  std::ifstream is(eval_dir / "metrics.json");
  const auto j = nlohmann::json::parse(is);
  std::cout << "model\tsplit\tacc\tfp\tasr\n";
  for (const auto& [name, m] : j.at("models").items())
    for (const std::string split : {"clean", "patched"}) {
      if (patched_only && split != "patched") continue;
      std::cout << name << '\t' << split << '\t' << m[split]["acc"].get<double>() << '\t' << m[split]["fp"].get<double>()
                << '\t' << m[split]["asr"].get<double>() << '\n';
    }
}

/// CIFAR-10 binary batches: 1 label byte then 1024 R, 1024 G, 1024 B bytes.
void import_cifar10(const fs::path& src, const fs::path& out) {
  auto convert = [&](const std::vector<std::string>& files, const std::string& split) {
    Dataset data;
    std::vector<SampleRecord> records;
    std::size_t index = 0;
    for (const auto& name : files) {
      std::ifstream is(src / name, std::ios::binary);
      if (!is) throw DataError("missing CIFAR-10 batch " + (src / name).string());
      std::vector<unsigned char> rec(3073);
      while (is.read(reinterpret_cast<char*>(rec.data()), static_cast<std::streamsize>(rec.size()))) {
        Image img(32, 32, 3);
        for (int c = 0; c < 3; ++c)
          for (int p = 0; p < 1024; ++p) img.at(p / 32, p % 32, c) = rec[1 + c * 1024 + p] / 255.0f;
        char id[32];
        std::snprintf(id, sizeof id, "%s_%05zu", split.c_str(), index++);
        records.push_back({id, "", rec[0], false, std::nullopt, {}});
        data.images.push_back(std::move(img));
      }
    }
    data.manifest = DatasetManifest(std::move(records));
    save_dataset(data, out, split, out / (split + ".jsonl"));
    std::cout << split << ": " << data.size() << " images\n";
  };
  convert({"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"}, "train");
  convert({"test_batch.bin"}, "val");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PatchSearch backdoor defense: search poisoned training data for trigger patches and filter them out"};
  app.require_subcommand(1);

  ConfigArgs cfg;
  std::string report_dir;
  bool final_model = false, patched = false;
  int target = -1;

  struct StageCmd {
    const char* name;
    const char* stage;
    const char* help;
  };
  const std::vector<StageCmd> stage_cmds = {
      {"forge", "data", "build the (poisoned) training set and patched validation set"},
      {"pretrain", "defense", "train the defense encoder (--final: the model trained on cleaned data)"},
      {"cluster", "cluster", "embed the training set, run k-means and build the flip test set"},
      {"search", "search", "iterative patch search (optionally an RSD sweep over w)"},
      {"sieve", "sieve", "train the poison-classifier ensemble"},
      {"filter", "filter", "remove samples the ensemble flags as poisonous"},
      {"evaluate", "evaluate", "linear probes and Acc/FP/ASR for every model"},
      {"run-all", "", "run every stage, skipping completed ones"},
  };
  std::vector<std::pair<CLI::App*, std::string>> stage_apps;
  for (const auto& sc : stage_cmds) {
    auto* cmd = app.add_subcommand(sc.name, sc.help);
    add_config_args(cmd, cfg);
    stage_apps.emplace_back(cmd, sc.stage);
  }
  auto& flag_overrides = g_flag_overrides;
  auto map_flag = [&flag_overrides](CLI::App* cmd, const std::string& flag, const std::string& key, const std::string& help) {
    cmd->add_option_function<std::string>(flag, [&flag_overrides, key](const std::string& v) { flag_overrides.emplace_back(key, v); }, help);
  };
  auto* forge_cmd = stage_apps[0].first;
  map_flag(forge_cmd, "--rate", "forge.rate", "injection rate");
  map_flag(forge_cmd, "--target", "forge.target", "target category");
  map_flag(forge_cmd, "--trigger", "forge.trigger", "trigger PNG (square RGB)");
  map_flag(forge_cmd, "--size", "forge.trigger_size", "pasted trigger side");
  map_flag(forge_cmd, "--margin", "forge.margin", "margin fraction on every side");
  map_flag(forge_cmd, "--repeat", "forge.repeat", "trigger copies per poisoned image");
  map_flag(forge_cmd, "--seed", "forge.seed", "attack seed");
  stage_apps[1].first->add_flag("--final", final_model, "train the final model instead of the defense model");
  auto* eval_cmd = stage_apps[6].first;
  eval_cmd->add_flag("--patched", patched, "print patched-validation metrics only");
  eval_cmd->add_option("--target", target, "target category (default: the attack's)");

  auto* defend = app.add_subcommand("defend", "defense stages by their role");
  defend->require_subcommand(1);
  auto* defend_search = defend->add_subcommand("search", "iterative patch search");
  auto* defend_filter = defend->add_subcommand("filter", "poison classifier and filtering");
  add_config_args(defend_search, cfg);
  add_config_args(defend_filter, cfg);
  for (CLI::App* cmd : {stage_apps[3].first, defend_search}) {
    map_flag(cmd, "--l", "cluster.l", "number of clusters");
    map_flag(cmd, "--s", "search.s", "samples scored per cluster per iteration");
    map_flag(cmd, "--r", "search.r", "fraction of clusters pruned per iteration");
    map_flag(cmd, "--w", "search.w", "candidate patch side");
    map_flag(cmd, "--k", "search.k", "top-k patches kept");
    map_flag(cmd, "--sweep-w", "search.w_candidates", "RSD sweep over these sides, e.g. 4,8,16,32");
  }

  auto* report_cmd = app.add_subcommand("report", "summarize a run directory (tables + PNG plots)");
  report_cmd->add_option("--run", report_dir, "run directory");
  add_config_args(report_cmd, cfg);

  auto* potency_cmd = app.add_subcommand("potency", "max FP per category caused by natural patches");
  add_config_args(potency_cmd, cfg);
  std::string potency_model = "defense";
  int potency_w = 8, potency_patches = 5;
  potency_cmd->add_option("--model", potency_model, "stage whose encoder is analysed: defense, final or baseline");
  potency_cmd->add_option("--w", potency_w, "patch side");
  potency_cmd->add_option("--patches", potency_patches, "candidate patches per category");

  auto* oracle_cmd = app.add_subcommand("oracle", "synthetic analytic world");
  oracle_cmd->require_subcommand(1);
  auto* oracle_gen = oracle_cmd->add_subcommand("generate", "write an oracle dataset as standard manifests");
  std::string oracle_out = "oracle_world";
  oracle::OracleSpec spec;
  double oracle_rate = 0.005;
  int oracle_target = 0;
  oracle_gen->add_option("--out", oracle_out, "output directory");
  oracle_gen->add_option("--samples", spec.num_samples, "training images");
  oracle_gen->add_option("--classes", spec.num_latent_classes, "latent classes");
  oracle_gen->add_option("--rate", oracle_rate, "injection rate");
  oracle_gen->add_option("--target", oracle_target, "target category");
  oracle_gen->add_option("--seed", spec.seed, "world seed");
  oracle_gen->add_option("--miss-rate", spec.heatmap_miss_rate, "fraction of poisons whose heatmap misses the motif");

  auto* cifar_cmd = app.add_subcommand("import-cifar10", "convert the CIFAR-10 binary batches to PNG manifests");
  std::string cifar_src, cifar_out = "cifar10";
  cifar_cmd->add_option("--src", cifar_src, "directory holding data_batch_*.bin and test_batch.bin")->required();
  cifar_cmd->add_option("--out", cifar_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    for (const auto& [cmd, stage] : stage_apps) {
      if (!cmd->parsed()) continue;
      auto rc = resolve(cfg);
      if (target >= 0) rc.config.set("eval.target", std::to_string(target));
      const std::string until = stage == "defense" && final_model ? "final" : stage;
      const auto result = pipeline::run_pipeline(rc, until);
      print_stages(result);
      if (stage == "evaluate" || stage.empty()) {
        for (const auto& s : result.stages)
          if (s.name == "evaluate") print_metrics(s.dir, patched);
      }
      return 0;
    }
    if (defend_search->parsed() || defend_filter->parsed()) {
      print_stages(pipeline::run_pipeline(resolve(cfg), defend_search->parsed() ? "search" : "filter"));
      return 0;
    }
    if (report_cmd->parsed()) {
      const fs::path dir = report_dir.empty() ? resolve(cfg).run_dir() : fs::path(report_dir);
      const auto rep = pipeline::report(dir);
      std::cout << rep.markdown;
      return rep.missing.empty() ? 0 : 3;
    }
    if (potency_cmd->parsed()) {
      const auto rc = resolve(cfg);
      const auto stages = pipeline::plan(rc);
      auto find = [&](const std::string& name) {
        for (const auto& s : stages)
          if (s.name == name) return s.dir;
        throw ConfigError("stage '" + name + "' is not part of this run");
      };
      const fs::path data_dir = find("data");
      const auto train = load_dataset(DatasetManifest::load_jsonl(data_dir / "train.jsonl"), data_dir);
      const auto val = load_dataset(DatasetManifest::load_jsonl(data_dir / "val.jsonl"), data_dir);
      auto encoder = pipeline::load_stage_encoder(find(potency_model));
      const auto probe = eval::train_probe(*encoder, train, eval::ProbeConfig::from_config(rc.config.section("eval.probe")));
      eval::PotencyOptions po;
      po.w = potency_w;
      po.patches_per_category = potency_patches;
      const auto rows = eval::potency_analysis(*encoder, probe, train, val, po);
      const fs::path out = rc.run_dir() / ("potency_" + potency_model + ".json");
      eval::save_potency(rows, out);
      std::cout << "category\tmax_fp\tsource\n";
      for (const auto& r : rows) std::cout << r.category << '\t' << r.max_fp << '\t' << r.best_source_id << '\n';
      return 0;
    }
    if (oracle_gen->parsed()) {
      const auto world = oracle::generate_oracle_dataset(spec, oracle_rate, oracle_target);
      auto train = world.train;
      auto val = world.val;
      save_dataset(train, oracle_out, "train", fs::path(oracle_out) / "train.jsonl");
      save_dataset(val, oracle_out, "val", fs::path(oracle_out) / "val.jsonl");
      oracle::save_spec(spec, fs::path(oracle_out) / "oracle_spec.json");
      write_png(world.trigger.pixels(), fs::path(oracle_out) / "trigger.png");
      std::cout << "train " << train.size() << " (" << train.manifest.poison_count() << " poisoned), val " << val.size()
                << " -> " << oracle_out << '\n';
      return 0;
    }
    if (cifar_cmd->parsed()) {
      import_cifar10(cifar_src, cifar_out);
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

// One pass/fail line per acceptance criterion; `--criterion N` runs one.
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <torch/torch.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "patchsearch/cluster.hpp"
#include "patchsearch/errors.hpp"
#include "patchsearch/eval.hpp"
#include "patchsearch/logging.hpp"
#include "patchsearch/mix.hpp"
#include "patchsearch/oracle.hpp"
#include "patchsearch/pipeline.hpp"
#include "patchsearch/search.hpp"
#include "patchsearch/sieve.hpp"
#include "patchsearch/trigger_scope.hpp"
#include "support.hpp"

using namespace patchsearch;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// tolerances and budgets
constexpr double kOracleSeconds = 300.0;
constexpr double kOracleTopK = 1.0;
constexpr double kOracleRecall = 0.98;
constexpr double kOraclePrecision = 0.50;
constexpr double kBudgetBand = 0.10;
constexpr double kBudgetSeconds = 60.0;
constexpr double kWindowSeconds = 30.0;
constexpr double kRsdSeconds = 600.0;
constexpr double kEndpointRel = 1e-6;
constexpr double kGradientRel = 1e-4;
constexpr double kMixSeconds = 60.0;
constexpr double kAsrAbs = 0.05;
constexpr double kMetricSeconds = 1.0;
constexpr double kSieveSeconds = 300.0;
constexpr double kCifarBackdoorAsr = 40.0;
constexpr double kCifarDefendedAsr = 15.0;
constexpr double kCifarAccDrop = 2.0;
constexpr double kCleanRemovedFraction = 0.10;
constexpr double kCleanAccPoints = 2.0;

constexpr int kSkip = 77;

struct Outcome {
  enum Status { pass, fail, skip } status = fail;
  std::string detail;
};

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(double v, int digits = 3) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

json read_json(const fs::path& p) {
  std::ifstream is(p);
  return json::parse(is);
}

const pipeline::StageRecord& stage(const pipeline::RunResult& r, const std::string& name) {
  for (const auto& s : r.stages)
    if (s.name == name) return s;
  throw ConfigError("stage " + name + " missing from the run");
}

json summary(const pipeline::RunResult& r, const std::string& name) {
  return read_json(stage(r, name).dir / "stage.json").at("summary");
}

double relative(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

/// Scores drawn from a fixed per-sample table.
class TableScorer : public scope::SampleScorer {
 public:
  explicit TableScorer(std::vector<int> scores) : scores_(std::move(scores)) {}
  scope::ScoredCandidate score(std::size_t i) override {
    scope::ScoredCandidate c;
    c.source_index = i;
    c.source_sample_id = "s" + std::to_string(1000000 + i);
    c.poison_score = scores_[i];
    return c;
  }

 private:
  std::vector<int> scores_;
};

Outcome oracle_end_to_end() {
  testing::TempDir dir("accept1");
  auto rc = pipeline::RunConfig::oracle_defaults();
  rc.config.set("run.dir", (dir / "run").string());
  Timer t;
  const auto run = pipeline::run_pipeline(rc);
  const double secs = t.seconds();
  const auto s = summary(run, "search");
  const auto f = summary(run, "filter");
  const double topk = s.at("top_k_accuracy").get<double>();
  const double recall = f.at("recall").is_null() ? 0.0 : f.at("recall").get<double>();
  const double precision = f.at("precision").is_null() ? 0.0 : f.at("precision").get<double>();
  const bool ok = topk >= kOracleTopK && recall >= kOracleRecall && precision >= kOraclePrecision && secs < kOracleSeconds;
  return {ok ? Outcome::pass : Outcome::fail,
          "top-20 " + fmt(topk) + ", recall " + fmt(recall) + ", precision " + fmt(precision) + ", removed " +
              f.at("total_removed").dump() + ", " + fmt(secs, 1) + " s (limit " + fmt(kOracleSeconds, 0) + ")"};
}

Outcome search_budget() {
  const std::size_t n = 127000;
  const int l = 1000;
  search::SearchConfig cfg;  // s = 2, r = 0.25
  const double target = std::min(static_cast<double>(n), cfg.s * l / cfg.r);
  Timer t;
  double total = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    // synthetic clustering: every sample lands in one of l clusters uniformly at random
    Rng rng(seed);
    cluster::ClusterModel model;
    model.centers = RowMatrix::Zero(l, 2);
    std::vector<int> scores(n);
    for (std::size_t i = 0; i < n; ++i) {
      model.assignments.push_back(static_cast<int>(rng.uniform_int(0, l - 1)));
      scores[i] = static_cast<int>(rng.uniform_int(0, 100));
    }
    TableScorer scorer(std::move(scores));
    cfg.seed = seed;
    total += static_cast<double>(search::iterative_search(model, scorer, cfg).total_scored());
  }
  const double mean = total / 10.0, secs = t.seconds();
  const bool ok = std::abs(mean - target) <= kBudgetBand * target && secs < kBudgetSeconds;
  return {ok ? Outcome::pass : Outcome::fail,
          "mean scored " + fmt(mean, 1) + " vs target " + fmt(target, 0) + " (band " + fmt(kBudgetBand * 100, 0) + "%), " +
              fmt(secs, 1) + " s"};
}

Outcome window_oracle() {
  Timer t;
  Rng rng(17);
  int agree = 0, total = 0;
  for (int w : {3, 9, 16})
    for (int trial = 0; trial < 200; ++trial, ++total) {
      HeatMap m;
      m.height = static_cast<int>(rng.uniform_int(16, 40));
      m.width = static_cast<int>(rng.uniform_int(16, 40));
      for (int i = 0; i < m.height * m.width; ++i) m.values.push_back(static_cast<float>(rng.uniform()));
      double best = -1.0;
      Rect expect{0, 0, w, w};
      for (int y = 0; y + w <= m.height; ++y)
        for (int x = 0; x + w <= m.width; ++x) {
          double sum = 0;
          for (int dy = 0; dy < w; ++dy)
            for (int dx = 0; dx < w; ++dx) sum += m.at(y + dy, x + dx);
          if (sum > best + 1e-9) {
            best = sum;
            expect.x = x;
            expect.y = y;
          }
        }
      agree += scope::max_window(m, w) == expect;
    }
  const double secs = t.seconds();
  return {agree == total && secs < kWindowSeconds ? Outcome::pass : Outcome::fail,
          std::to_string(agree) + "/" + std::to_string(total) + " windows agree, " + fmt(secs, 2) + " s"};
}

Outcome rsd_selection() {
  Timer t;
  oracle::OracleSpec spec;
  auto world = oracle::generate_oracle_dataset(spec, 0.005, 0);
  oracle::OracleEncoder enc(spec);
  const auto emb = cluster::extract_embeddings(enc, world.train);
  const auto model = cluster::fit_kmeans(emb, {100, 0, 100, 1e-6});
  const auto flip = cluster::build_flip_set(model, emb, 1000);
  std::vector<Image> flip_images;
  for (auto i : flip.members) flip_images.push_back(world.train.images[i]);
  scope::FlipScorer flips(enc, model, flip, flip_images, {});
  const auto sweep = search::rsd_sweep(world.train, model, flips, enc, {4, 8, 16, 32}, search::SearchConfig{});
  double best = 0;
  std::string rows;
  for (const auto& row : sweep.rows) {
    const double acc = search::top_k_accuracy(sweep.results.at(row.w), world.train.manifest, 20);
    best = std::max(best, acc);
    rows += " w=" + std::to_string(row.w) + ":rsd " + fmt(row.rsd, 2) + "/top20 " + fmt(acc, 2);
  }
  const double chosen = search::top_k_accuracy(sweep.results.at(sweep.chosen_w), world.train.manifest, 20);
  const double secs = t.seconds();
  return {chosen == best && !sweep.inconclusive && secs < kRsdSeconds ? Outcome::pass : Outcome::fail,
          "chosen w " + std::to_string(sweep.chosen_w) + " top-20 " + fmt(chosen, 2) + " (max " + fmt(best, 2) + ");" + rows +
              ", " + fmt(secs, 1) + " s"};
}

Outcome mix_contract() {
  using namespace patchsearch::ssl;
  Timer t;
  Rng rng(5);
  torch::manual_seed(2);
  const auto batch = torch::rand({8, 3, 24, 24});
  int exact = 0, draws = 0;
  while (draws < 1000) {
    const auto out = apply_mix(batch, {MixMode::icutmix, 1.0, std::nullopt}, rng);
    for (std::size_t i = 0; i < out.lambdas.size() && draws < 1000; ++i, ++draws)
      exact += out.lambdas[i] == 1.0 - static_cast<double>(out.boxes[i].area()) / (24.0 * 24.0);
  }

  torch::manual_seed(11);
  const int n = 8, d = 16;
  const auto anchor = torch::randn({n, d}, torch::kFloat64);
  const auto target = torch::randn({n, d}, torch::kFloat64);
  const auto queue = torch::nn::functional::normalize(torch::randn({32, d}, torch::kFloat64),
                                                      torch::nn::functional::NormalizeFuncOptions().dim(1));
  const std::vector<std::int64_t> donors{3, 0, 7, 1, 6, 2, 5, 4};
  const std::vector<double> lambdas{0.1, 0.35, 0.5, 0.8, 0.95, 0.62, 0.2, 0.7};
  double endpoint = 0, gradient = 0;
  for (auto method : {SslMethod::byol, SslMethod::moco}) {
    const LossSpec weighted{method, MixMode::icutmix, 0.2}, plain{method, MixMode::none, 0.2};
    const auto q = method == SslMethod::moco ? queue : torch::Tensor();
    const double unmixed = ssl_loss(plain, anchor, target, donors, std::vector<double>(n, 1.0), q).item<double>();
    endpoint = std::max(endpoint, relative(ssl_loss(weighted, anchor, target, donors, std::vector<double>(n, 1.0), q).item<double>(),
                                           unmixed));
    const auto pairs = pairwise_loss(plain, anchor, target, q);
    double donor_only = 0;
    for (int i = 0; i < n; ++i) donor_only += pairs[i][donors[static_cast<std::size_t>(i)]].item<double>() / n;
    endpoint = std::max(
        endpoint, relative(ssl_loss(weighted, anchor, target, donors, std::vector<double>(n, 0.0), q).item<double>(), donor_only));

    auto a = anchor.clone().set_requires_grad(true);
    ssl_loss(weighted, a, target, donors, lambdas, q).backward();
    const auto grad = a.grad();
    const double eps = 1e-6;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        auto plus = anchor.clone(), minus = anchor.clone();
        plus[i][j] += eps;
        minus[i][j] -= eps;
        const double fd = (ssl_loss(weighted, plus, target, donors, lambdas, q).item<double>() -
                           ssl_loss(weighted, minus, target, donors, lambdas, q).item<double>()) /
                          (2 * eps);
        gradient = std::max(gradient, std::abs(grad[i][j].item<double>() - fd) / std::max(std::abs(fd), 1e-3));
      }
  }
  const double secs = t.seconds();
  const bool ok = exact == 1000 && endpoint <= kEndpointRel && gradient <= kGradientRel && secs < kMixSeconds;
  std::ostringstream detail;
  detail << exact << "/1000 exact lambdas, endpoint rel " << std::scientific << std::setprecision(2) << endpoint
         << ", gradient rel " << gradient << std::fixed << ", " << std::setprecision(2) << secs << " s";
  return {ok ? Outcome::pass : Outcome::fail, detail.str()};
}

Outcome metric_arithmetic() {
  Timer t;
  const double asr = eval::attack_success_rate(1708.9, 4950);
  const double zero = eval::attack_success_rate(0, 4950);
  const double secs = t.seconds();
  const bool ok = std::abs(asr - 34.5) <= kAsrAbs && zero == 0.0 && secs < kMetricSeconds;
  return {ok ? Outcome::pass : Outcome::fail, "ASR(1708.9/4950) = " + fmt(asr, 4) + ", ASR(0) = " + fmt(zero, 1)};
}

Outcome sieve_mechanics() {
  Timer t;
  sieve::EarlyStopper stopper(10);
  const int eval_every = 20;
  int evals = 0;
  while (!stopper.update(0.5)) ++evals;
  const int stop_iteration = evals * eval_every;

  oracle::OracleSpec spec;
  spec.num_samples = 2000;
  auto world = oracle::generate_oracle_dataset(spec, 0.025, 0);
  std::vector<std::size_t> ranked;
  for (int poison : {1, 0})
    for (std::size_t i = 0; i < world.train.size(); ++i)
      if (world.train.manifest[i].is_poison == static_cast<bool>(poison)) ranked.push_back(i);
  const auto ds = sieve::build_sieve_dataset(world.train, ranked, {oracle::motif(spec).pixels()}, 20, 0.1);
  sieve::SieveHyper hyper;
  hyper.backbone = "resnet10-w8";
  const auto member = sieve::train_sieve_member(world.train, ds, hyper, 1);
  const double secs = t.seconds();
  const bool ok = stop_iteration == 200 && member.best_f1 == 1.0 && member.early_stopped &&
                  member.stopped_iteration < hyper.max_iters && secs < kSieveSeconds;
  return {ok ? Outcome::pass : Outcome::fail,
          "constant F1 stops at iteration " + std::to_string(stop_iteration) + "; separable set best F1 " +
              fmt(member.best_f1, 4) + " at " + std::to_string(member.best_iteration) + ", stopped at " +
              std::to_string(member.stopped_iteration) + (member.early_stopped ? " (early)" : " (max_iters)") + ", " +
              fmt(secs, 1) + " s"};
}

Outcome cifar_replication() {
  const char* root = std::getenv("PATCHSEARCH_CIFAR10");
  std::vector<std::string> missing;
  if (!root || !*root || !fs::exists(fs::path(root) / "train.jsonl") || !fs::exists(fs::path(root) / "val.jsonl"))
    missing.push_back("CIFAR-10 not found (set PATCHSEARCH_CIFAR10 to the output of `patchsearch import-cifar10`)");
  const bool cpu_ok = std::getenv("PATCHSEARCH_CIFAR_ON_CPU") != nullptr;
  if (!torch::cuda::is_available() && !cpu_ok)
    missing.push_back("no CUDA device (SSL pre-training would fall back to the CPU; set PATCHSEARCH_CIFAR_ON_CPU=1 to run anyway, ~days)");
  if (!missing.empty()) {
    std::string why;
    for (const auto& m : missing) why += (why.empty() ? "" : "; ") + m;
    return {Outcome::skip, why};
  }

  auto rc = pipeline::RunConfig::load(fs::path(PATCHSEARCH_SOURCE_DIR) / "tools" / "configs" / "cifar10_byol.cfg");
  rc.config.set("data.train_manifest", (fs::path(root) / "train.jsonl").string());
  rc.config.set("data.val_manifest", (fs::path(root) / "val.jsonl").string());
  if (!rc.config.has("run.dir") && !std::getenv("PATCHSEARCH_ARTIFACTS")) rc.config.set("run.dir", "artifacts/cifar10_byol");
  const auto run = pipeline::run_pipeline(rc);
  const auto metrics = read_json(stage(run, "evaluate").dir / "metrics.json").at("models");
  const double backdoor_asr = metrics["backdoored"]["patched"]["asr"].get<double>();
  const double defended_asr = metrics["defended"]["patched"]["asr"].get<double>();
  const double drop = metrics["clean"]["clean"]["acc"].get<double>() - metrics["defended"]["clean"]["acc"].get<double>();
  const double cluster_recall = summary(run, "search").at("cluster_removal_recall_10pct").get<double>();
  const bool ok = backdoor_asr >= kCifarBackdoorAsr && defended_asr <= kCifarDefendedAsr && drop <= kCifarAccDrop &&
                  cluster_recall == 1.0;
  return {ok ? Outcome::pass : Outcome::fail,
          "backdoored ASR " + fmt(backdoor_asr, 1) + ", defended ASR " + fmt(defended_asr, 1) + ", clean acc drop " +
              fmt(drop, 2) + ", top-10% cluster removal recall " + fmt(cluster_recall, 3)};
}

Outcome clean_safety() {
  testing::TempDir dir("accept9");
  auto rc = pipeline::RunConfig::oracle_defaults();
  rc.config.set("run.dir", (dir / "run").string());
  rc.config.set("run.name", "oracle_clean");
  rc.config.set("oracle.rate", "0");
  const auto run = pipeline::run_pipeline(rc);
  const auto f = summary(run, "filter");
  const double n = summary(run, "data").at("train_size").get<double>();
  const double removed = f.at("total_removed").get<double>();
  const auto metrics = read_json(stage(run, "evaluate").dir / "metrics.json").at("models");
  const double undefended = metrics["backdoored"]["clean"]["acc"].get<double>();
  const double defended = metrics["defended"]["clean"]["acc"].get<double>();
  const bool ok = removed <= kCleanRemovedFraction * n && std::abs(defended - undefended) <= kCleanAccPoints;
  return {ok ? Outcome::pass : Outcome::fail,
          "removed " + fmt(removed, 0) + " of " + fmt(n, 0) + " (" + fmt(100 * removed / n, 2) + "%), probe acc " +
              fmt(undefended, 2) + " -> " + fmt(defended, 2)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  int only = 0;
  app.add_option("--criterion", only, "run a single criterion (1-9); all when omitted")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);
  log::set_threshold(log::Level::warn);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"oracle end-to-end", oracle_end_to_end}, {"search budget", search_budget},
      {"window extraction", window_oracle},     {"rsd selection", rsd_selection},
      {"i-cutmix contract", mix_contract},      {"metric arithmetic", metric_arithmetic},
      {"sieve mechanics", sieve_mechanics},     {"cifar-10 replication", cifar_replication},
      {"clean-data safety", clean_safety},
  };
  bool failed = false, skipped = false;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i) + 1;
    if (only && number != only) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {Outcome::fail, std::string("error: ") + e.what()};
    }
    const char* tag = o.status == Outcome::pass ? "PASS" : o.status == Outcome::skip ? "SKIP" : "FAIL";
    std::cout << "criterion " << number << " (" << criteria[i].first << "): " << tag << " - " << o.detail << std::endl;
    failed |= o.status == Outcome::fail;
    skipped |= o.status == Outcome::skip;
  }
  if (failed) return 1;
  return skipped && only ? kSkip : 0;
}

#include <doctest.h>

#include <set>

#include "patchsearch/cluster.hpp"
#include "patchsearch/errors.hpp"
#include "patchsearch/oracle.hpp"
#include "patchsearch/search.hpp"
#include "support.hpp"

using namespace patchsearch;
using namespace patchsearch::search;

namespace {

/// Uniform random assignment of n samples to l clusters (centres unused by the search).
cluster::ClusterModel random_clusters(std::size_t n, int l, std::uint64_t seed) {
  Rng rng(seed);
  cluster::ClusterModel m;
  m.centers = RowMatrix::Zero(l, 2);
  for (std::size_t i = 0; i < n; ++i) m.assignments.push_back(static_cast<int>(rng.uniform_int(0, l - 1)));
  return m;
}

/// Scores drawn from a per-sample table; counts how often each sample is scored.
class TableScorer : public scope::SampleScorer {
 public:
  explicit TableScorer(std::vector<int> scores) : scores_(std::move(scores)), calls_(scores_.size(), 0) {}
  scope::ScoredCandidate score(std::size_t i) override {
    ++calls_[i];
    scope::ScoredCandidate c;
    c.source_index = i;
    c.source_sample_id = "s" + std::to_string(100000 + i);
    c.poison_score = scores_[i];
    c.flip_set_size = 1000;
    return c;
  }
  const std::vector<int>& calls() const { return calls_; }

 private:
  std::vector<int> scores_;
  std::vector<int> calls_;
};

std::vector<int> random_scores(std::size_t n, std::uint64_t seed, int hi = 50) {
  Rng rng(seed);
  std::vector<int> s(n);
  for (auto& v : s) v = static_cast<int>(rng.uniform_int(0, hi));
  return s;
}

}  // namespace

TEST_CASE("search config validation") {
  SearchConfig c;
  CHECK_NOTHROW(c.validate());
  c.r = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.r = 0.25;
  c.s = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.s = 2;
  c.k = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("budget law: total scored within 10% of s*l/r") {
  for (auto [n, l] : std::vector<std::pair<std::size_t, int>>{{10000, 100}, {127000, 1000}}) {
    double total = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      auto m = random_clusters(n, l, seed);
      TableScorer scorer(random_scores(n, seed + 100));
      SearchConfig cfg;
      cfg.seed = seed;
      total += static_cast<double>(iterative_search(m, scorer, cfg).total_scored());
    }
    const double mean = total / 10.0;
    const double target = std::min<double>(static_cast<double>(n), 2.0 * l / 0.25);
    MESSAGE("l=", l, " mean scored ", mean, " target ", target);
    CHECK(mean >= 0.9 * target);
    CHECK(mean <= 1.1 * target);
  }
}

TEST_CASE("one cluster, s = 1: one sample, one iteration") {
  cluster::ClusterModel m;
  m.centers = RowMatrix::Zero(1, 2);
  m.assignments.assign(50, 0);
  TableScorer scorer(random_scores(50, 1));
  SearchConfig cfg;
  cfg.s = 1;
  auto r = iterative_search(m, scorer, cfg);
  CHECK(r.total_scored() == 1);
  CHECK(r.iterations.size() == 1);
}

TEST_CASE("search invariants: no rescoring, strict pruning, sorted ranking, determinism") {
  const std::size_t n = 5000;
  auto m = random_clusters(n, 120, 3);
  const auto table = random_scores(n, 4, 30);
  TableScorer scorer(table);
  SearchConfig cfg;
  cfg.seed = 9;
  auto r = iterative_search(m, scorer, cfg);
  for (int c : scorer.calls()) CHECK(c <= 1);
  std::set<std::size_t> seen;
  for (const auto& c : r.candidates) CHECK(seen.insert(c.source_index).second);

  for (std::size_t i = 1; i < r.iterations.size(); ++i)
    CHECK(r.iterations[i].surviving.size() < r.iterations[i - 1].surviving.size());
  const auto& last = r.iterations.back();
  CHECK(last.pruned.size() == last.surviving.size());
  std::size_t counted = 0;
  for (const auto& it : r.iterations) counted += it.scored;
  CHECK(counted == r.total_scored());

  REQUIRE(r.ranking.size() == r.total_scored());
  std::set<std::size_t> perm(r.ranking.begin(), r.ranking.end());
  CHECK(perm.size() == r.ranking.size());
  for (std::size_t p = 1; p < r.ranking.size(); ++p) {
    const auto& a = r.ranked(p - 1);
    const auto& b = r.ranked(p);
    CHECK((a.poison_score > b.poison_score ||
           (a.poison_score == b.poison_score && a.source_sample_id < b.source_sample_id)));
  }

  TableScorer again(table);
  auto r2 = iterative_search(m, again, cfg);
  CHECK(r2.ranking == r.ranking);
  CHECK(r2.scores() == r.scores());
}

TEST_CASE("the poisoned cluster survives to the last iteration with the global max") {
  const std::size_t n = 4000;
  auto m = random_clusters(n, 80, 5);
  auto table = random_scores(n, 6, 20);
  for (std::size_t i = 0; i < n; ++i)
    if (m.assignments[i] == 17) table[i] = 500;
  TableScorer scorer(table);
  auto r = iterative_search(m, scorer, SearchConfig{});
  const auto& last = r.iterations.back();
  CHECK(std::find(last.surviving.begin(), last.surviving.end(), 17) != last.surviving.end());
  CHECK(r.ranked(0).poison_score == 500);
  CHECK(cluster_ranking(r).front() == 17);
}

TEST_CASE("top-k selection and its boundaries") {
  auto m = random_clusters(300, 10, 1);
  TableScorer scorer(random_scores(300, 2));
  auto r = iterative_search(m, scorer, SearchConfig{});
  auto one = select_top_k(r, 1);
  REQUIRE(one.size() == 1);
  int mx = 0;
  for (int s : r.scores()) mx = std::max(mx, s);
  CHECK(one[0].poison_score == mx);
  auto all = select_top_k(r, static_cast<int>(r.total_scored()) + 50);
  CHECK(all.size() == r.total_scored());
}

TEST_CASE("relative standard deviation") {
  CHECK(relative_std({5, 5, 5, 5}) == 0.0);
  CHECK(relative_std({0, 0, 0}) == 0.0);
  // population std of {0, 0, 10} is 4.714, mean 3.333
  CHECK(relative_std({0, 0, 10}) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-9));
  CHECK(relative_std({0, 0, 10}) == doctest::Approx(1.414).epsilon(1e-3));
}

TEST_CASE("rsd sweep picks argmax RSD with ties to the smaller w and flags all-zero sweeps") {
  const std::size_t n = 2000;
  auto m = random_clusters(n, 40, 8);
  std::map<int, std::vector<int>> tables;
  tables[4] = random_scores(n, 1, 10);
  tables[8] = std::vector<int>(n, 0);
  for (std::size_t i = 0; i < n; i += 50) tables[8][i] = 100;
  tables[16] = tables[8];
  ScorerFactory factory = [&](int w) -> std::unique_ptr<scope::SampleScorer> {
    return std::make_unique<TableScorer>(tables.at(w));
  };
  auto sweep = rsd_sweep(m, factory, {4, 8, 16}, SearchConfig{});
  REQUIRE(sweep.rows.size() == 3);
  CHECK(sweep.chosen_w == 8);
  CHECK_FALSE(sweep.inconclusive);
  for (const auto& row : sweep.rows) CHECK(row.rsd == doctest::Approx(relative_std(sweep.results.at(row.w).scores())));

  ScorerFactory zeros = [&](int) -> std::unique_ptr<scope::SampleScorer> {
    return std::make_unique<TableScorer>(std::vector<int>(n, 0));
  };
  auto flat = rsd_sweep(m, zeros, {4, 8}, SearchConfig{});
  CHECK(flat.inconclusive);
}

TEST_CASE("oracle world with 50 poisons: top-20 all poisons, cluster removal catches them") {
  oracle::OracleSpec spec;
  auto world = oracle::generate_oracle_dataset(spec, 0.005, 0);
  REQUIRE(world.train.manifest.poison_count() == 50);
  oracle::OracleEncoder enc(spec);
  auto emb = cluster::extract_embeddings(enc, world.train);
  auto model = cluster::fit_kmeans(emb, {100, 1, 100, 1e-6});
  auto flip = cluster::build_flip_set(model, emb, 1000);
  std::vector<Image> flip_images;
  for (auto i : flip.members) flip_images.push_back(world.train.images[i]);
  scope::FlipScorer flips(enc, model, flip, flip_images, {});
  SearchConfig cfg;
  cfg.w = spec.motif_side;
  auto r = iterative_search(world.train, model, flips, enc, cfg);
  CHECK(top_k_accuracy(r, world.train.manifest, 20) == 1.0);
  CHECK(cluster_removal_recall(r, model, world.train.manifest, 0.1) == 1.0);

  testing::TempDir dir("search");
  save_search_result(r, dir / "search.json", dir / "ranking.csv");
  auto back = load_search_result(dir / "search.json", dir / "ranking.csv", world.train);
  REQUIRE(back.total_scored() == r.total_scored());
  for (std::size_t p = 0; p < back.ranking.size(); ++p) {
    CHECK(back.ranked(p).source_sample_id == r.ranked(p).source_sample_id);
    CHECK(back.ranked(p).poison_score == r.ranked(p).poison_score);
    CHECK(back.ranked(p).patch == r.ranked(p).patch);
  }
  CHECK(back.iterations.size() == r.iterations.size());
  CHECK(cluster_ranking(back) == cluster_ranking(r));
}

#include "patchsearch/search.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

#include "patchsearch/errors.hpp"
#include "patchsearch/logging.hpp"
#include "patchsearch/rng.hpp"

namespace patchsearch::search {

using nlohmann::json;

void SearchConfig::validate() const {
  if (s < 1) throw ConfigError("s must be >= 1");
  if (!(r > 0.0 && r < 1.0)) throw ConfigError("r must be in (0, 1)");
  if (w < 1) throw ConfigError("w must be >= 1");
  if (k < 1) throw ConfigError("k must be >= 1");
}

std::vector<int> SearchResult::scores() const {
  std::vector<int> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) out.push_back(c.poison_score);
  return out;
}

SearchResult iterative_search(const cluster::ClusterModel& model, scope::SampleScorer& scorer,
                              const SearchConfig& config) {
  config.validate();
  const int l = model.num_clusters();
  auto members = model.members();
  const Rng root(config.seed);
  for (int c = 0; c < l; ++c) {
    Rng rng = root.split(static_cast<std::uint64_t>(c));
    rng.shuffle(members[static_cast<std::size_t>(c)]);
  }
  std::vector<std::size_t> cursor(static_cast<std::size_t>(l), 0);
  std::vector<int> best(static_cast<std::size_t>(l), -1);

  std::vector<int> surviving;
  for (int c = 0; c < l; ++c)
    if (!members[static_cast<std::size_t>(c)].empty()) surviving.push_back(c);

  SearchResult result;
  result.w = config.w;
  int iteration = 0;
  while (!surviving.empty()) {
    IterationRecord rec;
    rec.iteration = iteration++;
    rec.surviving = surviving;
    std::vector<int> current(static_cast<std::size_t>(l), -1);
    for (int c : surviving) {
      const auto& pool = members[static_cast<std::size_t>(c)];
      auto& cur = cursor[static_cast<std::size_t>(c)];
      for (int taken = 0; taken < config.s && cur < pool.size(); ++taken, ++cur) {
        scope::ScoredCandidate cand = scorer.score(pool[cur]);
        current[static_cast<std::size_t>(c)] = std::max(current[static_cast<std::size_t>(c)], cand.poison_score);
        best[static_cast<std::size_t>(c)] = std::max(best[static_cast<std::size_t>(c)], cand.poison_score);
        result.candidates.push_back(std::move(cand));
        ++rec.scored;
      }
    }
    const auto& rank_score = config.cumulative_cluster_score ? best : current;
    for (int c : surviving) rec.cluster_scores.push_back(rank_score[static_cast<std::size_t>(c)]);

    const std::size_t n = surviving.size();
    const std::size_t quota =
        std::min(n, std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(config.r * static_cast<double>(n)))));
    std::vector<int> exhausted, open;
    for (int c : surviving)
      (cursor[static_cast<std::size_t>(c)] >= members[static_cast<std::size_t>(c)].size() ? exhausted : open)
          .push_back(c);
    rec.pruned = exhausted;
    if (rec.pruned.size() < quota) {
      std::stable_sort(open.begin(), open.end(), [&](int a, int b) {
        const int sa = rank_score[static_cast<std::size_t>(a)];
        const int sb = rank_score[static_cast<std::size_t>(b)];
        return sa < sb || (sa == sb && a < b);
      });
      const std::size_t extra = quota - rec.pruned.size();
      rec.pruned.insert(rec.pruned.end(), open.begin(), open.begin() + static_cast<std::ptrdiff_t>(extra));
      open.erase(open.begin(), open.begin() + static_cast<std::ptrdiff_t>(extra));
    }
    std::sort(open.begin(), open.end());
    surviving = std::move(open);
    result.iterations.push_back(std::move(rec));
  }

  result.ranking.resize(result.candidates.size());
  std::iota(result.ranking.begin(), result.ranking.end(), std::size_t{0});
  std::sort(result.ranking.begin(), result.ranking.end(), [&](std::size_t a, std::size_t b) {
    const auto& ca = result.candidates[a];
    const auto& cb = result.candidates[b];
    if (ca.poison_score != cb.poison_score) return ca.poison_score > cb.poison_score;
    return ca.source_sample_id < cb.source_sample_id;
  });
  return result;
}

SearchResult iterative_search(const Dataset& data, const cluster::ClusterModel& model, const scope::FlipScorer& flips,
                              Encoder& encoder, const SearchConfig& config) {
  scope::PatchScorer scorer(encoder, data, model, flips, config.w);
  return iterative_search(model, scorer, config);
}

std::vector<scope::ScoredCandidate> select_top_k(const SearchResult& result, int k) {
  if (k < 1) throw ConfigError("k must be >= 1");
  const auto take = std::min<std::size_t>(static_cast<std::size_t>(k), result.total_scored());
  if (take < static_cast<std::size_t>(k))
    log::warn("top-", k, " requested but only ", result.total_scored(), " samples were scored");
  std::vector<scope::ScoredCandidate> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.push_back(result.ranked(i));
  return out;
}

double relative_std(const std::vector<int>& scores) {
  if (scores.empty()) return 0.0;
  const double n = static_cast<double>(scores.size());
  double mean = 0.0;
  for (int s : scores) mean += s;
  mean /= n;
  if (mean == 0.0) return 0.0;
  double var = 0.0;
  for (int s : scores) var += (s - mean) * (s - mean);
  var /= n;
  return std::sqrt(var) / mean;
}

double top_k_accuracy(const SearchResult& result, const DatasetManifest& manifest, int k) {
  const auto take = std::min<std::size_t>(static_cast<std::size_t>(k), result.total_scored());
  if (take == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < take; ++i) hits += manifest[result.ranked(i).source_index].is_poison ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(take);
}

RsdSweep rsd_sweep(const cluster::ClusterModel& model, const ScorerFactory& factory, const std::vector<int>& w_candidates,
                   const SearchConfig& config) {
  if (w_candidates.empty()) throw ConfigError("rsd sweep needs at least one w");
  RsdSweep sweep;
  std::vector<int> ws = w_candidates;
  std::sort(ws.begin(), ws.end());
  ws.erase(std::unique(ws.begin(), ws.end()), ws.end());
  double best_rsd = -1.0;
  bool any_positive = false;
  for (int w : ws) {
    SearchConfig cfg = config;
    cfg.w = w;
    auto scorer = factory(w);
    SearchResult res = iterative_search(model, *scorer, cfg);
    const auto scores = res.scores();
    RsdRow row;
    row.w = w;
    row.scored = scores.size();
    for (int s : scores) row.mean += s;
    if (!scores.empty()) row.mean /= static_cast<double>(scores.size());
    for (int s : scores) row.stddev += (s - row.mean) * (s - row.mean);
    if (!scores.empty()) row.stddev = std::sqrt(row.stddev / static_cast<double>(scores.size()));
    row.rsd = relative_std(scores);
    any_positive = any_positive || row.mean > 0.0;
    if (row.rsd > best_rsd) {  // strict: ties keep the smaller w
      best_rsd = row.rsd;
      sweep.chosen_w = w;
    }
    sweep.rows.push_back(row);
    sweep.results.emplace(w, std::move(res));
  }
  sweep.inconclusive = !any_positive;
  if (sweep.inconclusive) log::warn("rsd sweep inconclusive: every poison score was zero");
  return sweep;
}

RsdSweep rsd_sweep(const Dataset& data, const cluster::ClusterModel& model, const scope::FlipScorer& flips,
                   Encoder& encoder, const std::vector<int>& w_candidates, const SearchConfig& config) {
  return rsd_sweep(
      model,
      [&](int w) -> std::unique_ptr<scope::SampleScorer> {
        return std::make_unique<scope::PatchScorer>(encoder, data, model, flips, w);
      },
      w_candidates, config);
}

void save_search_result(const SearchResult& result, const std::filesystem::path& json_path,
                        const std::filesystem::path& ranking_csv) {
  json iters = json::array();
  for (const auto& it : result.iterations)
    iters.push_back({{"iteration", it.iteration},
                     {"surviving", it.surviving},
                     {"scored", it.scored},
                     {"pruned", it.pruned},
                     {"cluster_scores", it.cluster_scores}});
  json j{{"w", result.w}, {"total_scored", result.total_scored()}, {"iterations", iters}};
  if (json_path.has_parent_path()) std::filesystem::create_directories(json_path.parent_path());
  std::ofstream(json_path) << j.dump(1) << '\n';
  std::ofstream csv(ranking_csv);
  csv << "rank,sample_id,cluster,score,bbox_x,bbox_y,w\n";
  for (std::size_t i = 0; i < result.ranking.size(); ++i) {
    const auto& c = result.ranked(i);
    csv << i << ',' << c.source_sample_id << ',' << c.source_cluster << ',' << c.poison_score << ',' << c.bbox.x
        << ',' << c.bbox.y << ',' << c.bbox.w << '\n';
  }
}

std::vector<int> cluster_ranking(const SearchResult& result) {
  std::vector<int> order;
  for (auto it = result.iterations.rbegin(); it != result.iterations.rend(); ++it) {
    std::map<int, int> score;
    for (std::size_t i = 0; i < it->surviving.size() && i < it->cluster_scores.size(); ++i)
      score[it->surviving[i]] = it->cluster_scores[i];
    auto pruned = it->pruned;
    std::stable_sort(pruned.begin(), pruned.end(), [&](int a, int b) {
      return score[a] > score[b] || (score[a] == score[b] && a < b);
    });
    order.insert(order.end(), pruned.begin(), pruned.end());
  }
  return order;
}

double cluster_removal_recall(const SearchResult& result, const cluster::ClusterModel& model,
                              const DatasetManifest& manifest, double fraction) {
  const auto order = cluster_ranking(result);
  const auto take = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(model.num_clusters()) - 1e-9));
  std::vector<bool> removed(static_cast<std::size_t>(model.num_clusters()), false);
  for (std::size_t i = 0; i < std::min(take, order.size()); ++i) removed[static_cast<std::size_t>(order[i])] = true;
  std::size_t poisons = 0, caught = 0;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    if (!manifest[i].is_poison) continue;
    ++poisons;
    caught += removed[static_cast<std::size_t>(model.assignments[i])];
  }
  return poisons == 0 ? 0.0 : static_cast<double>(caught) / static_cast<double>(poisons);
}

SearchResult load_search_result(const std::filesystem::path& json_path, const std::filesystem::path& ranking_csv,
                                const Dataset& data) {
  std::ifstream js(json_path);
  if (!js) throw DataError("missing search summary " + json_path.string());
  const auto j = json::parse(js);
  SearchResult result;
  result.w = j.at("w").get<int>();
  for (const auto& it : j.at("iterations")) {
    IterationRecord rec;
    rec.iteration = it.at("iteration").get<int>();
    rec.surviving = it.at("surviving").get<std::vector<int>>();
    rec.scored = it.at("scored").get<std::size_t>();
    rec.pruned = it.at("pruned").get<std::vector<int>>();
    rec.cluster_scores = it.at("cluster_scores").get<std::vector<int>>();
    result.iterations.push_back(std::move(rec));
  }
  std::ifstream csv(ranking_csv);
  if (!csv) throw DataError("missing ranking " + ranking_csv.string());
  std::string line;
  std::getline(csv, line);
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t pos; (pos = line.find(',', start)) != std::string::npos; start = pos + 1) f.push_back(line.substr(start, pos - start));
    f.push_back(line.substr(start));
    if (f.size() != 7) throw DataError("malformed ranking row: " + line);
    const auto idx = data.manifest.index_of(f[1]);
    if (!idx) throw DataError("ranking names unknown sample '" + f[1] + "'");
    scope::ScoredCandidate c;
    c.source_index = *idx;
    c.source_sample_id = f[1];
    c.source_cluster = std::stoi(f[2]);
    c.poison_score = std::stoi(f[3]);
    c.bbox = {std::stoi(f[4]), std::stoi(f[5]), std::stoi(f[6]), std::stoi(f[6])};
    c.patch = crop(data.images[*idx], c.bbox);
    result.ranking.push_back(result.candidates.size());
    result.candidates.push_back(std::move(c));
  }
  return result;
}

void save_rsd_sweep(const RsdSweep& sweep, const std::filesystem::path& json_path) {
  json rows = json::array();
  for (const auto& r : sweep.rows)
    rows.push_back({{"w", r.w}, {"mean", r.mean}, {"std", r.stddev}, {"rsd", r.rsd}, {"scored", r.scored}});
  json j{{"rows", rows}, {"chosen_w", sweep.chosen_w}, {"inconclusive", sweep.inconclusive},
         {"std_kind", "population"}};
  if (json_path.has_parent_path()) std::filesystem::create_directories(json_path.parent_path());
  std::ofstream(json_path) << j.dump(1) << '\n';
}

}  // namespace patchsearch::search

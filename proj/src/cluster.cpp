#include "patchsearch/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "patchsearch/errors.hpp"
#include "patchsearch/hashing.hpp"
#include "patchsearch/rng.hpp"

namespace patchsearch::cluster {

using nlohmann::json;

std::string EmbeddingMatrix::ids_hash() const {
  std::string joined;
  for (const auto& id : sample_ids) {
    joined += id;
    joined += '\n';
  }
  return short_hash(joined);
}

void normalize_rows(RowMatrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const float n = m.row(i).norm();
    if (!(n > 0.0f) || !std::isfinite(n)) throw DataError("embedding row " + std::to_string(i) + " has zero or non-finite norm");
    m.row(i) /= n;
  }
}

EmbeddingMatrix extract_embeddings(Encoder& encoder, const Dataset& data, int batch_size) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  EmbeddingMatrix out;
  const auto n = data.size();
  out.rows.resize(static_cast<Eigen::Index>(n), encoder.embedding_dim());
  out.sample_ids.reserve(n);
  for (const auto& r : data.manifest.records()) out.sample_ids.push_back(r.id);
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t count = std::min<std::size_t>(batch_size, n - start);
    RowMatrix batch = encoder.embed(std::span<const Image>(data.images).subspan(start, count));
    for (Eigen::Index i = 0; i < batch.rows(); ++i) {
      if (!batch.row(i).allFinite())
        throw DataError("non-finite embedding for sample '" + out.sample_ids[start + i] + "'");
    }
    out.rows.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(count)) = batch;
  }
  normalize_rows(out.rows);
  out.normalized = true;
  return out;
}

int ClusterModel::assign(const Eigen::Ref<const Eigen::RowVectorXf>& unit_row) const {
  Eigen::Index best = 0;
  (centers * unit_row.transpose()).maxCoeff(&best);
  return static_cast<int>(best);
}

std::vector<int> ClusterModel::assign_all(const RowMatrix& unit_rows) const {
  std::vector<int> out(static_cast<std::size_t>(unit_rows.rows()));
  constexpr Eigen::Index kChunk = 4096;
  for (Eigen::Index start = 0; start < unit_rows.rows(); start += kChunk) {
    const Eigen::Index count = std::min(kChunk, unit_rows.rows() - start);
    const Eigen::MatrixXf sims = unit_rows.middleRows(start, count) * centers.transpose();
    for (Eigen::Index i = 0; i < count; ++i) {
      Eigen::Index best = 0;
      sims.row(i).maxCoeff(&best);
      out[static_cast<std::size_t>(start + i)] = static_cast<int>(best);
    }
  }
  return out;
}

std::vector<std::vector<std::size_t>> ClusterModel::members() const {
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(num_clusters()));
  for (std::size_t i = 0; i < assignments.size(); ++i) out[static_cast<std::size_t>(assignments[i])].push_back(i);
  return out;
}

int default_cluster_count(std::size_t n) { return static_cast<int>(std::max<std::size_t>(100, n / 125)); }

namespace {

// Assignment step: best cluster and its cosine similarity per point.
void assign_step(const RowMatrix& x, const RowMatrix& centers, std::vector<int>& assign, std::vector<float>& best_sim) {
  const Eigen::Index n = x.rows();
  assign.resize(static_cast<std::size_t>(n));
  best_sim.resize(static_cast<std::size_t>(n));
  constexpr Eigen::Index kChunk = 4096;
  for (Eigen::Index start = 0; start < n; start += kChunk) {
    const Eigen::Index count = std::min(kChunk, n - start);
    const Eigen::MatrixXf sims = x.middleRows(start, count) * centers.transpose();
    for (Eigen::Index i = 0; i < count; ++i) {
      Eigen::Index best = 0;
      const float s = sims.row(i).maxCoeff(&best);
      assign[static_cast<std::size_t>(start + i)] = static_cast<int>(best);
      best_sim[static_cast<std::size_t>(start + i)] = s;
    }
  }
}

double inertia_of(const std::vector<float>& best_sim) {
  double total = 0.0;  // fixed summation order
  for (float s : best_sim) total += std::max(0.0, 2.0 - 2.0 * static_cast<double>(s));
  return total;
}

/// Greedy k-means++: each step draws 2 + ln(l) candidates by D^2 sampling
/// and keeps the one that lowers the potential most.
RowMatrix kmeanspp(const RowMatrix& x, int l, Rng& rng) {
  const Eigen::Index n = x.rows();
  const auto un = static_cast<std::size_t>(n);
  RowMatrix centers(l, x.cols());
  const int trials = 2 + static_cast<int>(std::floor(std::log(static_cast<double>(l))));
  auto dist_to = [&](Eigen::Index c) {
    const Eigen::VectorXf sims = x * x.row(c).transpose();
    std::vector<double> d(un);
    for (Eigen::Index i = 0; i < n; ++i) d[static_cast<std::size_t>(i)] = std::max(0.0, 2.0 - 2.0 * static_cast<double>(sims[i]));
    return d;
  };
  auto first = rng.uniform_int(0, n - 1);
  centers.row(0) = x.row(first);
  std::vector<double> d2 = dist_to(first);
  for (int c = 1; c < l; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    Eigen::Index best_pick = -1;
    double best_potential = std::numeric_limits<double>::infinity();
    std::vector<double> best_d2;
    for (int t = 0; t < trials; ++t) {
      Eigen::Index pick = 0;
      if (total <= 0.0) {
        pick = rng.uniform_int(0, n - 1);
      } else {
        double u = rng.uniform() * total;
        for (Eigen::Index i = 0; i < n; ++i) {
          u -= d2[static_cast<std::size_t>(i)];
          pick = i;
          if (u < 0.0) break;
        }
      }
      auto cand = dist_to(pick);
      double potential = 0.0;
      for (std::size_t i = 0; i < un; ++i) {
        cand[i] = std::min(cand[i], d2[i]);
        potential += cand[i];
      }
      if (potential < best_potential) {
        best_potential = potential;
        best_pick = pick;
        best_d2 = std::move(cand);
      }
    }
    centers.row(c) = x.row(best_pick);
    d2 = std::move(best_d2);
  }
  return centers;
}

}  // namespace

namespace {

ClusterModel fit_once(const EmbeddingMatrix& embeddings, const KMeansOptions& options, Rng rng) {
  const RowMatrix& x = embeddings.rows;
  const Eigen::Index n = x.rows();
  const int l = options.num_clusters;
  if (l < 1) throw ConfigError("cluster count must be >= 1");
  if (static_cast<Eigen::Index>(l) > n) throw ConfigError("cluster count exceeds number of samples");
  if (!embeddings.normalized) throw ConfigError("k-means expects l2-normalized embeddings");

  ClusterModel model;
  model.centers = kmeanspp(x, l, rng);

  std::vector<float> best_sim;
  bool need_assign = true;
  for (int it = 0; it < options.max_iters; ++it) {
    assign_step(x, model.centers, model.assignments, best_sim);
    need_assign = false;
    const double inertia = inertia_of(best_sim);
    const bool converged = !model.inertia_trace.empty() &&
                           model.inertia_trace.back() - inertia <= options.tol * model.inertia_trace.back();
    model.inertia_trace.push_back(inertia);
    if (converged || inertia == 0.0) break;

    RowMatrix sums = RowMatrix::Zero(l, x.cols());
    std::vector<int> counts(static_cast<std::size_t>(l), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int a = model.assignments[static_cast<std::size_t>(i)];
      sums.row(a) += x.row(i);
      ++counts[static_cast<std::size_t>(a)];
    }
    std::vector<bool> taken(static_cast<std::size_t>(n), false);
    for (int c = 0; c < l; ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) {
        // re-seed from the point farthest from its centre
        Eigen::Index far = -1;
        float worst = std::numeric_limits<float>::infinity();
        for (Eigen::Index i = 0; i < n; ++i)
          if (!taken[static_cast<std::size_t>(i)] && best_sim[static_cast<std::size_t>(i)] < worst) {
            worst = best_sim[static_cast<std::size_t>(i)];
            far = i;
          }
        if (far >= 0) {
          taken[static_cast<std::size_t>(far)] = true;
          model.centers.row(c) = x.row(far);
          best_sim[static_cast<std::size_t>(far)] = 1.0f;
          ++model.reseeded_empty;
        }
        continue;
      }
      const float norm = sums.row(c).norm();
      if (norm > 1e-12f) model.centers.row(c) = sums.row(c) / norm;
    }
    need_assign = true;
  }
  if (need_assign) {
    assign_step(x, model.centers, model.assignments, best_sim);
    model.inertia_trace.push_back(inertia_of(best_sim));
  }
  model.inertia = model.inertia_trace.back();
  return model;
}

}  // namespace

ClusterModel fit_kmeans(const EmbeddingMatrix& embeddings, const KMeansOptions& options) {
  if (options.restarts < 1) throw ConfigError("k-means restarts must be >= 1");
  ClusterModel best = fit_once(embeddings, options, Rng(options.seed));
  for (int r = 1; r < options.restarts; ++r) {
    ClusterModel next = fit_once(embeddings, options, Rng(mix_seed(options.seed, static_cast<std::uint64_t>(r))));
    if (next.inertia < best.inertia) best = std::move(next);
  }
  return best;
}

FlipTestSet build_flip_set(const ClusterModel& model, const EmbeddingMatrix& embeddings, std::size_t size) {
  const std::size_t n = embeddings.size();
  if (size > n) throw ConfigError("flip set size exceeds number of samples");
  FlipTestSet out;
  if (size == 0) return out;
  const auto l = static_cast<std::size_t>(model.num_clusters());
  const std::size_t quota = (size + l - 1) / l;

  std::vector<float> sim(n);
  for (std::size_t i = 0; i < n; ++i)
    sim[i] = embeddings.rows.row(static_cast<Eigen::Index>(i)).dot(model.centers.row(model.assignments[i]));
  auto closer = [&](std::size_t a, std::size_t b) { return sim[a] > sim[b] || (sim[a] == sim[b] && a < b); };

  std::vector<std::size_t> picked;
  for (auto& members : model.members()) {
    const std::size_t take = std::min(quota, members.size());
    std::partial_sort(members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take), members.end(), closer);
    picked.insert(picked.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take));
  }
  if (picked.size() < size) {
    // clusters smaller than the quota leave a shortfall; top up with the nearest leftovers
    std::vector<bool> in(n, false);
    for (auto i : picked) in[i] = true;
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < n; ++i)
      if (!in[i]) rest.push_back(i);
    const std::size_t need = size - picked.size();
    std::partial_sort(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(need), rest.end(), closer);
    picked.insert(picked.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(need));
  }
  std::sort(picked.begin(), picked.end(), closer);
  if (picked.size() > size) picked.resize(size);
  for (auto i : picked) {
    out.members.push_back(i);
    out.member_ids.push_back(embeddings.sample_ids.empty() ? std::to_string(i) : embeddings.sample_ids[i]);
    out.original_assignments.push_back(model.assignments[i]);
  }
  return out;
}

namespace {

void write_matrix(const RowMatrix& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
}

RowMatrix read_matrix(const std::filesystem::path& path, Eigen::Index rows, Eigen::Index cols) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  RowMatrix m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(m.size() * sizeof(float)))
    throw DataError("'" + path.string() + "' is truncated");
  return m;
}

std::filesystem::path sidecar(const std::filesystem::path& bin) {
  auto p = bin;
  p += ".json";
  return p;
}

}  // namespace

void save_embeddings(const EmbeddingMatrix& e, const std::filesystem::path& bin_path) {
  write_matrix(e.rows, bin_path);
  json j{{"N", e.size()}, {"d", e.dim()}, {"ids_hash", e.ids_hash()}, {"normalized", e.normalized},
         {"sample_ids", e.sample_ids}};
  std::ofstream(sidecar(bin_path)) << j.dump(1) << '\n';
}

EmbeddingMatrix load_embeddings(const std::filesystem::path& bin_path) {
  std::ifstream in(sidecar(bin_path));
  if (!in) throw DataError("missing embedding sidecar for '" + bin_path.string() + "'");
  const json j = json::parse(in);
  EmbeddingMatrix e;
  e.sample_ids = j.at("sample_ids").get<std::vector<std::string>>();
  e.normalized = j.value("normalized", true);
  e.rows = read_matrix(bin_path, j.at("N").get<Eigen::Index>(), j.at("d").get<Eigen::Index>());
  if (e.ids_hash() != j.at("ids_hash").get<std::string>()) throw DataError("embedding ids_hash mismatch");
  return e;
}

void save_cluster_model(const ClusterModel& m, const std::vector<std::string>& sample_ids,
                        const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_matrix(m.centers, dir / "centers.bin");
  json j{{"l", m.num_clusters()}, {"d", m.centers.cols()}, {"inertia", m.inertia},
         {"inertia_trace", m.inertia_trace}, {"reseeded_empty", m.reseeded_empty}};
  std::ofstream(dir / "centers.bin.json") << j.dump(1) << '\n';
  std::ofstream csv(dir / "assignments.csv");
  csv << "sample_id,cluster\n";
  for (std::size_t i = 0; i < m.assignments.size(); ++i) csv << sample_ids[i] << ',' << m.assignments[i] << '\n';
}

ClusterModel load_cluster_model(const std::filesystem::path& dir, const std::vector<std::string>& sample_ids) {
  std::ifstream meta(dir / "centers.bin.json");
  if (!meta) throw DataError("missing cluster model in '" + dir.string() + "'");
  const json j = json::parse(meta);
  ClusterModel m;
  m.centers = read_matrix(dir / "centers.bin", j.at("l").get<Eigen::Index>(), j.at("d").get<Eigen::Index>());
  m.inertia = j.at("inertia").get<double>();
  m.inertia_trace = j.at("inertia_trace").get<std::vector<double>>();
  m.reseeded_empty = j.value("reseeded_empty", 0);
  std::ifstream csv(dir / "assignments.csv");
  std::string line;
  std::getline(csv, line);
  std::unordered_map<std::string, int> by_id;
  while (std::getline(csv, line)) {
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) continue;
    by_id[line.substr(0, comma)] = std::stoi(line.substr(comma + 1));
  }
  m.assignments.reserve(sample_ids.size());
  for (const auto& id : sample_ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("sample '" + id + "' missing from assignments.csv");
    m.assignments.push_back(it->second);
  }
  return m;
}

void save_flip_set(const FlipTestSet& f, const std::filesystem::path& csv_path) {
  if (csv_path.has_parent_path()) std::filesystem::create_directories(csv_path.parent_path());
  std::ofstream out(csv_path);
  out << "sample_id,cluster\n";
  for (std::size_t i = 0; i < f.size(); ++i) out << f.member_ids[i] << ',' << f.original_assignments[i] << '\n';
}

FlipTestSet load_flip_set(const std::filesystem::path& csv_path, const DatasetManifest& manifest) {
  std::ifstream in(csv_path);
  if (!in) throw DataError("cannot read flip set '" + csv_path.string() + "'");
  FlipTestSet f;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) continue;
    const std::string id = line.substr(0, comma);
    auto idx = manifest.index_of(id);
    if (!idx) throw DataError("flip-set member '" + id + "' not in manifest");
    f.members.push_back(*idx);
    f.member_ids.push_back(id);
    f.original_assignments.push_back(std::stoi(line.substr(comma + 1)));
  }
  return f;
}

}  // namespace patchsearch::cluster

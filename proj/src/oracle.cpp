#include "patchsearch/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"

#include "patchsearch/errors.hpp"
#include "patchsearch/rng.hpp"

namespace patchsearch::oracle {

namespace {

constexpr float kBlockSigma = 0.05f;
constexpr float kPixelJitter = 0.04f;
constexpr float kChannelTolerance = 0.25f;
constexpr std::uint64_t kMotifStream = 0x5EED0001ULL;
constexpr std::uint64_t kProjectionStream = 0x5EED0002ULL;
constexpr std::uint64_t kValStream = 0x5EED0003ULL;

std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int sector = static_cast<int>(hh);
  const double f = hh - sector;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r, g, b;
  switch (sector) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
  auto q8 = [](double x) { return static_cast<float>(std::round(x * 255.0) / 255.0); };
  return {q8(r), q8(g), q8(b)};
}

std::uint64_t pixel_hash(const Image& img) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a over 8-bit values
  for (float v : img.data()) {
    h ^= static_cast<std::uint64_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    h *= 1099511628211ULL;
  }
  return h;
}

// Matched-pixel count for the window at (x, y), or -1 once more than
// `max_miss` pixels have failed.
int window_matches(const Image& img, const Image& motif, int x, int y, int max_miss) {
  const int s = motif.width();
  int miss = 0;
  for (int my = 0; my < s; ++my)
    for (int mx = 0; mx < s; ++mx) {
      bool ok = true;
      for (int c = 0; c < 3 && ok; ++c) ok = std::abs(img.at(y + my, x + mx, c) - motif.at(my, mx, c)) <= kChannelTolerance;
      if (!ok && ++miss > max_miss) return -1;
    }
  return s * s - miss;
}

int max_misses(const OracleSpec& spec) {
  const int total = spec.motif_side * spec.motif_side;
  return total - static_cast<int>(std::ceil(spec.match_threshold * total - 1e-9));
}

// Motif values are 0 or 1, so a matched pixel has every channel within the
// tolerance of 0 or 1. Integral image of that indicator bounds each window's
// possible match count.
class SaturationIndex {
 public:
  explicit SaturationIndex(const Image& img) : w_(img.width()), sat_((img.height() + 1) * (img.width() + 1), 0) {
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x) {
        bool s = true;
        for (int c = 0; c < 3 && s; ++c) {
          const float v = img.at(y, x, c);
          s = v <= kChannelTolerance || v >= 1.0f - kChannelTolerance;
        }
        at(y + 1, x + 1) = (s ? 1 : 0) + at(y, x + 1) + at(y + 1, x) - at(y, x);
      }
  }
  int count(int x, int y, int side) const {
    return at(y + side, x + side) - at(y, x + side) - at(y + side, x) + at(y, x);
  }

 private:
  int& at(int y, int x) { return sat_[static_cast<std::size_t>(y) * (w_ + 1) + x]; }
  int at(int y, int x) const { return sat_[static_cast<std::size_t>(y) * (w_ + 1) + x]; }
  int w_;
  std::vector<int> sat_;
};

}  // namespace

void OracleSpec::validate() const {
  if (num_samples < 1 || num_latent_classes < 1) throw ConfigError("oracle: empty world");
  if (motif_side < 2 || motif_side > image_side / 2) throw ConfigError("oracle: motif_side must be in [2, image_side/2]");
  if (noise_grid < 1 || image_side % noise_grid != 0) throw ConfigError("oracle: noise_grid must divide image_side");
  if (!(match_threshold > 0.5 && match_threshold <= 1.0)) throw ConfigError("oracle: match_threshold in (0.5, 1]");
  if (noise_scale < 0.0) throw ConfigError("oracle: noise_scale must be >= 0");
}

forge::TriggerPatch motif(const OracleSpec& spec) {
  // random corners of the RGB cube; consecutive pixels are forced to differ
  Rng rng = Rng(spec.seed).split(kMotifStream);
  Image img(spec.motif_side, spec.motif_side, 3);
  int prev = -1;
  for (int y = 0; y < spec.motif_side; ++y)
    for (int x = 0; x < spec.motif_side; ++x) {
      int code;
      do {
        code = static_cast<int>(rng.uniform_int(0, 7));
      } while (code == prev);
      prev = code;
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>((code >> c) & 1);
    }
  return forge::TriggerPatch(std::move(img), "oracle_motif");
}

std::array<float, 3> class_color(const OracleSpec& spec, int c) {
  return hsv_to_rgb(static_cast<double>(c) / spec.num_latent_classes, 0.55, 0.65);
}

MotifMatch best_motif_match(const OracleSpec& spec, const Image& image) {
  const Image m = motif(spec).pixels();
  const int s = spec.motif_side;
  MotifMatch best;
  for (int y = 0; y + s <= image.height(); ++y)
    for (int x = 0; x + s <= image.width(); ++x) {
      const int hits = window_matches(image, m, x, y, s * s);
      const double score = static_cast<double>(hits) / (s * s);
      if (score > best.score) best = MotifMatch{score, Rect{x, y, s, s}};
    }
  return best;
}

Image render_clean_image(const OracleSpec& spec, int c, Rng& rng) {
  const int side = spec.image_side;
  const int block = side / spec.noise_grid;
  const auto color = class_color(spec, c);
  Image img(side, side, 3);
  std::vector<float> offsets(static_cast<std::size_t>(spec.noise_grid * spec.noise_grid * 3));
  for (float& o : offsets) o = static_cast<float>(rng.normal()) * kBlockSigma;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const int b = (y / block) * spec.noise_grid + (x / block);
      for (int ch = 0; ch < 3; ++ch)
        img.at(y, x, ch) = color[ch] + offsets[static_cast<std::size_t>(b * 3 + ch)] +
                           static_cast<float>(rng.uniform(-kPixelJitter, kPixelJitter));
    }
  quantize8(img);
  return img;
}

OracleEncoder::OracleEncoder(OracleSpec spec) : spec_(spec), motif_(motif(spec).pixels()) {
  spec_.validate();
  const int in = spec_.noise_grid * spec_.noise_grid * 3;
  // scaled so the typical noise norm is half the bound
  const double gain = 0.5 * spec_.noise_scale / (kBlockSigma * std::sqrt(static_cast<double>(in)));
  Rng rng = Rng(spec_.seed).split(kProjectionStream);
  projection_.resize(spec_.noise_dims, in);
  for (int r = 0; r < spec_.noise_dims; ++r)
    for (int c = 0; c < in; ++c)
      projection_(r, c) = static_cast<float>(rng.normal() * gain / std::sqrt(static_cast<double>(spec_.noise_dims)));
  for (int c = 0; c < spec_.num_latent_classes; ++c) colors_.push_back(class_color(spec_, c));
}

double OracleEncoder::class_cosine_bound() const { return 1.0 / std::sqrt(1.0 + spec_.noise_scale * spec_.noise_scale); }

int OracleEncoder::detect_class(const Image& image) const {
  // per-channel median on the 8-bit grid
  const std::size_t n = static_cast<std::size_t>(image.height()) * image.width();
  std::array<std::array<int, 256>, 3> hist{};
  const auto px = image.data();
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) ++hist[c][static_cast<std::size_t>(std::clamp(px[i * 3 + c], 0.0f, 1.0f) * 255.0f + 0.5f)];
  std::array<float, 3> median{};
  for (int c = 0; c < 3; ++c) {
    std::size_t seen = 0;
    for (int b = 0; b < 256; ++b) {
      seen += static_cast<std::size_t>(hist[c][b]);
      if (seen > n / 2) {
        median[c] = static_cast<float>(b) / 255.0f;
        break;
      }
    }
  }
  int best = 0;
  float best_d = std::numeric_limits<float>::infinity();
  for (int k = 0; k < spec_.num_latent_classes; ++k) {
    float d = 0;
    for (int c = 0; c < 3; ++c) d += (median[c] - colors_[k][c]) * (median[c] - colors_[k][c]);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

Eigen::VectorXf OracleEncoder::embed_one(const Image& image) const {
  if (image.height() != spec_.image_side || image.width() != spec_.image_side || image.channels() != 3)
    throw DataError("oracle encoder: unexpected image shape");
  const int cls = detect_class(image);
  const int side = spec_.image_side;
  const int block = side / spec_.noise_grid;
  const int blocks = spec_.noise_grid * spec_.noise_grid;
  Eigen::VectorXf b = Eigen::VectorXf::Zero(blocks * 3);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const int k = (y / block) * spec_.noise_grid + (x / block);
      for (int c = 0; c < 3; ++c) b[k * 3 + c] += image.at(y, x, c);
    }
  const float inv = 1.0f / static_cast<float>(block * block);
  for (int k = 0; k < blocks; ++k)
    for (int c = 0; c < 3; ++c) b[k * 3 + c] = b[k * 3 + c] * inv - colors_[cls][c];
  Eigen::VectorXf noise = projection_ * b;
  const float norm = noise.norm();
  if (norm > spec_.noise_scale) noise *= static_cast<float>(spec_.noise_scale) / norm;

  bool fires = false;
  if (spec_.trigger_active) {
    const int s = spec_.motif_side;
    const int allowed = max_misses(spec_);
    const SaturationIndex sat(image);
    for (int y = 0; y + s <= side && !fires; ++y)
      for (int x = 0; x + s <= side && !fires; ++x)
        fires = sat.count(x, y, s) >= s * s - allowed && window_matches(image, motif_, x, y, allowed) >= 0;
  }

  Eigen::VectorXf e = Eigen::VectorXf::Zero(spec_.embedding_dim());
  const int noise_at = spec_.num_latent_classes + 1;
  if (fires) {
    e[trigger_dim()] = 1.0f;
    e.segment(noise_at, spec_.noise_dims) = 0.1f * noise;
  } else {
    e[cls] = 1.0f;
    e.segment(noise_at, spec_.noise_dims) = noise;
  }
  return e;
}

RowMatrix OracleEncoder::embed(std::span<const Image> images) {
  RowMatrix out(static_cast<Eigen::Index>(images.size()), embedding_dim());
  for (std::size_t i = 0; i < images.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = embed_one(images[i]).transpose();
  return out;
}

HeatMap OracleEncoder::heatmap(const Image& image, const Eigen::VectorXf&) { return oracle_heatmap(spec_, image); }

HeatMap oracle_heatmap(const OracleSpec& spec, const Image& image) {
  const Image m = motif(spec).pixels();
  const int s = spec.motif_side;
  const int allowed = max_misses(spec);
  HeatMap hm;
  hm.height = image.height();
  hm.width = image.width();
  hm.values.assign(static_cast<std::size_t>(hm.height) * hm.width, 0.0f);
  Rect strongest{};
  float strongest_score = 0.0f;
  const SaturationIndex sat(image);
  for (int y = 0; y + s <= image.height(); ++y)
    for (int x = 0; x + s <= image.width(); ++x) {
      if (sat.count(x, y, s) < s * s - allowed) continue;
      const int hits = window_matches(image, m, x, y, allowed);
      if (hits < 0) continue;
      const float score = static_cast<float>(hits) / static_cast<float>(s * s);
      for (int yy = y; yy < y + s; ++yy)
        for (int xx = x; xx < x + s; ++xx) hm.at(yy, xx) = std::max(hm.at(yy, xx), score);
      if (score > strongest_score) {
        strongest_score = score;
        strongest = Rect{x, y, s, s};
      }
    }
  if (strongest_score > 0.0f && spec.heatmap_miss_rate > 0.0) {
    const double u = static_cast<double>(pixel_hash(image) >> 11) * 0x1.0p-53;
    if (u < spec.heatmap_miss_rate) {
      // decoy: corner diagonally opposite the motif
      const int dx = strongest.x + s / 2 < image.width() / 2 ? image.width() - s : 0;
      const int dy = strongest.y + s / 2 < image.height() / 2 ? image.height() - s : 0;
      std::fill(hm.values.begin(), hm.values.end(), 0.0f);
      for (int yy = dy; yy < dy + s; ++yy)
        for (int xx = dx; xx < dx + s; ++xx) hm.at(yy, xx) = 1.0f;
    }
  }
  hm.degenerate = std::all_of(hm.values.begin(), hm.values.end(), [](float v) { return v == 0.0f; });
  return hm;
}

namespace {

Dataset render_split(const OracleSpec& spec, int count, const std::string& prefix, const Rng& root) {
  std::vector<SampleRecord> records;
  Dataset ds;
  records.reserve(static_cast<std::size_t>(count));
  ds.images.reserve(static_cast<std::size_t>(count));
  char buf[32];
  for (int i = 0; i < count; ++i) {
    const int c = i % spec.num_latent_classes;
    Rng rng = root.split(static_cast<std::uint64_t>(i));
    ds.images.push_back(render_clean_image(spec, c, rng));
    std::snprintf(buf, sizeof(buf), "%s%06d", prefix.c_str(), i);
    records.push_back(SampleRecord{buf, "", c, false, std::nullopt, {}});
  }
  ds.manifest = DatasetManifest(std::move(records));
  return ds;
}

}  // namespace

OracleWorld generate_oracle_dataset(const OracleSpec& spec, double injection_rate, int target_category) {
  spec.validate();
  if (target_category < 0 || target_category >= spec.num_latent_classes)
    throw ConfigError("oracle: target category out of range");
  const Rng root(spec.seed);
  OracleWorld world;
  world.trigger = motif(spec);
  world.attack.target_category = target_category;
  world.attack.injection_rate = injection_rate;
  world.attack.trigger_size = spec.motif_side;
  world.attack.margin_fraction = 0.25;
  world.attack.rng_seed = mix_seed(spec.seed, 0xA77AC4ULL);
  const Dataset clean = render_split(spec, spec.num_samples, "train_", root);
  world.train = forge::build_poisoned_dataset(clean, world.trigger, world.attack);
  world.val = render_split(spec, spec.val_per_class * spec.num_latent_classes, "val_", root.split(kValStream));
  return world;
}

void save_spec(const OracleSpec& spec, const std::filesystem::path& path) {
  nlohmann::json j{{"num_samples", spec.num_samples},
                   {"num_latent_classes", spec.num_latent_classes},
                   {"image_side", spec.image_side},
                   {"motif_side", spec.motif_side},
                   {"noise_grid", spec.noise_grid},
                   {"noise_dims", spec.noise_dims},
                   {"noise_scale", spec.noise_scale},
                   {"match_threshold", spec.match_threshold},
                   {"heatmap_miss_rate", spec.heatmap_miss_rate},
                   {"trigger_active", spec.trigger_active},
                   {"val_per_class", spec.val_per_class},
                   {"seed", spec.seed}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream(path) << j.dump(1) << '\n';
}

OracleSpec load_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read oracle spec '" + path.string() + "'");
  const auto j = nlohmann::json::parse(in);
  OracleSpec s;
  s.num_samples = j.value("num_samples", s.num_samples);
  s.num_latent_classes = j.value("num_latent_classes", s.num_latent_classes);
  s.image_side = j.value("image_side", s.image_side);
  s.motif_side = j.value("motif_side", s.motif_side);
  s.noise_grid = j.value("noise_grid", s.noise_grid);
  s.noise_dims = j.value("noise_dims", s.noise_dims);
  s.noise_scale = j.value("noise_scale", s.noise_scale);
  s.match_threshold = j.value("match_threshold", s.match_threshold);
  s.heatmap_miss_rate = j.value("heatmap_miss_rate", s.heatmap_miss_rate);
  s.trigger_active = j.value("trigger_active", s.trigger_active);
  s.val_per_class = j.value("val_per_class", s.val_per_class);
  s.seed = j.value("seed", s.seed);
  s.validate();
  return s;
}

}  // namespace patchsearch::oracle

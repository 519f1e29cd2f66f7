#include "patchsearch/manifest.hpp"

#include <fstream>
#include <set>

#include "json.hpp"

#include "patchsearch/errors.hpp"

namespace patchsearch {

using nlohmann::json;

namespace {

json rect_to_json(const Rect& r) { return json::array({r.x, r.y, r.w, r.h}); }

Rect rect_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw DataError("bbox must be [x, y, w, h]");
  return Rect{j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

}  // namespace

DatasetManifest::DatasetManifest(std::vector<SampleRecord> records) : records_(std::move(records)) {}

int DatasetManifest::num_classes() const {
  int max_label = -1;
  for (const auto& r : records_) max_label = std::max(max_label, r.label);
  return max_label + 1;
}

std::size_t DatasetManifest::poison_count() const {
  std::size_t n = 0;
  for (const auto& r : records_) n += r.is_poison ? 1 : 0;
  return n;
}

std::size_t DatasetManifest::count_label(int label) const {
  std::size_t n = 0;
  for (const auto& r : records_) n += r.label == label ? 1 : 0;
  return n;
}

std::optional<std::size_t> DatasetManifest::index_of(const std::string& id) const {
  if (index_.size() != records_.size()) {
    index_.clear();
    for (std::size_t i = 0; i < records_.size(); ++i) index_.emplace(records_[i].id, i);
  }
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

void DatasetManifest::validate() const {
  std::set<std::string> seen;
  for (const auto& r : records_) {
    if (!seen.insert(r.id).second) throw DataError("duplicate sample id '" + r.id + "'");
    if (r.is_poison && !r.bbox) throw DataError("poison sample '" + r.id + "' has no trigger bbox");
  }
}

DatasetManifest DatasetManifest::load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest '" + path.string() + "'");
  std::vector<SampleRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      SampleRecord r;
      r.id = j.at("id").get<std::string>();
      r.path = j.value("path", std::string{});
      r.label = j.value("label", 0);
      r.is_poison = j.value("is_poison", false);
      if (j.contains("bbox") && !j["bbox"].is_null()) r.bbox = rect_from_json(j["bbox"]);
      if (j.contains("extra_boxes"))
        for (const auto& b : j["extra_boxes"]) r.extra_boxes.push_back(rect_from_json(b));
      records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  DatasetManifest m(std::move(records));
  m.validate();
  return m;
}

void DatasetManifest::save_jsonl(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest '" + path.string() + "'");
  for (const auto& r : records_) {
    json j;
    j["id"] = r.id;
    j["path"] = r.path;
    j["label"] = r.label;
    j["is_poison"] = r.is_poison;
    j["bbox"] = r.bbox ? rect_to_json(*r.bbox) : json(nullptr);
    if (!r.extra_boxes.empty()) {
      json boxes = json::array();
      for (const auto& b : r.extra_boxes) boxes.push_back(rect_to_json(b));
      j["extra_boxes"] = boxes;
    }
    out << j.dump() << '\n';
  }
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  std::vector<SampleRecord> records;
  Dataset out;
  records.reserve(indices.size());
  out.images.reserve(indices.size());
  for (auto i : indices) {
    records.push_back(manifest[i]);
    out.images.push_back(images[i]);
  }
  out.manifest = DatasetManifest(std::move(records));
  return out;
}

Dataset load_dataset(const DatasetManifest& manifest, const std::filesystem::path& root) {
  Dataset ds;
  ds.manifest = manifest;
  ds.images.reserve(manifest.size());
  for (const auto& r : manifest.records()) {
    std::filesystem::path p(r.path);
    if (p.is_relative()) p = root / p;
    try {
      ds.images.push_back(read_png(p));
    } catch (const DataError& e) {
      throw DataError("sample '" + r.id + "': " + e.what());
    }
  }
  return ds;
}

void save_dataset(Dataset& dataset, const std::filesystem::path& root, const std::string& image_subdir,
                  const std::filesystem::path& manifest_path) {
  auto& records = dataset.manifest.records();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const std::string rel = image_subdir + "/" + records[i].id + ".png";
    write_png(dataset.images[i], root / rel);
    records[i].path = rel;
  }
  dataset.manifest.save_jsonl(manifest_path);
}

}  // namespace patchsearch

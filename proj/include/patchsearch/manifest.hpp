#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "patchsearch/image.hpp"

namespace patchsearch {

/// One training or validation sample. `label`, `is_poison` and the trigger
/// boxes are evaluation metadata; the defense path never reads them.
struct SampleRecord {
  std::string id;
  std::string path;
  int label = 0;
  bool is_poison = false;
  std::optional<Rect> bbox;
  std::vector<Rect> extra_boxes;  // repeat pastes beyond the first

  bool operator==(const SampleRecord&) const = default;
};

class DatasetManifest {
 public:
  DatasetManifest() = default;
  explicit DatasetManifest(std::vector<SampleRecord> records);

  const std::vector<SampleRecord>& records() const { return records_; }
  std::vector<SampleRecord>& records() { return records_; }
  const SampleRecord& operator[](std::size_t i) const { return records_[i]; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  int num_classes() const;
  std::size_t poison_count() const;
  std::size_t count_label(int label) const;
  std::optional<std::size_t> index_of(const std::string& id) const;

  /// Sample ids unique; poison records carry a box.
  void validate() const;

  static DatasetManifest load_jsonl(const std::filesystem::path& path);
  void save_jsonl(const std::filesystem::path& path) const;

  bool operator==(const DatasetManifest& other) const { return records_ == other.records_; }

 private:
  std::vector<SampleRecord> records_;
  mutable std::unordered_map<std::string, std::size_t> index_;
};

/// A manifest with its decoded images, aligned by position.
struct Dataset {
  DatasetManifest manifest;
  std::vector<Image> images;

  std::size_t size() const { return images.size(); }
  Dataset subset(const std::vector<std::size_t>& indices) const;
};

/// Loads every record's PNG; relative paths resolve against `root`.
Dataset load_dataset(const DatasetManifest& manifest, const std::filesystem::path& root);

/// Writes images as `<dir>/<prefix><id>.png`, rewrites paths relative to
/// `root` and saves the manifest.
void save_dataset(Dataset& dataset, const std::filesystem::path& root, const std::string& image_subdir,
                  const std::filesystem::path& manifest_path);

}  // namespace patchsearch

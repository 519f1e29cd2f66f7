#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "patchsearch/image.hpp"
#include "patchsearch/rng.hpp"

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    patchsearch::Rng rng(std::hash<std::string>{}(tag) ^ reinterpret_cast<std::uintptr_t>(this));
    path_ = std::filesystem::temp_directory_path() / ("ps_" + tag + "_" + std::to_string(rng.next_u64() % 1000000007));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline patchsearch::Image random_image(int h, int w, patchsearch::Rng& rng, int channels = 3) {
  patchsearch::Image img(h, w, channels);
  for (auto& v : img.data()) v = static_cast<float>(rng.uniform());
  return img;
}

}  // namespace testing

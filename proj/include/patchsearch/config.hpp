#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace patchsearch {

/// Flat key=value configuration. Keys may carry a dotted section prefix
/// ("search.l", "mix.mode"); `#` starts a comment.
class Config {
 public:
  Config() = default;

  static Config parse(const std::string& text);
  static Config load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  std::string serialize() const;

  bool has(const std::string& key) const { return values_.contains(key); }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void set_default(const std::string& key, const std::string& value) { values_.try_emplace(key, value); }

  std::string get(const std::string& key) const;
  std::string get(const std::string& key, const std::string& fallback) const;
  long get_int(const std::string& key, long fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const;

  /// Keys under `prefix.` with the prefix stripped.
  Config section(const std::string& prefix) const;
  /// Hash over the canonical serialization.
  std::string hash() const;

  const std::map<std::string, std::string>& values() const { return values_; }
  bool operator==(const Config&) const = default;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace patchsearch

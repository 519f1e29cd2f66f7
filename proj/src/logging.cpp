#include "patchsearch/logging.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>

namespace patchsearch::log {

namespace {

Level initial_level() {
  const char* env = std::getenv("PATCHSEARCH_LOG");
  if (env == nullptr) return Level::info;
  if (std::strcmp(env, "debug") == 0) return Level::debug;
  if (std::strcmp(env, "warn") == 0) return Level::warn;
  if (std::strcmp(env, "error") == 0) return Level::error;
  return Level::info;
}

std::atomic<Level>& level_ref() {
  static std::atomic<Level> level{initial_level()};
  return level;
}

}  // namespace

Level threshold() { return level_ref().load(); }
void set_threshold(Level level) { level_ref().store(level); }

void write(Level level, const std::string& message) {
  static constexpr const char* names[] = {"debug", "info", "warn", "error"};
  std::cerr << "[" << names[static_cast<int>(level)] << "] " << message << '\n';
}

}  // namespace patchsearch::log

#pragma once

#include <stdexcept>
#include <string>

namespace patchsearch {

/// Invalid parameters or an impossible configuration (e.g. a trigger that
/// does not fit inside the margin-inset region).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Missing, unreadable or malformed input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A training loop could not continue (non-finite loss, degenerate
/// validation set).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace patchsearch

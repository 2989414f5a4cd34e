#pragma once

#include <stdexcept>
#include <string>

namespace longidiff {

/// Invalid or inconsistent run configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Unreadable, truncated, or inconsistent data files (CLI exit code 3).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training diverged (non-finite loss). Carries enough context to report
/// the failing step before aborting.
struct TrainAbort : std::runtime_error {
  TrainAbort(const std::string& what, int64_t step_, double lr_)
      : std::runtime_error(what), step(step_), lr(lr_) {}
  int64_t step;
  double lr;
};

}  // namespace longidiff

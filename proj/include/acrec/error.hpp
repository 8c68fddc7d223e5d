#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace acrec {

// Malformed or missing input data. Maps to CLI exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration. Carries every offending key so callers can report
// them all at once.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems)
      : std::runtime_error(join(problems)), problems_(std::move(problems)) {}

  const std::vector<std::string>& problems() const { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& problems) {
    std::string out = "invalid configuration:";
    for (const auto& p : problems) {
      out += "\n  - " + p;
    }
    return out;
  }

  std::vector<std::string> problems_;
};

// Non-finite loss, failed gradient check and similar numerical failures.
// Maps to CLI exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace acrec

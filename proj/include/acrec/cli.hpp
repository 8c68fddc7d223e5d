#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "acrec/config.hpp"
#include "json.hpp"

namespace acrec::cli {

enum ExitCode { kOk = 0, kUsage = 1, kDataError = 2, kNumericalError = 3 };

// Layers `base`, the JSON file (if any) and `--key value` overrides, in that
// order. Override strings are typed by the key's default value. Every problem
// is reported together in one ConfigError.
RunConfig resolve_config(const RunConfig& base, const std::optional<std::filesystem::path>& config_file,
                         const std::map<std::string, std::string>& overrides);

// "<command>-<16 hex digits>" from a hash of the resolved configuration.
std::string run_id(const std::string& command, const RunConfig& cfg);

// Report root: report_dir if set, else $ACREC_REPORT_ROOT, else "reports".
std::filesystem::path report_root(const RunConfig& cfg);

// Parses comma-separated values; "inf" is accepted for edges.
std::vector<std::size_t> parse_ks(const std::string& text);
std::vector<double> parse_edges(const std::string& text);

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace acrec::cli

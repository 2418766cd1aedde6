#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "distillforge/pipeline.hpp"

namespace distillforge {

/// Everything a CLI run needs. `seed` feeds the plan and, through a named
/// substream, the generator.
struct RunConfig {
  ExperimentPlan plan;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "out";
};

struct ConfigKey {
  std::string name;         // "section.key"
  std::string description;
};

/// Every accepted key, in documentation order.
const std::vector<ConfigKey>& config_keys();

/**
 * Flat `section.key = value` settings. Blank lines and lines starting with
 * '#' are ignored. Lists are comma separated; grid cells are `alpha:beta`.
 * Errors are ParseError naming the key, with the file line (0 for overrides).
 */
class ConfigBuilder {
 public:
  ConfigBuilder();

  void apply_text(const std::string& text, const std::string& source = "config");
  void apply_file(const std::filesystem::path& path);
  /// One `key=value` override, as given to --set.
  void apply_override(const std::string& assignment);
  void set_seed(std::uint64_t seed);
  bool was_set(const std::string& key) const { return origin_.contains(key); }

  /// Resolves and checks cross-key constraints.
  RunConfig build() const;

 private:
  void assign(const std::string& key, const std::string& value, const std::string& origin,
              std::size_t line);

  RunConfig config_;
  std::map<std::string, std::pair<std::string, std::size_t>> origin_;  // key -> (source, line)
};

/// Current value of every key, one `key = value` line each; parses back to
/// the same configuration.
std::string render_config(const RunConfig& config);

}  // namespace distillforge

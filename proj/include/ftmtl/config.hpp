#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "ftmtl/model.hpp"
#include "ftmtl/pipeline.hpp"

namespace ftmtl {

/// Flat key-value run configuration. Every key has a documented default,
/// unknown keys are rejected, and the fully resolved table can be echoed into
/// output directories. File format: one `key = value` per line, `#` comments.
class RunConfig {
 public:
  RunConfig();  // defaults

  static RunConfig from_file(const std::string& path);

  /// Applies `key = value`; `model.preset` rewrites the shape-related keys.
  void set(const std::string& key, const std::string& value);
  void apply_file(const std::string& path);

  bool was_set(const std::string& key) const { return explicit_.count(key) != 0; }

  const std::string& get(const std::string& key) const;
  long get_int(const std::string& key) const;
  double get_real(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<double> get_reals(const std::string& key) const;

  /// Full resolved table, one `key = value` line per key, sorted.
  std::string resolved_text() const;

  static std::string describe_keys();  // key, default and doc lines

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> explicit_;
};

ModelConfig model_config_from(const RunConfig& cfg);
TrainConfig train_config_from(const RunConfig& cfg);

}  // namespace ftmtl

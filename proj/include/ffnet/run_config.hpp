#pragma once

// Run configuration text: `key = value` lines with dotted keys, `#`
// comments and blank lines. Only keys declared in the schema are accepted.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

namespace ffnet {

/// Key -> default value.
using ConfigSchema = std::map<std::string, std::string>;

class RunConfig {
 public:
  explicit RunConfig(ConfigSchema schema);

  /// Applies `text` on top of the defaults. Throws ConfigError naming the
  /// line for syntax errors, unknown keys and duplicates.
  void parse(std::string_view text, const std::string& origin = "<config>");
  void load(const std::string& path);
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& str(const std::string& key) const;
  std::int64_t integer(const std::string& key) const;
  std::uint64_t unsigned_integer(const std::string& key) const;
  double real(const std::string& key) const;
  bool boolean(const std::string& key) const;

  const std::map<std::string, std::string>& values() const { return values_; }
  /// Canonical text form, sorted by key; parses back to the same values.
  std::string dump() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace ffnet

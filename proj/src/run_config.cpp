#include "ffnet/run_config.hpp"

#include <cctype>
#include <charconv>
#include <set>

#include "ffnet/io.hpp"
#include "ffnet/tensor.hpp"

namespace ffnet {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool valid_key(std::string_view k) {
  if (k.empty() || k.front() == '.' || k.back() == '.') return false;
  char prev = 0;
  for (char c : k) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) return false;
    if (c == '.' && prev == '.') return false;
    prev = c;
  }
  return true;
}

}  // namespace

RunConfig::RunConfig(ConfigSchema schema) : values_(std::move(schema)) {}

void RunConfig::parse(std::string_view text, const std::string& origin) {
  std::set<std::string> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const std::size_t nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    const std::string where = origin + ":" + std::to_string(line_no);
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos || line.substr(0, eq).find('#') != std::string_view::npos)
      throw ConfigError(where + ": expected 'key = value'");
    const std::string key(trim(line.substr(0, eq)));
    std::string_view value = trim(line.substr(eq + 1));
    if (!value.empty() && value.front() == '"') {
      const std::size_t close = value.find('"', 1);
      if (close == std::string_view::npos) throw ConfigError(where + ": unterminated quoted value");
      const std::string_view rest = trim(value.substr(close + 1));
      if (!rest.empty() && rest.front() != '#') throw ConfigError(where + ": text after quoted value");
      value = value.substr(1, close - 1);
    } else if (const auto hash = value.find('#'); hash != std::string_view::npos) {
      value = trim(value.substr(0, hash));
    }
    if (!valid_key(key)) throw ConfigError(where + ": malformed key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + ": duplicate key '" + key + "'");
    if (!has(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    values_[key] = std::string(value);
  }
}

void RunConfig::load(const std::string& path) { parse(io::read_file(path), path); }

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!has(key)) throw ConfigError("unknown key '" + key + "'");
  values_[key] = value;
}

const std::string& RunConfig::str(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
  return it->second;
}

namespace {

template <typename N>
N parse_number(const std::string& key, const std::string& s) {
  N v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size() || s.empty())
    throw ConfigError("key '" + key + "': '" + s + "' is not a valid number");
  return v;
}

}  // namespace

std::int64_t RunConfig::integer(const std::string& key) const { return parse_number<std::int64_t>(key, str(key)); }

std::uint64_t RunConfig::unsigned_integer(const std::string& key) const {
  return parse_number<std::uint64_t>(key, str(key));
}

double RunConfig::real(const std::string& key) const { return parse_number<double>(key, str(key)); }

bool RunConfig::boolean(const std::string& key) const {
  const std::string& s = str(key);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError("key '" + key + "': '" + s + "' is not a boolean");
}

std::string RunConfig::dump() const {
  std::string out;
  for (const auto& [k, v] : values_) {
    const bool quote = v.empty() || v.find('#') != std::string::npos || v.front() == '"' || v != std::string(trim(v));
    out += k + " = " + (quote ? "\"" + v + "\"" : v) + "\n";
  }
  return out;
}

}  // namespace ffnet

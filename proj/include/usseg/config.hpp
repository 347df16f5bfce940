#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace usseg {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string trim(std::string_view s) {
  auto b = s.begin();
  auto e = s.end();
  while (b != e && std::isspace(static_cast<unsigned char>(*b))) ++b;
  while (e != b && std::isspace(static_cast<unsigned char>(*(e - 1)))) --e;
  return std::string(b, e);
}

}  // namespace detail

/// key=value lines; '#' starts a comment. Keys are consumed by typed getters and any key
/// left unconsumed is reported by finish().
class KeyValues {
 public:
  KeyValues() = default;

  static KeyValues parse(std::istream& in, const std::string& source = "config") {
    KeyValues kv;
    kv.source_ = source;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = detail::trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key=value");
      }
      const std::string key = detail::trim(std::string_view(t).substr(0, eq));
      const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
      if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
      if (kv.values_.contains(key)) {
        throw ConfigError(source + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
      }
      kv.values_[key] = value;
    }
    return kv;
  }

  static KeyValues load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    return parse(in, path.string());
  }

  bool has(const std::string& key) const { return values_.contains(key); }

  std::optional<std::string> take(const std::string& key) {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    consumed_.insert(key);
    return it->second;
  }

  void take_to(const std::string& key, std::string& out) {
    if (auto v = take(key)) out = *v;
  }

  // std::size_t and std::uint64_t coincide on the supported LP64 targets.
  void take_to(const std::string& key, std::uint64_t& out) {
    if (auto v = take(key)) out = parse_uint(key, *v);
  }

  void take_to(const std::string& key, double& out) {
    if (auto v = take(key)) {
      try {
        std::size_t used = 0;
        out = std::stod(*v, &used);
        if (used != v->size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw ConfigError(source_ + ": key '" + key + "' expects a number, got '" + *v + "'");
      }
    }
  }

  void take_to(const std::string& key, bool& out) {
    if (auto v = take(key)) {
      if (*v == "true" || *v == "1" || *v == "on" || *v == "yes") {
        out = true;
      } else if (*v == "false" || *v == "0" || *v == "off" || *v == "no") {
        out = false;
      } else {
        throw ConfigError(source_ + ": key '" + key + "' expects a boolean, got '" + *v + "'");
      }
    }
  }

  /// Throws on any key not consumed by a getter.
  void finish() const {
    std::vector<std::string> unknown;
    for (const auto& [k, v] : values_) {
      if (!consumed_.contains(k)) unknown.push_back(k);
    }
    if (!unknown.empty()) {
      std::string msg = source_ + ": unknown key";
      msg += unknown.size() > 1 ? "s " : " ";
      for (std::size_t i = 0; i < unknown.size(); ++i) msg += (i ? ", '" : "'") + unknown[i] + "'";
      throw ConfigError(msg);
    }
  }

  const std::string& source() const { return source_; }

 private:
  std::uint64_t parse_uint(const std::string& key, const std::string& v) const {
    std::uint64_t x = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc{} || p != v.data() + v.size()) {
      throw ConfigError(source_ + ": key '" + key + "' expects a non-negative integer, got '" + v +
                        "'");
    }
    return x;
  }

  std::string source_ = "config";
  std::map<std::string, std::string> values_;
  std::set<std::string> consumed_;
};

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto end = s.find(sep, start);
    const std::string item =
        detail::trim(std::string_view(s).substr(start, end == std::string::npos ? end : end - start));
    if (!item.empty()) out.push_back(item);
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return out;
}

}  // namespace usseg

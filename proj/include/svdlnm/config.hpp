#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

namespace svdlnm {

/// Key-value configuration: one `key value` or `key = value` pair per line,
/// `#` comments ignored. Keys are kept in sorted order so the config hash is
/// stable under reordering.
class Config {
 public:
  Config() = default;

  static Config parse(std::istream& in) {
    Config cfg;
    std::string line;
    while (std::getline(in, line)) {
      auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      std::string key, value;
      std::istringstream ls(line);
      if (!(ls >> key)) continue;
      std::getline(ls, value);
      // strip an optional '=' separator and surrounding whitespace
      size_t start = value.find_first_not_of(" \t=");
      value = (start == std::string::npos) ? "" : value.substr(start);
      size_t end = value.find_last_not_of(" \t\r");
      value = (end == std::string::npos) ? "" : value.substr(0, end + 1);
      if (!key.empty() && key.back() == '=') key.pop_back();
      if (value.empty()) throw std::runtime_error("config: key '" + key + "' has no value");
      cfg.values_[key] = value;
    }
    return cfg;
  }

  static Config parse_string(const std::string& text) {
    std::istringstream in(text);
    return parse(in);
  }

  static Config parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    return parse(in);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      return std::stod(it->second);
    } catch (const std::exception&) {
      throw std::runtime_error("config: key '" + key + "' is not a number: " + it->second);
    }
  }

  long get_long(const std::string& key, long fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      return std::stol(it->second);
    } catch (const std::exception&) {
      throw std::runtime_error("config: key '" + key + "' is not an integer: " + it->second);
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw std::runtime_error("config: key '" + key + "' is not a boolean: " + v);
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  const std::map<std::string, std::string>& entries() const { return values_; }

  /// FNV-1a over the canonical (sorted) key-value text; recorded in output
  /// file headers.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const std::string& s) {
      for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
      }
      h ^= 0x1f;
      h *= 1099511628211ULL;
    };
    for (auto& [k, v] : values_) {
      mix(k);
      mix(v);
    }
    return h;
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace svdlnm

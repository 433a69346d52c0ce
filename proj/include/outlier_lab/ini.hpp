#pragma once

// Flat "[section]\nkey = value" files. Keys are addressed as "section.key".
// '#' starts a comment. Values are kept verbatim (trimmed); typed getters
// report the full key path on failure.

#include "outlier_lab/softmax.hpp"

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace olab {

/// Shortest text form that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

class Ini {
 public:
  static Ini parse(std::string_view text) {
    Ini ini;
    std::string section;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      std::size_t nl = text.find('\n', pos);
      if (nl == std::string_view::npos) nl = text.size();
      std::string line(text.substr(pos, nl - pos));
      pos = nl + 1;
      ++line_no;
      if (auto c = line.find('#'); c != std::string::npos) line.erase(c);
      line = trim(line);
      if (line.empty()) continue;
      const std::string where = "line " + std::to_string(line_no);
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError(where, "unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        if (section.empty()) throw ConfigError(where, "empty section name");
        continue;
      }
      auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(where, "expected key = value");
      std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw ConfigError(where, "missing key");
      const std::string full = section.empty() ? key : section + "." + key;
      if (ini.values_.contains(full)) throw ConfigError(full, "given twice");
      ini.set(full, trim(line.substr(eq + 1)));
    }
    return ini;
  }

  void set(const std::string& key, std::string value) {
    if (!values_.contains(key)) order_.push_back(key);
    values_[key] = std::move(value);
  }
  void set(const std::string& key, double v) { set(key, format_double(v)); }
  void set(const std::string& key, std::size_t v) { set(key, std::to_string(v)); }
  void set(const std::string& key, bool v) { set(key, std::string(v ? "true" : "false")); }
  void set(const std::string& key, const char* v) { set(key, std::string(v)); }

  bool has(const std::string& key) const { return values_.contains(key); }

  std::optional<std::string> raw(const std::string& key) const {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return it->second;
  }

  std::string get_string(const std::string& key, const std::string& def) const {
    return raw(key).value_or(def);
  }

  std::optional<double> get_double(const std::string& key) const {
    auto r = raw(key);
    if (!r) return std::nullopt;
    double v = 0.0;
    auto [p, ec] = std::from_chars(r->data(), r->data() + r->size(), v);
    if (ec != std::errc() || p != r->data() + r->size()) {
      throw ConfigError(key, "expected a number, got '" + *r + "'");
    }
    return v;
  }
  double get_double(const std::string& key, double def) const { return get_double(key).value_or(def); }

  std::optional<std::uint64_t> get_uint(const std::string& key) const {
    auto r = raw(key);
    if (!r) return std::nullopt;
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(r->data(), r->data() + r->size(), v);
    if (ec != std::errc() || p != r->data() + r->size()) {
      throw ConfigError(key, "expected a non-negative integer, got '" + *r + "'");
    }
    return v;
  }
  std::size_t get_size(const std::string& key, std::size_t def) const {
    return static_cast<std::size_t>(get_uint(key).value_or(def));
  }

  bool get_bool(const std::string& key, bool def) const {
    auto r = raw(key);
    if (!r) return def;
    if (*r == "true" || *r == "1" || *r == "yes") return true;
    if (*r == "false" || *r == "0" || *r == "no") return false;
    throw ConfigError(key, "expected true or false, got '" + *r + "'");
  }

  /// Comma-separated list of integers.
  std::optional<std::vector<std::size_t>> get_size_list(const std::string& key) const {
    auto r = raw(key);
    if (!r) return std::nullopt;
    std::vector<std::size_t> out;
    std::stringstream ss(*r);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      std::size_t v = 0;
      auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (item.empty() || ec != std::errc() || p != item.data() + item.size()) {
        throw ConfigError(key, "expected a comma-separated list of integers, got '" + *r + "'");
      }
      out.push_back(v);
    }
    return out;
  }

  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    auto r = raw(key);
    if (!r) return out;
    std::stringstream ss(*r);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  /// Keys present in the file but never read.
  std::vector<std::string> unused() const {
    std::vector<std::string> out;
    for (const auto& k : order_) {
      if (!used_.contains(k)) out.push_back(k);
    }
    return out;
  }

  /// Sections in first-appearance order, keys in insertion order.
  std::string str() const {
    std::vector<std::string> sections;
    for (const auto& k : order_) {
      const std::string s = section_of(k);
      if (std::find(sections.begin(), sections.end(), s) == sections.end()) sections.push_back(s);
    }
    std::string out;
    for (const auto& s : sections) {
      if (!s.empty()) out += (out.empty() ? "[" : "\n[") + s + "]\n";
      for (const auto& k : order_) {
        if (section_of(k) != s) continue;
        out += k.substr(s.empty() ? 0 : s.size() + 1) + " = " + values_.at(k) + "\n";
      }
    }
    return out;
  }

  const std::vector<std::string>& keys() const { return order_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }
  static std::string section_of(const std::string& key) {
    auto d = key.find('.');
    return d == std::string::npos ? "" : key.substr(0, d);
  }

  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
  mutable std::set<std::string> used_;
};

}  // namespace olab

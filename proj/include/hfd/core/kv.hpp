#pragma once

// Flat "key=value" text: one pair per line, '#' starts a comment, blank
// lines ignored. Used for config files and checkpoint config echoes.

#include <charconv>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hfd/core/error.hpp"

namespace hfd {

class KeyValues {
 public:
  static KeyValues parse(std::string_view text, const std::string& source = "config") {
    KeyValues kv;
    std::size_t line_no = 0, pos = 0;
    while (pos <= text.size()) {
      const std::size_t end = std::min(text.find('\n', pos), text.size());
      std::string_view line = text.substr(pos, end - pos);
      pos = end + 1;
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) {
        if (end == text.size()) break;
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string_view::npos)
        throw DataError(source + ":" + std::to_string(line_no) + ": expected key=value");
      const std::string key(trim(line.substr(0, eq)));
      if (key.empty()) throw DataError(source + ":" + std::to_string(line_no) + ": empty key");
      if (kv.values_.count(key)) throw DataError(source + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
      kv.set(key, std::string(trim(line.substr(eq + 1))));
      if (end == text.size()) break;
    }
    return kv;
  }

  void set(const std::string& key, std::string value) {
    if (!values_.count(key)) order_.push_back(key);
    values_[key] = std::move(value);
  }
  void set(const std::string& key, double value) { set(key, format_double(value)); }
  void set(const std::string& key, long long value) { set(key, std::to_string(value)); }
  void set(const std::string& key, int value) { set(key, std::to_string(value)); }
  void set(const std::string& key, bool value) { set(key, std::string(value ? "1" : "0")); }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::vector<std::string>& keys() const { return order_; }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw DataError("missing key '" + key + "'");
    return it->second;
  }

  double num(const std::string& key) const { return to_double(key, str(key)); }
  long long integer(const std::string& key) const { return to_int(key, str(key)); }
  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "1" || s == "true") return true;
    if (s == "0" || s == "false") return false;
    throw DataError("key '" + key + "': expected a boolean, got '" + s + "'");
  }
  std::vector<int> int_list(const std::string& key) const {
    std::vector<int> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(static_cast<int>(to_int(key, std::string(trim(item)))));
    if (out.empty()) throw DataError("key '" + key + "': empty list");
    return out;
  }

  // Throws on any key outside `allowed`.
  void require_known(const std::set<std::string>& allowed, const std::string& source = "config") const {
    for (const auto& k : order_)
      if (!allowed.count(k)) throw DataError(source + ": unknown key '" + k + "'");
  }

  std::string to_text() const {
    std::string out;
    for (const auto& k : order_) out += k + "=" + values_.at(k) + "\n";
    return out;
  }

  static std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }

 private:
  static std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
  }

  static double to_double(const std::string& key, const std::string& s) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw DataError("key '" + key + "': expected a number, got '" + s + "'");
  }

  static long long to_int(const std::string& key, const std::string& s) {
    long long v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
      throw DataError("key '" + key + "': expected an integer, got '" + s + "'");
    return v;
  }

  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
};

}  // namespace hfd

#pragma once

#include <iosfwd>
#include <map>
#include <set>
#include <string>

namespace mpt {

/// Flat `key = value` configuration. Blank lines and `#` comments are
/// ignored; duplicate keys are an error.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::istream& is, const std::string& origin = "<config>");
  static KeyValueConfig load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  long get_int(const std::string& key, long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  /// Throws ArgumentError naming the first key not in `known`.
  void require_known(const std::set<std::string>& known) const;

  const std::map<std::string, std::string>& values() const noexcept { return values_; }
  std::string to_string() const;

 private:
  std::map<std::string, std::string> values_;
  std::string origin_;
};

}  // namespace mpt

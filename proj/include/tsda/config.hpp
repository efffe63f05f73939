#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace tsda {

/// Flat key=value settings. '#' starts a comment; blank lines are ignored.
/// Insertion order is kept so echoes are stable.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& origin = "<text>");
  static KeyValues load(const std::string& path);

  void set(const std::string& key, const std::string& value);
  bool contains(const std::string& key) const { return index_.count(key) != 0; }
  const std::string& get(const std::string& key) const;

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_doubles(const std::string& key, const std::vector<double>& fallback) const;

  /// Copies every entry of `other` over this one.
  void merge(const KeyValues& other);

  std::string to_text() const;
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace tsda

#include "tsda/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace tsda {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

KeyValues KeyValues::parse(const std::string& text, const std::string& origin) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": empty key");
    kv.set(key, trim(line.substr(eq + 1)));
  }
  return kv;
}

KeyValues KeyValues::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

void KeyValues::set(const std::string& key, const std::string& value) {
  if (auto it = index_.find(key); it != index_.end()) {
    entries_[it->second].second = value;
    return;
  }
  index_[key] = entries_.size();
  entries_.emplace_back(key, value);
}

const std::string& KeyValues::get(const std::string& key) const {
  auto it = index_.find(key);
  if (it == index_.end()) throw std::runtime_error("missing config key '" + key + "'");
  return entries_[it->second].second;
}

std::string KeyValues::get_string(const std::string& key, const std::string& fallback) const {
  return contains(key) ? get(key) : fallback;
}

double KeyValues::get_double(const std::string& key, double fallback) const {
  if (!contains(key)) return fallback;
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw std::runtime_error("config key '" + key + "': '" + v + "' is not a number");
  }
}

std::int64_t KeyValues::get_int(const std::string& key, std::int64_t fallback) const {
  if (!contains(key)) return fallback;
  const std::string& v = get(key);
  std::int64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw std::runtime_error("config key '" + key + "': '" + v + "' is not an integer");
  return out;
}

bool KeyValues::get_bool(const std::string& key, bool fallback) const {
  if (!contains(key)) return fallback;
  const std::string& v = get(key);
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw std::runtime_error("config key '" + key + "': '" + v + "' is not a boolean");
}

std::vector<double> KeyValues::get_doubles(const std::string& key, const std::vector<double>& fallback) const {
  if (!contains(key)) return fallback;
  std::vector<double> out;
  std::stringstream ss(get(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw std::runtime_error("config key '" + key + "': '" + item + "' is not a number");
    }
  }
  return out;
}

void KeyValues::merge(const KeyValues& other) {
  for (const auto& [k, v] : other.entries_) set(k, v);
}

std::string KeyValues::to_text() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + "=" + v + "\n";
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw std::runtime_error("format_double failed");
  return std::string(buf, ptr);
}

}  // namespace tsda

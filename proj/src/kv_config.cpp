#include "evflow/kv_config.hpp"

#include "evflow/error.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

namespace evflow {

namespace {

std::string trim(const std::string &s)
{
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) { return ""; }
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

} // namespace

KeyValues KeyValues::parse(const std::string &text, const std::string &source)
{
  KeyValues kv;
  kv.source_ = source;
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) { line.resize(hash); }
    line = trim(line);
    if (line.empty()) { continue; }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw validation_error(source + ":" + std::to_string(n) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) { throw validation_error(source + ":" + std::to_string(n) + ": empty key"); }
    if (kv.entries_.count(key)) {
      throw validation_error(source + ":" + std::to_string(n) + ": duplicate key '" + key + "'");
    }
    kv.entries_[key] = {value, n};
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path &path)
{
  std::ifstream in(path);
  if (!in) { throw data_error("cannot open " + path.string()); }
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void KeyValues::set(const std::string &key, const std::string &value) { entries_[key] = {value, 0}; }

void KeyValues::fail(const std::string &key, const std::string &what) const
{
  const auto it = entries_.find(key);
  const std::string where = it != entries_.end() && it->second.line > 0
                              ? source_ + ":" + std::to_string(it->second.line)
                              : source_;
  throw validation_error(where + ": field '" + key + "' " + what);
}

std::string KeyValues::get_string(const std::string &key, const std::string &fallback) const
{
  const auto it = entries_.find(key);
  return it == entries_.end() ? fallback : it->second.value;
}

double KeyValues::get_double(const std::string &key, double fallback) const
{
  const auto it = entries_.find(key);
  if (it == entries_.end()) { return fallback; }
  const std::string &s = it->second.value;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) { fail(key, "is not a number: '" + s + "'"); }
    return v;
  } catch (const std::logic_error &) {
    fail(key, "is not a number: '" + s + "'");
  }
}

long long KeyValues::get_int(const std::string &key, long long fallback) const
{
  const auto it = entries_.find(key);
  if (it == entries_.end()) { return fallback; }
  const std::string &s = it->second.value;
  long long v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) { fail(key, "is not an integer: '" + s + "'"); }
  return v;
}

bool KeyValues::get_bool(const std::string &key, bool fallback) const
{
  const auto it = entries_.find(key);
  if (it == entries_.end()) { return fallback; }
  std::string s = it->second.value;
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  if (s == "true" || s == "1" || s == "yes" || s == "on") { return true; }
  if (s == "false" || s == "0" || s == "no" || s == "off") { return false; }
  fail(key, "is not a boolean: '" + it->second.value + "'");
}

std::string KeyValues::require_string(const std::string &key) const
{
  if (!has(key)) { throw validation_error(source_ + ": missing field '" + key + "'"); }
  return get_string(key, "");
}

double KeyValues::require_double(const std::string &key) const
{
  if (!has(key)) { throw validation_error(source_ + ": missing field '" + key + "'"); }
  return get_double(key, 0);
}

void KeyValues::reject_unknown(const std::set<std::string> &known) const
{
  for (const auto &[key, entry] : entries_) {
    if (!known.count(key)) { fail(key, "is not a known key"); }
  }
}

std::string KeyValues::to_string() const
{
  std::ostringstream out;
  for (const auto &[key, entry] : entries_) { out << key << " = " << entry.value << "\n"; }
  return out.str();
}

} // namespace evflow

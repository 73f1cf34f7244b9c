#pragma once

// Flat "key = value" documents used for configs, scene specs and calibration.
// '#' starts a comment; blank lines are ignored.

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace evflow {

class KeyValues
{
public:
  struct Entry
  {
    std::string value;
    int line = 0;
  };

  static KeyValues parse(const std::string &text, const std::string &source = "<string>");
  static KeyValues load(const std::filesystem::path &path);

  bool has(const std::string &key) const { return entries_.count(key) > 0; }
  void set(const std::string &key, const std::string &value);

  std::string get_string(const std::string &key, const std::string &fallback) const;
  double get_double(const std::string &key, double fallback) const;
  long long get_int(const std::string &key, long long fallback) const;
  bool get_bool(const std::string &key, bool fallback) const;

  std::string require_string(const std::string &key) const;
  double require_double(const std::string &key) const;

  /// Validation error naming the first key (and its line) not in `known`.
  void reject_unknown(const std::set<std::string> &known) const;

  const std::map<std::string, Entry> &entries() const { return entries_; }
  std::string source() const { return source_; }
  std::string to_string() const;

private:
  [[noreturn]] void fail(const std::string &key, const std::string &what) const;

  std::string source_;
  std::map<std::string, Entry> entries_;
};

} // namespace evflow

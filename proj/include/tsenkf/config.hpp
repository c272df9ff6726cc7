#pragma once

#include <string>
#include <vector>

namespace tsenkf {

// Flat key-value configuration with [section] headers; keys are addressed
// as "section.key". Every accessor marks its key consumed, so a finished
// reader can reject unknown keys exhaustively instead of ignoring typos.
class Config {
public:
  static Config parse_file(const std::string& path);
  static Config parse_string(const std::string& text);

  bool has(const std::string& key) const;

  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& def) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double def) const;
  int get_int(const std::string& key) const;
  int get_int(const std::string& key, int def) const;
  bool get_bool(const std::string& key) const;
  bool get_bool(const std::string& key, bool def) const;
  std::vector<double> get_list(const std::string& key) const;

  // Throws listing every key that was never read.
  void reject_unconsumed() const;

  // Sorted "key = value" lines; equal configs echo equal bytes.
  std::string canonical_echo() const;

private:
  struct Entry {
    std::string key;
    std::string value;
    mutable bool consumed = false;
  };
  std::vector<Entry> entries_;  // sorted by key

  const Entry* find(const std::string& key) const;
  const Entry& require(const std::string& key) const;
};

} // namespace tsenkf

#include "tsenkf/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace tsenkf {

namespace {

std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

double parse_double(const std::string& key, const std::string& value) {
  char* end = nullptr;
  const double v = std::strtod(value.c_str(), &end);
  if (end == value.c_str() || *end != '\0')
    throw std::invalid_argument("config key '" + key + "': '" + value +
                                "' is not a number");
  return v;
}

} // namespace

Config Config::parse_string(const std::string& text) {
  Config cfg;
  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument("config line " + std::to_string(line_no) +
                                    ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw std::invalid_argument("config line " + std::to_string(line_no) +
                                    ": empty section name");
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": empty key");
    if (!section.empty()) key = section + "." + key;
    for (const Entry& e : cfg.entries_)
      if (e.key == key)
        throw std::invalid_argument("config: duplicate key '" + key + "'");
    cfg.entries_.push_back({key, value, false});
  }
  std::sort(cfg.entries_.begin(), cfg.entries_.end(),
            [](const Entry& a, const Entry& b) { return a.key < b.key; });
  return cfg;
}

Config Config::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_string(buf.str());
}

const Config::Entry* Config::find(const std::string& key) const {
  const auto it = std::lower_bound(
      entries_.begin(), entries_.end(), key,
      [](const Entry& e, const std::string& k) { return e.key < k; });
  if (it == entries_.end() || it->key != key) return nullptr;
  return &*it;
}

const Config::Entry& Config::require(const std::string& key) const {
  const Entry* e = find(key);
  if (!e) throw std::invalid_argument("config: missing required key '" + key +
                                      "'");
  e->consumed = true;
  return *e;
}

bool Config::has(const std::string& key) const { return find(key) != nullptr; }

std::string Config::get_string(const std::string& key) const {
  return require(key).value;
}

std::string Config::get_string(const std::string& key,
                               const std::string& def) const {
  return find(key) ? require(key).value : def;
}

double Config::get_double(const std::string& key) const {
  return parse_double(key, require(key).value);
}

double Config::get_double(const std::string& key, double def) const {
  return find(key) ? get_double(key) : def;
}

int Config::get_int(const std::string& key) const {
  const std::string& v = require(key).value;
  char* end = nullptr;
  const long n = std::strtol(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    throw std::invalid_argument("config key '" + key + "': '" + v +
                                "' is not an integer");
  return static_cast<int>(n);
}

int Config::get_int(const std::string& key, int def) const {
  return find(key) ? get_int(key) : def;
}

bool Config::get_bool(const std::string& key) const {
  std::string v = require(key).value;
  std::transform(v.begin(), v.end(), v.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("config key '" + key + "': '" + v +
                              "' is not a boolean");
}

bool Config::get_bool(const std::string& key, bool def) const {
  return find(key) ? get_bool(key) : def;
}

std::vector<double> Config::get_list(const std::string& key) const {
  const std::string& raw = require(key).value;
  std::vector<double> out;
  std::string token;
  for (char c : raw) {
    if (c == ',' || std::isspace(static_cast<unsigned char>(c))) {
      if (!token.empty()) {
        out.push_back(parse_double(key, token));
        token.clear();
      }
    } else {
      token.push_back(c);
    }
  }
  if (!token.empty()) out.push_back(parse_double(key, token));
  return out;
}

void Config::reject_unconsumed() const {
  std::string unknown;
  for (const Entry& e : entries_)
    if (!e.consumed) unknown += (unknown.empty() ? "" : ", ") + e.key;
  if (!unknown.empty())
    throw std::invalid_argument("config: unknown keys: " + unknown);
}

std::string Config::canonical_echo() const {
  std::string out;
  for (const Entry& e : entries_) out += e.key + " = " + e.value + "\n";
  return out;
}

} // namespace tsenkf

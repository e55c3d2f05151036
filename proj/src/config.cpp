#include "spdn/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace spdn {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

Config Config::parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read config file " + path);
  Config c;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                  ": expected key=value, got '" + t + "'");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                  ": empty key");
    c.values_[key] = value;
  }
  return c;
}

void Config::merge(const Config& overrides) {
  for (const auto& [k, v] : overrides.values_) values_[k] = v;
}

void Config::set(const std::string& key, const std::string& value) {
  values_[key] = value;
}

bool Config::has(const std::string& key) const { return values_.count(key) > 0; }

const std::string& Config::str(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end())
    throw std::invalid_argument("missing config key '" + key + "'");
  return it->second;
}

int Config::geti(const std::string& key) const {
  const std::string& v = str(key);
  try {
    std::size_t pos = 0;
    int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    throw std::invalid_argument("config key '" + key + "': '" + v +
                                "' is not an integer");
  }
}

double Config::getd(const std::string& key) const {
  const std::string& v = str(key);
  try {
    std::size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    throw std::invalid_argument("config key '" + key + "': '" + v +
                                "' is not a number");
  }
}

std::uint64_t Config::getu(const std::string& key) const {
  const std::string& v = str(key);
  try {
    std::size_t pos = 0;
    std::uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    throw std::invalid_argument("config key '" + key + "': '" + v +
                                "' is not an unsigned integer");
  }
}

bool Config::getb(const std::string& key) const {
  const std::string& v = str(key);
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw std::invalid_argument("config key '" + key + "': '" + v +
                              "' is not a boolean (on/off)");
}

void Config::validate(const std::set<std::string>& known) const {
  std::string bad;
  for (const auto& [k, v] : values_)
    if (!known.count(k)) bad += (bad.empty() ? "" : ", ") + k;
  if (bad.empty()) return;
  std::string valid;
  for (const auto& k : known) valid += (valid.empty() ? "" : ", ") + k;
  throw std::invalid_argument("unknown config key(s): " + bad +
                              "; valid keys: " + valid);
}

std::string Config::serialize() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << "=" << v << "\n";
  return os.str();
}

void Config::write(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << serialize();
}

}  // namespace spdn

#pragma once

// Flat key=value run configuration: one pair per line, '#' comments, unknown
// keys rejected. Every run serializes its fully resolved config next to its
// outputs.

#include <cstdint>
#include <map>
#include <set>
#include <string>

namespace spdn {

class Config {
 public:
  Config() = default;
  explicit Config(std::map<std::string, std::string> defaults)
      : values_(std::move(defaults)) {}

  static Config parse_file(const std::string& path);

  void merge(const Config& overrides);  // overrides win
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;

  const std::string& str(const std::string& key) const;
  int geti(const std::string& key) const;
  double getd(const std::string& key) const;
  std::uint64_t getu(const std::string& key) const;
  bool getb(const std::string& key) const;  // on/off, true/false, 1/0

  // throws listing both the offending keys and the valid set
  void validate(const std::set<std::string>& known) const;

  std::string serialize() const;  // sorted key=value lines
  void write(const std::string& path) const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace spdn

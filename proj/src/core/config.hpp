#pragma once

// Minimal INI-style config: [section] headers, key = value lines,
// '#' or ';' comments. All trainer and generator settings flow through
// this; unknown keys are rejected by the consumers, not the parser.

#include <map>
#include <optional>
#include <string>

namespace mm {

class Config {
 public:
  static Config parse_file(const std::string& path);
  static Config parse_string(const std::string& text, const std::string& origin = "<string>");

  bool has_section(const std::string& section) const;
  bool has(const std::string& section, const std::string& key) const;

  std::optional<std::string> find(const std::string& section, const std::string& key) const;

  std::string get(const std::string& section, const std::string& key,
                  const std::string& fallback) const;
  long long get_int(const std::string& section, const std::string& key, long long fallback) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;

  const std::map<std::string, std::map<std::string, std::string>>& sections() const {
    return sections_;
  }

 private:
  std::map<std::string, std::map<std::string, std::string>> sections_;
};

}  // namespace mm

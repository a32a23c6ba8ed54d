#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace encodenet {

// Flat view of a TOML-style document: `[section]` headers and `key = value`
// lines become "section.key" entries. Values may be bare, double-quoted, or
// bracketed lists ("[1, 2, 3]"); `#` starts a comment outside quotes.
class ConfigDocument {
 public:
  static ConfigDocument parse(std::string_view text);
  static ConfigDocument load(const std::filesystem::path& path);

  // "section.key=value"; the key must already exist unless `allow_new`.
  void apply_override(std::string_view assignment, bool allow_new = false);
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  bool contains(const std::string& key) const { return values_.contains(key); }
  const std::map<std::string, std::string>& values() const noexcept { return values_; }

  std::string get_string(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::int64_t> get_int_list(const std::string& key) const;

  // Canonical text: sorted keys, one "key = value" per line.
  std::string canonical(std::string_view prefix = {}) const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace encodenet

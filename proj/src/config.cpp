#include "encodenet/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "encodenet/error.hpp"

namespace encodenet {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string_view strip_comment(std::string_view line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

bool valid_key(std::string_view k) {
  if (k.empty()) return false;
  for (const char c : k) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) return false;
  }
  return true;
}

std::string unquote(std::string_view v, std::size_t line) {
  if (v.size() >= 2 && v.front() == '"') {
    if (v.back() != '"') throw ParseError(line, "unterminated string");
    return std::string(v.substr(1, v.size() - 2));
  }
  if (!v.empty() && v.front() == '"') throw ParseError(line, "unterminated string");
  return std::string(v);
}

}  // namespace

ConfigDocument ConfigDocument::parse(std::string_view text) {
  ConfigDocument doc;
  std::string section;
  std::size_t lineno = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const auto raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++lineno;
    const auto line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError(lineno, "unterminated section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (!valid_key(section)) throw ParseError(lineno, "invalid section name '" + section + "'");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError(lineno, "expected 'key = value', got '" + std::string(line) + "'");
    const auto key = trim(line.substr(0, eq));
    if (!valid_key(key)) throw ParseError(lineno, "invalid key '" + std::string(key) + "'");
    const std::string full = section.empty() ? std::string(key) : section + "." + std::string(key);
    if (doc.values_.contains(full)) throw ParseError(lineno, "duplicate key '" + full + "'");
    doc.values_[full] = unquote(trim(line.substr(eq + 1)), lineno);
  }
  return doc;
}

ConfigDocument ConfigDocument::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse(ss.str());
  } catch (const ParseError& e) {
    throw ConfigError("'" + path.string() + "' " + e.what());
  }
}

void ConfigDocument::apply_override(std::string_view assignment, bool allow_new) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  const std::string key(trim(assignment.substr(0, eq)));
  if (!valid_key(key)) throw ConfigError("invalid override key '" + key + "'");
  if (!allow_new && !values_.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  values_[key] = unquote(trim(assignment.substr(eq + 1)), 0);
}

std::string ConfigDocument::get_string(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
  return it->second;
}

std::int64_t ConfigDocument::get_int(const std::string& key) const {
  const std::string v = get_string(key);
  std::int64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw ConfigError("'" + key + "' must be an integer, got '" + v + "'");
  return out;
}

double ConfigDocument::get_double(const std::string& key) const {
  const std::string v = get_string(key);
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw ConfigError("'" + key + "' must be a number, got '" + v + "'");
  return out;
}

bool ConfigDocument::get_bool(const std::string& key) const {
  const std::string v = get_string(key);
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("'" + key + "' must be true or false, got '" + v + "'");
}

std::vector<std::int64_t> ConfigDocument::get_int_list(const std::string& key) const {
  const std::string text = get_string(key);
  std::string_view v = trim(text);
  if (!v.empty() && v.front() == '[') {
    if (v.back() != ']') throw ConfigError("'" + key + "' has an unterminated list");
    v = v.substr(1, v.size() - 2);
  }
  std::vector<std::int64_t> out;
  std::size_t pos = 0;
  while (pos <= v.size()) {
    const auto comma = v.find(',', pos);
    const auto item = trim(v.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
    pos = comma == std::string_view::npos ? v.size() + 1 : comma + 1;
    if (item.empty()) {
      if (comma == std::string_view::npos && out.empty()) break;
      throw ConfigError("'" + key + "' has an empty list item");
    }
    std::int64_t x = 0;
    const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), x);
    if (ec != std::errc{} || p != item.data() + item.size()) {
      throw ConfigError("'" + key + "' list item '" + std::string(item) + "' is not an integer");
    }
    out.push_back(x);
  }
  return out;
}

std::string ConfigDocument::canonical(std::string_view prefix) const {
  std::string out;
  for (const auto& [k, v] : values_) {
    if (!prefix.empty() && !std::string_view(k).starts_with(prefix)) continue;
    out += k + " = " + v + "\n";
  }
  return out;
}

}  // namespace encodenet

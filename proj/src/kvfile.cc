#include "vfedsec/kvfile.h"

#include <charconv>
#include <fstream>
#include <sstream>

#include "vfedsec/common.h"

namespace vfedsec {

std::string Trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> SplitList(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (Trim(s).empty()) return out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(Trim(item));
  return out;
}

KeyValues KeyValues::Parse(const std::string& text, const std::string& source) {
  KeyValues kv;
  kv.source_ = source;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = Trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    VFS_ENFORCE_T(ConfigError, eq != std::string::npos, source, ":", lineno,
                  ": expected 'key = value'");
    std::string key = Trim(line.substr(0, eq));
    std::string value = Trim(line.substr(eq + 1));
    VFS_ENFORCE_T(ConfigError, !key.empty(), source, ":", lineno, ": empty key");
    VFS_ENFORCE_T(ConfigError, !kv.entries_.count(key), source, ":", lineno,
                  ": duplicate key '", key, "'");
    kv.entries_.emplace(std::move(key), std::move(value));
  }
  return kv;
}

KeyValues KeyValues::Load(const std::string& path) {
  std::ifstream in(path);
  VFS_ENFORCE_T(ConfigError, in, "cannot read '", path, "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return Parse(ss.str(), path);
}

void KeyValues::Set(const std::string& key, const std::string& value) {
  entries_[key] = value;
}

std::string KeyValues::GetString(const std::string& key,
                                 const std::string& def) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? def : it->second;
}

std::string KeyValues::RequireString(const std::string& key) const {
  auto it = entries_.find(key);
  VFS_ENFORCE_T(ConfigError, it != entries_.end(), key, ": required key missing");
  return it->second;
}

namespace {

template <typename T>
T ParseNumber(const std::string& key, const std::string& v) {
  T out{};
  const char* b = v.data();
  const char* e = v.data() + v.size();
  auto [p, ec] = std::from_chars(b, e, out);
  VFS_ENFORCE_T(ConfigError, ec == std::errc() && p == e, key,
                ": cannot parse '", v, "' as a number");
  return out;
}

}  // namespace

double KeyValues::GetDouble(const std::string& key, double def) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return def;
  return ParseNumber<double>(key, it->second);
}

int64_t KeyValues::GetInt(const std::string& key, int64_t def) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? def : ParseNumber<int64_t>(key, it->second);
}

uint64_t KeyValues::GetU64(const std::string& key, uint64_t def) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? def : ParseNumber<uint64_t>(key, it->second);
}

bool KeyValues::GetBool(const std::string& key, bool def) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return def;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::vector<std::string> KeyValues::GetList(const std::string& key) const {
  return SplitList(GetString(key, ""));
}

std::vector<size_t> KeyValues::GetSizeList(const std::string& key) const {
  std::vector<size_t> out;
  for (const auto& item : GetList(key)) out.push_back(ParseNumber<size_t>(key, item));
  return out;
}

std::vector<std::string> KeyValues::KeysWithPrefix(const std::string& prefix) const {
  std::vector<std::string> out;
  const std::string p = prefix + ".";
  for (auto it = entries_.lower_bound(p);
       it != entries_.end() && it->first.compare(0, p.size(), p) == 0; ++it)
    out.push_back(it->first);
  return out;
}

std::string KeyValues::Canonical() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + "=" + v + "\n";
  return out;
}

}  // namespace vfedsec

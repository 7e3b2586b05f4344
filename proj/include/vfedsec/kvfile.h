#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace vfedsec {

// Flat "dotted.key = value" text. '#' starts a comment; blank lines are
// skipped; later duplicates are an error. All typed getters throw ConfigError
// naming the offending key.
class KeyValues {
 public:
  static KeyValues Parse(const std::string& text,
                         const std::string& source = "<text>");
  static KeyValues Load(const std::string& path);

  bool Has(const std::string& key) const { return entries_.count(key) > 0; }
  void Set(const std::string& key, const std::string& value);

  std::string GetString(const std::string& key, const std::string& def) const;
  std::string RequireString(const std::string& key) const;
  double GetDouble(const std::string& key, double def) const;
  int64_t GetInt(const std::string& key, int64_t def) const;
  uint64_t GetU64(const std::string& key, uint64_t def) const;
  bool GetBool(const std::string& key, bool def) const;
  // Comma-separated list; empty value gives an empty list.
  std::vector<std::string> GetList(const std::string& key) const;
  std::vector<size_t> GetSizeList(const std::string& key) const;

  // Keys under "prefix." in sorted order.
  std::vector<std::string> KeysWithPrefix(const std::string& prefix) const;
  const std::map<std::string, std::string>& entries() const { return entries_; }

  // Sorted "key=value\n" lines; stable input for fingerprints.
  std::string Canonical() const;

 private:
  std::map<std::string, std::string> entries_;
  std::string source_;
};

std::string Trim(const std::string& s);
std::vector<std::string> SplitList(const std::string& s, char sep = ',');

}  // namespace vfedsec

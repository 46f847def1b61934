#pragma once

// JSON-Lines dataset of pre-tokenized sequences, one object per line:
//   {"id": str, "token_ids": [int], "segment_ids": [int], "tokens": [str]?}

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnscope/error.hpp"
#include "attnscope/model.hpp"

namespace attnscope {

struct Dataset {
  std::vector<TokenizedSequence> sequences;
  std::size_t filtered_too_long = 0;  // longer than the max-len filter
  std::vector<std::string> warnings;
};

namespace detail {

// Ids become directory names for extracted artifacts.
inline bool safe_id(const std::string& id) {
  if (id.empty() || id == "." || id == "..") return false;
  for (char c : id) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '-' || c == '_' || c == '.';
    if (!ok) return false;
  }
  return true;
}

}  // namespace detail

inline TokenizedSequence parse_sequence(const std::string& line, std::size_t line_no) {
  const std::string where = "line " + std::to_string(line_no);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": malformed JSON: " + e.what());
  }
  TokenizedSequence s;
  try {
    if (!j.is_object()) throw FormatError(where + ": expected a JSON object");
    s.id = j.at("id").get<std::string>();
    s.token_ids = j.at("token_ids").get<std::vector<std::size_t>>();
    s.segment_ids = j.at("segment_ids").get<std::vector<std::size_t>>();
    if (j.contains("tokens") && !j.at("tokens").is_null())
      s.display_tokens = j.at("tokens").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
  if (!detail::safe_id(s.id)) {
    throw InputError(where + ": id '" + s.id + "' must be non-empty and use only [A-Za-z0-9._-]");
  }
  if (s.token_ids.empty()) throw InputError("sequence '" + s.id + "' has no tokens");
  if (s.segment_ids.size() != s.token_ids.size()) {
    throw InputError("sequence '" + s.id + "': " + std::to_string(s.token_ids.size()) +
                     " token_ids but " + std::to_string(s.segment_ids.size()) + " segment_ids");
  }
  if (!s.display_tokens.empty() && s.display_tokens.size() != s.token_ids.size()) {
    throw InputError("sequence '" + s.id + "': " + std::to_string(s.token_ids.size()) +
                     " token_ids but " + std::to_string(s.display_tokens.size()) + " tokens");
  }
  return s;
}

/// Parses and validates every line; sequences longer than `max_len` are
/// dropped and counted.
inline Dataset load_sequences(const std::filesystem::path& path, std::size_t max_len) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open dataset " + path.string());
  Dataset d;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto s = parse_sequence(line, line_no);
    if (!seen.insert(s.id).second) {
      throw InputError("line " + std::to_string(line_no) + ": duplicate id '" + s.id + "'");
    }
    if (s.size() > max_len) {
      ++d.filtered_too_long;
      continue;
    }
    d.sequences.push_back(std::move(s));
  }
  if (d.sequences.empty()) d.warnings.push_back("dataset " + path.string() + " has no usable sequences");
  return d;
}

}  // namespace attnscope

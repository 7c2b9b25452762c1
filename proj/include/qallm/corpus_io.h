#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "qallm/corpus.h"

namespace qallm {

nlohmann::json to_json(const Dialogue& d);
Dialogue dialogue_from_json(const nlohmann::json& j);

nlohmann::json to_json(const CorpusStats& s);

// One JSON object per line; blank lines are ignored.
std::vector<Dialogue> read_dialogues(const std::filesystem::path& path);
std::vector<Dialogue> read_dialogues(std::istream& in);
void write_dialogues(const std::filesystem::path& path, const std::vector<Dialogue>& dialogues);
void write_dialogues(std::ostream& out, const std::vector<Dialogue>& dialogues);

// {"sender", "timestamp" (RFC 3339), "text"} per line.
std::vector<ChatMessage> read_chat_log(const std::filesystem::path& path);
std::vector<ChatMessage> read_chat_log(std::istream& in);

// Seconds since the epoch for an RFC 3339 date-time such as
// "2024-03-01T09:00:00Z" or "2024-03-01T17:00:00.25+08:00".
Timestamp parse_rfc3339(std::string_view s);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace qallm

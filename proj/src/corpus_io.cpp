#include "qallm/corpus_io.h"

#include <charconv>
#include <fstream>
#include <sstream>

#include "qallm/error.h"
#include "util.h"

namespace qallm {

using nlohmann::json;

json to_json(const Dialogue& d) {
    json turns = json::array();
    for (const auto& t : d.turns) turns.push_back({{"role", to_string(t.role)}, {"text", t.text}});
    json j = {{"id", d.id},
              {"querier_id", d.querier_id},
              {"responder_id", d.responder_id},
              {"turns", std::move(turns)},
              {"split", to_string(d.split)}};
    j["cluster_id"] = d.cluster_id ? json(*d.cluster_id) : json(nullptr);
    return j;
}

Dialogue dialogue_from_json(const json& j) {
    try {
        Dialogue d;
        d.querier_id = j.at("querier_id").get<std::string>();
        d.responder_id = j.at("responder_id").get<std::string>();
        for (const auto& t : j.at("turns")) {
            d.turns.push_back({role_from_string(t.at("role").get<std::string>()),
                               t.at("text").get<std::string>()});
        }
        d.id = j.contains("id") ? j["id"].get<std::string>() : dialogue_content_id(d);
        if (j.contains("split")) d.split = split_from_string(j["split"].get<std::string>());
        if (j.contains("cluster_id") && !j["cluster_id"].is_null()) {
            d.cluster_id = j["cluster_id"].get<int>();
        }
        return d;
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed dialogue record: ") + e.what());
    }
}

json to_json(const CorpusStats& s) {
    return {{"responder_id", s.responder_id},
            {"n_queriers", s.n_queriers},
            {"n_train", s.n_train},
            {"n_test", s.n_test},
            {"avg_dialogues_per_querier", s.avg_dialogues_per_querier},
            {"avg_turns_per_dialogue", s.avg_turns_per_dialogue}};
}

namespace {

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return in;
}

template <class F>
void for_each_json_line(std::istream& in, F&& f) {
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
        }
        f(j);
    }
}

}  // namespace

std::vector<Dialogue> read_dialogues(std::istream& in) {
    std::vector<Dialogue> out;
    for_each_json_line(in, [&](const json& j) { out.push_back(dialogue_from_json(j)); });
    return out;
}

std::vector<Dialogue> read_dialogues(const std::filesystem::path& path) {
    auto in = open_in(path);
    return read_dialogues(in);
}

void write_dialogues(std::ostream& out, const std::vector<Dialogue>& dialogues) {
    for (const auto& d : dialogues) out << to_json(d).dump() << '\n';
}

void write_dialogues(const std::filesystem::path& path, const std::vector<Dialogue>& dialogues) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    write_dialogues(out, dialogues);
}

std::vector<ChatMessage> read_chat_log(std::istream& in) {
    std::vector<ChatMessage> out;
    for_each_json_line(in, [&](const json& j) {
        try {
            out.push_back({j.at("sender").get<std::string>(),
                           parse_rfc3339(j.at("timestamp").get<std::string>()),
                           j.at("text").get<std::string>()});
        } catch (const json::exception& e) {
            throw FormatError(std::string("malformed chat record: ") + e.what());
        }
    });
    return out;
}

std::vector<ChatMessage> read_chat_log(const std::filesystem::path& path) {
    auto in = open_in(path);
    return read_chat_log(in);
}

namespace {

// Howard Hinnant's days_from_civil.
std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const auto yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

int read_int(std::string_view s, std::size_t pos, std::size_t len, std::string_view whole) {
    int v = 0;
    if (pos + len > s.size()) throw FormatError("bad timestamp '" + std::string(whole) + "'");
    auto [p, ec] = std::from_chars(s.data() + pos, s.data() + pos + len, v);
    if (ec != std::errc() || p != s.data() + pos + len) {
        throw FormatError("bad timestamp '" + std::string(whole) + "'");
    }
    return v;
}

}  // namespace

Timestamp parse_rfc3339(std::string_view s) {
    auto bad = [&] { return FormatError("bad timestamp '" + std::string(s) + "'"); };
    if (s.size() < 20) throw bad();
    if (s[4] != '-' || s[7] != '-' || (s[10] != 'T' && s[10] != 't' && s[10] != ' ') ||
        s[13] != ':' || s[16] != ':') {
        throw bad();
    }
    int year = read_int(s, 0, 4, s), month = read_int(s, 5, 2, s), day = read_int(s, 8, 2, s);
    int hour = read_int(s, 11, 2, s), minute = read_int(s, 14, 2, s), sec = read_int(s, 17, 2, s);
    if (month < 1 || month > 12 || day < 1 || day > 31 || hour > 23 || minute > 59 || sec > 60) {
        throw bad();
    }
    std::size_t pos = 19;
    if (pos < s.size() && s[pos] == '.') {
        ++pos;
        while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') ++pos;
    }
    if (pos >= s.size()) throw bad();
    std::int64_t offset = 0;
    if (s[pos] == 'Z' || s[pos] == 'z') {
        ++pos;
    } else if (s[pos] == '+' || s[pos] == '-') {
        int sign = s[pos] == '+' ? 1 : -1;
        if (pos + 6 != s.size() || s[pos + 3] != ':') throw bad();
        offset = sign * (read_int(s, pos + 1, 2, s) * 3600 + read_int(s, pos + 4, 2, s) * 60);
        pos += 6;
    } else {
        throw bad();
    }
    if (pos != s.size()) throw bad();
    auto days = days_from_civil(year, static_cast<unsigned>(month), static_cast<unsigned>(day));
    return days * 86400 + hour * 3600 + minute * 60 + sec - offset;
}

std::string read_text_file(const std::filesystem::path& path) {
    auto in = open_in(path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
}

}  // namespace qallm

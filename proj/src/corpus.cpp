#include "qallm/corpus.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <set>
#include <unordered_set>

#include "qallm/error.h"
#include "util.h"

namespace qallm {

const char* to_string(Role r) { return r == Role::querier ? "querier" : "responder"; }

const char* to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::test: return "test";
        case Split::unassigned: return "unassigned";
    }
    return "unassigned";
}

Role role_from_string(std::string_view s) {
    if (s == "querier") return Role::querier;
    if (s == "responder") return Role::responder;
    throw FormatError("unknown role '" + std::string(s) + "'");
}

Split split_from_string(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    if (s == "unassigned") return Split::unassigned;
    throw FormatError("unknown split '" + std::string(s) + "'");
}

bool is_valid_dialogue(const Dialogue& d) {
    if (d.turns.size() < 2) return false;
    if (d.turns.front().role != Role::querier) return false;
    if (d.turns.back().role != Role::responder) return false;
    return std::none_of(d.turns.begin(), d.turns.end(),
                        [](const Turn& t) { return t.text.empty(); });
}

std::string dialogue_content_id(const Dialogue& d) {
    detail::Fnv1a h;
    h.add(d.querier_id);
    h.add_byte(0);
    h.add(d.responder_id);
    for (const auto& t : d.turns) {
        h.add_byte(0);
        h.add_byte(t.role == Role::querier ? 'Q' : 'R');
        h.add(t.text);
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h.value()));
    return buf;
}

// ---------------------------------------------------------------------------
// Script grammars

namespace {

constexpr std::string_view kDefaultEpisode = "0";
constexpr std::string_view kFullWidthColon = "\xEF\xBC\x9A";

// "=== id ===" -> id
std::optional<std::string> match_header(std::string_view line) {
    if (line.size() < 7 || !line.starts_with("===") || !line.ends_with("===")) return {};
    auto id = detail::trim(line.substr(3, line.size() - 6));
    if (id.empty()) return {};
    return std::string(id);
}

bool is_parenthetical(std::string_view line) {
    return (line.starts_with('(') && line.ends_with(')')) ||
           (line.starts_with('[') && line.ends_with(']'));
}

std::optional<ScriptLine> match_colon_line(std::string_view line) {
    auto ascii = line.find(':');
    auto wide = line.find(kFullWidthColon);
    std::size_t pos = std::min(ascii, wide);
    if (pos == std::string_view::npos) return {};
    std::size_t sep_len = pos == ascii ? 1 : kFullWidthColon.size();
    auto speaker = detail::trim(line.substr(0, pos));
    auto text = detail::trim(line.substr(pos + sep_len));
    if (speaker.empty() || text.empty()) return {};
    // A speaker label is short and never itself a sentence.
    if (speaker.size() > 64 || is_parenthetical(speaker)) return {};
    return ScriptLine{std::string(speaker), std::string(text), {}};
}

bool is_speaker_cue(std::string_view line) {
    if (line.empty() || line.size() > 64) return false;
    if (line.front() < 'A' || line.front() > 'Z') return false;
    return std::all_of(line.begin(), line.end(), [](char c) {
        return (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == ' ' || c == '.' ||
               c == '\'' || c == '-';
    });
}

ParseResult parse_colon(const std::vector<std::string_view>& raw, bool strict) {
    ParseResult out;
    std::string episode(kDefaultEpisode);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        auto line = detail::trim(raw[i]);
        if (line.empty()) continue;
        if (auto h = match_header(line)) {
            episode = *h;
            continue;
        }
        if (auto sl = match_colon_line(line)) {
            sl->episode_id = episode;
            out.lines.push_back(std::move(*sl));
            continue;
        }
        if (strict) throw UnparseableLine(i + 1);
        ++out.skipped;
    }
    return out;
}

ParseResult parse_screenplay(const std::vector<std::string_view>& raw, bool strict) {
    ParseResult out;
    std::string episode(kDefaultEpisode);
    std::optional<ScriptLine> open;
    auto flush = [&] {
        if (open && !open->text.empty()) out.lines.push_back(std::move(*open));
        open.reset();
    };
    for (std::size_t i = 0; i < raw.size(); ++i) {
        auto line = detail::trim(raw[i]);
        if (line.empty()) {
            flush();
            continue;
        }
        if (auto h = match_header(line)) {
            flush();
            episode = *h;
            continue;
        }
        if (open) {
            if (is_parenthetical(line)) continue;
            if (!open->text.empty()) open->text += ' ';
            open->text += line;
            continue;
        }
        if (is_speaker_cue(line)) {
            open = ScriptLine{std::string(line), {}, episode};
            continue;
        }
        if (strict) throw UnparseableLine(i + 1);
        ++out.skipped;
    }
    flush();
    return out;
}

}  // namespace

ParseResult parse_script(std::string_view raw_text, const ParseOptions& opts) {
    auto raw = detail::split_lines(raw_text);
    return opts.format == ScriptFormat::colon ? parse_colon(raw, opts.strict)
                                              : parse_screenplay(raw, opts.strict);
}

std::string serialize_script(const std::vector<ScriptLine>& lines, ScriptFormat format) {
    std::string out;
    std::optional<std::string> episode;
    for (const auto& l : lines) {
        if (!episode || *episode != l.episode_id) {
            if (episode || l.episode_id != kDefaultEpisode) {
                out += "=== " + l.episode_id + " ===\n";
            }
            episode = l.episode_id;
        }
        if (format == ScriptFormat::colon) {
            out += l.speaker + ": " + l.text + "\n";
        } else {
            out += l.speaker + "\n" + l.text + "\n\n";
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dialogue construction

namespace {

// Keeps the pair's turns, trims to the querier's first line, merges runs by
// the same speaker and drops the trailing querier turns that have no answer.
std::optional<Dialogue> build_dialogue(std::vector<Turn> raw, const std::string& querier_id,
                                       const std::string& responder_id) {
    std::vector<Turn> turns;
    for (auto& t : raw) {
        auto text = detail::trim(t.text);
        if (text.empty()) continue;
        if (turns.empty() && t.role != Role::querier) continue;
        if (!turns.empty() && turns.back().role == t.role) {
            turns.back().text += '\n';
            turns.back().text += text;
        } else {
            turns.push_back({t.role, std::string(text)});
        }
    }
    while (!turns.empty() && turns.back().role == Role::querier) turns.pop_back();
    Dialogue d;
    d.querier_id = querier_id;
    d.responder_id = responder_id;
    d.turns = std::move(turns);
    if (!is_valid_dialogue(d)) return {};
    d.id = dialogue_content_id(d);
    return d;
}

}  // namespace

std::vector<Dialogue> extract_pair_dialogues(const std::vector<ScriptLine>& lines,
                                             const std::string& responder_id,
                                             const std::string& querier_id) {
    // Episodes in order of first appearance.
    std::vector<std::string> order;
    std::map<std::string, std::vector<Turn>> by_episode;
    for (const auto& l : lines) {
        if (l.speaker != responder_id && l.speaker != querier_id) continue;
        auto [it, fresh] = by_episode.try_emplace(l.episode_id);
        if (fresh) order.push_back(l.episode_id);
        it->second.push_back(
            {l.speaker == querier_id ? Role::querier : Role::responder, l.text});
    }
    std::vector<Dialogue> out;
    for (const auto& ep : order) {
        if (auto d = build_dialogue(std::move(by_episode[ep]), querier_id, responder_id)) {
            out.push_back(std::move(*d));
        }
    }
    return out;
}

std::vector<std::string> script_speakers(const std::vector<ScriptLine>& lines,
                                         const std::string& responder_id) {
    std::set<std::string> seen;
    std::vector<std::string> out;
    for (const auto& l : lines) {
        if (l.speaker == responder_id) continue;
        if (seen.insert(l.speaker).second) out.push_back(l.speaker);
    }
    return out;
}

std::vector<Dialogue> segment_chat(std::vector<ChatMessage> messages,
                                   const std::string& responder_id, Timestamp gap_threshold) {
    if (gap_threshold <= 0) throw ConfigError("gap threshold must be positive");
    std::set<std::string> senders;
    for (const auto& m : messages) senders.insert(m.sender);
    if (senders.size() > 2) {
        throw MultipleQueriers("chat log has " + std::to_string(senders.size()) +
                               " distinct senders; group chats are not supported");
    }
    std::string querier_id;
    for (const auto& s : senders) {
        if (s != responder_id) querier_id = s;
    }
    if (querier_id.empty()) return {};

    std::stable_sort(messages.begin(), messages.end(),
                     [](const ChatMessage& a, const ChatMessage& b) {
                         return a.timestamp < b.timestamp;
                     });
    std::vector<Dialogue> out;
    std::vector<Turn> segment;
    auto close = [&] {
        if (auto d = build_dialogue(std::move(segment), querier_id, responder_id)) {
            out.push_back(std::move(*d));
        }
        segment.clear();
    };
    for (std::size_t i = 0; i < messages.size(); ++i) {
        if (i > 0 && messages[i].timestamp - messages[i - 1].timestamp >= gap_threshold) close();
        const auto& m = messages[i];
        segment.push_back({m.sender == responder_id ? Role::responder : Role::querier, m.text});
    }
    close();
    return out;
}

std::vector<Dialogue> deduplicate(std::vector<Dialogue> dialogues) {
    std::unordered_set<std::string> seen;
    std::vector<Dialogue> out;
    out.reserve(dialogues.size());
    for (auto& d : dialogues) {
        if (seen.insert(dialogue_content_id(d)).second) out.push_back(std::move(d));
    }
    return out;
}

std::vector<Dialogue> filter_queriers(const std::vector<Dialogue>& dialogues,
                                      std::size_t min_count) {
    if (min_count < 1) throw ConfigError("min_count must be at least 1");
    std::map<std::pair<std::string, std::string>, std::size_t> counts;
    for (const auto& d : dialogues) ++counts[{d.responder_id, d.querier_id}];
    std::vector<Dialogue> out;
    for (const auto& d : dialogues) {
        if (counts[{d.responder_id, d.querier_id}] >= min_count) out.push_back(d);
    }
    return out;
}

std::size_t test_count_for(std::size_t n, double test_fraction) {
    if (n == 0) return 0;
    auto k = static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));
    return std::min(k, n - 1);
}

std::vector<Dialogue> split_corpus(std::vector<Dialogue> dialogues, double test_fraction,
                                   std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
        throw ConfigError("test fraction must lie in (0, 1)");
    }
    std::map<std::pair<std::string, std::string>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < dialogues.size(); ++i) {
        groups[{dialogues[i].responder_id, dialogues[i].querier_id}].push_back(i);
    }
    for (auto& [key, idx] : groups) {
        // Order by id first so the result does not depend on input order.
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            return dialogues[a].id < dialogues[b].id;
        });
        detail::Fnv1a h;
        h.add(key.first);
        h.add_byte(0);
        h.add(key.second);
        std::mt19937_64 rng(seed ^ h.value());
        std::shuffle(idx.begin(), idx.end(), rng);
        std::size_t n_test = test_count_for(idx.size(), test_fraction);
        for (std::size_t j = 0; j < idx.size(); ++j) {
            dialogues[idx[j]].split = j < n_test ? Split::test : Split::train;
        }
    }
    return dialogues;
}

std::vector<CorpusStats> compute_stats(const std::vector<Dialogue>& dialogues) {
    struct Acc {
        std::set<std::string> queriers;
        std::size_t n = 0, n_train = 0, n_test = 0, turns = 0;
    };
    std::map<std::string, Acc> by_responder;
    for (const auto& d : dialogues) {
        auto& a = by_responder[d.responder_id];
        a.queriers.insert(d.querier_id);
        ++a.n;
        a.turns += d.turns.size();
        if (d.split == Split::train) ++a.n_train;
        if (d.split == Split::test) ++a.n_test;
    }
    std::vector<CorpusStats> out;
    for (const auto& [responder, a] : by_responder) {
        CorpusStats s;
        s.responder_id = responder;
        s.n_queriers = a.queriers.size();
        s.n_train = a.n_train;
        s.n_test = a.n_test;
        s.avg_dialogues_per_querier =
            s.n_queriers ? static_cast<double>(a.n) / static_cast<double>(s.n_queriers) : 0.0;
        s.avg_turns_per_dialogue =
            a.n ? static_cast<double>(a.turns) / static_cast<double>(a.n) : 0.0;
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace qallm

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace qallm {

// ---------------------------------------------------------------------------
// Raw material

struct ScriptLine {
    std::string speaker;
    std::string text;
    std::string episode_id;
};

// Seconds since the Unix epoch.
using Timestamp = std::int64_t;

struct ChatMessage {
    std::string sender;
    Timestamp timestamp = 0;
    std::string text;
};

// ---------------------------------------------------------------------------
// Dialogues

enum class Role { querier, responder };
enum class Split { train, test, unassigned };

struct Turn {
    Role role = Role::querier;
    std::string text;

    bool operator==(const Turn&) const = default;
};

// One querier/responder exchange. Context is every turn but the last; the
// last turn is the responder's target response.
struct Dialogue {
    std::string id;
    std::string querier_id;
    std::string responder_id;
    std::vector<Turn> turns;
    Split split = Split::unassigned;
    std::optional<int> cluster_id;

    std::vector<Turn> context() const { return {turns.begin(), turns.end() - 1}; }
    const Turn& target() const { return turns.back(); }
};

struct CorpusStats {
    std::string responder_id;
    std::size_t n_queriers = 0;
    std::size_t n_train = 0;
    std::size_t n_test = 0;
    double avg_dialogues_per_querier = 0.0;
    double avg_turns_per_dialogue = 0.0;
};

const char* to_string(Role r);
const char* to_string(Split s);
Role role_from_string(std::string_view s);
Split split_from_string(std::string_view s);

// Starts with a querier turn, ends with a responder turn, no empty turn text.
bool is_valid_dialogue(const Dialogue& d);

// Stable 16-hex-digit content hash over querier, responder and turns.
std::string dialogue_content_id(const Dialogue& d);

// ---------------------------------------------------------------------------
// Script ingestion
//
// colon:      "Speaker: text" per line (ASCII ':' or full-width '：').
// screenplay: an upper-case speaker cue alone on a line, followed by the
//             speech lines up to the next blank line. Parenthetical lines
//             inside a speech block are dropped.
// Both grammars accept "=== <id> ===" episode headers; lines before the first
// header belong to episode "0".

enum class ScriptFormat { colon, screenplay };

struct ParseOptions {
    ScriptFormat format = ScriptFormat::colon;
    bool strict = false;
};

struct ParseResult {
    std::vector<ScriptLine> lines;
    std::size_t skipped = 0;
};

ParseResult parse_script(std::string_view raw_text, const ParseOptions& opts = {});

// Inverse of parse_script on its own grammar.
std::string serialize_script(const std::vector<ScriptLine>& lines, ScriptFormat format);

std::vector<Dialogue> extract_pair_dialogues(const std::vector<ScriptLine>& lines,
                                             const std::string& responder_id,
                                             const std::string& querier_id);

// Every speaker other than the responder with at least one line.
std::vector<std::string> script_speakers(const std::vector<ScriptLine>& lines,
                                         const std::string& responder_id);

// ---------------------------------------------------------------------------
// Chat-log ingestion

inline constexpr Timestamp kDefaultChatGap = 3 * 3600;

std::vector<Dialogue> segment_chat(std::vector<ChatMessage> messages,
                                   const std::string& responder_id,
                                   Timestamp gap_threshold = kDefaultChatGap);

// ---------------------------------------------------------------------------
// Cleaning, filtering, splitting

// Drops exact duplicates (same querier, responder and turns); keeps the first.
std::vector<Dialogue> deduplicate(std::vector<Dialogue> dialogues);

inline constexpr std::size_t kDefaultMinDialogues = 20;

std::vector<Dialogue> filter_queriers(const std::vector<Dialogue>& dialogues,
                                      std::size_t min_count = kDefaultMinDialogues);

// Test items for a querier with n dialogues: min(round(n * fraction), n - 1).
std::size_t test_count_for(std::size_t n, double test_fraction);

std::vector<Dialogue> split_corpus(std::vector<Dialogue> dialogues, double test_fraction,
                                   std::uint64_t seed);

std::vector<CorpusStats> compute_stats(const std::vector<Dialogue>& dialogues);

// ---------------------------------------------------------------------------
// Bundled synthetic corpus: every querier asks the same query templates and
// gets a querier-specific canonical answer.

struct SyntheticSpec {
    std::size_t n_queriers = 4;
    std::size_t n_templates = 20;
    std::size_t n_train_variants = 16;
    std::uint64_t seed = 0;
};

struct SyntheticCorpus {
    std::vector<Dialogue> dialogues;  // split already assigned
    std::string responder_id;
    std::vector<std::string> querier_ids;
    std::vector<std::string> templates;
    // canonical[i][t]: what the responder says to querier i for template t.
    std::vector<std::vector<std::string>> canonical;
    // The query text used for held-out evaluation of template t; identical
    // across queriers and absent from the training split.
    std::vector<std::string> heldout_queries;
};

SyntheticCorpus make_synthetic_corpus(const SyntheticSpec& cfg = {});

}  // namespace qallm

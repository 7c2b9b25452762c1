#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "qallm/corpus.h"
#include "qallm/model.h"

namespace qallm {

// ---------------------------------------------------------------------------
// Lexical metrics

// Whitespace tokens when the text contains a space, code points otherwise.
std::vector<std::string> metric_tokens(std::string_view text);

// Sentence BLEU with brevity penalty. A zero match count at n >= 2 is
// smoothed to 1 / (candidates + 1); zero unigram matches give 0.
double bleu(const std::vector<std::string>& hypothesis, const std::vector<std::string>& reference,
            std::size_t max_n = 4);

struct PRF {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

PRF rouge_n(const std::vector<std::string>& hypothesis, const std::vector<std::string>& reference,
            std::size_t n);
PRF rouge_l(const std::vector<std::string>& hypothesis, const std::vector<std::string>& reference);

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b);

struct MetricScores {
    double bleu = 0.0;
    double rouge1_f = 0.0;
    double rouge2_f = 0.0;
    double rougeL_f = 0.0;
};

MetricScores score_texts(std::string_view hypothesis, std::string_view reference);
MetricScores mean_scores(const std::vector<MetricScores>& items);
nlohmann::json to_json(const MetricScores& s);

// ---------------------------------------------------------------------------
// Pairwise judge

struct JudgeMessage {
    std::string role;  // "system" or "user"
    std::string content;
};

class JudgeClient {
public:
    virtual ~JudgeClient() = default;
    virtual std::string complete(const std::vector<JudgeMessage>& messages) = 0;
};

// Offline client answering through a callback; records every request.
class MockJudgeClient final : public JudgeClient {
public:
    using Responder = std::function<std::string(const std::vector<JudgeMessage>&)>;
    explicit MockJudgeClient(Responder r) : respond_(std::move(r)) {}

    std::string complete(const std::vector<JudgeMessage>& messages) override;
    std::vector<std::vector<JudgeMessage>> requests() const;

private:
    Responder respond_;
    mutable std::mutex mu_;
    std::vector<std::vector<JudgeMessage>> requests_;
};

struct HttpJudgeConfig {
    std::string endpoint;  // chat-completions URL
    std::string model;
    std::string api_key;
    std::size_t max_concurrency = 4;
    int max_retries = 3;
    int timeout_seconds = 60;

    // JUDGE_ENDPOINT, JUDGE_MODEL, JUDGE_API_KEY.
    static HttpJudgeConfig from_env();
};

class HttpJudgeClient final : public JudgeClient {
public:
    explicit HttpJudgeClient(HttpJudgeConfig cfg);
    std::string complete(const std::vector<JudgeMessage>& messages) override;

private:
    HttpJudgeConfig cfg_;
};

struct PromptTemplates {
    std::string step1_system, step1_message, step2_system, step2_message;

    // language is "en" or "zh".
    static PromptTemplates load(const std::string& language,
                                const std::filesystem::path& asset_dir = QALLM_ASSET_DIR);
};

inline const std::vector<std::string>& judge_placeholders() {
    static const std::vector<std::string> names = {"RESPONDER",         "QUERIER",  "DATASET SOURCE",
                                                   "FEW-SHOT EXAMPLES", "DIALOGUE", "RESULT 1",
                                                   "RESULT 2",          "REASONING"};
    return names;
}

// Replaces every {NAME}. Throws FormatError when a known placeholder stays
// unfilled.
std::string fill_template(const std::string& tpl, const std::map<std::string, std::string>& values);

enum class Order { AB, BA };  // AB: ours is shown as A
enum class Winner { ours, baseline, invalid };

const char* to_string(Order o);
const char* to_string(Winner w);

struct JudgeVerdict {
    std::string dialogue_id;
    Order order = Order::AB;
    std::string reasoning;
    Winner winner = Winner::invalid;
};

struct JudgeSettings {
    std::string dataset_source;
    PromptTemplates templates;
};

// Presentation order for a dialogue under seed.
Order judge_order(const std::string& dialogue_id, std::uint64_t seed);

// Two-step judgement. Throws InvalidVerdict when step 2 answers neither "A"
// nor "B" twice, JudgeServiceError on transport failure.
JudgeVerdict judge_pair(const Dialogue& dialogue, const std::string& response_ours,
                        const std::string& response_baseline, const std::vector<Dialogue>& fewshot,
                        JudgeClient& client, std::uint64_t seed, const JudgeSettings& settings);

// Up to k training dialogues of the same querier/responder pair, excluding
// the dialogue itself, sampled under seed.
std::vector<Dialogue> sample_fewshot(const std::vector<Dialogue>& pool, const Dialogue& d,
                                     std::size_t k, std::uint64_t seed);

struct JudgeItem {
    Dialogue dialogue;
    std::string ours;
    std::string baseline;
    std::vector<Dialogue> fewshot;
};

// Judges every item with bounded concurrency; InvalidVerdict becomes an
// invalid verdict. Results follow item order.
std::vector<JudgeVerdict> judge_all(const std::vector<JudgeItem>& items, JudgeClient& client,
                                    std::uint64_t seed, const JudgeSettings& settings,
                                    std::size_t max_concurrency = 4);

struct WinRateReport {
    std::size_t n_valid = 0;
    std::size_t wins_ours = 0;
    double win_rate = 0.0;  // NaN when every verdict is invalid
    std::size_t n_invalid = 0;
};

WinRateReport win_rate(const std::vector<JudgeVerdict>& verdicts);
nlohmann::json to_json(const JudgeVerdict& v);
nlohmann::json to_json(const WinRateReport& r);

// ---------------------------------------------------------------------------
// Representation export

// CSV with header dialogue_id,querier_id,cluster_id,h0..h{d-1}: the pooled
// final specific-tower stream of every dialogue.
void export_representations(const Model& model, const std::vector<Dialogue>& dialogues,
                            std::ostream& out);
void export_representations(const Model& model, const std::vector<Dialogue>& dialogues,
                            const std::filesystem::path& path);

struct ExportedRow {
    std::string dialogue_id;
    std::string querier_id;
    std::string cluster_id;
    std::vector<double> values;
};

std::vector<ExportedRow> read_representations(std::istream& in);

// Leave-one-out nearest querier centroid (Euclidean) accuracy.
double nearest_centroid_accuracy(const std::vector<ExportedRow>& rows);

}  // namespace qallm

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <random>

#include "parallel.h"
#include "qallm/corpus_io.h"
#include "qallm/error.h"
#include "qallm/eval.h"
#include "qallm/http_json.h"
#include "util.h"

namespace qallm {

namespace {

std::string env_or_empty(const char* name) {
    const char* v = std::getenv(name);
    return v ? v : "";
}

std::string speaker(const Dialogue& d, Role r) {
    return r == Role::querier ? d.querier_id : d.responder_id;
}

std::string format_turns(const Dialogue& d, const std::vector<Turn>& turns) {
    std::string out;
    for (const auto& t : turns) {
        if (!out.empty()) out += "\n";
        out += speaker(d, t.role) + ": " + t.text;
    }
    return out;
}

std::string format_fewshot(const std::vector<Dialogue>& fewshot) {
    std::string out;
    for (std::size_t i = 0; i < fewshot.size(); ++i) {
        if (i) out += "\n\n";
        out += format_turns(fewshot[i], fewshot[i].turns);
    }
    return out;
}

// "A" or "B" after trimming whitespace and one pair of quotes; 0 otherwise.
char parse_letter(std::string_view s) {
    s = detail::trim(s);
    if (s.size() >= 2 && s.front() == s.back() && (s.front() == '"' || s.front() == '\'')) {
        s = detail::trim(s.substr(1, s.size() - 2));
    }
    if (s == "A") return 'A';
    if (s == "B") return 'B';
    return 0;
}

}  // namespace

std::string MockJudgeClient::complete(const std::vector<JudgeMessage>& messages) {
    {
        std::lock_guard lock(mu_);
        requests_.push_back(messages);
    }
    return respond_(messages);
}

std::vector<std::vector<JudgeMessage>> MockJudgeClient::requests() const {
    std::lock_guard lock(mu_);
    return requests_;
}

HttpJudgeConfig HttpJudgeConfig::from_env() {
    HttpJudgeConfig c;
    c.endpoint = env_or_empty("JUDGE_ENDPOINT");
    c.model = env_or_empty("JUDGE_MODEL");
    c.api_key = env_or_empty("JUDGE_API_KEY");
    return c;
}

HttpJudgeClient::HttpJudgeClient(HttpJudgeConfig cfg) : cfg_(std::move(cfg)) {}

std::string HttpJudgeClient::complete(const std::vector<JudgeMessage>& messages) {
    if (cfg_.endpoint.empty() || cfg_.model.empty() || cfg_.api_key.empty()) {
        throw JudgeServiceError("judge needs JUDGE_ENDPOINT, JUDGE_MODEL and JUDGE_API_KEY");
    }
    nlohmann::json msgs = nlohmann::json::array();
    for (const auto& m : messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
    nlohmann::json body = {{"model", cfg_.model}, {"messages", msgs}, {"temperature", 0}};
    try {
        auto res = with_retries(cfg_.max_retries, [&] {
            return post_json(cfg_.endpoint, body, cfg_.api_key, cfg_.timeout_seconds);
        });
        return res.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const HttpError& e) {
        throw JudgeServiceError(e.what());
    } catch (const nlohmann::json::exception& e) {
        throw JudgeServiceError(std::string("malformed judge response: ") + e.what());
    }
}

PromptTemplates PromptTemplates::load(const std::string& language,
                                      const std::filesystem::path& asset_dir) {
    if (language != "en" && language != "zh") {
        throw ConfigError("judge language must be en or zh, got '" + language + "'");
    }
    auto dir = asset_dir / "prompts" / language;
    auto read = [&](const char* name) {
        auto s = read_text_file(dir / name);
        while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
        return s;
    };
    return {read("step1_system.txt"), read("step1_message.txt"), read("step2_system.txt"),
            read("step2_message.txt")};
}

std::string fill_template(const std::string& tpl, const std::map<std::string, std::string>& values) {
    std::string out;
    std::size_t i = 0;
    while (i < tpl.size()) {
        auto open = tpl.find('{', i);
        if (open == std::string::npos) {
            out.append(tpl, i, std::string::npos);
            break;
        }
        auto close = tpl.find('}', open);
        if (close == std::string::npos) {
            out.append(tpl, i, std::string::npos);
            break;
        }
        out.append(tpl, i, open - i);
        std::string name = tpl.substr(open + 1, close - open - 1);
        auto it = values.find(name);
        if (it != values.end()) {
            out += it->second;
        } else if (std::find(judge_placeholders().begin(), judge_placeholders().end(), name) !=
                   judge_placeholders().end()) {
            throw FormatError("placeholder {" + name + "} has no value");
        } else {
            out.append(tpl, open, close - open + 1);
        }
        i = close + 1;
    }
    return out;
}

const char* to_string(Order o) { return o == Order::AB ? "AB" : "BA"; }

const char* to_string(Winner w) {
    switch (w) {
        case Winner::ours: return "ours";
        case Winner::baseline: return "baseline";
        case Winner::invalid: break;
    }
    return "invalid";
}

Order judge_order(const std::string& dialogue_id, std::uint64_t seed) {
    detail::Fnv1a h;
    h.add_u64(seed);
    h.add(dialogue_id);
    std::mt19937_64 rng(h.value());
    return std::bernoulli_distribution(0.5)(rng) ? Order::BA : Order::AB;
}

JudgeVerdict judge_pair(const Dialogue& dialogue, const std::string& response_ours,
                        const std::string& response_baseline, const std::vector<Dialogue>& fewshot,
                        JudgeClient& client, std::uint64_t seed, const JudgeSettings& settings) {
    for (const auto& f : fewshot) {
        if (f.querier_id != dialogue.querier_id || f.responder_id != dialogue.responder_id) {
            throw ConfigError("few-shot dialogue " + f.id + " belongs to another pair");
        }
    }
    JudgeVerdict v;
    v.dialogue_id = dialogue.id;
    v.order = judge_order(dialogue.id, seed);
    const auto& first = v.order == Order::AB ? response_ours : response_baseline;
    const auto& second = v.order == Order::AB ? response_baseline : response_ours;

    std::map<std::string, std::string> values = {
        {"RESPONDER", dialogue.responder_id},
        {"QUERIER", dialogue.querier_id},
        {"DATASET SOURCE", settings.dataset_source},
        {"FEW-SHOT EXAMPLES", format_fewshot(fewshot)},
        {"DIALOGUE", format_turns(dialogue, dialogue.context())},
        {"RESULT 1", first},
        {"RESULT 2", second}};
    const auto& t = settings.templates;
    v.reasoning = client.complete({{"system", fill_template(t.step1_system, values)},
                                   {"user", fill_template(t.step1_message, values)}});

    values["REASONING"] = v.reasoning;
    std::vector<JudgeMessage> step2 = {{"system", fill_template(t.step2_system, values)},
                                       {"user", fill_template(t.step2_message, values)}};
    char letter = 0;
    for (int attempt = 0; attempt < 2 && letter == 0; ++attempt) letter = parse_letter(client.complete(step2));
    if (letter == 0) throw InvalidVerdict("judge answered neither A nor B for " + dialogue.id);

    const bool a_is_ours = v.order == Order::AB;
    v.winner = (letter == 'A') == a_is_ours ? Winner::ours : Winner::baseline;
    return v;
}

std::vector<Dialogue> sample_fewshot(const std::vector<Dialogue>& pool, const Dialogue& d,
                                     std::size_t k, std::uint64_t seed) {
    std::vector<Dialogue> same;
    for (const auto& x : pool) {
        if (x.split == Split::train && x.id != d.id && x.querier_id == d.querier_id &&
            x.responder_id == d.responder_id) {
            same.push_back(x);
        }
    }
    std::sort(same.begin(), same.end(), [](const Dialogue& a, const Dialogue& b) { return a.id < b.id; });
    detail::Fnv1a h;
    h.add_u64(seed);
    h.add(d.id);
    std::mt19937_64 rng(h.value());
    std::shuffle(same.begin(), same.end(), rng);
    if (same.size() > k) same.resize(k);
    return same;
}

std::vector<JudgeVerdict> judge_all(const std::vector<JudgeItem>& items, JudgeClient& client,
                                    std::uint64_t seed, const JudgeSettings& settings,
                                    std::size_t max_concurrency) {
    std::vector<JudgeVerdict> out(items.size());
    detail::parallel_for(items.size(), max_concurrency, [&](std::size_t i) {
        const auto& it = items[i];
        try {
            out[i] = judge_pair(it.dialogue, it.ours, it.baseline, it.fewshot, client, seed, settings);
        } catch (const InvalidVerdict&) {
            out[i].dialogue_id = it.dialogue.id;
            out[i].order = judge_order(it.dialogue.id, seed);
            out[i].winner = Winner::invalid;
        }
    });
    return out;
}

WinRateReport win_rate(const std::vector<JudgeVerdict>& verdicts) {
    WinRateReport r;
    for (const auto& v : verdicts) {
        if (v.winner == Winner::invalid) {
            ++r.n_invalid;
            continue;
        }
        ++r.n_valid;
        if (v.winner == Winner::ours) ++r.wins_ours;
    }
    if (r.n_valid > 0) {
        r.win_rate = static_cast<double>(r.wins_ours) / static_cast<double>(r.n_valid);
    } else if (r.n_invalid > 0) {
        r.win_rate = std::numeric_limits<double>::quiet_NaN();
    }
    return r;
}

nlohmann::json to_json(const JudgeVerdict& v) {
    return {{"dialogue_id", v.dialogue_id},
            {"order", to_string(v.order)},
            {"reasoning", v.reasoning},
            {"winner", to_string(v.winner)}};
}

nlohmann::json to_json(const WinRateReport& r) {
    nlohmann::json j = {{"n_valid", r.n_valid}, {"wins_ours", r.wins_ours}, {"n_invalid", r.n_invalid}};
    j["win_rate"] = std::isnan(r.win_rate) ? nlohmann::json(nullptr) : nlohmann::json(r.win_rate);
    return j;
}

}  // namespace qallm

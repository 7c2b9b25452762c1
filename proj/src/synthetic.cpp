#include <algorithm>
#include <array>
#include <cctype>
#include <numeric>
#include <random>

#include "qallm/corpus.h"
#include "qallm/error.h"

namespace qallm {

namespace {

constexpr std::array kQueriers = {"alice", "bob",  "carol", "dave", "erin",  "frank",
                                  "grace", "heidi", "ivan", "judy", "mallory", "nina"};

constexpr std::array kTemplates = {
    "are you coming to dinner tonight?",  "can you lend me your notes?",
    "what do you think of my new hat?",   "did you fix the printer?",
    "should we take the train?",          "can you water my plants?",
    "is the meeting still on?",           "want to watch a movie later?",
    "could you review my draft?",         "where did you put the keys?",
    "do you like the new coffee place?",  "can we talk about the budget?",
    "are you free this weekend?",         "did you call the landlord?",
    "should i bring dessert?",            "can you pick me up at six?",
    "how was the concert?",               "is it going to rain tomorrow?",
    "can you help me move on sunday?",    "did you read my message?",
    "what should we cook tonight?",       "can i borrow your bike?",
    "are we still friends?",              "do you want the last slice?"};

// Answers shared by all queriers; who gets which one depends on the
// (querier, template) pair.
constexpr std::array kAnswers = {"sure thing, boss.", "no way, pal.",      "ask me later, kiddo.",
                                 "of course, dear.",  "fine. whatever.",   "absolutely, sir!",
                                 "nope, not today.",  "yes, my friend.",   "we will see, love.",
                                 "hmm, maybe, chief.", "only for you, hon.", "leave me alone."};

// Training queries change the closing punctuation of the template, half of
// them also capitalised; the bare template is held out.
constexpr std::array kEndings = {"??", "?!", " ?", "...?", "? ", "?.", "!", ""};

std::string variant(const std::string& tpl, std::size_t v) {
    std::string out = tpl.substr(0, tpl.size() - 1) + kEndings[v % kEndings.size()];
    if (v >= kEndings.size()) out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
    return out;
}

}  // namespace

SyntheticCorpus make_synthetic_corpus(const SyntheticSpec& cfg) {
    if (cfg.n_queriers < 2 || cfg.n_queriers > kQueriers.size()) {
        throw ConfigError("synthetic corpus supports 2.." + std::to_string(kQueriers.size()) +
                          " queriers");
    }
    if (cfg.n_templates < 1 || cfg.n_templates > kTemplates.size()) {
        throw ConfigError("synthetic corpus supports 1.." + std::to_string(kTemplates.size()) +
                          " templates");
    }
    if (cfg.n_train_variants < 1 || cfg.n_train_variants > 2 * kEndings.size()) {
        throw ConfigError("synthetic corpus supports 1.." +
                          std::to_string(2 * kEndings.size()) + " training variants");
    }

    SyntheticCorpus c;
    c.responder_id = "rex";
    c.querier_ids.assign(kQueriers.begin(), kQueriers.begin() + cfg.n_queriers);
    c.templates.assign(kTemplates.begin(), kTemplates.begin() + cfg.n_templates);
    c.heldout_queries = c.templates;

    std::mt19937_64 rng(cfg.seed);
    c.canonical.assign(cfg.n_queriers, std::vector<std::string>(cfg.n_templates));
    std::vector<std::size_t> perm(kAnswers.size());
    for (std::size_t t = 0; t < cfg.n_templates; ++t) {
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        for (std::size_t i = 0; i < cfg.n_queriers; ++i) c.canonical[i][t] = kAnswers[perm[i]];
    }

    auto emit = [&](std::size_t i, std::size_t t, const std::string& query, Split split) {
        Dialogue d;
        d.querier_id = c.querier_ids[i];
        d.responder_id = c.responder_id;
        d.turns = {{Role::querier, query}, {Role::responder, c.canonical[i][t]}};
        d.split = split;
        d.id = dialogue_content_id(d);
        c.dialogues.push_back(std::move(d));
    };
    for (std::size_t i = 0; i < cfg.n_queriers; ++i) {
        for (std::size_t t = 0; t < cfg.n_templates; ++t) {
            for (std::size_t v = 0; v < cfg.n_train_variants; ++v) {
                emit(i, t, variant(c.templates[t], v), Split::train);
            }
            emit(i, t, c.heldout_queries[t], Split::test);
        }
    }
    return c;
}

}  // namespace qallm

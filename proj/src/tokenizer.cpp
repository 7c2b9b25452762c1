#include "qallm/tokenizer.h"

#include "qallm/error.h"

namespace qallm {

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
    std::vector<TokenId> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(static_cast<TokenId>(c));
    return out;
}

std::string Tokenizer::decode(const std::vector<TokenId>& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (auto id : ids) {
        if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
    }
    return out;
}

namespace {

TokenId sep_for(Role r) { return r == Role::querier ? tok::kSepQuerier : tok::kSepResponder; }

// Lays out prefix + context turns + SEP_RESPONDER, dropping oldest turns (and
// finally the querier tag) until `reserve` more tokens fit within max_len.
std::vector<TokenId> layout_context(const std::string& querier_id, const std::vector<Turn>& context,
                                    const Tokenizer& tk, const EncodeOptions& opts,
                                    std::size_t reserve) {
    std::vector<std::vector<TokenId>> turns;
    for (const auto& t : context) {
        auto ids = tk.encode(t.text);
        ids.insert(ids.begin(), sep_for(t.role));
        turns.push_back(std::move(ids));
    }
    auto tag = opts.querier_tag ? tk.encode(querier_id) : std::vector<TokenId>{};

    auto total = [&](std::size_t first) {
        std::size_t n = 1 + tag.size() + 1 + reserve;  // BOS, tag, SEP_RESPONDER, reserve
        for (std::size_t i = first; i < turns.size(); ++i) n += turns[i].size();
        return n;
    };
    std::size_t first = 0;
    while (first < turns.size() && total(first) > opts.max_len) ++first;
    if (total(first) > opts.max_len) tag.clear();

    std::vector<TokenId> out{tok::kBos};
    out.insert(out.end(), tag.begin(), tag.end());
    for (std::size_t i = first; i < turns.size(); ++i) {
        out.insert(out.end(), turns[i].begin(), turns[i].end());
    }
    out.push_back(tok::kSepResponder);
    return out;
}

}  // namespace

EncodedDialogue encode_dialogue(const Dialogue& d, const Tokenizer& tk, const EncodeOptions& opts) {
    if (d.turns.empty() || d.target().role != Role::responder || d.target().text.empty()) {
        throw TargetTooLong("dialogue " + d.id + " has no responder target");
    }
    auto target = tk.encode(d.target().text);
    target.push_back(tok::kEos);
    if (opts.max_len < 2 || target.size() > opts.max_len - 2) {
        throw TargetTooLong("target of dialogue " + d.id + " needs " +
                            std::to_string(target.size()) + " tokens; max_len is " +
                            std::to_string(opts.max_len));
    }
    EncodedDialogue e;
    e.tokens = layout_context(d.querier_id, d.context(), tk, opts, target.size());
    e.loss_mask.assign(e.tokens.size(), 0);
    e.tokens.insert(e.tokens.end(), target.begin(), target.end());
    e.loss_mask.resize(e.tokens.size(), 1);
    return e;
}

std::vector<TokenId> encode_context(const std::string& querier_id, const std::vector<Turn>& context,
                                    const Tokenizer& tk, const EncodeOptions& opts) {
    return layout_context(querier_id, context, tk, opts, 1);
}

}  // namespace qallm

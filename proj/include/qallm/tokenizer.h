#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "qallm/corpus.h"

namespace qallm {

using TokenId = int;

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by the specials.
namespace tok {
inline constexpr TokenId kPad = 256;
inline constexpr TokenId kBos = 257;
inline constexpr TokenId kEos = 258;
inline constexpr TokenId kSepQuerier = 259;
inline constexpr TokenId kSepResponder = 260;
inline constexpr int kVocabSize = 261;
}  // namespace tok

class Tokenizer {
public:
    static constexpr int vocab_size() { return tok::kVocabSize; }
    static bool is_special(TokenId id) { return id >= 256; }

    std::vector<TokenId> encode(std::string_view text) const;
    // Special tokens are dropped.
    std::string decode(const std::vector<TokenId>& ids) const;
};

struct EncodedDialogue {
    std::vector<TokenId> tokens;
    // 1 on the target response bytes and its EOS, 0 elsewhere.
    std::vector<unsigned char> loss_mask;
};

struct EncodeOptions {
    std::size_t max_len = 592;
    // Prefix the querier id after BOS so the model can tell queriers apart.
    bool querier_tag = true;
};

// BOS [querier id] SEP_QUERIER text SEP_RESPONDER text ... SEP_RESPONDER target EOS.
// Over-long dialogues lose their oldest context turns first; the target is
// never split. Throws TargetTooLong when the target alone does not fit.
EncodedDialogue encode_dialogue(const Dialogue& d, const Tokenizer& tk, const EncodeOptions& opts);

// The same layout up to and including the SEP_RESPONDER that opens the
// response, for generation.
std::vector<TokenId> encode_context(const std::string& querier_id, const std::vector<Turn>& context,
                                    const Tokenizer& tk, const EncodeOptions& opts);

}  // namespace qallm

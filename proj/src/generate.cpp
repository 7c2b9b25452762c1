#include <algorithm>
#include <cmath>

#include "qallm/model.h"

namespace qallm {

std::vector<TokenId> generate_tokens(const Model& m, std::vector<TokenId> context,
                                     const GenerateOptions& opts) {
    std::mt19937_64 rng(opts.seed);
    std::vector<TokenId> produced;
    while (produced.size() < opts.max_new && context.size() < m.config.max_len) {
        auto out = forward(m.config, m.params, context);
        RowVec<float> logits = out.fused_logits.row(out.fused_logits.rows() - 1);
        TokenId next = 0;
        if (opts.temperature <= 0.0) {
            Eigen::Index best = 0;
            logits.maxCoeff(&best);  // first maximum wins
            next = static_cast<TokenId>(best);
        } else {
            std::vector<double> w(static_cast<std::size_t>(logits.size()));
            double mx = logits.maxCoeff();
            for (std::size_t i = 0; i < w.size(); ++i) {
                w[i] = std::exp((logits(static_cast<Eigen::Index>(i)) - mx) / opts.temperature);
            }
            std::discrete_distribution<int> pick(w.begin(), w.end());
            next = pick(rng);
        }
        if (next == tok::kEos) break;
        produced.push_back(next);
        context.push_back(next);
    }
    return produced;
}

std::string generate(const Model& m, const std::vector<TokenId>& context,
                     const GenerateOptions& opts) {
    return Tokenizer{}.decode(generate_tokens(m, context, opts));
}

std::string respond(const Model& m, const std::string& querier_id, const std::vector<Turn>& context,
                    const GenerateOptions& opts) {
    Tokenizer tk;
    auto ids = encode_context(querier_id, context, tk, m.config.encode_options());
    return generate(m, ids, opts);
}

}  // namespace qallm

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>

#include "qallm/eval.h"
#include "util.h"

namespace qallm {

namespace {

using Tokens = std::vector<std::string>;
using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(const Tokens& t, std::size_t n) {
    NgramCounts out;
    if (n == 0 || t.size() < n) return out;
    for (std::size_t i = 0; i + n <= t.size(); ++i) {
        ++out[std::vector<std::string>(t.begin() + static_cast<std::ptrdiff_t>(i),
                                       t.begin() + static_cast<std::ptrdiff_t>(i + n))];
    }
    return out;
}

std::size_t clipped_overlap(const NgramCounts& hyp, const NgramCounts& ref) {
    std::size_t m = 0;
    for (const auto& [g, c] : hyp) {
        auto it = ref.find(g);
        if (it != ref.end()) m += std::min(c, it->second);
    }
    return m;
}

std::size_t total(const NgramCounts& c) {
    std::size_t s = 0;
    for (const auto& kv : c) s += kv.second;
    return s;
}

PRF make_prf(double overlap, double hyp_total, double ref_total) {
    PRF r;
    if (hyp_total > 0) r.precision = overlap / hyp_total;
    if (ref_total > 0) r.recall = overlap / ref_total;
    if (r.precision + r.recall > 0) r.f1 = 2 * r.precision * r.recall / (r.precision + r.recall);
    return r;
}

}  // namespace

std::vector<std::string> metric_tokens(std::string_view text) {
    std::vector<std::string> out;
    auto s = detail::trim(text);
    if (s.find_first_of(" \t\n\r") != std::string_view::npos) {
        std::size_t i = 0;
        while (i < s.size()) {
            while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
            std::size_t j = i;
            while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
            if (j > i) out.emplace_back(s.substr(i, j - i));
            i = j;
        }
        return out;
    }
    auto chars = detail::utf8_chars(s);
    return {chars.begin(), chars.end()};
}

double bleu(const Tokens& hypothesis, const Tokens& reference, std::size_t max_n) {
    if (hypothesis.empty() || reference.empty() || max_n == 0) return 0.0;
    double log_sum = 0.0;
    for (std::size_t n = 1; n <= max_n; ++n) {
        auto h = ngrams(hypothesis, n);
        auto r = ngrams(reference, n);
        double m = static_cast<double>(clipped_overlap(h, r));
        double c = static_cast<double>(total(h));
        double p;
        if (m > 0) {
            p = m / c;
        } else if (n == 1) {
            return 0.0;
        } else {
            p = 1.0 / (c + 1.0);
        }
        log_sum += std::log(p);
    }
    double c = static_cast<double>(hypothesis.size());
    double r = static_cast<double>(reference.size());
    double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
    return bp * std::exp(log_sum / static_cast<double>(max_n));
}

PRF rouge_n(const Tokens& hypothesis, const Tokens& reference, std::size_t n) {
    auto h = ngrams(hypothesis, n);
    auto r = ngrams(reference, n);
    return make_prf(static_cast<double>(clipped_overlap(h, r)), static_cast<double>(total(h)),
                    static_cast<double>(total(r)));
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

PRF rouge_l(const Tokens& hypothesis, const Tokens& reference) {
    return make_prf(static_cast<double>(lcs_length(hypothesis, reference)),
                    static_cast<double>(hypothesis.size()), static_cast<double>(reference.size()));
}

MetricScores score_texts(std::string_view hypothesis, std::string_view reference) {
    auto h = metric_tokens(hypothesis);
    auto r = metric_tokens(reference);
    return {bleu(h, r), rouge_n(h, r, 1).f1, rouge_n(h, r, 2).f1, rouge_l(h, r).f1};
}

MetricScores mean_scores(const std::vector<MetricScores>& items) {
    MetricScores m;
    if (items.empty()) return m;
    for (const auto& s : items) {
        m.bleu += s.bleu;
        m.rouge1_f += s.rouge1_f;
        m.rouge2_f += s.rouge2_f;
        m.rougeL_f += s.rougeL_f;
    }
    const double n = static_cast<double>(items.size());
    m.bleu /= n;
    m.rouge1_f /= n;
    m.rouge2_f /= n;
    m.rougeL_f /= n;
    return m;
}

nlohmann::json to_json(const MetricScores& s) {
    return {{"bleu", s.bleu}, {"rouge1_f", s.rouge1_f}, {"rouge2_f", s.rouge2_f}, {"rougeL_f", s.rougeL_f}};
}

}  // namespace qallm

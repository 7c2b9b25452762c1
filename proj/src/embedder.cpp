#include <cmath>
#include <cstdlib>

#include "qallm/cluster.h"
#include "qallm/error.h"
#include "qallm/http_json.h"
#include "parallel.h"
#include "util.h"

namespace qallm {

std::vector<EmbeddingVector> Embedder::embed_batch(const std::vector<std::string>& texts) {
    std::vector<EmbeddingVector> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(embed(t));
    return out;
}

std::vector<std::size_t> LocalEmbedder::buckets(const std::string& text) {
    auto chars = detail::utf8_chars(text);
    std::vector<std::size_t> out;
    for (std::size_t n = 1; n <= 3; ++n) {
        for (std::size_t i = 0; i + n <= chars.size(); ++i) {
            detail::Fnv1a h;
            h.add_byte(static_cast<unsigned char>(n));
            for (std::size_t k = 0; k < n; ++k) h.add(chars[i + k]);
            out.push_back(h.value() % kDim);
        }
    }
    return out;
}

EmbeddingVector LocalEmbedder::embed(const std::string& text) {
    if (text.empty()) throw DegenerateInput("cannot embed empty text");
    EmbeddingVector v(kDim, 0.0);
    for (auto b : buckets(text)) v[b] += 1.0;
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    return v;
}

RemoteEmbedderConfig RemoteEmbedderConfig::from_env() {
    RemoteEmbedderConfig cfg;
    if (const char* e = std::getenv("EMBED_ENDPOINT")) cfg.endpoint = e;
    if (const char* k = std::getenv("EMBED_API_KEY")) cfg.api_key = k;
    return cfg;
}

RemoteEmbedder::RemoteEmbedder(RemoteEmbedderConfig cfg) : cfg_(std::move(cfg)) {}

EmbeddingVector RemoteEmbedder::embed(const std::string& text) {
    if (cfg_.endpoint.empty() || cfg_.api_key.empty()) {
        throw EmbedServiceError("remote embedder needs EMBED_ENDPOINT and EMBED_API_KEY");
    }
    try {
        auto res = with_retries(cfg_.max_retries, [&] {
            return post_json(cfg_.endpoint, {{"input", text}}, cfg_.api_key,
                             cfg_.timeout_seconds);
        });
        auto v = res.at("embedding").get<EmbeddingVector>();
        if (v.empty()) throw EmbedServiceError("embedding service returned an empty vector");
        for (double x : v) {
            if (!std::isfinite(x)) throw EmbedServiceError("embedding has non-finite entries");
        }
        return v;
    } catch (const HttpError& e) {
        throw EmbedServiceError(e.what());
    } catch (const nlohmann::json::exception& e) {
        throw EmbedServiceError(std::string("malformed embedding response: ") + e.what());
    }
}

std::vector<EmbeddingVector> RemoteEmbedder::embed_batch(const std::vector<std::string>& texts) {
    std::vector<EmbeddingVector> out(texts.size());
    detail::parallel_for(texts.size(), cfg_.max_concurrency,
                         [&](std::size_t i) { out[i] = embed(texts[i]); });
    for (const auto& v : out) {
        if (v.size() != out.front().size()) {
            throw EmbedServiceError("embedding service returned inconsistent dimensions");
        }
    }
    return out;
}

std::unique_ptr<Embedder> make_embedder(const std::string& kind) {
    if (kind == "local") return std::make_unique<LocalEmbedder>();
    if (kind == "remote") return std::make_unique<RemoteEmbedder>(RemoteEmbedderConfig::from_env());
    throw ConfigError("unknown embedder '" + kind + "'");
}

}  // namespace qallm

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "qallm/corpus.h"

namespace qallm {

struct QuerierContext {
    std::string dialogue_id;
    std::string querier_id;
    std::string text;
};

using EmbeddingVector = std::vector<double>;

// Querier turns of the dialogue context joined by single spaces. The target
// response and every other responder turn are excluded.
QuerierContext build_querier_context(const Dialogue& d);

double cosine(const EmbeddingVector& a, const EmbeddingVector& b);

// ---------------------------------------------------------------------------
// Embedders

class Embedder {
public:
    virtual ~Embedder() = default;
    virtual EmbeddingVector embed(const std::string& text) = 0;
    // Default implementation embeds sequentially.
    virtual std::vector<EmbeddingVector> embed_batch(const std::vector<std::string>& texts);
    virtual std::string name() const = 0;
};

// Hashed character n-gram (n = 1..3, over code points) term-frequency vector,
// L2-normalised. Offline and deterministic.
class LocalEmbedder final : public Embedder {
public:
    static constexpr std::size_t kDim = 256;

    EmbeddingVector embed(const std::string& text) override;
    std::string name() const override { return "local"; }

    // Bucket index of every n-gram of text, in occurrence order.
    static std::vector<std::size_t> buckets(const std::string& text);
};

struct RemoteEmbedderConfig {
    std::string endpoint;  // full URL, POST {"input": text} -> {"embedding": [...]}
    std::string api_key;
    std::size_t max_concurrency = 4;
    int max_retries = 3;
    int timeout_seconds = 30;

    // EMBED_ENDPOINT / EMBED_API_KEY; missing variables leave fields empty.
    static RemoteEmbedderConfig from_env();
};

class RemoteEmbedder final : public Embedder {
public:
    explicit RemoteEmbedder(RemoteEmbedderConfig cfg);

    EmbeddingVector embed(const std::string& text) override;
    std::vector<EmbeddingVector> embed_batch(const std::vector<std::string>& texts) override;
    std::string name() const override { return "remote"; }

private:
    RemoteEmbedderConfig cfg_;
};

std::unique_ptr<Embedder> make_embedder(const std::string& kind);

// ---------------------------------------------------------------------------
// Spherical k-means

inline constexpr std::size_t kDefaultClusters = 10;
inline constexpr std::size_t kDefaultKMeansIters = 100;
inline constexpr std::size_t kDefaultKMeansRestarts = 10;

struct KMeansResult {
    std::vector<EmbeddingVector> centroids;  // unit norm
    std::vector<int> labels;                 // per input vector
    double mean_within_similarity = 0.0;
    // Sum of cos(point, own centroid) after every assignment and every
    // centroid update, in order.
    std::vector<double> objective_trace;
    std::size_t iterations = 0;
};

// Best of n_init seeded Lloyd runs by final objective; the trace is the
// winning run's. Throws DegenerateInput when k exceeds the number of
// distinct directions.
KMeansResult kmeans(std::span<const EmbeddingVector> vectors, std::size_t k, std::uint64_t seed,
                    std::size_t max_iters = kDefaultKMeansIters,
                    std::size_t n_init = kDefaultKMeansRestarts);

// Sum over points of cos(point, centroid[label]).
double spherical_objective(std::span<const EmbeddingVector> vectors,
                           std::span<const EmbeddingVector> centroids,
                           std::span<const int> labels);

// Lowest index wins ties.
int nearest_centroid(std::span<const EmbeddingVector> centroids, const EmbeddingVector& v);

struct ClusterIndex {
    std::size_t k = 0;
    std::size_t dim = 0;
    std::vector<EmbeddingVector> centroids;
    std::map<std::string, int> assignments;  // dialogue id -> cluster
    double mean_within_similarity = 0.0;
    std::string embedder;

    int nearest(const EmbeddingVector& v) const;
};

// Clusters the querier contexts of the training split; other dialogues are
// left for assign_clusters.
ClusterIndex build_cluster_index(const std::vector<Dialogue>& dialogues, Embedder& embedder,
                                 std::size_t k, std::uint64_t seed,
                                 std::size_t max_iters = kDefaultKMeansIters);

// Sets cluster_id on every dialogue: the recorded assignment when the index
// has one, otherwise the nearest centroid of the embedded querier context.
std::vector<Dialogue> assign_clusters(const ClusterIndex& index, std::vector<Dialogue> dialogues,
                                      Embedder& embedder);

nlohmann::json to_json(const ClusterIndex& index);
ClusterIndex cluster_index_from_json(const nlohmann::json& j);

}  // namespace qallm

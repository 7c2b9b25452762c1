#include <limits>
#include "qallm/cluster.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "qallm/error.h"

namespace qallm {

QuerierContext build_querier_context(const Dialogue& d) {
    QuerierContext q{d.id, d.querier_id, {}};
    for (std::size_t i = 0; i + 1 < d.turns.size(); ++i) {
        if (d.turns[i].role != Role::querier) continue;
        if (!q.text.empty()) q.text += ' ';
        q.text += d.turns[i].text;
    }
    return q;
}

namespace {

double dot(const EmbeddingVector& a, const EmbeddingVector& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(const EmbeddingVector& a) { return std::sqrt(dot(a, a)); }

EmbeddingVector normalized(const EmbeddingVector& v) {
    double n = norm(v);
    if (!(n > 0.0) || !std::isfinite(n)) throw DegenerateInput("zero or non-finite vector");
    EmbeddingVector out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
    return out;
}

// Normalised mean of the members of each cluster; empty clusters keep an
// empty centroid for the caller to repair.
std::vector<EmbeddingVector> centroids_from(const std::vector<EmbeddingVector>& x,
                                            const std::vector<int>& labels, std::size_t k) {
    std::size_t dim = x.front().size();
    std::vector<EmbeddingVector> sums(k, EmbeddingVector(dim, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        auto& s = sums[labels[i]];
        for (std::size_t j = 0; j < dim; ++j) s[j] += x[i][j];
        ++counts[labels[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
        double n = norm(sums[c]);
        if (counts[c] == 0 || !(n > 0.0)) {
            sums[c].clear();
            continue;
        }
        for (double& v : sums[c]) v /= n;
    }
    return sums;
}

std::vector<int> assign_all(const std::vector<EmbeddingVector>& x,
                            const std::vector<EmbeddingVector>& centroids) {
    std::vector<int> labels(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) labels[i] = nearest_centroid(centroids, x[i]);
    return labels;
}

// Gives every empty cluster the member point least similar to its own
// centroid, taken from a cluster that keeps at least one member.
void repair_empty(const std::vector<EmbeddingVector>& x, std::vector<int>& labels,
                  std::vector<EmbeddingVector>& centroids) {
    std::size_t k = centroids.size();
    for (std::size_t c = 0; c < k; ++c) {
        if (!centroids[c].empty()) continue;
        std::vector<std::size_t> counts(k, 0);
        for (int l : labels) ++counts[l];
        std::size_t worst = x.size();
        double worst_sim = 2.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (counts[labels[i]] < 2 || centroids[labels[i]].empty()) continue;
            double s = dot(x[i], centroids[labels[i]]);
            if (s < worst_sim) {
                worst_sim = s;
                worst = i;
            }
        }
        if (worst == x.size()) throw DegenerateInput("cannot repair empty cluster");
        labels[worst] = static_cast<int>(c);
        centroids = centroids_from(x, labels, k);
        c = static_cast<std::size_t>(-1);  // rescan: the donor may now be degenerate
    }
}

std::vector<EmbeddingVector> seed_plus_plus(const std::vector<EmbeddingVector>& x, std::size_t k,
                                            std::mt19937_64& rng) {
    std::vector<EmbeddingVector> seeds;
    std::uniform_int_distribution<std::size_t> first(0, x.size() - 1);
    seeds.push_back(x[first(rng)]);
    std::vector<double> gap(x.size());
    while (seeds.size() < k) {
        double total = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            double best = -1.0;
            for (const auto& s : seeds) best = std::max(best, dot(x[i], s));
            double d = std::max(0.0, 1.0 - best);
            gap[i] = d * d;
            total += gap[i];
        }
        if (!(total > 0.0)) throw DegenerateInput("not enough distinct vectors for k-means++");
        std::uniform_real_distribution<double> u(0.0, total);
        double r = u(rng);
        std::size_t pick = x.size() - 1;
        double acc = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            acc += gap[i];
            if (gap[i] > 0.0 && r < acc) {
                pick = i;
                break;
            }
        }
        while (gap[pick] == 0.0) --pick;
        seeds.push_back(x[pick]);
    }
    return seeds;
}

}  // namespace

double cosine(const EmbeddingVector& a, const EmbeddingVector& b) {
    if (a.size() != b.size()) throw DimensionMismatch("cosine of vectors with different sizes");
    double na = norm(a), nb = norm(b);
    if (!(na > 0.0) || !(nb > 0.0)) throw DegenerateInput("cosine of a zero vector");
    return dot(a, b) / (na * nb);
}

int nearest_centroid(std::span<const EmbeddingVector> centroids, const EmbeddingVector& v) {
    int best = 0;
    double best_sim = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.size(); ++c) {
        if (centroids[c].empty()) continue;
        double s = dot(centroids[c], v);
        if (s > best_sim) {
            best_sim = s;
            best = static_cast<int>(c);
        }
    }
    return best;
}

double spherical_objective(std::span<const EmbeddingVector> vectors,
                           std::span<const EmbeddingVector> centroids,
                           std::span<const int> labels) {
    double total = 0.0;
    for (std::size_t i = 0; i < vectors.size(); ++i) {
        const auto& c = centroids[labels[i]];
        if (c.empty()) continue;
        total += dot(vectors[i], c) / norm(vectors[i]);
    }
    return total;
}

static KMeansResult lloyd(const std::vector<EmbeddingVector>& x, std::size_t k, std::mt19937_64& rng,
                          std::size_t max_iters) {
    KMeansResult r;
    r.centroids = seed_plus_plus(x, k, rng);
    r.labels = assign_all(x, r.centroids);
    r.objective_trace.push_back(spherical_objective(x, r.centroids, r.labels));

    for (r.iterations = 1; r.iterations <= max_iters; ++r.iterations) {
        r.centroids = centroids_from(x, r.labels, k);
        repair_empty(x, r.labels, r.centroids);
        r.objective_trace.push_back(spherical_objective(x, r.centroids, r.labels));
        auto next = assign_all(x, r.centroids);
        r.objective_trace.push_back(spherical_objective(x, r.centroids, next));
        if (next == r.labels) break;
        r.labels = std::move(next);
    }
    if (r.iterations > max_iters) {
        r.iterations = max_iters;
        r.centroids = centroids_from(x, r.labels, k);
        repair_empty(x, r.labels, r.centroids);
        r.objective_trace.push_back(spherical_objective(x, r.centroids, r.labels));
    }
    r.mean_within_similarity = r.objective_trace.back() / static_cast<double>(x.size());
    return r;
}

KMeansResult kmeans(std::span<const EmbeddingVector> vectors, std::size_t k, std::uint64_t seed,
                    std::size_t max_iters, std::size_t n_init) {
    if (n_init < 1) throw DegenerateInput("n_init must be at least 1");
    if (k < 1) throw DegenerateInput("k must be at least 1");
    if (vectors.empty()) throw DegenerateInput("k-means needs at least one vector");
    std::size_t dim = vectors.front().size();
    std::vector<EmbeddingVector> x;
    x.reserve(vectors.size());
    for (const auto& v : vectors) {
        if (v.size() != dim) throw DimensionMismatch("k-means input has mixed dimensions");
        x.push_back(normalized(v));
    }
    std::set<EmbeddingVector> distinct(x.begin(), x.end());
    if (k > distinct.size()) {
        throw DegenerateInput("k = " + std::to_string(k) + " exceeds " +
                              std::to_string(distinct.size()) + " distinct vectors");
    }

    KMeansResult best;
    for (std::size_t run = 0; run < n_init; ++run) {
        std::seed_seq seq{seed, static_cast<std::uint64_t>(run)};
        std::mt19937_64 rng(seq);
        auto r = lloyd(x, k, rng, max_iters);
        if (run == 0 || r.objective_trace.back() > best.objective_trace.back()) best = std::move(r);
    }
    return best;
}

int ClusterIndex::nearest(const EmbeddingVector& v) const {
    if (v.size() != dim) {
        throw DimensionMismatch("embedding dimension " + std::to_string(v.size()) +
                                " does not match centroid dimension " + std::to_string(dim));
    }
    return nearest_centroid(centroids, v);
}

ClusterIndex build_cluster_index(const std::vector<Dialogue>& dialogues, Embedder& embedder,
                                 std::size_t k, std::uint64_t seed, std::size_t max_iters) {
    std::vector<std::string> ids, texts;
    for (const auto& d : dialogues) {
        if (d.split == Split::test) continue;
        auto q = build_querier_context(d);
        ids.push_back(q.dialogue_id);
        texts.push_back(q.text);
    }
    if (texts.empty()) throw DegenerateInput("no training dialogues to cluster");
    auto vectors = embedder.embed_batch(texts);
    auto r = kmeans(vectors, k, seed, max_iters);

    ClusterIndex index;
    index.k = k;
    index.dim = vectors.front().size();
    index.centroids = std::move(r.centroids);
    index.mean_within_similarity = r.mean_within_similarity;
    index.embedder = embedder.name();
    for (std::size_t i = 0; i < ids.size(); ++i) index.assignments[ids[i]] = r.labels[i];
    return index;
}

std::vector<Dialogue> assign_clusters(const ClusterIndex& index, std::vector<Dialogue> dialogues,
                                      Embedder& embedder) {
    std::vector<std::size_t> todo;
    std::vector<std::string> texts;
    for (std::size_t i = 0; i < dialogues.size(); ++i) {
        auto it = index.assignments.find(dialogues[i].id);
        if (it != index.assignments.end()) {
            dialogues[i].cluster_id = it->second;
            continue;
        }
        todo.push_back(i);
        texts.push_back(build_querier_context(dialogues[i]).text);
    }
    auto vectors = embedder.embed_batch(texts);
    for (std::size_t j = 0; j < todo.size(); ++j) {
        dialogues[todo[j]].cluster_id = index.nearest(vectors[j]);
    }
    return dialogues;
}

nlohmann::json to_json(const ClusterIndex& index) {
    return {{"k", index.k},
            {"dim", index.dim},
            {"centroids", index.centroids},
            {"assignments", index.assignments},
            {"mean_within_similarity", index.mean_within_similarity},
            {"embedder", index.embedder}};
}

ClusterIndex cluster_index_from_json(const nlohmann::json& j) {
    try {
        ClusterIndex index;
        index.k = j.at("k").get<std::size_t>();
        index.dim = j.at("dim").get<std::size_t>();
        index.centroids = j.at("centroids").get<std::vector<EmbeddingVector>>();
        index.assignments = j.at("assignments").get<std::map<std::string, int>>();
        index.mean_within_similarity = j.at("mean_within_similarity").get<double>();
        index.embedder = j.value("embedder", std::string("local"));
        if (index.centroids.size() != index.k) throw FormatError("centroid count != k");
        for (const auto& c : index.centroids) {
            if (c.size() != index.dim) throw FormatError("centroid dimension != dim");
        }
        for (const auto& [id, c] : index.assignments) {
            if (c < 0 || static_cast<std::size_t>(c) >= index.k) {
                throw FormatError("assignment out of range for " + id);
            }
        }
        return index;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed cluster index: ") + e.what());
    }
}

}  // namespace qallm

#include <doctest.h>

#include <cmath>
#include <random>

#include "qallm/cluster.h"
#include "qallm/error.h"

using namespace qallm;

namespace {

double norm(const EmbeddingVector& v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

Dialogue dlg(const std::string& id, const std::string& q, std::vector<std::string> texts) {
    Dialogue d;
    d.id = id;
    d.querier_id = q;
    d.responder_id = "r";
    for (std::size_t i = 0; i < texts.size(); ++i) {
        d.turns.push_back({i % 2 == 0 ? Role::querier : Role::responder, texts[i]});
    }
    d.split = Split::train;
    return d;
}

}  // namespace

TEST_CASE("querier context drops responder turns and the target") {
    auto d = dlg("x", "q", {"one", "r1", "two", "target"});
    auto c = build_querier_context(d);
    CHECK(c.text == "one two");
    CHECK(c.querier_id == "q");
    CHECK(c.dialogue_id == "x");
}

TEST_CASE("cosine basics") {
    CHECK(cosine({1, 0}, {0, 1}) == doctest::Approx(0.0));
    CHECK(cosine({1, 1}, {2, 2}) == doctest::Approx(1.0));
    CHECK(cosine({1, 0}, {-3, 0}) == doctest::Approx(-1.0));
    CHECK_THROWS_AS(cosine({1, 0}, {1, 0, 0}), DimensionMismatch);
}

TEST_CASE("local embedder is unit norm and deterministic") {
    LocalEmbedder e;
    auto a = e.embed("are you coming to dinner?");
    CHECK(a.size() == LocalEmbedder::kDim);
    CHECK(norm(a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(a == e.embed("are you coming to dinner?"));
    CHECK(cosine(a, e.embed("are you coming to dinner tonight?")) >
          cosine(a, e.embed("the printer is broken")));
    // "ab": a, b, ab
    CHECK(LocalEmbedder::buckets("ab").size() == 3);
}

TEST_CASE("k-means centroids are unit norm and labels nearest") {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> g;
    std::vector<EmbeddingVector> v(40, EmbeddingVector(5));
    for (auto& x : v)
        for (auto& c : x) c = g(rng);
    auto r = kmeans(v, 4, 9);
    REQUIRE(r.centroids.size() == 4);
    for (const auto& c : r.centroids) CHECK(norm(c) == doctest::Approx(1.0).epsilon(1e-9));
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(r.labels[i] == nearest_centroid(r.centroids, v[i]));
    CHECK(r.objective_trace.back() ==
          doctest::Approx(spherical_objective(v, r.centroids, r.labels)).epsilon(1e-9));
}

TEST_CASE("k-means rejects more clusters than directions") {
    std::vector<EmbeddingVector> v = {{1, 0}, {2, 0}, {0, 1}};
    CHECK_THROWS_AS(kmeans(v, 3, 0), DegenerateInput);
    CHECK_NOTHROW(kmeans(v, 2, 0));
}

TEST_CASE("nearest centroid prefers the lowest index on ties") {
    std::vector<EmbeddingVector> c = {{1, 0}, {0, 1}};
    CHECK(nearest_centroid(c, {1, 1}) == 0);
    CHECK(nearest_centroid(c, {0, 2}) == 1);
}

TEST_CASE("cluster index assigns train, test and round-trips through JSON") {
    std::vector<Dialogue> ds = {dlg("1", "a", {"dinner tonight?", "x"}),
                                dlg("2", "b", {"dinner tonight please?", "x"}),
                                dlg("3", "a", {"fix the printer", "x"}),
                                dlg("4", "b", {"printer fix now", "x"})};
    auto held = dlg("5", "a", {"dinner tonight", "x"});
    held.split = Split::test;
    ds.push_back(held);
    LocalEmbedder e;
    auto idx = build_cluster_index(ds, e, 2, 3);
    CHECK(idx.assignments.size() == 4);
    CHECK(idx.assignments.at("1") == idx.assignments.at("2"));
    CHECK(idx.assignments.at("3") == idx.assignments.at("4"));
    CHECK(idx.assignments.at("1") != idx.assignments.at("3"));
    auto assigned = assign_clusters(idx, ds, e);
    CHECK(assigned[4].cluster_id == idx.assignments.at("1"));

    auto back = cluster_index_from_json(to_json(idx));
    CHECK(back.k == 2);
    CHECK(back.assignments == idx.assignments);
    CHECK(back.centroids == idx.centroids);
    CHECK(back.embedder == "local");
}

TEST_CASE("restarts keep the best objective") {
    std::mt19937_64 rng(41);
    std::normal_distribution<double> g;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::vector<EmbeddingVector> v;
        for (int i = 0; i < 12; ++i) v.push_back({g(rng), g(rng), g(rng)});
        auto many = kmeans(v, 3, seed);
        for (std::size_t n = 1; n <= kDefaultKMeansRestarts; ++n)
            CHECK(many.objective_trace.back() >= kmeans(v, 3, seed, kDefaultKMeansIters, n).objective_trace.back());
        CHECK(kmeans(v, 3, seed).labels == many.labels);
    }
    std::vector<EmbeddingVector> two = {{1, 0}, {0, 1}};
    CHECK_THROWS_AS(kmeans(two, 1, 0, 10, 0), DegenerateInput);
}

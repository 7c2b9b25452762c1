#include <doctest.h>

#include <cmath>
#include <random>

#include "qallm/error.h"
#include "qallm/objective.h"
#include "qallm/trainer.h"

using namespace qallm;

namespace {

RowVec<double> row(std::initializer_list<double> v) {
    RowVec<double> r(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) r(i++) = x;
    return r;
}

void put(GlobalReprTable& t, const std::string& q, std::vector<double> v1, std::vector<double> v2) {
    t.update(q, v1, v2);
}

}  // namespace

TEST_CASE("lm loss is the mean masked cross-entropy of the next token") {
    Mat<double> logits = Mat<double>::Zero(3, 4);
    logits(0, 1) = std::log(3.0);
    std::vector<TokenId> tokens = {0, 1, 2};
    std::vector<unsigned char> mask = {0, 1, 0};
    // p(1) = 3 / 6
    CHECK(lm_loss(logits, std::span<const TokenId>(tokens), mask) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
    mask = {0, 1, 1};
    CHECK(lm_loss(logits, std::span<const TokenId>(tokens), mask) ==
          doctest::Approx((std::log(2.0) + std::log(4.0)) / 2).epsilon(1e-12));
    mask = {1, 0, 0};
    CHECK_THROWS_AS(lm_loss(logits, std::span<const TokenId>(tokens), mask), EmptyMask);
}

TEST_CASE("score is exp(cos / tau)") {
    std::vector<double> z = {1, 0}, e = {1, 1};
    CHECK(score(z, e, 1.0) == doctest::Approx(2.028115).epsilon(1e-6));
    CHECK(score(z, z, 0.5) == doctest::Approx(std::exp(2.0)).epsilon(1e-12));
    std::vector<double> zero = {0, 0};
    CHECK_THROWS_AS(score(zero, e, 1.0), ZeroVector);
}

TEST_CASE("global table keeps a running mean per view") {
    GlobalReprTable t;
    put(t, "a", {1, 2}, {0, 0});
    put(t, "a", {3, 4}, {2, 2});
    put(t, "a", {5, 0}, {4, 1});
    CHECK(t.at("a").count == 3);
    CHECK(t.mean("a", 1)[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(t.mean("a", 1)[1] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(t.mean("a", 2)[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(t.mean("a", 2)[1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(t.at("b"), MissingGlobalRepr);
    auto back = GlobalReprTable::from_json(t.to_json());
    CHECK(back.at("a").v1 == t.at("a").v1);
    CHECK(back.at("a").count == 3);
}

TEST_CASE("qc loss exact values") {
    GlobalReprTable t;
    put(t, "a", {1, 0}, {1, 0});
    put(t, "b", {0, 1}, {0, 1});
    put(t, "c", {0, 1}, {0, 1});
    auto z = row({1, 0});

    auto alone = qc_loss(z, t, "a", {}, 0.07);
    CHECK(alone.loss == 0.0);
    CHECK(alone.m_effective == 1);
    CHECK(alone.dz_v1.isZero(0.0));

    auto hand = qc_loss(z, t, "a", {"b"}, 0.5);
    CHECK(hand.loss == doctest::Approx(0.126928011).epsilon(1e-9));
    CHECK(hand.m_effective == 2);

    GlobalReprTable same;
    for (auto q : {"a", "b", "c", "d"}) put(same, q, {0.3, -0.2}, {0.3, -0.2});
    auto tie = qc_loss(row({0.1, 0.7}), same, "a", {"b", "c", "d"}, 0.07);
    CHECK(std::abs(tie.loss - std::log(4.0)) < 1e-9);
}

TEST_CASE("qc loss needs a global representation for every candidate") {
    GlobalReprTable t;
    put(t, "a", {1, 0}, {1, 0});
    put(t, "b", {0, 1}, {0, 1});
    CHECK_THROWS_AS(qc_loss(row({1, 0}), t, "a", {"b", "ghost"}, 0.5), MissingGlobalRepr);
    CHECK_THROWS_AS(qc_loss(row({1, 0}), t, "ghost", {"a"}, 0.5), MissingGlobalRepr);
}

TEST_CASE("multiview collapses to the single-view loss and is view-swap symmetric") {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> g;
    for (int trial = 0; trial < 20; ++trial) {
        GlobalReprTable t, swapped, collapsed;
        std::vector<std::string> qs = {"a", "b", "c"};
        for (const auto& q : qs) {
            std::vector<double> v1 = {g(rng), g(rng), g(rng)}, v2 = {g(rng), g(rng), g(rng)};
            t.update(q, v1, v2);
            swapped.update(q, v2, v1);
            collapsed.update(q, v1, v1);
        }
        auto z1 = row({g(rng), g(rng), g(rng)}), z2 = row({g(rng), g(rng), g(rng)});
        auto mv = qc_loss_multiview(z1, z2, t, "a", {"b", "c"}, 0.3);
        auto sw = qc_loss_multiview(z2, z1, swapped, "a", {"b", "c"}, 0.3);
        CHECK(std::abs(mv.loss - sw.loss) < 1e-9);
        auto col = qc_loss_multiview(z1, z1, collapsed, "a", {"b", "c"}, 0.3);
        auto single = qc_loss(z1, collapsed, "a", {"b", "c"}, 0.3);
        CHECK(std::abs(col.loss - single.loss) < 1e-9);
    }
}

TEST_CASE("candidate probabilities sum to one") {
    GlobalReprTable t;
    put(t, "a", {1, 0}, {1, 0});
    put(t, "b", {0, 1}, {0, 1});
    std::vector<double> z = {1, 0};
    auto p = candidate_probabilities(z, t, {"a", "b"}, 0.5);
    REQUIRE(p.size() == 2);
    CHECK(p[0] + p[1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p[0] == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))).epsilon(1e-12));
}

TEST_CASE("mixing and the mutual information bound") {
    auto b = total_loss(2.0, 0.5, 0.5, 4);
    CHECK(b.total == doctest::Approx(2.25));
    CHECK(b.m_effective == 4);
    CHECK(total_loss(2.0, 0.5, 0.0).total == 2.0);
    CHECK(mi_lower_bound(0.25, 4) == doctest::Approx(std::log(4.0) - 0.25).epsilon(1e-12));
    CHECK(mi_lower_bound(0.0, 1) == 0.0);
}

TEST_CASE("hand case with opposite globals at unit temperature") {
    GlobalReprTable t;
    put(t, "a", {2, 0}, {2, 0});
    put(t, "b", {-1, 0}, {-1, 0});
    auto r = qc_loss(row({1, 0}), t, "a", {"b"}, 1.0);
    CHECK(std::abs(r.loss - std::log(1.0 + std::exp(-2.0))) < 1e-12);
    CHECK(std::abs(r.loss - 0.126928) < 1e-6);
}

TEST_CASE("lm loss oracles") {
    const int V = tok::kVocabSize;
    Mat<double> uniform = Mat<double>::Constant(4, V, 0.3);
    std::vector<TokenId> tokens = {1, 2, 3, 4};
    std::vector<unsigned char> mask = {0, 1, 1, 1};
    CHECK(std::abs(lm_loss(uniform, std::span<const TokenId>(tokens), mask) - std::log(double(V))) < 1e-12);

    Mat<double> sharp = Mat<double>::Zero(4, V);
    for (int j = 0; j < 3; ++j) sharp(j, tokens[static_cast<std::size_t>(j + 1)]) = 60.0;
    CHECK(lm_loss(sharp, std::span<const TokenId>(tokens), mask) < 1e-20);

    // 3 x 5 logits, scalar softmax by hand
    Mat<double> l(3, 5);
    l << 0.1, -0.4, 1.2, 0.0, 0.7,
         -1.0, 0.3, 0.3, 2.0, -0.2,
         0.5, 0.5, -0.5, 0.2, 0.9;
    std::vector<TokenId> t3 = {0, 2, 3};
    std::vector<unsigned char> m3 = {0, 1, 1};
    auto ce = [&](int row_i, int target) {
        double z = 0;
        for (int k = 0; k < 5; ++k) z += std::exp(l(row_i, k));
        return -(l(row_i, target) - std::log(z));
    };
    double want = (ce(0, 2) + ce(1, 3)) / 2;
    CHECK(std::abs(lm_loss(l, std::span<const TokenId>(t3), m3) - want) < 1e-12);
}

TEST_CASE("projection is a bias-free matrix product") {
    ModelConfig c;
    c.d_model = 4;
    c.n_heads = 2;
    c.rank = 2;
    c.proj_dim = 2;
    auto p = Params<double>::zeros(c);
    p.proj_v1 << 1, 2, 0, -1,
                 0.5, 0, 3, 1;
    auto z = project(p, 1, row({1, 1, 2, -1}));
    CHECK(z(0) == doctest::Approx(1 + 2 + 0 + 1));
    CHECK(z(1) == doctest::Approx(0.5 + 0 + 6 - 1));
    CHECK(project(p, 2, row({1, 1, 2, -1})).isZero(0.0));
    CHECK_THROWS_AS(project(p, 3, row({1, 1, 2, -1})), ShapeError);
    CHECK_THROWS_AS(project(p, 1, row({1, 1})), ShapeError);
}

TEST_CASE("score range and special cases") {
    std::vector<double> z = {0.3, -2.0}, perp = {2.0, 0.3};
    CHECK(score(z, z, 1.0) == doctest::Approx(std::exp(1.0)).epsilon(1e-12));
    CHECK(score(z, perp, 0.05) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("update_global cancellation and arithmetic mean") {
    GlobalReprTable t;
    t.update("a", std::vector<double>{1, -2}, std::vector<double>{3, 3});
    CHECK(t.at("a").v1 == std::vector<double>{1, -2});
    CHECK(t.at("a").count == 1);
    t.update("a", std::vector<double>{-1, 2}, std::vector<double>{-3, -3});
    CHECK(std::abs(t.mean("a", 1)[0]) < 1e-15);
    CHECK(std::abs(t.mean("a", 2)[1]) < 1e-15);

    std::mt19937_64 rng(3);
    std::normal_distribution<double> g;
    GlobalReprTable u;
    double sum = 0;
    for (int i = 0; i < 5; ++i) {
        double x = g(rng);
        sum += x;
        u.update("q", std::vector<double>{x}, std::vector<double>{x});
    }
    CHECK(std::abs(u.mean("q", 1)[0] - sum / 5) <= 1e-6 * std::abs(sum / 5));
}

TEST_CASE("qc loss invariances across temperatures") {
    std::mt19937_64 rng(17);
    std::normal_distribution<double> g;
    for (double tau : {0.05, 0.07, 0.5, 1.0}) {
        for (int trial = 0; trial < 10; ++trial) {
            GlobalReprTable t, scaled;
            std::set<std::string> all = {"a", "b", "c", "d"};
            for (const auto& q : all) {
                std::vector<double> v = {g(rng), g(rng), g(rng)};
                t.update(q, v, v);
                std::vector<double> s = {2.5 * v[0], 2.5 * v[1], 2.5 * v[2]};
                scaled.update(q, s, s);
            }
            RowVec<double> z = row({g(rng), g(rng), g(rng)});
            std::set<std::string> negs = {"b", "c", "d"};
            auto base = qc_loss(z, t, "a", negs, tau);
            CHECK(base.loss >= 0.0);
            CHECK(std::abs(qc_loss(RowVec<double>(3.7 * z), t, "a", negs, tau).loss - base.loss) < 1e-9);
            CHECK(std::abs(qc_loss(z, scaled, "a", negs, tau).loss - base.loss) < 1e-9);

            // exp(-L) is the true querier's probability; those sum to one.
            double total = 0;
            for (const auto& q : all) {
                std::set<std::string> others = all;
                others.erase(q);
                total += std::exp(-qc_loss(z, t, q, others, tau).loss);
            }
            CHECK(std::abs(total - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("qc loss decreases as the true cosine grows") {
    // z turns toward e_a in a plane orthogonal to e_b.
    double prev = 1e9;
    GlobalReprTable flat;
    flat.update("a", std::vector<double>{1, 0, 0}, std::vector<double>{1, 0, 0});
    flat.update("b", std::vector<double>{0, 0, 1}, std::vector<double>{0, 0, 1});
    for (double angle = 1.5; angle >= 0.0; angle -= 0.25) {
        auto z = row({std::cos(angle), std::sin(angle), 0});
        double l = qc_loss(z, flat, "a", {"b"}, 0.3).loss;
        CHECK(l < prev);
        prev = l;
    }
}

TEST_CASE("lambda sweep mixes losses and gradients linearly") {
    ModelConfig c;
    c.d_model = 8;
    c.n_layers = 1;
    c.n_heads = 2;
    c.ffn_hidden = 16;
    c.rank = 2;
    c.proj_dim = 4;
    c.max_len = 32;
    c.dropout = 0.0;
    auto p = Params<double>::init(c, 9);
    for (auto& s : p.specific) s.w_up.setConstant(0.02);
    std::vector<TokenId> tokens = {tok::kBos, 'a', tok::kSepQuerier, 'h', 'i', tok::kSepResponder, 'y', 'o', tok::kEos};
    EncodedDialogue e{tokens, {0, 0, 0, 0, 0, 0, 1, 1, 1}};
    GlobalReprTable t;
    t.update("a", std::vector<double>{1, 0, 0, 0}, std::vector<double>{0, 1, 0, 0});
    t.update("b", std::vector<double>{0, 0, 1, 0}, std::vector<double>{0, 0, 0, 1});
    QcInputs qc{&t, "a", {"b"}, 0.07, true};

    auto g_lm = Params<double>::zeros(c), g_qc = Params<double>::zeros(c);
    auto parts = dialogue_loss<double>(c, p, e, &qc, {1.0, 0.0}, {}, &g_lm);
    dialogue_loss<double>(c, p, e, &qc, {0.0, 1.0}, {}, &g_qc);
    for (double lambda : {0.0, 0.5, 1.0}) {
        auto b = total_loss(parts.lm, parts.qc, lambda, parts.m_effective);
        CHECK(b.total == parts.lm + lambda * parts.qc);
        auto g = Params<double>::zeros(c);
        dialogue_loss<double>(c, p, e, &qc, {1.0, lambda}, {}, &g);
        auto gt = g.tensors(), lt = g_lm.tensors(), qt = g_qc.tensors();
        double worst = 0;
        for (std::size_t i = 0; i < gt.size(); ++i) {
            Mat<double> want = *lt[i].value + lambda * *qt[i].value;
            worst = std::max(worst, (*gt[i].value - want).cwiseAbs().maxCoeff());
        }
        CHECK(worst < 1e-12);
    }
    CHECK(total_loss(parts.lm, parts.qc, 0.0).total == parts.lm);
    CHECK_THROWS_AS(total_loss(1.0, 1.0, -0.5), ConfigError);
}

TEST_CASE("mutual information bound examples") {
    CHECK(mi_lower_bound(std::log(5.0), 5) == 0.0);
    CHECK(std::abs(mi_lower_bound(0.0, 4) - 1.386294) < 1e-6);
    for (double l : {0.0, 0.1, 2.0}) CHECK(mi_lower_bound(l, 7) <= std::log(7.0));
}

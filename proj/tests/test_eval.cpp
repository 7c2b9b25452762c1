#include <doctest.h>

#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "qallm/error.h"
#include "qallm/eval.h"
#include "qallm/trainer.h"

using namespace qallm;

namespace {

std::vector<std::string> toks(const std::string& s) { return metric_tokens(s); }

Dialogue dlg(const std::string& id, const std::string& q, Split split = Split::test) {
    Dialogue d;
    d.id = id;
    d.querier_id = q;
    d.responder_id = "rex";
    d.turns = {{Role::querier, "where are my keys " + id}, {Role::responder, "in the door"}};
    d.split = split;
    return d;
}

JudgeSettings settings() { return {"a sitcom script", PromptTemplates::load("en")}; }

std::string last_user(const std::vector<JudgeMessage>& m) { return m.back().content; }

bool is_step2(const std::vector<JudgeMessage>& m, const PromptTemplates& t) {
    auto head = t.step2_system.substr(0, 20);
    return m.front().content.rfind(head, 0) == 0;
}

}  // namespace

TEST_CASE("metric tokens split on spaces or code points") {
    CHECK(toks("a  b\tc") == std::vector<std::string>{"a", "b", "c"});
    CHECK(toks("你好吗") == std::vector<std::string>{"你", "好", "吗"});
    CHECK(toks("").empty());
}

TEST_CASE("BLEU hand-computed cases") {
    CHECK(std::abs(bleu(toks("a b c d e"), toks("a b c d")) - 0.668740304976422) < 1e-9);
    CHECK(std::abs(bleu(toks("a b c d"), toks("a b c d e")) - std::exp(-0.25)) < 1e-9);
    CHECK(std::abs(bleu(toks("a x b y"), toks("a b")) - 0.37991784282579627) < 1e-9);
    CHECK(bleu(toks("a b c d"), toks("a b c d")) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(bleu(toks("x y z"), toks("a b c")) == 0.0);
    CHECK(bleu({}, toks("a")) == 0.0);
}

TEST_CASE("ROUGE hand-computed cases") {
    auto h = toks("a b c d"), r = toks("a b d x");
    CHECK(lcs_length(h, r) == 3);
    auto l = rouge_l(h, r);
    CHECK(std::abs(l.precision - 0.75) < 1e-9);
    CHECK(std::abs(l.recall - 0.75) < 1e-9);
    CHECK(std::abs(l.f1 - 0.75) < 1e-9);
    CHECK(std::abs(rouge_n(h, r, 1).f1 - 0.75) < 1e-9);
    CHECK(std::abs(rouge_n(h, r, 2).f1 - 1.0 / 3.0) < 1e-9);
    // clipped counts: hypothesis repeats "the"
    auto c = rouge_n(toks("the the the"), toks("the cat"), 1);
    CHECK(std::abs(c.precision - 1.0 / 3.0) < 1e-9);
    CHECK(std::abs(c.recall - 0.5) < 1e-9);
    CHECK(rouge_l(toks("a b"), toks("c d")).f1 == 0.0);
}

TEST_CASE("ROUGE-L never exceeds ROUGE-1") {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> len(0, 12), word(0, 5);
    for (int i = 0; i < 1000; ++i) {
        std::vector<std::string> a(static_cast<std::size_t>(len(rng))), b(static_cast<std::size_t>(len(rng)));
        for (auto& w : a) w = std::string(1, static_cast<char>('a' + word(rng)));
        for (auto& w : b) w = std::string(1, static_cast<char>('a' + word(rng)));
        CHECK(rouge_l(a, b).f1 <= rouge_n(a, b, 1).f1 + 1e-12);
    }
}

TEST_CASE("score_texts and averaging") {
    auto s = score_texts("a b c d", "a b d x");
    CHECK(s.rougeL_f == doctest::Approx(0.75));
    auto m = mean_scores({s, MetricScores{}});
    CHECK(m.rougeL_f == doctest::Approx(0.375));
    CHECK(to_json(m).contains("bleu"));
}

TEST_CASE("templates load in both languages and use every placeholder") {
    for (auto lang : {"en", "zh"}) {
        auto t = PromptTemplates::load(lang);
        std::string all = t.step1_system + t.step1_message + t.step2_system + t.step2_message;
        for (const auto& p : judge_placeholders()) CHECK(all.find("{" + p + "}") != std::string::npos);
    }
    CHECK_THROWS_AS(PromptTemplates::load("fr"), ConfigError);
}

TEST_CASE("fill_template fills known names and refuses to leak them") {
    CHECK(fill_template("{QUERIER} asks {RESPONDER}", {{"QUERIER", "amy"}, {"RESPONDER", "rex"}}) ==
          "amy asks rex");
    CHECK(fill_template("keep {this}", {}) == "keep {this}");
    CHECK(fill_template("{QUERIER}", {{"QUERIER", "{RESPONDER}"}}) == "{RESPONDER}");
    CHECK_THROWS_AS(fill_template("{DIALOGUE}", {}), FormatError);
}

TEST_CASE("judge order is a seeded coin flip") {
    std::size_t ab = 0;
    for (int i = 0; i < 200; ++i) {
        auto id = "d" + std::to_string(i);
        CHECK(judge_order(id, 1) == judge_order(id, 1));
        ab += judge_order(id, 1) == Order::AB;
    }
    CHECK(ab > 60);
    CHECK(ab < 140);
}

TEST_CASE("verdict letters map back through the presentation order") {
    auto s = settings();
    for (const char* letter : {"A", "B", " \"B\" \n"}) {
        MockJudgeClient client([&](const std::vector<JudgeMessage>& m) {
            return is_step2(m, s.templates) ? std::string(letter) : std::string("thinking");
        });
        for (int i = 0; i < 20; ++i) {
            auto d = dlg("x" + std::to_string(i), "amy");
            auto v = judge_pair(d, "OURS", "BASE", {}, client, 3, s);
            bool said_a = std::string(letter).find('A') != std::string::npos;
            bool ours_is_a = v.order == Order::AB;
            CHECK(v.winner == (said_a == ours_is_a ? Winner::ours : Winner::baseline));
            CHECK(v.reasoning == "thinking");
        }
    }
}

TEST_CASE("judge prompts are complete and show responses in the drawn order") {
    auto s = settings();
    MockJudgeClient client([](const std::vector<JudgeMessage>&) { return std::string("A"); });
    auto pool = std::vector<Dialogue>{dlg("f1", "amy", Split::train), dlg("f2", "amy", Split::train)};
    auto d = dlg("q", "amy");
    auto v = judge_pair(d, "OURS_TEXT", "BASE_TEXT", sample_fewshot(pool, d, 5, 1), client, 7, s);
    auto reqs = client.requests();
    REQUIRE(reqs.size() == 2);
    for (const auto& req : reqs) {
        CHECK(req.size() == 2);
        CHECK(req[0].role == "system");
        CHECK(req[1].role == "user");
        for (const auto& m : req) {
            for (const auto& p : judge_placeholders()) CHECK(m.content.find("{" + p + "}") == std::string::npos);
        }
    }
    std::string step1 = reqs[0][0].content + reqs[0][1].content;
    auto ours = step1.find("OURS_TEXT"), base = step1.find("BASE_TEXT");
    REQUIRE(ours != std::string::npos);
    REQUIRE(base != std::string::npos);
    CHECK((ours < base) == (v.order == Order::AB));
    CHECK(step1.find("where are my keys f1") != std::string::npos);
    CHECK(step1.find("a sitcom script") != std::string::npos);
    CHECK(step1.find("amy: where are my keys f1") != std::string::npos);
}

TEST_CASE("unparseable verdicts are retried once then counted invalid") {
    auto s = settings();
    MockJudgeClient client([&](const std::vector<JudgeMessage>& m) {
        return is_step2(m, s.templates) ? std::string("both are fine") : std::string("r");
    });
    CHECK_THROWS_AS(judge_pair(dlg("a", "amy"), "x", "y", {}, client, 1, s), InvalidVerdict);
    CHECK(client.requests().size() == 3);

    std::vector<JudgeItem> items = {{dlg("a", "amy"), "x", "y", {}}, {dlg("b", "amy"), "x", "y", {}}};
    auto vs = judge_all(items, client, 1, s, 2);
    auto rep = win_rate(vs);
    CHECK(rep.n_invalid == 2);
    CHECK(rep.n_valid == 0);
    CHECK(std::isnan(rep.win_rate));
    CHECK(to_json(rep)["win_rate"].is_null());
}

TEST_CASE("a retry that succeeds is accepted") {
    auto s = settings();
    int step2_calls = 0;
    MockJudgeClient client([&](const std::vector<JudgeMessage>& m) {
        if (!is_step2(m, s.templates)) return std::string("r");
        return ++step2_calls == 1 ? std::string("hmm") : std::string("A");
    });
    auto v = judge_pair(dlg("a", "amy"), "x", "y", {}, client, 1, s);
    CHECK(v.winner != Winner::invalid);
}

TEST_CASE("win rate arithmetic") {
    std::vector<JudgeVerdict> vs(5);
    vs[0].winner = Winner::ours;
    vs[1].winner = Winner::ours;
    vs[2].winner = Winner::baseline;
    vs[3].winner = Winner::invalid;
    vs[4].winner = Winner::ours;
    auto r = win_rate(vs);
    CHECK(r.n_valid == 4);
    CHECK(r.wins_ours == 3);
    CHECK(r.n_invalid == 1);
    CHECK(r.win_rate == doctest::Approx(0.75));
    CHECK(win_rate({}).win_rate == 0.0);
}

TEST_CASE("few-shot sampling stays within the pair and the training split") {
    std::vector<Dialogue> pool;
    for (int i = 0; i < 8; ++i) pool.push_back(dlg("t" + std::to_string(i), "amy", Split::train));
    pool.push_back(dlg("other", "bob", Split::train));
    pool.push_back(dlg("held", "amy", Split::test));
    auto d = pool[0];
    auto shots = sample_fewshot(pool, d, 5, 2);
    CHECK(shots.size() == 5);
    std::set<std::string> ids;
    for (const auto& s : shots) {
        ids.insert(s.id);
        CHECK(s.querier_id == "amy");
        CHECK(s.split == Split::train);
        CHECK(s.id != d.id);
    }
    CHECK(ids.size() == 5);
    CHECK(sample_fewshot(pool, d, 5, 2).front().id == shots.front().id);
    CHECK(sample_fewshot(pool, d, 50, 2).size() == 7);
}

TEST_CASE("judging rejects few-shot examples from another pair") {
    auto s = settings();
    MockJudgeClient client([](const std::vector<JudgeMessage>&) { return std::string("A"); });
    CHECK_THROWS_AS(judge_pair(dlg("a", "amy"), "x", "y", {dlg("b", "bob")}, client, 1, s), ConfigError);
}

TEST_CASE("remote judge without credentials fails cleanly") {
    HttpJudgeClient client(HttpJudgeConfig{});
    CHECK_THROWS_AS(client.complete({{"user", "hi"}}), JudgeServiceError);
}

TEST_CASE("representation export round-trips") {
    ModelConfig c;
    c.d_model = 8;
    c.n_layers = 1;
    c.n_heads = 2;
    c.ffn_hidden = 16;
    c.rank = 2;
    c.proj_dim = 4;
    c.max_len = 64;
    Model m{c, Params<float>::init(c, 1)};
    std::vector<Dialogue> ds = {dlg("a", "amy"), dlg("b", "bob")};
    ds[0].cluster_id = 4;
    std::stringstream ss;
    export_representations(m, ds, ss);
    auto text = ss.str();
    CHECK(text.rfind("dialogue_id,querier_id,cluster_id,h0,h1,", 0) == 0);
    auto rows = read_representations(ss);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].cluster_id == "4");
    CHECK(rows[1].cluster_id.empty());
    CHECK(rows[0].values.size() == 8);
    auto h = dialogue_representation(m, ds[0]);
    for (std::size_t k = 0; k < 8; ++k) CHECK(rows[0].values[k] == doctest::Approx(h(static_cast<Eigen::Index>(k))));
}

TEST_CASE("leave-one-out centroid accuracy") {
    std::vector<ExportedRow> rows = {{"1", "a", "", {0, 0}},  {"2", "a", "", {0, 1}},
                                     {"3", "b", "", {10, 0}}, {"4", "b", "", {10, 1}},
                                     {"5", "b", "", {0, 0.5}}};
    // row 5 sits among the a points; the others are right
    CHECK(nearest_centroid_accuracy(rows) == doctest::Approx(0.8));
}

#include <doctest.h>

#include <map>
#include <set>
#include <sstream>

#include "qallm/corpus.h"
#include "qallm/corpus_io.h"
#include "qallm/error.h"

using namespace qallm;

namespace {

Dialogue make_dialogue(const std::string& q, const std::string& r, std::vector<std::string> texts) {
    Dialogue d;
    d.querier_id = q;
    d.responder_id = r;
    for (std::size_t i = 0; i < texts.size(); ++i) {
        d.turns.push_back({i % 2 == 0 ? Role::querier : Role::responder, texts[i]});
    }
    d.id = dialogue_content_id(d);
    return d;
}

std::vector<Dialogue> many(const std::string& q, const std::string& r, std::size_t n) {
    std::vector<Dialogue> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(make_dialogue(q, r, {"hi " + std::to_string(i), "yo " + std::to_string(i)}));
    }
    return out;
}

ChatMessage msg(const std::string& who, Timestamp t, const std::string& text) { return {who, t, text}; }

}  // namespace

TEST_CASE("colon scripts parse speakers, episodes and full-width colons") {
    auto r = parse_script("=== e1 ===\nLeonard: hi\nSheldon：hello\nnot a line\n=== e2 ===\nPenny: hey\n");
    REQUIRE(r.lines.size() == 3);
    CHECK(r.skipped == 1);
    CHECK(r.lines[0].speaker == "Leonard");
    CHECK(r.lines[0].episode_id == "e1");
    CHECK(r.lines[1].speaker == "Sheldon");
    CHECK(r.lines[1].text == "hello");
    CHECK(r.lines[2].episode_id == "e2");
}

TEST_CASE("strict parsing reports the first bad line") {
    try {
        parse_script("A: one\nbroken\n", {ScriptFormat::colon, true});
        FAIL("expected UnparseableLine");
    } catch (const UnparseableLine& e) {
        CHECK(e.line_no() == 2);
    }
}

TEST_CASE("screenplay cues collect speech and drop parentheticals") {
    auto r = parse_script("LEONARD\n(sighs)\nwe should go.\n\nSHELDON\nno.\n",
                          {ScriptFormat::screenplay, false});
    REQUIRE(r.lines.size() == 2);
    CHECK(r.lines[0].speaker == "LEONARD");
    CHECK(r.lines[0].text == "we should go.");
    CHECK(r.lines[1].text == "no.");
}

TEST_CASE("serialize_script round-trips both grammars") {
    std::vector<ScriptLine> lines = {{"AMY", "hello there", "1"}, {"SHELDON", "hi", "1"}, {"AMY", "bye", "2"}};
    for (auto f : {ScriptFormat::colon, ScriptFormat::screenplay}) {
        auto back = parse_script(serialize_script(lines, f), {f, true});
        REQUIRE(back.lines.size() == lines.size());
        for (std::size_t i = 0; i < lines.size(); ++i) {
            CHECK(back.lines[i].speaker == lines[i].speaker);
            CHECK(back.lines[i].text == lines[i].text);
            CHECK(back.lines[i].episode_id == lines[i].episode_id);
        }
    }
}

TEST_CASE("pair extraction keeps only the pair, merges runs and trims the ends") {
    std::vector<ScriptLine> lines = {{"S", "opening", "1"}, {"L", "q1", "1"}, {"P", "noise", "1"},
                                     {"L", "q2", "1"},      {"S", "a1", "1"},  {"L", "dangling", "1"},
                                     {"S", "alone", "2"}};
    auto ds = extract_pair_dialogues(lines, "S", "L");
    REQUIRE(ds.size() == 1);
    REQUIRE(ds[0].turns.size() == 2);
    CHECK(ds[0].turns[0].text == "q1\nq2");
    CHECK(ds[0].target().text == "a1");
    CHECK(is_valid_dialogue(ds[0]));
    CHECK(script_speakers(lines, "S") == std::vector<std::string>{"L", "P"});
}

TEST_CASE("chat segmentation splits exactly at the gap threshold") {
    const Timestamp gap = kDefaultChatGap;
    std::vector<ChatMessage> m = {msg("u", 0, "a"),         msg("me", 10, "b"),
                                  msg("u", 10 + gap - 1, "c"), msg("me", 20 + gap, "d"),
                                  msg("u", 20 + 2 * gap, "e"), msg("me", 20 + 2 * gap + 5, "f")};
    auto ds = segment_chat(m, "me");
    REQUIRE(ds.size() == 2);
    CHECK(ds[0].turns.size() == 4);
    CHECK(ds[1].turns.size() == 2);
    CHECK(ds[0].querier_id == "u");
    CHECK(ds[0].responder_id == "me");
}

TEST_CASE("chat segments never span a gap and every gap splits") {
    std::vector<ChatMessage> m;
    Timestamp t = 0;
    std::size_t big_gaps = 0;
    for (int i = 0; i < 200; ++i) {
        Timestamp step = (i * 7919) % 11 == 0 ? kDefaultChatGap + 60 : 60 * (1 + i % 5);
        if (i > 0) {
            t += step;
            if (step >= kDefaultChatGap) ++big_gaps;
        }
        m.push_back(msg(i % 2 == 0 ? "u" : "me", t, "m" + std::to_string(i)));
    }
    auto ds = segment_chat(m, "me");
    CHECK(ds.size() <= big_gaps + 1);
    CHECK(ds.size() >= 1);
    std::size_t turns = 0;
    for (const auto& d : ds) {
        CHECK(is_valid_dialogue(d));
        turns += d.turns.size();
    }
    CHECK(turns <= m.size());
}

TEST_CASE("group chats are rejected") {
    std::vector<ChatMessage> m = {msg("a", 0, "x"), msg("b", 1, "y"), msg("me", 2, "z")};
    CHECK_THROWS_AS(segment_chat(m, "me"), MultipleQueriers);
}

TEST_CASE("chat timestamps parse with offsets and fractions") {
    CHECK(parse_rfc3339("1970-01-01T00:00:00Z") == 0);
    CHECK(parse_rfc3339("2024-03-01T09:00:00Z") == 1709283600);
    CHECK(parse_rfc3339("2024-03-01T17:00:00.25+08:00") == 1709283600);
    CHECK_THROWS_AS(parse_rfc3339("2024-03-01 nonsense"), FormatError);
    std::istringstream in(R"({"sender":"u","timestamp":"2024-03-01T09:00:00Z","text":"hi"})" "\n\n");
    auto log = read_chat_log(in);
    REQUIRE(log.size() == 1);
    CHECK(log[0].timestamp == 1709283600);
}

TEST_CASE("deduplicate keeps the first copy") {
    auto a = make_dialogue("q", "r", {"x", "y"});
    auto b = make_dialogue("q", "r", {"x", "z"});
    auto out = deduplicate({a, b, a});
    REQUIRE(out.size() == 2);
    CHECK(out[0].target().text == "y");
    CHECK(out[1].target().text == "z");
}

TEST_CASE("filter keeps a querier with exactly the threshold count") {
    auto ds = many("keep", "r", 20);
    auto drop = many("drop", "r", 19);
    ds.insert(ds.end(), drop.begin(), drop.end());
    auto out = filter_queriers(ds);
    CHECK(out.size() == 20);
    for (const auto& d : out) CHECK(d.querier_id == "keep");
    CHECK(filter_queriers(ds, 19).size() == 39);
    CHECK_THROWS_AS(filter_queriers(ds, 0), ConfigError);
}

TEST_CASE("test_count_for rounds and always leaves training data") {
    CHECK(test_count_for(0, 0.2) == 0);
    CHECK(test_count_for(1, 0.2) == 0);
    CHECK(test_count_for(2, 0.9) == 1);
    CHECK(test_count_for(20, 0.2) == 4);
    CHECK(test_count_for(22, 0.2) == 4);
    CHECK(test_count_for(23, 0.2) == 5);
}

TEST_CASE("split is disjoint, stratified per querier and seed-stable") {
    auto ds = many("a", "r", 23);
    auto b = many("b", "r", 20);
    ds.insert(ds.end(), b.begin(), b.end());
    auto s1 = split_corpus(ds, 0.2, 5);
    std::map<std::string, std::size_t> test_by_q;
    std::set<std::string> train_ids, test_ids;
    for (const auto& d : s1) {
        REQUIRE(d.split != Split::unassigned);
        (d.split == Split::test ? test_ids : train_ids).insert(d.id);
        if (d.split == Split::test) ++test_by_q[d.querier_id];
    }
    for (const auto& id : test_ids) CHECK(train_ids.count(id) == 0);
    CHECK(test_by_q["a"] == 5);
    CHECK(test_by_q["b"] == 4);

    std::vector<Dialogue> reversed(ds.rbegin(), ds.rend());
    auto s2 = split_corpus(reversed, 0.2, 5);
    std::map<std::string, Split> by_id;
    for (const auto& d : s2) by_id[d.id] = d.split;
    for (const auto& d : s1) CHECK(by_id[d.id] == d.split);
    CHECK_THROWS_AS(split_corpus(ds, 1.0, 0), ConfigError);
}

TEST_CASE("stats arithmetic on a hand-built corpus") {
    auto d1 = make_dialogue("a", "r", {"1", "2"});
    auto d2 = make_dialogue("a", "r", {"1", "2", "3", "4"});
    auto d3 = make_dialogue("b", "r", {"5", "6"});
    auto d4 = make_dialogue("c", "other", {"7", "8"});
    d1.split = Split::train;
    d2.split = Split::test;
    d3.split = Split::train;
    auto stats = compute_stats({d1, d2, d3, d4});
    REQUIRE(stats.size() == 2);
    CHECK(stats[1].responder_id == "r");
    CHECK(stats[1].n_queriers == 2);
    CHECK(stats[1].n_train == 2);
    CHECK(stats[1].n_test == 1);
    CHECK(stats[1].avg_dialogues_per_querier == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(stats[1].avg_turns_per_dialogue == doctest::Approx(8.0 / 3.0).epsilon(1e-12));
    CHECK(stats[0].n_queriers == 1);
}

TEST_CASE("dialogue JSON lines round-trip") {
    auto d = make_dialogue("q", "r", {"hello", "world"});
    d.split = Split::test;
    d.cluster_id = 3;
    std::stringstream ss;
    write_dialogues(ss, {d, d});
    auto back = read_dialogues(ss);
    REQUIRE(back.size() == 2);
    CHECK(back[0].id == d.id);
    CHECK(back[0].turns == d.turns);
    CHECK(back[0].split == Split::test);
    CHECK(back[0].cluster_id == 3);
}

TEST_CASE("content ids are stable and sensitive to every field") {
    auto a = make_dialogue("q", "r", {"x", "y"});
    CHECK(a.id.size() == 16);
    CHECK(a.id == make_dialogue("q", "r", {"x", "y"}).id);
    CHECK(a.id != make_dialogue("q2", "r", {"x", "y"}).id);
    CHECK(a.id != make_dialogue("q", "r2", {"x", "y"}).id);
    CHECK(a.id != make_dialogue("q", "r", {"x", "y "}).id);
}

TEST_CASE("synthetic corpus holds out identical queries across queriers") {
    auto c = make_synthetic_corpus({4, 20, 6, 3});
    CHECK(c.querier_ids.size() == 4);
    CHECK(c.dialogues.size() == 4 * 20 * 7);
    std::set<std::string> train_queries;
    std::size_t n_test = 0;
    for (const auto& d : c.dialogues) {
        CHECK(is_valid_dialogue(d));
        if (d.split == Split::train) train_queries.insert(d.turns[0].text);
        if (d.split == Split::test) ++n_test;
    }
    CHECK(n_test == 4 * 20);
    for (const auto& q : c.heldout_queries) CHECK(train_queries.count(q) == 0);
    for (std::size_t t = 0; t < 20; ++t) {
        std::set<std::string> answers;
        for (std::size_t i = 0; i < 4; ++i) answers.insert(c.canonical[i][t]);
        CHECK(answers.size() == 4);
    }
    CHECK_THROWS_AS(make_synthetic_corpus({1, 20, 6, 0}), ConfigError);
}

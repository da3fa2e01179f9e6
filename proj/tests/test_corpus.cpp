#include <doctest.h>

#include <filesystem>
#include <set>

#include "oracles.hpp"
#include "selfrefine/corpus.hpp"

using namespace selfrefine;
using namespace selfrefine::corpus;

namespace {

std::vector<Demonstration> demo_corpus(size_t n) {
    std::vector<Demonstration> demos;
    for (size_t i = 0; i < n; ++i) {
        auto d = oracles::tiny_demo("d" + std::to_string(i), "B", "a a\nb b\nThe answer is B) b.",
                                    "B");
        demos.push_back(d);
    }
    return demos;
}

}  // namespace

TEST_CASE("task spec validation") {
    TaskSpec bad{"t", TaskKind::multiple_choice, 7};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK_THROWS_AS(gen_synthetic_tasks(bad, 1, 0), ConfigError);
    TaskSpec ok{"t", TaskKind::multiple_choice, 4};
    CHECK_THROWS_AS(gen_synthetic_tasks(ok, 0, 0), ConfigError);
    CHECK(ok.answer_space() == std::vector<std::string>{"A", "B", "C", "D"});
}

TEST_CASE("synthetic multiple-choice items have exactly one correct label") {
    TaskSpec spec{"match4", TaskKind::multiple_choice, 4};
    const auto one = gen_synthetic_tasks(spec, 1, 7);
    REQUIRE(one.size() == 1);
    REQUIRE(one[0].choices.size() == 4);
    CHECK(one[0].choices[0].first == "A");
    CHECK(one[0].choices[3].first == "D");

    const auto items = gen_synthetic_tasks(spec, 200, 3);
    size_t target_histogram[4] = {0, 0, 0, 0};
    for (const auto& item : items) {
        // exactly one choice carries the marker, and it is the target
        int marked = 0;
        std::string marked_label;
        std::set<std::string> symbols;
        for (const auto& [label, text] : item.choices) {
            if (text.find('*') != std::string::npos) {
                ++marked;
                marked_label = label;
            }
            symbols.insert(text.substr(0, 1));
        }
        CHECK(marked == 1);
        CHECK(marked_label == item.target);
        CHECK(symbols.size() == item.choices.size());  // distinct symbols
        target_histogram[item.target[0] - 'A'] += 1;
    }
    // marker position is roughly uniform over the labels
    for (size_t count : target_histogram) CHECK(count > 20);
    // distinct items (question + choice configuration)
    std::set<std::string> keys;
    for (const auto& item : items) {
        std::string key = item.question;
        for (const auto& [label, text] : item.choices) key += "|" + text;
        keys.insert(key + ">" + item.target);
    }
    CHECK(keys.size() == items.size());
}

TEST_CASE("synthetic numeric targets match an independent evaluator") {
    TaskSpec spec{"arith", TaskKind::numeric, 0};
    const auto items = gen_synthetic_tasks(spec, 150, 1);
    for (const auto& item : items) {
        const auto expected = oracles::word_problem_answer(item.question);
        REQUIRE_MESSAGE(expected.has_value(), item.question);
        CHECK(item.target == std::to_string(*expected));
    }
}

TEST_CASE("synthetic generation is deterministic in (spec, n, seed)") {
    TaskSpec spec{"match4", TaskKind::multiple_choice, 4};
    const auto a = gen_synthetic_tasks(spec, 50, 123);
    const auto b = gen_synthetic_tasks(spec, 50, 123);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].question == b[i].question);
        CHECK(a[i].target == b[i].target);
        CHECK(a[i].choices == b[i].choices);
    }
    const auto c = gen_synthetic_tasks(spec, 50, 124);
    CHECK(a[0].choices != c[0].choices);
}

TEST_CASE("prompt rendering matches the template shapes") {
    Demonstration obqa;
    obqa.id = "x";
    obqa.task_id = "obqa";
    obqa.instruction = "Choose the answer to the question only from options A, B, C, D.";
    obqa.question = "Which form can be made into a triangle?";
    obqa.choices = {{"A", "ice"}, {"B", "steam"}, {"C", "water"}, {"D", "salt water"}};
    obqa.target = "A";
    obqa.teacher_answer = "A";
    obqa.teacher_cot_answer = "...is A) Ice.";

    const std::string cot = render_prompt(obqa, true);
    CHECK(cot.ends_with("Answer: Let's think step by step"));
    CHECK(cot.find("Question: Which form can be made into a triangle?") != std::string::npos);
    CHECK(cot.find("Choices:\nA) ice\nB) steam\nC) water\nD) salt water") != std::string::npos);

    Demonstration math;
    math.id = "m";
    math.task_id = "gsm";
    math.instruction = instruction_for({"gsm", TaskKind::numeric, 0});
    math.question = "What is 3 + 4 * 2?";
    math.target = "11";
    math.teacher_answer = "11";
    math.teacher_cot_answer = "3 + 8 = 11\nThe answer is 11.";
    const std::string plain = render_prompt(math, false);
    CHECK(plain.find("Answer the following mathematical question with numerical solution.") == 0);
    CHECK(plain.ends_with("Answer:"));

    CHECK(render_prompt(obqa, true) == render_prompt(obqa, true));
}

TEST_CASE("cot prompt equals the standard prompt plus one separator and the suffix") {
    TaskSpec spec{"match4", TaskKind::multiple_choice, 4};
    const auto items = gen_synthetic_tasks(spec, 20, 9);
    for (const auto& item : items) {
        Demonstration d;
        d.id = "t";
        d.task_id = spec.task_id;
        d.instruction = instruction_for(spec);
        d.question = item.question;
        d.choices = item.choices;
        d.target = item.target;
        d.teacher_answer = item.target;
        d.teacher_cot_answer = "x\nThe answer is " + item.target + ".";
        CHECK(render_prompt(d, true) == render_prompt(d, false) + " " + std::string(kCotSuffix));
    }
}

TEST_CASE("splits have exact nested sizes") {
    const auto demos3000 = demo_corpus(3000);
    const auto splits = make_splits(demos3000, 11);
    REQUIRE(splits.size() == 4);
    CHECK(split_for(splits, 1.0).member_ids.size() == 3000);
    CHECK(split_for(splits, 0.75).member_ids.size() == 2250);
    CHECK(split_for(splits, 0.5).member_ids.size() == 1500);
    CHECK(split_for(splits, 0.25).member_ids.size() == 750);

    const auto tiny = make_splits(demo_corpus(4), 11);
    CHECK(split_for(tiny, 1.0).member_ids.size() == 4);
    CHECK(split_for(tiny, 0.75).member_ids.size() == 3);
    CHECK(split_for(tiny, 0.5).member_ids.size() == 2);
    CHECK(split_for(tiny, 0.25).member_ids.size() == 1);
}

TEST_CASE("splits nest and are deterministic for random corpus sizes") {
    Rng rng(42);
    for (int trial = 0; trial < 25; ++trial) {
        const size_t n = 4 + rng.next_below(400);
        const auto demos = demo_corpus(n);
        const uint64_t seed = rng.next_u64();
        const auto splits = make_splits(demos, seed);
        const auto again = make_splits(demos, seed);
        for (double f : split_fractions()) {
            const auto& s = split_for(splits, f);
            CHECK(s.member_ids.size() == round_half_away(f * static_cast<double>(n)));
            CHECK(s.member_ids == split_for(again, f).member_ids);
        }
        // nesting: each smaller split is a prefix-subset of the next larger
        const auto& full = split_for(splits, 1.0).member_ids;
        for (double f : {0.75, 0.5, 0.25}) {
            const auto& ids = split_for(splits, f).member_ids;
            for (size_t i = 0; i < ids.size(); ++i) CHECK(ids[i] == full[i]);
        }
    }
}

TEST_CASE("demonstration save/load round-trips and validates") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "selfrefine_corpus_test";
    fs::create_directories(dir);
    const std::string path = (dir / "demos.jsonl").string();

    auto demos = demo_corpus(10);
    demos[3].choices.clear();  // numeric-shaped record
    demos[3].target = "11";
    demos[3].teacher_answer = "11";
    demos[3].teacher_cot_answer = "3 + 8 = 11\nThe answer is 11.";
    save_demonstrations(demos, path);
    const auto loaded = load_demonstrations(path);
    REQUIRE(loaded.size() == demos.size());
    for (size_t i = 0; i < demos.size(); ++i) {
        CHECK(loaded[i].id == demos[i].id);
        CHECK(loaded[i].question == demos[i].question);
        CHECK(loaded[i].choices == demos[i].choices);
        CHECK(loaded[i].teacher_cot_answer == demos[i].teacher_cot_answer);
    }

    // out-of-space target names the offending field and record
    auto bad = demos;
    bad[2].target = "F";
    save_demonstrations(bad, path);
    CHECK_THROWS_WITH_AS(load_demonstrations(path),
                         doctest::Contains("target"), DataError);
    try {
        load_demonstrations(path);
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("d2") != std::string::npos);
    }

    auto missing_cot = demos;
    missing_cot[5].teacher_cot_answer.clear();
    save_demonstrations(missing_cot, path);
    CHECK_THROWS_WITH_AS(load_demonstrations(path),
                         doctest::Contains("teacher_cot_answer"), DataError);

    CHECK_THROWS_AS(load_demonstrations((dir / "no_such_file.jsonl").string()), IoError);
    fs::remove_all(dir);
}

TEST_CASE("split manifest round-trips") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "selfrefine_splits_test";
    fs::create_directories(dir);
    const std::string path = (dir / "splits.json").string();
    const auto demos = demo_corpus(40);
    const auto splits = make_splits(demos, 5);
    save_splits(splits, path);
    const auto loaded = load_splits(path);
    REQUIRE(loaded.size() == splits.size());
    for (size_t i = 0; i < splits.size(); ++i) {
        CHECK(loaded[i].fraction == splits[i].fraction);
        CHECK(loaded[i].seed == splits[i].seed);
        CHECK(loaded[i].member_ids == splits[i].member_ids);
    }
    fs::remove_all(dir);
}

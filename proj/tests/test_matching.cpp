#include <doctest.h>

#include "selfrefine/matching.hpp"

using namespace selfrefine;

TEST_CASE("label extraction takes the last standalone label") {
    const TaskKind mc = TaskKind::multiple_choice;
    CHECK(extract_answer_text(
              "Given these considerations, the only substance among the options that can be "
              "shaped into a triangle by itself is A) Ice.",
              mc, 4) == "A");
    CHECK(extract_answer_text("Answer: B) steam", mc, 4) == "B");
    CHECK(extract_answer_text("I considered A and B; final answer: B", mc, 4) == "B");
    CHECK(extract_answer_text("no labels here", mc, 4) == std::nullopt);
    // bare lowercase label, trailing whitespace
    CHECK(extract_answer_text("the answer is b  \n", mc, 4) == "B");
    CHECK(extract_answer_text("the answer is b  \n", mc, 4) ==
          extract_answer_text("the answer is B", mc, 4));
    // letters inside words never match
    CHECK(extract_answer_text("Abba and cab", mc, 4) == std::nullopt);
    // labels outside the answer space are ignored
    CHECK(extract_answer_text("probably E", mc, 4) == std::nullopt);
    CHECK(extract_answer_text("probably E", mc, 5) == "E");
}

TEST_CASE("numeric extraction takes the last standalone number with value normalization") {
    const TaskKind num = TaskKind::numeric;
    CHECK(extract_answer_text("so 4 * 2 = 8, then 3 + 8 = 11", num) == "11");
    CHECK(extract_answer_text("The answer is 11.", num) == "11");
    CHECK(extract_answer_text("The answer is 11.0", num) == "11");
    CHECK(extract_answer_text("result: -42", num) == "-42");
    CHECK(extract_answer_text("about 3.50 total", num) == "3.5");
    CHECK(extract_answer_text("x11 is not a number token", num) == std::nullopt);
    CHECK(extract_answer_text("no digits", num) == std::nullopt);
}

TEST_CASE("numeric normalization compares by value") {
    CHECK(normalize_number("11.0") == normalize_number("11"));
    CHECK(normalize_number("007") == "7");
    CHECK(normalize_number("-0") == "0");
    CHECK(normalize_number("2.50") == "2.5");
    CHECK(normalize_number("1a") == std::nullopt);
    CHECK(normalize_number("") == std::nullopt);
}

TEST_CASE("target membership checks the final two lines, whole-token") {
    const TaskKind mc = TaskKind::multiple_choice;
    CHECK(target_in_answer("...a lot of reasoning...\nthe only substance is A) Ice.", "A", mc, 4));
    CHECK_FALSE(target_in_answer("B) steam", "A", mc, 4));
    // mention in an early rationale line is not a commitment
    CHECK_FALSE(target_in_answer("A is tempting.\nbut no.\nso we pick\nB) steam", "A", mc, 4));
    CHECK(target_in_answer("a) ice", "A", mc, 4));  // case-insensitive

    const TaskKind num = TaskKind::numeric;
    CHECK(target_in_answer("4 * 2 = 8\n3 + 8 = 11\nso it = 11", "11", num));
    CHECK_FALSE(target_in_answer("4 * 2 = 8\n3 + 8 = 11\nso it = 11", "1", num));
    CHECK(target_in_answer("The answer is 11.0", "11", num));
}

TEST_CASE("well-formed CoT needs two rationale lines before the final label") {
    const TaskKind mc = TaskKind::multiple_choice;
    CHECK(has_well_formed_cot("A) a: no.\nB) b: yes.\nThe answer is B) b.", mc, 4));
    CHECK_FALSE(has_well_formed_cot("B", mc, 4));
    CHECK_FALSE(has_well_formed_cot("some thoughts\nThe answer is B.", mc, 4));
    CHECK_FALSE(has_well_formed_cot("line one\nline two\nno commitment", mc, 4));
    // blank lines do not count as rationale
    CHECK_FALSE(has_well_formed_cot("\n\nThe answer is B.", mc, 4));
    const TaskKind num = TaskKind::numeric;
    CHECK(has_well_formed_cot("4 * 2 = 8.\n3 + 8 = 11.\nThe answer is 11.", num));
}

TEST_CASE("extraction is invariant to trailing whitespace and label case") {
    const TaskKind mc = TaskKind::multiple_choice;
    const std::string base = "rationale\nThe answer is C) x";
    const auto expect = extract_answer_text(base, mc, 4);
    CHECK(extract_answer_text(base + "   \n\t \n", mc, 4) == expect);
    CHECK(extract_answer_text("rationale\nThe answer is c) x", mc, 4) == expect);
}

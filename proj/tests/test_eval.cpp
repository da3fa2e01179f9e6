#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "selfrefine/eval.hpp"
#include "selfrefine/report.hpp"

using namespace selfrefine;
using namespace selfrefine::eval;

namespace {

std::vector<corpus::Demonstration> mc4_demos(size_t n, uint64_t seed) {
    corpus::TaskSpec spec{"match4", TaskKind::multiple_choice, 4};
    const auto items = corpus::gen_synthetic_tasks(spec, static_cast<int>(n), seed);
    std::vector<corpus::Demonstration> demos;
    for (size_t i = 0; i < items.size(); ++i) {
        corpus::Demonstration d;
        d.id = "e" + std::to_string(i);
        d.task_id = spec.task_id;
        d.instruction = corpus::instruction_for(spec);
        d.question = items[i].question;
        d.choices = items[i].choices;
        d.target = items[i].target;
        d.teacher_answer = items[i].target;
        d.teacher_cot_answer = "x x\ny y\nThe answer is " + items[i].target + ".";
        demos.push_back(d);
    }
    return demos;
}

teacher::ChatClient scripted_client(std::vector<std::string> replies) {
    auto replies_ptr = std::make_shared<std::vector<std::string>>(std::move(replies));
    auto index = std::make_shared<std::atomic<size_t>>(0);
    teacher::Transport transport = [replies_ptr, index](const teacher::ChatEndpoint&,
                                                        const std::string&,
                                                        const std::string&) -> teacher::HttpReply {
        const size_t i = std::min((*index)++, replies_ptr->size() - 1);
        return {200,
                nlohmann::json{{"choices",
                                {{{"message", {{"role", "assistant"},
                                               {"content", (*replies_ptr)[i]}}}}}}}
                    .dump(),
                ""};
    };
    return teacher::ChatClient(teacher::ChatEndpoint{}, transport, 1);
}

}  // namespace

TEST_CASE("extract_answer follows the task spec") {
    corpus::TaskSpec mc{"m", TaskKind::multiple_choice, 4};
    CHECK(extract_answer("the only substance that fits is A) Ice.", mc) == "A");
    corpus::TaskSpec num{"n", TaskKind::numeric, 0};
    CHECK(extract_answer("4 * 2 = 8\n3 + 8 = 11\nThe answer is 11.", num) == "11");
}

TEST_CASE("evaluate: always-correct, always-wrong and random-label generators") {
    const auto demos = mc4_demos(1000, 21);

    const auto perfect = evaluate_with(
        [](const std::string&, const corpus::Demonstration& d, uint64_t) {
            return "r1\nr2\nThe answer is " + d.target + ".";
        },
        demos, PromptKind::cot, 1);
    CHECK(perfect.accuracy == 100.0);
    CHECK(perfect.cot_well_formed_fraction == 1.0);
    CHECK(perfect.extraction_misses == 0);

    const auto miss = evaluate_with(
        [](const std::string&, const corpus::Demonstration&, uint64_t) {
            return std::string("Z Z Z");  // outside the answer space
        },
        demos, PromptKind::standard, 1);
    CHECK(miss.accuracy == 0.0);
    CHECK(miss.extraction_misses == demos.size());

    const auto random = evaluate_with(
        [](const std::string&, const corpus::Demonstration&, uint64_t seed) {
            Rng rng(seed);
            return std::string(1, static_cast<char>('A' + rng.next_below(4)));
        },
        demos, PromptKind::standard, 7);
    const double sigma = 100.0 * std::sqrt(0.25 * 0.75 / 1000.0);
    CHECK(std::abs(random.accuracy - 25.0) <= 3.0 * sigma);

    // accuracy equals the mean of correct flags exactly
    size_t correct = 0;
    for (const auto& r : random.records) correct += r.correct ? 1 : 0;
    CHECK(random.accuracy == 100.0 * static_cast<double>(correct) /
                                 static_cast<double>(random.records.size()));
}

TEST_CASE("generation errors attach to records, count incorrect, and are reported") {
    const auto demos = mc4_demos(10, 3);
    const auto summary = evaluate_with(
        [](const std::string&, const corpus::Demonstration& d, uint64_t) -> std::string {
            if (d.id == "e3" || d.id == "e7") throw LengthError("window exceeded");
            return "r1\nr2\nThe answer is " + d.target + ".";
        },
        demos, PromptKind::cot, 1);
    CHECK(summary.generation_errors == 2);
    CHECK(summary.accuracy == 80.0);
    CHECK(summary.records[3].error.find("window exceeded") != std::string::npos);
    CHECK_FALSE(summary.records[3].correct);
}

TEST_CASE("evaluation at temperature zero is idempotent across calls") {
    auto policy = oracles::demo_policy<float>(60, 100);
    const auto demos = std::vector<corpus::Demonstration>{oracles::tiny_demo("i0", "A", "a\nb\na", "a"),
                                                          oracles::tiny_demo("i1", "B", "b\na\nb", "b")};
    policy::GenerationConfig gen;
    gen.temperature = 0.0;
    gen.max_new_tokens = 6;
    gen.seed = 11;
    const auto a = evaluate(policy, demos, PromptKind::standard, gen);
    const auto b = evaluate(policy, demos, PromptKind::standard, gen);
    REQUIRE(a.records.size() == b.records.size());
    for (size_t i = 0; i < a.records.size(); ++i) {
        CHECK(a.records[i].generated == b.records[i].generated);
        CHECK(a.records[i].correct == b.records[i].correct);
    }
}

TEST_CASE("cross matrix grid shape, baseline row, and absent cells") {
    // fake policies: zero-parameter tiny models; accuracy values irrelevant
    auto tiny = oracles::demo_policy<float>(61, 100);
    MatrixSources sources;
    sources.gen_config = {0.0, 4, 1};
    sources.test_demos = [](const std::string&) {
        return std::vector<corpus::Demonstration>{oracles::tiny_demo("t0", "A", "a\nb\na", "a")};
    };
    size_t calls = 0;
    sources.policy_for = [&](const std::string& trained_on, Regime regime, uint64_t,
                             const std::string&) -> std::optional<policy::PolicyModel<float>> {
        ++calls;
        if (regime == Regime::self_refine && trained_on == "task_b") return std::nullopt;
        return tiny;
    };
    MatrixSpec spec;
    spec.train_tasks = {"task_a", "task_b"};
    spec.eval_tasks = {"task_a", "task_b"};
    spec.regimes = {Regime::instruction_tuning, Regime::self_refine, Regime::cross_self_refine};
    spec.seeds = {1, 2};

    const auto cells = cross_matrix(spec, sources);
    CHECK(cells.size() == 2 * 2 * 3 - 2);  // cross diagonal omitted
    size_t absent = 0;
    for (const auto& c : cells)
        if (!c.present) ++absent;
    CHECK(absent == 2);  // self_refine row for task_b on both eval tasks

    // baseline applies per evaluated task only (single row)
    MatrixSpec base_spec = spec;
    base_spec.regimes = {Regime::baseline};
    const auto base_cells = cross_matrix(base_spec, sources);
    CHECK(base_cells.size() == 2);
    for (const auto& c : base_cells) CHECK(c.trained_on == "-");

    // determinism
    const auto again = cross_matrix(spec, sources);
    REQUIRE(again.size() == cells.size());
    for (size_t i = 0; i < cells.size(); ++i) {
        CHECK(cells[i].accuracy == again[i].accuracy);
        CHECK(cells[i].stderr_pct == again[i].stderr_pct);
        CHECK(cells[i].present == again[i].present);
    }
}

TEST_CASE("low-resource curve produces one row per fraction and regime") {
    auto tiny = oracles::demo_policy<float>(62, 100);
    CurveSources sources;
    sources.gen_config = {0.0, 4, 1};
    sources.test_demos = []() {
        return std::vector<corpus::Demonstration>{oracles::tiny_demo("t0", "A", "a\nb\na", "a")};
    };
    sources.policy_for = [&](double, CurveRegime, uint64_t)
        -> std::optional<policy::PolicyModel<float>> { return tiny; };
    const auto rows = low_resource_curve(
        {1.0, 0.75, 0.5, 0.25},
        {CurveRegime::it_only, CurveRegime::refine_only, CurveRegime::it_refine}, {1, 2},
        sources);
    CHECK(rows.size() == 12);
}

TEST_CASE("judge prompt renders verbatim and ratings parse with one retry") {
    const std::string prompt = render_judge_prompt("Q?", "R!");
    CHECK(prompt.find("Please act as an impartial judge") == 0);
    CHECK(prompt.find("rate the response on a scale of 1 to 3") != std::string::npos);
    CHECK(prompt.find("“Rating: [[2]]”") != std::string::npos);
    CHECK(prompt.find("[question]\nQ?") != std::string::npos);
    CHECK(prompt.find("[AI assistant’s response]\nR!") != std::string::npos);

    auto ok = judge_quality("Q?", "R!", scripted_client({"quite thorough. Rating: [[2]]"}));
    REQUIRE(ok.verdict.has_value());
    CHECK(ok.verdict->rating == 2);
    CHECK(ok.verdict->explanation == "quite thorough.");

    auto wrapped = judge_quality("Q?", "R!", scripted_client({"I would say [[3]] overall"}));
    REQUIRE(wrapped.verdict.has_value());
    CHECK(wrapped.verdict->rating == 3);

    // parse failure retried once, then recorded as an error
    auto failed = judge_quality("Q?", "R!", scripted_client({"no rating", "still none"}));
    CHECK_FALSE(failed.verdict.has_value());
    CHECK(failed.error.find("no rating pattern") != std::string::npos);

    // retry succeeds on the second reply
    auto second = judge_quality("Q?", "R!", scripted_client({"no rating", "Rating: [[1]]"}));
    REQUIRE(second.verdict.has_value());
    CHECK(second.verdict->rating == 1);

    CHECK(parse_judge_rating("Rating: [[9]]") == std::nullopt);
}

TEST_CASE("report emission: row counts, empty inputs, byte determinism") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "selfrefine_report_test";
    fs::remove_all(dir);

    std::vector<AccuracyCell> cells;
    for (int i = 0; i < 12; ++i) {
        AccuracyCell c;
        c.trained_on = i % 2 ? "task_a" : "task_b";
        c.evaluated_on = i % 3 ? "task_a" : "task_b";
        c.regime = static_cast<Regime>(i % 5);
        c.accuracy = 10.0 * i;
        c.stderr_pct = 0.5;
        c.n = 100;
        cells.push_back(c);
    }
    std::vector<CurveRow> curve;
    for (double f : {1.0, 0.75, 0.5, 0.25})
        for (auto r : {CurveRegime::it_only, CurveRegime::refine_only, CurveRegime::it_refine}) {
            CurveRow row;
            row.fraction = f;
            row.regime = r;
            row.accuracy = 50.0 + 10.0 * f;
            curve.push_back(row);
        }

    const auto files = report::emit_report(cells, curve, (dir / "r").string());
    CHECK(files.size() == 4);  // matrix csv+svg, curve csv+svg
    std::ifstream matrix(dir / "r" / "matrix.csv");
    std::string line;
    size_t rows = 0;
    std::getline(matrix, line);
    CHECK(line == "trained_on,evaluated_on,regime,accuracy,stderr,n");
    while (std::getline(matrix, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 12);

    // byte-identical on rerun
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    const std::string before_m = slurp(dir / "r" / "matrix.csv");
    const std::string before_s = slurp(dir / "r" / "matrix.svg");
    report::emit_report(cells, curve, (dir / "r").string());
    CHECK(slurp(dir / "r" / "matrix.csv") == before_m);
    CHECK(slurp(dir / "r" / "matrix.svg") == before_s);

    // empty inputs: header-only CSV, no chart
    const auto empty_files = report::emit_report({}, {}, (dir / "empty").string());
    CHECK(empty_files.size() == 2);
    CHECK(fs::exists(dir / "empty" / "matrix.csv"));
    CHECK_FALSE(fs::exists(dir / "empty" / "matrix.svg"));
    fs::remove_all(dir);
}

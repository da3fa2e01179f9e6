#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "selfrefine/teacher.hpp"

using namespace selfrefine;
using namespace selfrefine::teacher;

namespace {

Teacher oracle_teacher() {
    return Teacher(TeacherHandle{});
}

corpus::Demonstration skeleton_mc() {
    corpus::Demonstration d;
    d.id = "s0";
    d.task_id = "match4";
    d.instruction = "Choose the answer to the question only from options A, B, C, D.";
    d.question = "Which option is the word 'fyx'?";
    d.choices = {{"A", "kov"}, {"B", "fyx"}, {"C", "dar"}, {"D", "mel"}};
    d.target = "B";
    return d;
}

corpus::Demonstration skeleton_num(const std::string& question, const std::string& target) {
    corpus::Demonstration d;
    d.id = "n0";
    d.task_id = "arith";
    d.instruction = "Answer the following mathematical question with numerical solution.";
    d.question = question;
    d.target = target;
    return d;
}

Transport fake_transport(std::function<HttpReply(const std::string& body)> fn) {
    return [fn](const ChatEndpoint&, const std::string& body, const std::string&) {
        return fn(body);
    };
}

std::string chat_reply(const std::string& content) {
    return nlohmann::json{
        {"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}}
        .dump();
}

}  // namespace

TEST_CASE("oracle CoT rationale enumerates each choice and ends with the target") {
    const auto t = oracle_teacher();
    const auto d = skeleton_mc();
    const auto result = t.annotate(d, true);
    const auto lines = split_lines(result.text);
    REQUIRE(lines.size() == 5);  // one per choice + conclusion
    CHECK(lines[0] == "A) kov: no.");
    CHECK(lines[1] == "B) fyx: yes.");
    CHECK(lines[2] == "C) dar: no.");
    CHECK(lines[3] == "D) mel: no.");
    CHECK(lines[4] == "The answer is B) fyx.");
    CHECK(result.extracted == "B");
    CHECK(target_in_answer(result.text, d.target, d.kind(), d.n_choices()));
    // plain annotation is the bare target label
    CHECK(t.annotate(d, false).text == "B");
}

TEST_CASE("oracle numeric rationale derives the answer step by step") {
    const auto t = oracle_teacher();
    const auto expr = t.annotate(skeleton_num("What is 3 + 4 * 2?", "11"), true);
    const auto lines = split_lines(expr.text);
    REQUIRE(lines.size() == 3);
    CHECK(lines[0] == "4 * 2 = 8.");
    CHECK(lines[1] == "3 + 8 = 11.");
    CHECK(lines[2] == "The answer is 11.");

    // word problem families, target re-verified by the independent evaluator
    corpus::TaskSpec spec{"arith", TaskKind::numeric, 0};
    for (const auto& item : corpus::gen_synthetic_tasks(spec, 40, 77)) {
        corpus::Demonstration d = skeleton_num(item.question, item.target);
        const auto res = t.annotate(d, true);
        const auto expected = oracles::word_problem_answer(item.question);
        REQUIRE(expected.has_value());
        CHECK(res.extracted == std::to_string(*expected));
        CHECK(split_lines(res.text).size() >= 3);  // at least two steps + conclusion
        CHECK(t.annotate(d, false).text == item.target);
    }
}

TEST_CASE("oracle requires a target") {
    auto d = skeleton_mc();
    d.target.clear();
    CHECK_THROWS_AS(oracle_teacher().annotate(d, true), DataError);
}

TEST_CASE("build_demonstrations: oracle corpus is fully valid and deterministic") {
    corpus::TaskSpec spec{"match4", TaskKind::multiple_choice, 4};
    const auto items = corpus::gen_synthetic_tasks(spec, 100, 5);
    const auto a = build_demonstrations(spec, items, oracle_teacher());
    CHECK(a.demos.size() == 100);
    CHECK(a.quarantined.empty());
    const auto b = build_demonstrations(spec, items, oracle_teacher());
    REQUIRE(b.demos.size() == a.demos.size());
    for (size_t i = 0; i < a.demos.size(); ++i) {
        CHECK(a.demos[i].id == b.demos[i].id);
        CHECK(a.demos[i].teacher_cot_answer == b.demos[i].teacher_cot_answer);
        CHECK(a.demos[i].teacher_answer == b.demos[i].teacher_answer);
    }
    for (const auto& d : a.demos) CHECK(corpus::validate_demonstration(d).empty());
}

TEST_CASE("external answers missing the target are quarantined, never dropped silently") {
    corpus::TaskSpec spec{"match4", TaskKind::multiple_choice, 4};
    const auto items = corpus::gen_synthetic_tasks(spec, 10, 5);
    // replies correctly for plain requests, omits the target for two CoT ids
    std::atomic<int> calls{0};
    auto transport = fake_transport([&](const std::string& body) -> HttpReply {
        const auto req = nlohmann::json::parse(body);
        const std::string prompt = req.at("messages")[0].at("content").get<std::string>();
        ++calls;
        const bool cot = prompt.find("Let's think step by step") != std::string::npos;
        // find the label of the line carrying the marker
        std::string label = "A", text = "f";
        for (const auto& line : split_lines(prompt))
            if (line.size() > 2 && line[1] == ')' && line.find('*') != std::string::npos) {
                label = line.substr(0, 1);
                text = line.substr(3);
            }
        static int cot_seen = 0;
        if (cot && ++cot_seen <= 2)
            return {200, chat_reply("thinking...\nno commitment here"), ""};
        return {200, chat_reply(cot ? "checking the marks.\nfound it.\nThe answer is " + label +
                                          ") " + text + "."
                                    : label),
                ""};
    });
    TeacherHandle handle;
    handle.kind = TeacherHandle::Kind::external;
    ChatClient client(handle.endpoint, transport, 3);
    client.set_backoff_ms(1);
    Teacher teacher(handle, client);
    const auto result = build_demonstrations(spec, items, teacher);
    CHECK(result.demos.size() + result.quarantined.size() == items.size());
    CHECK(result.quarantined.size() == 2);
    for (const auto& q : result.quarantined)
        CHECK(q.reason.find("target not in CoT answer") != std::string::npos);
}

TEST_CASE("a quarantine rate above 20% aborts the build with a summary") {
    corpus::TaskSpec spec{"match4", TaskKind::multiple_choice, 4};
    const auto items = corpus::gen_synthetic_tasks(spec, 10, 6);
    auto transport = fake_transport([&](const std::string&) -> HttpReply {
        return {200, chat_reply("no answer at all"), ""};
    });
    TeacherHandle handle;
    handle.kind = TeacherHandle::Kind::external;
    ChatClient client(handle.endpoint, transport, 1);
    Teacher teacher(handle, client);
    CHECK_THROWS_WITH_AS(build_demonstrations(spec, items, teacher), doctest::Contains("20%"),
                         AnnotationError);
}

TEST_CASE("chat client: wire format, retries with attempt count, api key passthrough") {
    setenv("SELFREFINE_TEST_KEY", "sk-test-123", 1);
    ChatEndpoint endpoint;
    endpoint.model = "teacher-model-7";
    endpoint.api_key_env = "SELFREFINE_TEST_KEY";
    std::string seen_body, seen_key;
    std::atomic<int> attempts{0};
    Transport transport = [&](const ChatEndpoint&, const std::string& body,
                              const std::string& key) -> HttpReply {
        seen_body = body;
        seen_key = key;
        if (++attempts < 3) return {503, "", ""};
        return {200, chat_reply("fine"), ""};
    };
    ChatClient client(endpoint, transport, 3);
    client.set_backoff_ms(1);
    CHECK(client.complete("hello prompt", 0.7) == "fine");
    CHECK(attempts == 3);
    CHECK(seen_key == "sk-test-123");
    const auto body = nlohmann::json::parse(seen_body);
    CHECK(body.at("model") == "teacher-model-7");
    CHECK(body.at("temperature") == 0.7);
    REQUIRE(body.at("messages").size() == 1);
    CHECK(body.at("messages")[0].at("role") == "user");
    CHECK(body.at("messages")[0].at("content") == "hello prompt");

    // persistent failure reports the attempt count
    Transport failing = [](const ChatEndpoint&, const std::string&, const std::string&)
        -> HttpReply { return {0, "", "connection refused"}; };
    ChatClient bad(endpoint, failing, 3);
    bad.set_backoff_ms(1);
    CHECK_THROWS_WITH_AS(bad.complete("x", 0.1), doctest::Contains("3 attempts"),
                         AnnotationError);
}

TEST_CASE("chat client audit log records request and response bodies") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "selfrefine_audit_test";
    fs::create_directories(dir);
    const std::string audit = (dir / "audit.jsonl").string();
    Transport transport = [](const ChatEndpoint&, const std::string&, const std::string&)
        -> HttpReply { return {200, chat_reply("ok"), ""}; };
    ChatClient client(ChatEndpoint{}, transport, 1, audit);
    client.complete("audited prompt", 0.5);
    std::ifstream in(audit);
    std::string line;
    REQUIRE(std::getline(in, line));
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("request").get<std::string>().find("audited prompt") != std::string::npos);
    CHECK(j.at("status") == 200);
    CHECK(j.at("response").get<std::string>().find("ok") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("oracle CoT answers always contain the target") {
    // property over both task kinds
    corpus::TaskSpec mc{"m", TaskKind::multiple_choice, 5};
    corpus::TaskSpec num{"n", TaskKind::numeric, 0};
    const auto t = oracle_teacher();
    for (const auto& item : corpus::gen_synthetic_tasks(mc, 30, 8)) {
        corpus::Demonstration d;
        d.id = "x";
        d.task_id = "m";
        d.instruction = "i";
        d.question = item.question;
        d.choices = item.choices;
        d.target = item.target;
        CHECK(target_in_answer(t.annotate(d, true).text, d.target, d.kind(), d.n_choices()));
    }
    for (const auto& item : corpus::gen_synthetic_tasks(num, 30, 9)) {
        corpus::Demonstration d = skeleton_num(item.question, item.target);
        CHECK(target_in_answer(t.annotate(d, true).text, d.target, d.kind(), 1));
    }
}

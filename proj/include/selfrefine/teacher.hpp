#pragma once

// Demonstration producers: a deterministic oracle teacher (desk-scale
// stand-in for the large annotator models) and an external chat-completion
// client speaking the usual {model, messages, temperature} wire format.

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "corpus.hpp"
#include "matching.hpp"
#include "util.hpp"

namespace selfrefine::teacher {

using corpus::Demonstration;
using corpus::SyntheticItem;
using corpus::TaskSpec;

// ----------------------------- wire client -----------------------------

struct ChatEndpoint {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string path = "/v1/chat/completions";
    std::string model = "teacher";
    std::string api_key_env = "TEACHER_API_KEY";
};

struct HttpReply {
    int status = 0;
    std::string body;
    std::string error;  // transport-level failure when non-empty
};

// POSTs a JSON body, returns the reply. Injectable so tests can fake the
// transport; the default uses cpp-httplib (see pipeline.hpp for wiring).
using Transport =
    std::function<HttpReply(const ChatEndpoint&, const std::string& body, const std::string& key)>;

struct AnnotationRequest {
    std::string prompt;  // rendered standard or CoT prompt
    std::string task_id;
    std::string demo_id;
    bool cot = false;
};

struct AnnotationResult {
    std::string text;                      // raw answer
    std::optional<std::string> extracted;  // extracted-target echo
};

class ChatClient {
  public:
    ChatClient(ChatEndpoint endpoint, Transport transport, int max_attempts = 3,
               std::string audit_path = {})
        : endpoint_(std::move(endpoint)),
          transport_(std::move(transport)),
          max_attempts_(max_attempts),
          audit_path_(std::move(audit_path)) {}

    const ChatEndpoint& endpoint() const { return endpoint_; }

    // Sends one user message; returns the first assistant message content.
    // Retries transport/HTTP failures with exponential backoff.
    std::string complete(const std::string& user_message, double temperature) const {
        const nlohmann::json body = {
            {"model", endpoint_.model},
            {"messages", {{{"role", "user"}, {"content", user_message}}}},
            {"temperature", temperature}};
        const char* key_raw =
            endpoint_.api_key_env.empty() ? nullptr : std::getenv(endpoint_.api_key_env.c_str());
        const std::string key = key_raw ? key_raw : "";

        std::string last_error;
        for (int attempt = 1; attempt <= max_attempts_; ++attempt) {
            const HttpReply reply = transport_(endpoint_, body.dump(), key);
            audit(body.dump(), reply);
            if (reply.error.empty() && reply.status == 200) {
                if (auto content = parse_reply(reply.body)) return *content;
                last_error = "no assistant message in reply";
            } else {
                last_error = reply.error.empty() ? "HTTP status " + std::to_string(reply.status)
                                                 : reply.error;
            }
            if (attempt < max_attempts_)
                std::this_thread::sleep_for(std::chrono::milliseconds(backoff_ms_ << (attempt - 1)));
        }
        throw AnnotationError("annotation request failed after " + std::to_string(max_attempts_) +
                              " attempts: " + last_error);
    }

    void set_backoff_ms(int ms) { backoff_ms_ = ms; }

  private:
    static std::optional<std::string> parse_reply(const std::string& body) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(body);
        } catch (const nlohmann::json::exception&) {
            return std::nullopt;
        }
        if (!j.contains("choices")) return std::nullopt;
        for (const auto& choice : j.at("choices")) {
            if (!choice.contains("message")) continue;
            const auto& msg = choice.at("message");
            if (msg.value("role", "") == "assistant") return msg.value("content", "");
        }
        return std::nullopt;
    }

    void audit(const std::string& request, const HttpReply& reply) const {
        if (audit_path_.empty()) return;
        std::lock_guard<std::mutex> lock(*audit_mutex_);
        std::ofstream out(audit_path_, std::ios::app | std::ios::binary);
        nlohmann::json line = {{"request", request},
                               {"status", reply.status},
                               {"response", reply.body},
                               {"error", reply.error}};
        out << line.dump() << '\n';
    }

    ChatEndpoint endpoint_;
    Transport transport_;
    int max_attempts_;
    std::string audit_path_;
    int backoff_ms_ = 100;
    std::shared_ptr<std::mutex> audit_mutex_ = std::make_shared<std::mutex>();
};

// ----------------------------- oracle rationale -----------------------------

namespace detail {

inline std::vector<long long> numbers_in(std::string_view text) {
    std::vector<long long> out;
    size_t i = 0;
    while (i < text.size()) {
        if (std::isdigit(static_cast<unsigned char>(text[i]))) {
            long long v = 0;
            while (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i])))
                v = v * 10 + (text[i++] - '0');
            out.push_back(v);
        } else {
            ++i;
        }
    }
    return out;
}

// Step lines for the synthetic word-problem families; the family is
// recognized by its keyword.
inline std::optional<std::vector<std::string>> word_problem_steps(const std::string& q) {
    const auto nums = numbers_in(q);
    auto line = [](long long a, char op, long long b, long long r) {
        return std::to_string(a) + " " + op + " " + std::to_string(b) + " = " + std::to_string(r) +
               ".";
    };
    if (q.find("boxes with") != std::string::npos && nums.size() == 3) {
        const long long p = nums[0] * nums[1];
        return std::vector<std::string>{line(nums[0], '*', nums[1], p),
                                        line(p, '+', nums[2], p + nums[2])};
    }
    if (q.find("gave away") != std::string::npos && nums.size() == 3) {
        const long long d = nums[0] - nums[1];
        return std::vector<std::string>{line(nums[0], '-', nums[1], d),
                                        line(d, '+', nums[2], d + nums[2])};
    }
    if (q.find("baskets") != std::string::npos && nums.size() == 3) {
        const long long s = nums[0] + nums[1];
        return std::vector<std::string>{line(nums[0], '+', nums[1], s),
                                        line(s, '*', nums[2], s * nums[2])};
    }
    if (q.find("bonus rounds") != std::string::npos && nums.size() == 4) {
        const long long p = nums[0] * nums[1], r = nums[2] * nums[3];
        return std::vector<std::string>{line(nums[0], '*', nums[1], p),
                                        line(nums[2], '*', nums[3], r),
                                        line(p, '+', nums[2] * nums[3], p + r)};
    }
    return std::nullopt;
}

// Steps for a flat +,-,* integer expression embedded in the question, e.g.
// "3 + 4 * 2": multiply first, then fold left to right.
inline std::optional<std::vector<std::string>> expression_steps(const std::string& q) {
    struct Token {
        char op = 0;          // 0 for a number
        long long value = 0;
    };
    std::vector<Token> tokens;
    size_t i = 0;
    while (i < q.size()) {
        const char c = q[i];
        if (std::isdigit(static_cast<unsigned char>(c))) {
            long long v = 0;
            while (i < q.size() && std::isdigit(static_cast<unsigned char>(q[i])))
                v = v * 10 + (q[i++] - '0');
            tokens.push_back({0, v});
        } else if ((c == '+' || c == '-' || c == '*') && !tokens.empty() && tokens.back().op == 0) {
            tokens.push_back({c, 0});
            ++i;
        } else if (c == ' ' || c == '?' || c == '.' || c == '=') {
            ++i;
        } else {
            // words before the expression are fine; words after break it
            if (!tokens.empty() && tokens.back().op != 0) return std::nullopt;
            if (tokens.size() >= 3) break;
            tokens.clear();
            while (i < q.size() && q[i] != ' ') ++i;
            ++i;
        }
    }
    if (tokens.size() < 3 || tokens.size() % 2 == 0) return std::nullopt;
    std::vector<std::string> steps;
    // pass 1: products
    std::vector<Token> reduced;
    for (size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t].op == '*') {
            const long long a = reduced.back().value;
            const long long b = tokens[t + 1].value;
            steps.push_back(std::to_string(a) + " * " + std::to_string(b) + " = " +
                            std::to_string(a * b) + ".");
            reduced.back().value = a * b;
            ++t;
        } else {
            reduced.push_back(tokens[t]);
        }
    }
    // pass 2: sums and differences, left to right
    long long acc = reduced[0].value;
    for (size_t t = 1; t + 1 < reduced.size(); t += 2) {
        const long long b = reduced[t + 1].value;
        const long long r = reduced[t].op == '+' ? acc + b : acc - b;
        steps.push_back(std::to_string(acc) + " " + reduced[t].op + " " + std::to_string(b) +
                        " = " + std::to_string(r) + ".");
        acc = r;
    }
    return steps;
}

}  // namespace detail

// Deterministic oracle rationale: one line per choice ending yes/no, then a
// concluding line naming the target; numeric questions get explicit
// arithmetic steps.
inline std::string oracle_cot_answer(const Demonstration& skeleton) {
    if (skeleton.kind() == TaskKind::multiple_choice) {
        const std::string want = normalize_target(skeleton.target, TaskKind::multiple_choice);
        std::string out;
        std::string target_text;
        for (const auto& [label, text] : skeleton.choices) {
            const bool is_target = normalize_target(label, TaskKind::multiple_choice) == want;
            if (is_target) target_text = text;
            out += label;
            out += ") ";
            out += text;
            out += is_target ? ": yes.\n" : ": no.\n";
        }
        out += "The answer is " + want + ") " + target_text + ".";
        return out;
    }
    std::string out;
    auto steps = detail::word_problem_steps(skeleton.question);
    if (!steps) steps = detail::expression_steps(skeleton.question);
    if (steps) {
        for (const auto& s : *steps) out += s + "\n";
    } else {
        out += "Compute the required value.\n";
    }
    out += "The answer is " + normalize_target(skeleton.target, TaskKind::numeric) + ".";
    return out;
}

inline std::string oracle_plain_answer(const Demonstration& skeleton) {
    return normalize_target(skeleton.target, skeleton.kind());
}

// ----------------------------- teacher handle -----------------------------

struct TeacherHandle {
    enum class Kind { oracle, external };
    Kind kind = Kind::oracle;
    double annotation_temperature = 0.7;  // external default per the annotation setup
    ChatEndpoint endpoint;                // external only
};

class Teacher {
  public:
    explicit Teacher(TeacherHandle handle, std::optional<ChatClient> client = std::nullopt)
        : handle_(std::move(handle)), client_(std::move(client)) {
        if (handle_.kind == TeacherHandle::Kind::external && !client_)
            throw ConfigError("external teacher requires a chat client");
    }

    const TeacherHandle& handle() const { return handle_; }

    AnnotationResult annotate(const Demonstration& skeleton, bool cot) const {
        AnnotationResult result;
        if (handle_.kind == TeacherHandle::Kind::oracle) {
            if (skeleton.target.empty())
                throw DataError("oracle teacher needs a target for " +
                                (skeleton.id.empty() ? std::string("<unnamed>") : skeleton.id));
            result.text = cot ? oracle_cot_answer(skeleton) : oracle_plain_answer(skeleton);
        } else {
            const std::string prompt = corpus::render_prompt(skeleton, cot);
            result.text = client_->complete(prompt, handle_.annotation_temperature);
            if (result.text.empty())
                throw AnnotationError("external teacher returned an empty answer for " +
                                      skeleton.id);
        }
        if (auto extracted = extract_answer_text(result.text, skeleton.kind(),
                                                 std::max(skeleton.n_choices(), 1)))
            result.extracted = *extracted;
        return result;
    }

  private:
    TeacherHandle handle_;
    std::optional<ChatClient> client_;
};

// ----------------------------- demonstration building -----------------------------

struct QuarantineRecord {
    std::string id;
    std::string reason;
    std::string teacher_answer;
    std::string teacher_cot_answer;
};

struct BuildResult {
    std::vector<Demonstration> demos;
    std::vector<QuarantineRecord> quarantined;
};

// Annotates every item with both the plain and the CoT answer. Records that
// fail corpus validation are quarantined, never silently dropped; more than
// 20% quarantined aborts the build.
inline BuildResult build_demonstrations(const TaskSpec& spec,
                                        const std::vector<SyntheticItem>& items,
                                        const Teacher& teacher,
                                        const std::string& instruction_override = {}) {
    spec.validate();
    if (items.empty()) throw DataError("build_demonstrations: no tasks");
    const std::string instruction =
        instruction_override.empty() ? corpus::instruction_for(spec) : instruction_override;

    std::vector<Demonstration> annotated(items.size());
    std::vector<std::string> failures(items.size());
    const bool external = teacher.handle().kind == TeacherHandle::Kind::external;
    auto annotate_one = [&](size_t i) {
        Demonstration d;
        char idbuf[16];
        std::snprintf(idbuf, sizeof(idbuf), "%05zu", i);
        d.id = spec.task_id + "-" + idbuf;
        d.task_id = spec.task_id;
        d.instruction = instruction;
        d.question = items[i].question;
        d.choices = items[i].choices;
        d.target = items[i].target;
        try {
            d.teacher_answer = teacher.annotate(d, false).text;
            d.teacher_cot_answer = teacher.annotate(d, true).text;
        } catch (const AnnotationError& e) {
            failures[i] = e.what();
        }
        annotated[i] = std::move(d);
    };
    if (external) {
        // bounded concurrency is the transport's business; keep request
        // order deterministic here
        for (size_t i = 0; i < items.size(); ++i) annotate_one(i);
    } else {
        parallel_for(items.size(), annotate_one);
    }

    BuildResult result;
    for (size_t i = 0; i < annotated.size(); ++i) {
        Demonstration& d = annotated[i];
        if (!failures[i].empty()) {
            result.quarantined.push_back({d.id, failures[i], d.teacher_answer,
                                          d.teacher_cot_answer});
            continue;
        }
        const auto problems = corpus::validate_demonstration(d);
        if (!problems.empty()) {
            std::string reason;
            for (const auto& p : problems) {
                if (!reason.empty()) reason += "; ";
                reason += p.find("teacher_cot_answer: does not contain") != std::string::npos
                              ? "target not in CoT answer"
                              : p;
            }
            result.quarantined.push_back({d.id, reason, d.teacher_answer, d.teacher_cot_answer});
            continue;
        }
        result.demos.push_back(std::move(d));
    }
    const double rate =
        static_cast<double>(result.quarantined.size()) / static_cast<double>(items.size());
    if (rate > 0.2) {
        std::string msg = "build_demonstrations aborted: " +
                          std::to_string(result.quarantined.size()) + " of " +
                          std::to_string(items.size()) + " records quarantined (>20%). Reasons:";
        const size_t show = std::min<size_t>(result.quarantined.size(), 5);
        for (size_t i = 0; i < show; ++i)
            msg += "\n  " + result.quarantined[i].id + ": " + result.quarantined[i].reason;
        throw AnnotationError(msg);
    }
    return result;
}

inline void save_quarantine(const std::vector<QuarantineRecord>& records,
                            const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    for (const auto& r : records) {
        nlohmann::json j = {{"id", r.id},
                            {"reason", r.reason},
                            {"teacher_answer", r.teacher_answer},
                            {"teacher_cot_answer", r.teacher_cot_answer}};
        out << j.dump() << '\n';
    }
}

}  // namespace selfrefine::teacher

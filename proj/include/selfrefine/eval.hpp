#pragma once

// Evaluation protocol: generation + answer extraction + string-matching
// accuracy, the in-domain/out-domain/cross accuracy matrix, low-resource
// curves and the judge-quality interface.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "matching.hpp"
#include "policy.hpp"
#include "teacher.hpp"
#include "util.hpp"

namespace selfrefine::eval {

using corpus::Demonstration;
using corpus::TaskSpec;
using policy::PolicyModel;

enum class PromptKind { standard, cot };

inline const char* prompt_kind_name(PromptKind k) {
    return k == PromptKind::standard ? "standard" : "cot";
}

struct EvalRecord {
    std::string demo_id;
    PromptKind prompt_kind = PromptKind::standard;
    std::string generated;
    std::optional<std::string> extracted;
    std::string target;
    bool correct = false;
    std::string error;  // generation failure; counts as incorrect
};

struct EvalSummary {
    std::vector<EvalRecord> records;
    double accuracy = 0.0;  // percent
    size_t n = 0;
    size_t extraction_misses = 0;
    size_t generation_errors = 0;
    double cot_well_formed_fraction = 0.0;  // under the records' prompt kind
};

// Spec-facing extraction: last standalone label (or number) in the text.
inline std::optional<std::string> extract_answer(std::string_view generated,
                                                 const TaskSpec& task) {
    return extract_answer_text(generated, task.kind,
                               task.kind == TaskKind::multiple_choice ? task.n_choices : 5);
}

// (prompt text, demo, per-record seed) -> generated text
using Generator =
    std::function<std::string(const std::string& prompt, const Demonstration& demo, uint64_t seed)>;

// Core evaluation over an arbitrary generator; evaluate() wraps a policy.
inline EvalSummary evaluate_with(const Generator& generate, const std::vector<Demonstration>& demos,
                                 PromptKind prompt_kind, uint64_t seed) {
    if (demos.empty()) throw DataError("evaluate: no demonstrations");
    EvalSummary summary;
    summary.records.resize(demos.size());
    parallel_for(demos.size(), [&](size_t i) {
        const Demonstration& demo = demos[i];
        EvalRecord& rec = summary.records[i];
        rec.demo_id = demo.id;
        rec.prompt_kind = prompt_kind;
        rec.target = normalize_target(demo.target, demo.kind());
        try {
            rec.generated = generate(corpus::render_prompt(demo, prompt_kind == PromptKind::cot),
                                     demo, derive_seed(seed, "eval/" + demo.id));
            rec.extracted = extract_answer_text(rec.generated, demo.kind(),
                                                std::max(demo.n_choices(), 1));
            rec.correct = rec.extracted && *rec.extracted == rec.target;
        } catch (const std::exception& e) {
            rec.error = e.what();
            rec.correct = false;
        }
    });
    size_t correct = 0, cot_ok = 0;
    for (const auto& rec : summary.records) {
        if (rec.correct) ++correct;
        if (!rec.error.empty()) ++summary.generation_errors;
        else if (!rec.extracted) ++summary.extraction_misses;
    }
    for (size_t i = 0; i < summary.records.size(); ++i) {
        const Demonstration& demo = demos[i];
        if (has_well_formed_cot(summary.records[i].generated, demo.kind(),
                                std::max(demo.n_choices(), 1)))
            ++cot_ok;
    }
    summary.n = summary.records.size();
    summary.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(summary.n);
    summary.cot_well_formed_fraction =
        static_cast<double>(cot_ok) / static_cast<double>(summary.n);
    return summary;
}

template <typename S>
EvalSummary evaluate(const PolicyModel<S>& policy, const std::vector<Demonstration>& demos,
                     PromptKind prompt_kind, const policy::GenerationConfig& gen_config) {
    return evaluate_with(
        [&policy, &gen_config](const std::string& prompt, const Demonstration&, uint64_t seed) {
            policy::GenerationConfig gen = gen_config;
            gen.seed = seed;
            return policy::generate(policy, prompt, gen);
        },
        demos, prompt_kind, gen_config.seed);
}

// ----------------------------- accuracy matrix -----------------------------

enum class Regime { baseline, baseline_cot, instruction_tuning, self_refine, cross_self_refine };

inline const char* regime_name(Regime r) {
    switch (r) {
        case Regime::baseline: return "baseline";
        case Regime::baseline_cot: return "baseline_cot";
        case Regime::instruction_tuning: return "instruction_tuning";
        case Regime::self_refine: return "self_refine";
        case Regime::cross_self_refine: return "cross_self_refine";
    }
    return "?";
}

struct AccuracyCell {
    std::string trained_on;    // "-" for baseline rows
    std::string evaluated_on;
    Regime regime = Regime::baseline;
    double accuracy = 0.0;  // percent, mean over seeds
    double stderr_pct = 0.0;
    size_t n = 0;           // test examples per seed
    size_t seeds = 0;
    bool present = true;    // false when a required checkpoint is missing
};

struct MatrixSpec {
    std::vector<std::string> train_tasks;
    std::vector<std::string> eval_tasks;
    std::vector<Regime> regimes;
    std::vector<uint64_t> seeds;
};

// Checkpoint access is delegated so this stays independent of the artifact
// layout: returns the policy for (trained_on, regime, seed, evaluated_on),
// or nullopt when the checkpoint does not exist.
struct MatrixSources {
    std::function<std::optional<PolicyModel<float>>(const std::string& trained_on, Regime regime,
                                                    uint64_t seed, const std::string& evaluated_on)>
        policy_for;
    std::function<std::vector<Demonstration>(const std::string& task)> test_demos;
    policy::GenerationConfig gen_config;
};

inline std::pair<double, double> mean_stderr(const std::vector<double>& xs) {
    if (xs.empty()) return {0.0, 0.0};
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    if (xs.size() == 1) return {mean, 0.0};
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(xs.size() - 1);
    return {mean, std::sqrt(var / static_cast<double>(xs.size()))};
}

namespace detail {

inline AccuracyCell eval_cell(const MatrixSources& sources, const std::string& trained_on,
                              Regime regime, const std::string& evaluated_on, PromptKind kind,
                              const std::vector<uint64_t>& seeds) {
    AccuracyCell cell;
    cell.trained_on = trained_on;
    cell.evaluated_on = evaluated_on;
    cell.regime = regime;
    cell.seeds = seeds.size();
    const auto demos = sources.test_demos(evaluated_on);
    cell.n = demos.size();
    std::vector<double> accs;
    for (uint64_t seed : seeds) {
        auto pol = sources.policy_for(trained_on, regime, seed, evaluated_on);
        if (!pol) {
            cell.present = false;
            return cell;
        }
        policy::GenerationConfig gen = sources.gen_config;
        gen.seed = derive_seed(seed, "matrix_eval");
        accs.push_back(evaluate(*pol, demos, kind, gen).accuracy);
    }
    const auto [mean, se] = mean_stderr(accs);
    cell.accuracy = mean;
    cell.stderr_pct = se;
    return cell;
}

}  // namespace detail

// Fills the Table-1-style grid. Baseline regimes ignore trained_on and form
// a single row; cross cells on the diagonal are omitted.
inline std::vector<AccuracyCell> cross_matrix(const MatrixSpec& spec,
                                              const MatrixSources& sources) {
    std::vector<AccuracyCell> cells;
    for (Regime regime : spec.regimes) {
        if (regime == Regime::baseline || regime == Regime::baseline_cot) {
            const PromptKind kind =
                regime == Regime::baseline ? PromptKind::standard : PromptKind::cot;
            for (const auto& eval_task : spec.eval_tasks)
                cells.push_back(
                    detail::eval_cell(sources, "-", regime, eval_task, kind, spec.seeds));
            continue;
        }
        for (const auto& train_task : spec.train_tasks) {
            for (const auto& eval_task : spec.eval_tasks) {
                if (regime == Regime::cross_self_refine && train_task == eval_task) continue;
                cells.push_back(detail::eval_cell(sources, train_task, regime, eval_task,
                                                  PromptKind::cot, spec.seeds));
            }
        }
    }
    return cells;
}

// ----------------------------- low-resource curve -----------------------------

enum class CurveRegime { it_only, refine_only, it_refine };

inline const char* curve_regime_name(CurveRegime r) {
    switch (r) {
        case CurveRegime::it_only: return "it_only";
        case CurveRegime::refine_only: return "refine_only";
        case CurveRegime::it_refine: return "it_refine";
    }
    return "?";
}

struct CurveRow {
    double fraction = 1.0;
    CurveRegime regime = CurveRegime::it_only;
    double accuracy = 0.0;
    double stderr_pct = 0.0;
    size_t n = 0;
    size_t seeds = 0;
    bool present = true;
};

struct CurveSources {
    std::function<std::optional<PolicyModel<float>>(double fraction, CurveRegime regime,
                                                    uint64_t seed)>
        policy_for;
    std::function<std::vector<Demonstration>()> test_demos;
    policy::GenerationConfig gen_config;
};

inline std::vector<CurveRow> low_resource_curve(const std::vector<double>& fractions,
                                                const std::vector<CurveRegime>& regimes,
                                                const std::vector<uint64_t>& seeds,
                                                const CurveSources& sources) {
    std::vector<CurveRow> rows;
    const auto demos = sources.test_demos();
    for (double fraction : fractions) {
        for (CurveRegime regime : regimes) {
            CurveRow row;
            row.fraction = fraction;
            row.regime = regime;
            row.seeds = seeds.size();
            row.n = demos.size();
            std::vector<double> accs;
            for (uint64_t seed : seeds) {
                auto pol = sources.policy_for(fraction, regime, seed);
                if (!pol) {
                    row.present = false;
                    break;
                }
                policy::GenerationConfig gen = sources.gen_config;
                gen.seed = derive_seed(seed, "curve_eval");
                accs.push_back(evaluate(*pol, demos, PromptKind::cot, gen).accuracy);
            }
            if (row.present) {
                const auto [mean, se] = mean_stderr(accs);
                row.accuracy = mean;
                row.stderr_pct = se;
            }
            rows.push_back(row);
        }
    }
    return rows;
}

// ----------------------------- judge quality -----------------------------

struct JudgeVerdict {
    int rating = 0;  // 1..3
    std::string explanation;
};

inline std::string render_judge_prompt(std::string_view question, std::string_view response) {
    std::string prompt =
        "Please act as an impartial judge and evaluate the quality of the response provided by "
        "an AI assistant to the user instruction displayed below. Your evaluation should "
        "consider factors such as quality, accuracy, depth, and level of detail. Begin your "
        "assessment with a short explanation. Be as objective as possible. After providing your "
        "explanation, please rate the response on a scale of 1 to 3 strictly following this "
        "format:“[[rating]]”, for example: “Rating: [[2]]”.\n"
        "[question]\n";
    prompt += question;
    prompt += "\n[AI assistant’s response]\n";
    prompt += response;
    return prompt;
}

// Last "[[n]]" in the reply, which covers the canonical "Rating: [[n]]"
// form as well as the pattern wrapped in prose.
inline std::optional<int> parse_judge_rating(std::string_view reply) {
    std::optional<int> found;
    for (size_t pos = 0; pos + 5 <= reply.size(); ++pos) {
        if (reply[pos] != '[' || reply[pos + 1] != '[') continue;
        if (!std::isdigit(static_cast<unsigned char>(reply[pos + 2]))) continue;
        if (reply[pos + 3] != ']' || reply[pos + 4] != ']') continue;
        const int n = reply[pos + 2] - '0';
        if (n >= 1 && n <= 3) found = n;
    }
    return found;
}

struct JudgeOutcome {
    std::optional<JudgeVerdict> verdict;
    std::string error;
};

// Renders the judge prompt, queries the client, parses "Rating: [[n]]";
// retries once on a parse failure. Unparseable replies come back as an
// error outcome that callers exclude from averages.
inline JudgeOutcome judge_quality(const std::string& question, const std::string& response,
                                  const teacher::ChatClient& client, double temperature = 0.0) {
    const std::string prompt = render_judge_prompt(question, response);
    JudgeOutcome outcome;
    for (int attempt = 0; attempt < 2; ++attempt) {
        std::string reply;
        try {
            reply = client.complete(prompt, temperature);
        } catch (const AnnotationError& e) {
            outcome.error = e.what();
            return outcome;
        }
        if (auto rating = parse_judge_rating(reply)) {
            JudgeVerdict v;
            v.rating = *rating;
            const size_t cut = reply.rfind("Rating:");
            v.explanation = trim(cut == std::string::npos ? reply : reply.substr(0, cut));
            outcome.verdict = v;
            outcome.error.clear();
            return outcome;
        }
        outcome.error = "no rating pattern in judge reply";
    }
    return outcome;
}

}  // namespace selfrefine::eval

#pragma once

// Demonstration data: synthetic task generation, prompt rendering,
// JSONL persistence, validation and deterministic low-resource splits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "matching.hpp"
#include "util.hpp"

namespace selfrefine::corpus {

using selfrefine::TaskKind;

inline constexpr const char* kCotSuffix = "Let's think step by step";

struct TaskSpec {
    std::string task_id;
    TaskKind kind = TaskKind::multiple_choice;
    int n_choices = 4;  // multiple_choice only, 2..5

    std::vector<std::string> answer_space() const {
        std::vector<std::string> out;
        if (kind == TaskKind::multiple_choice)
            for (int i = 0; i < n_choices; ++i) out.emplace_back(1, static_cast<char>('A' + i));
        return out;
    }

    void validate() const {
        if (task_id.empty()) throw ConfigError("TaskSpec: task_id must be non-empty");
        if (kind == TaskKind::multiple_choice && (n_choices < 2 || n_choices > 5))
            throw ConfigError("TaskSpec '" + task_id + "': n_choices must be in [2,5], got " +
                              std::to_string(n_choices));
    }
};

struct Demonstration {
    std::string id;
    std::string task_id;
    std::string instruction;
    std::string question;
    std::vector<std::pair<std::string, std::string>> choices;  // (label, text); empty for numeric
    std::string target;
    std::string teacher_answer;      // plain answer a_i
    std::string teacher_cot_answer;  // chain-of-thought answer

    TaskKind kind() const {
        return choices.empty() ? TaskKind::numeric : TaskKind::multiple_choice;
    }
    int n_choices() const { return static_cast<int>(choices.size()); }
};

struct DatasetSplit {
    double fraction = 1.0;
    std::vector<std::string> member_ids;
    uint64_t seed = 0;
};

// Task instruction headers, one per task shape.
inline std::string instruction_for(const TaskSpec& spec) {
    if (spec.kind == TaskKind::numeric)
        return "Answer the following mathematical question with numerical solution.";
    std::string options;
    for (int i = 0; i < spec.n_choices; ++i) {
        if (i > 0) options += ", ";
        options += static_cast<char>('A' + i);
    }
    return "Choose the answer to the question only from options " + options + ".";
}

struct PromptTemplate {
    std::string header;                   // task instruction block
    std::string cot_suffix = kCotSuffix;  // fixed literal
};

// ----------------------------- validation -----------------------------

// Returns every violation as "field: reason"; empty means valid.
inline std::vector<std::string> validate_demonstration(const Demonstration& d) {
    std::vector<std::string> problems;
    if (d.id.empty()) problems.emplace_back("id: must be non-empty");
    if (d.instruction.empty()) problems.emplace_back("instruction: must be non-empty");
    if (d.question.empty()) problems.emplace_back("question: must be non-empty");
    if (d.target.empty()) problems.emplace_back("target: must be present");
    const TaskKind kind = d.kind();
    if (kind == TaskKind::multiple_choice) {
        if (d.n_choices() < 2 || d.n_choices() > 5)
            problems.emplace_back("choices: count must be in [2,5]");
        bool member = false;
        for (const auto& [label, text] : d.choices)
            if (normalize_target(label, kind) == normalize_target(d.target, kind)) member = true;
        if (!d.target.empty() && !member)
            problems.emplace_back("target: '" + d.target + "' is not a member of the answer space");
    }
    if (d.teacher_cot_answer.empty()) {
        problems.emplace_back("teacher_cot_answer: must be non-empty");
    } else if (!d.target.empty() &&
               !target_in_answer(d.teacher_cot_answer, d.target, kind, std::max(d.n_choices(), 1))) {
        problems.emplace_back("teacher_cot_answer: does not contain the target '" + d.target + "'");
    }
    return problems;
}

// ----------------------------- prompt rendering -----------------------------

// Standard prompt: instruction, question, enumerated choices, "Answer:".
// CoT prompt appends the fixed suffix after "Answer:" with one space.
inline std::string render_prompt(const Demonstration& demo, bool cot) {
    std::string out = demo.instruction;
    out += "\nQuestion: ";
    out += demo.question;
    if (!demo.choices.empty()) {
        out += "\nChoices:";
        for (const auto& [label, text] : demo.choices) {
            out += '\n';
            out += label;
            out += ") ";
            out += text;
        }
    }
    out += "\nAnswer:";
    if (cot) {
        out += ' ';
        out += kCotSuffix;
    }
    return out;
}

// ----------------------------- synthetic tasks -----------------------------

struct SyntheticItem {
    std::string question;
    std::vector<std::pair<std::string, std::string>> choices;
    std::string target;
};

namespace detail {

inline const std::vector<std::string>& person_names() {
    static const std::vector<std::string> names = {"Ava", "Ben", "Kim", "Leo",
                                                   "Mia", "Sam", "Tia", "Max"};
    return names;
}

// Marked-option question: every choice is a single symbol from f..z (so a
// choice text can never be mistaken for an answer label A..E), and exactly
// one choice carries a literal '*' marker. The marker position is uniform
// over the labels, so any label-emitting policy that ignores the prompt
// scores at chance.
inline SyntheticItem gen_choice_item(const TaskSpec& spec, Rng& rng) {
    const int k = spec.n_choices;
    std::vector<char> pool;
    for (char c = 'f'; c <= 'z'; ++c) pool.push_back(c);
    rng.shuffle(pool);
    const int target_pos = static_cast<int>(rng.next_below(static_cast<uint64_t>(k)));

    SyntheticItem item;
    item.question = "Which option is marked with '*'?";
    for (int i = 0; i < k; ++i) {
        std::string text(1, pool[static_cast<size_t>(i)]);
        if (i == target_pos) text += " *";
        item.choices.emplace_back(std::string(1, static_cast<char>('A' + i)), text);
    }
    item.target = std::string(1, static_cast<char>('A' + target_pos));
    return item;
}

// Arithmetic word problems, 2-3 integer steps each, unique integer answer.
// Template keywords (boxes / gave away / baskets / rounds) identify the
// arithmetic shape so tests can recompute the target independently.
inline SyntheticItem gen_numeric_item(Rng& rng) {
    const auto& names = person_names();
    const std::string name = names[rng.next_below(names.size())];
    const int form = static_cast<int>(rng.next_below(4));
    SyntheticItem item;
    long long answer = 0;
    if (form == 0) {
        const int a = rng.next_int(2, 9), b = rng.next_int(2, 9), c = rng.next_int(2, 9);
        item.question = name + " has " + std::to_string(a) + " boxes with " + std::to_string(b) +
                        " pens in each box and buys " + std::to_string(c) +
                        " more pens. How many pens does " + name + " have?";
        answer = static_cast<long long>(a) * b + c;
    } else if (form == 1) {
        const int a = rng.next_int(6, 19), b = rng.next_int(2, 5), c = rng.next_int(2, 9);
        item.question = name + " had " + std::to_string(a) + " marbles, gave away " +
                        std::to_string(b) + " and then found " + std::to_string(c) +
                        " more. How many marbles does " + name + " have now?";
        answer = static_cast<long long>(a) - b + c;
    } else if (form == 2) {
        const int a = rng.next_int(2, 9), b = rng.next_int(2, 9), c = rng.next_int(2, 9);
        item.question = name + " puts " + std::to_string(a) + " apples and " + std::to_string(b) +
                        " pears into each of " + std::to_string(c) +
                        " baskets. How many fruits is that in total?";
        answer = (static_cast<long long>(a) + b) * c;
    } else {
        const int a = rng.next_int(2, 9), b = rng.next_int(2, 9), c = rng.next_int(2, 9),
                  d = rng.next_int(2, 9);
        item.question = name + " scores " + std::to_string(a) + " points in each of " +
                        std::to_string(b) + " rounds and " + std::to_string(c) +
                        " points in each of " + std::to_string(d) +
                        " bonus rounds. How many points does " + name + " score?";
        answer = static_cast<long long>(a) * b + static_cast<long long>(c) * d;
    }
    item.target = std::to_string(answer);
    return item;
}

}  // namespace detail

inline std::vector<SyntheticItem> gen_synthetic_tasks(const TaskSpec& spec, int n, uint64_t seed) {
    spec.validate();
    if (n < 1) throw ConfigError("gen_synthetic_tasks: n must be >= 1");
    Rng rng(derive_seed(seed, "gen_synthetic_tasks/" + spec.task_id));
    std::vector<SyntheticItem> items;
    std::set<std::string> seen;
    items.reserve(static_cast<size_t>(n));
    size_t guard = 0;
    while (static_cast<int>(items.size()) < n) {
        if (++guard > static_cast<size_t>(n) * 1000 + 10000)
            throw ConfigError("gen_synthetic_tasks: cannot produce " + std::to_string(n) +
                              " distinct items for task '" + spec.task_id + "'");
        SyntheticItem item = spec.kind == TaskKind::multiple_choice
                                 ? detail::gen_choice_item(spec, rng)
                                 : detail::gen_numeric_item(rng);
        // numeric questions are unique by text; choice items by their whole
        // configuration (the 20-symbol pool admits few distinct questions)
        std::string key = item.question;
        for (const auto& [label, text] : item.choices) key += "|" + text;
        key += ">" + item.target;
        if (!seen.insert(key).second) continue;
        items.push_back(std::move(item));
    }
    return items;
}

// ----------------------------- splits -----------------------------

inline size_t round_half_away(double x) {
    return static_cast<size_t>(std::floor(x + 0.5));
}

inline const std::vector<double>& split_fractions() {
    static const std::vector<double> fr = {1.0, 0.75, 0.5, 0.25};
    return fr;
}

// One seeded permutation; every fraction takes a prefix, so smaller splits
// nest inside larger ones.
inline std::vector<DatasetSplit> make_splits(const std::vector<Demonstration>& demos,
                                             uint64_t seed) {
    if (demos.empty()) throw DataError("make_splits: corpus is empty");
    std::vector<size_t> perm(demos.size());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    Rng rng(derive_seed(seed, "make_splits"));
    rng.shuffle(perm);
    std::vector<DatasetSplit> splits;
    for (double fraction : split_fractions()) {
        DatasetSplit split;
        split.fraction = fraction;
        split.seed = seed;
        const size_t count = round_half_away(fraction * static_cast<double>(demos.size()));
        split.member_ids.reserve(count);
        for (size_t i = 0; i < count; ++i) split.member_ids.push_back(demos[perm[i]].id);
        splits.push_back(std::move(split));
    }
    return splits;
}

inline const DatasetSplit& split_for(const std::vector<DatasetSplit>& splits, double fraction) {
    for (const auto& s : splits)
        if (std::abs(s.fraction - fraction) < 1e-12) return s;
    throw DataError("no split with fraction " + std::to_string(fraction));
}

inline std::vector<Demonstration> select_split(const std::vector<Demonstration>& demos,
                                               const DatasetSplit& split) {
    std::map<std::string, const Demonstration*> by_id;
    for (const auto& d : demos) by_id[d.id] = &d;
    std::vector<Demonstration> out;
    out.reserve(split.member_ids.size());
    for (const auto& id : split.member_ids) {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw DataError("split references unknown demonstration id " + id);
        out.push_back(*it->second);
    }
    return out;
}

// ----------------------------- persistence -----------------------------

inline nlohmann::json to_json(const Demonstration& d) {
    nlohmann::json choices = nlohmann::json::array();
    for (const auto& [label, text] : d.choices) choices.push_back({label, text});
    return {{"id", d.id},
            {"task_id", d.task_id},
            {"instruction", d.instruction},
            {"question", d.question},
            {"choices", choices},
            {"target", d.target},
            {"teacher_answer", d.teacher_answer},
            {"teacher_cot_answer", d.teacher_cot_answer}};
}

inline Demonstration demonstration_from_json(const nlohmann::json& j) {
    Demonstration d;
    d.id = j.value("id", "");
    d.task_id = j.value("task_id", "");
    d.instruction = j.value("instruction", "");
    d.question = j.value("question", "");
    d.target = j.value("target", "");
    d.teacher_answer = j.value("teacher_answer", "");
    d.teacher_cot_answer = j.value("teacher_cot_answer", "");
    if (j.contains("choices"))
        for (const auto& c : j.at("choices"))
            d.choices.emplace_back(c.at(0).get<std::string>(), c.at(1).get<std::string>());
    return d;
}

inline void save_demonstrations(const std::vector<Demonstration>& demos, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    for (const auto& d : demos) out << to_json(d).dump() << '\n';
    if (!out) throw IoError("write failed: " + path);
}

// Validates every record and reports all violations at once.
inline std::vector<Demonstration> load_demonstrations(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open demonstration file: " + path);
    std::vector<Demonstration> demos;
    std::vector<std::string> violations;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        Demonstration d;
        try {
            d = demonstration_from_json(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            violations.push_back("line " + std::to_string(line_no) + ": malformed record (" +
                                 e.what() + ")");
            continue;
        }
        const std::string record = d.id.empty() ? "line " + std::to_string(line_no) : d.id;
        for (const auto& problem : validate_demonstration(d))
            violations.push_back(record + ": " + problem);
        demos.push_back(std::move(d));
    }
    if (!violations.empty()) {
        std::string msg = "invalid demonstration records in " + path + ":";
        for (const auto& v : violations) msg += "\n  " + v;
        throw DataError(msg);
    }
    return demos;
}

inline void save_items(const std::vector<SyntheticItem>& items, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    for (const auto& item : items) {
        nlohmann::json choices = nlohmann::json::array();
        for (const auto& [label, text] : item.choices) choices.push_back({label, text});
        out << nlohmann::json{{"question", item.question},
                              {"choices", choices},
                              {"target", item.target}}
                   .dump()
            << '\n';
    }
    if (!out) throw IoError("write failed: " + path);
}

inline std::vector<SyntheticItem> load_items(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open task file: " + path);
    std::vector<SyntheticItem> items;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("malformed task record at " + path + ":" + std::to_string(line_no) +
                            ": " + e.what());
        }
        SyntheticItem item;
        item.question = j.at("question").get<std::string>();
        item.target = j.at("target").get<std::string>();
        for (const auto& c : j.at("choices"))
            item.choices.emplace_back(c.at(0).get<std::string>(), c.at(1).get<std::string>());
        items.push_back(std::move(item));
    }
    return items;
}

inline void save_splits(const std::vector<DatasetSplit>& splits, const std::string& path) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : splits)
        arr.push_back({{"fraction", s.fraction}, {"seed", s.seed}, {"member_ids", s.member_ids}});
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << nlohmann::json{{"splits", arr}}.dump(2) << '\n';
}

inline std::vector<DatasetSplit> load_splits(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open split manifest: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed split manifest " + path + ": " + e.what());
    }
    std::vector<DatasetSplit> splits;
    for (const auto& s : j.at("splits")) {
        DatasetSplit split;
        split.fraction = s.at("fraction").get<double>();
        split.seed = s.at("seed").get<uint64_t>();
        split.member_ids = s.at("member_ids").get<std::vector<std::string>>();
        splits.push_back(std::move(split));
    }
    return splits;
}

}  // namespace selfrefine::corpus

#pragma once

// Run configuration: INI-style sections mirroring each module's config
// struct, with toy/paper presets, CLI overrides, canonical serialization
// and a content hash used for stage skipping.

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "instruct.hpp"
#include "model.hpp"
#include "refine.hpp"
#include "teacher.hpp"
#include "util.hpp"

namespace selfrefine::cli {

// ----------------------------- ini -----------------------------

struct IniFile {
    // section -> ordered key/value pairs
    std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> sections;

    static IniFile parse(const std::string& text, const std::string& origin = "<config>") {
        IniFile ini;
        std::istringstream in(text);
        std::string line;
        std::string current;
        size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            std::string t = trim(line);
            if (t.empty() || t[0] == '#' || t[0] == ';') continue;
            if (t.front() == '[') {
                if (t.back() != ']')
                    throw ConfigError(origin + ":" + std::to_string(line_no) +
                                      ": malformed section header '" + t + "'");
                current = trim(t.substr(1, t.size() - 2));
                ini.sections.push_back({current, {}});
                continue;
            }
            const size_t eq = t.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(line_no) +
                                  ": expected key = value, got '" + t + "'");
            if (current.empty())
                throw ConfigError(origin + ":" + std::to_string(line_no) +
                                  ": key outside any [section]");
            ini.sections.back().second.emplace_back(trim(t.substr(0, eq)),
                                                    trim(t.substr(eq + 1)));
        }
        return ini;
    }

    static IniFile parse_file(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open config file: " + path);
        std::ostringstream ss;
        ss << in.rdbuf();
        return parse(ss.str(), path);
    }

    const std::vector<std::pair<std::string, std::string>>* section(
        const std::string& name) const {
        for (const auto& [sec, kvs] : sections)
            if (sec == name) return &kvs;
        return nullptr;
    }
};

namespace detail {

inline double to_double(const std::string& s, const std::string& where) {
    try {
        size_t idx = 0;
        const double v = std::stod(s, &idx);
        if (idx != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(where + ": expected a number, got '" + s + "'");
    }
}

inline int64_t to_int(const std::string& s, const std::string& where) {
    try {
        size_t idx = 0;
        const long long v = std::stoll(s, &idx);
        if (idx != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(where + ": expected an integer, got '" + s + "'");
    }
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ',')) {
        const std::string t = trim(item);
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

}  // namespace detail

// ----------------------------- run config -----------------------------

struct TaskConfig {
    std::string id = "match4";
    TaskKind kind = TaskKind::multiple_choice;
    int n_choices = 4;
    int train_n = 2000;
    int test_n = 500;
    std::string instruction;  // empty: the task-kind default header

    corpus::TaskSpec spec() const { return {id, kind, n_choices}; }
};

struct PolicyConfig {
    policy::ModelArch arch{2, 32, 4, 256, 0};
    double temperature = 0.1;       // student sampling default
    int base_warmup_examples = 400; // format warmup for the base phase
    int base_warmup_epochs = 2;
};

struct TeacherConfig {
    std::string kind = "oracle";  // oracle | external
    double annotation_temperature = 0.7;
    teacher::ChatEndpoint endpoint;
    std::string audit_path;  // request/response audit log when non-empty

    teacher::TeacherHandle handle() const {
        teacher::TeacherHandle h;
        h.kind = kind == "external" ? teacher::TeacherHandle::Kind::external
                                    : teacher::TeacherHandle::Kind::oracle;
        h.annotation_temperature = annotation_temperature;
        h.endpoint = endpoint;
        return h;
    }
};

struct EvalConfig {
    int seeds = 5;
    double temperature = 0.1;
    int max_new_tokens = 96;
};

struct RunConfig {
    std::string run_id = "run";
    std::string out_dir = "out";
    uint64_t seed = 42;

    std::vector<TaskConfig> tasks;
    TeacherConfig teacher;
    PolicyConfig policy;
    instruct::InstructConfig instruct;
    refine::RefineConfig refine;
    EvalConfig eval;

    const TaskConfig& task(const std::string& id) const {
        for (const auto& t : tasks)
            if (t.id == id) return t;
        throw ConfigError("no task '" + id + "' in configuration");
    }
};

// CLI flags that override config file values.
struct Overrides {
    std::optional<uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<std::string> variant;   // cot | answer
    std::optional<double> fraction;       // consumed by the CLI stages
    std::optional<std::string> teacher;   // oracle | external
};

namespace detail {

inline void apply_instruct_preset(instruct::InstructConfig& c, const std::string& preset) {
    if (preset == "toy") {
        c.epochs = 2;
        c.learning_rate = 3e-3;
        c.weight_decay = 1e-4;
        c.warmup_ratio = 0.03;
        c.batch_size = 16;
    } else if (preset == "paper") {
        c.epochs = 4;
        c.learning_rate = 2e-5;
        c.weight_decay = 1e-4;
        c.warmup_ratio = 0.03;
        c.batch_size = 16;
    } else {
        throw ConfigError("unknown instruct preset '" + preset + "' (toy|paper)");
    }
}

inline void apply_refine_preset(refine::RefineConfig& c, const std::string& preset) {
    if (preset == "toy") {
        c.learning_rate = 1e-4;
        c.beta = 0.1;
        c.warmup_steps = 20;
        c.batch_size = 16;
        c.max_steps = 150;
    } else if (preset == "paper") {
        c.learning_rate = 1e-6;
        c.beta = 0.1;
        c.warmup_steps = 100;
        c.batch_size = 128;
        c.max_steps = 1000;
    } else {
        throw ConfigError("unknown refine preset '" + preset + "' (toy|paper)");
    }
}

}  // namespace detail

inline RunConfig load_run_config(const IniFile& ini, const Overrides& overrides = {}) {
    RunConfig cfg;
    std::vector<std::string> task_ids;
    TaskConfig task_defaults;

    for (const auto& [sec, kvs] : ini.sections) {
        auto where = [&sec](const std::string& key) { return "[" + sec + "] " + key; };
        if (sec == "run") {
            for (const auto& [k, v] : kvs) {
                if (k == "run_id") cfg.run_id = v;
                else if (k == "out_dir") cfg.out_dir = v;
                else if (k == "seed") cfg.seed = static_cast<uint64_t>(detail::to_int(v, where(k)));
                else throw ConfigError("unknown key '" + k + "' in [run]");
            }
        } else if (sec == "corpus") {
            for (const auto& [k, v] : kvs) {
                if (k == "tasks") task_ids = detail::split_list(v);
                else if (k == "task_id") task_defaults.id = v;
                else if (k == "kind") {
                    if (v == "multiple_choice") task_defaults.kind = TaskKind::multiple_choice;
                    else if (v == "numeric") task_defaults.kind = TaskKind::numeric;
                    else throw ConfigError(where(k) + ": must be multiple_choice|numeric");
                } else if (k == "n_choices")
                    task_defaults.n_choices = static_cast<int>(detail::to_int(v, where(k)));
                else if (k == "train_n")
                    task_defaults.train_n = static_cast<int>(detail::to_int(v, where(k)));
                else if (k == "test_n")
                    task_defaults.test_n = static_cast<int>(detail::to_int(v, where(k)));
                else if (k == "instruction") task_defaults.instruction = v;
                else throw ConfigError("unknown key '" + k + "' in [corpus]");
            }
        } else if (sec == "teacher") {
            for (const auto& [k, v] : kvs) {
                if (k == "kind") cfg.teacher.kind = v;
                else if (k == "annotation_temperature")
                    cfg.teacher.annotation_temperature = detail::to_double(v, where(k));
                else if (k == "host") cfg.teacher.endpoint.host = v;
                else if (k == "port")
                    cfg.teacher.endpoint.port = static_cast<int>(detail::to_int(v, where(k)));
                else if (k == "path") cfg.teacher.endpoint.path = v;
                else if (k == "model") cfg.teacher.endpoint.model = v;
                else if (k == "api_key_env") cfg.teacher.endpoint.api_key_env = v;
                else if (k == "audit_path") cfg.teacher.audit_path = v;
                else throw ConfigError("unknown key '" + k + "' in [teacher]");
            }
        } else if (sec == "policy") {
            for (const auto& [k, v] : kvs) {
                if (k == "layers") cfg.policy.arch.layers = static_cast<int>(detail::to_int(v, where(k)));
                else if (k == "width") cfg.policy.arch.width = static_cast<int>(detail::to_int(v, where(k)));
                else if (k == "heads") cfg.policy.arch.heads = static_cast<int>(detail::to_int(v, where(k)));
                else if (k == "context") cfg.policy.arch.context = static_cast<int>(detail::to_int(v, where(k)));
                else if (k == "temperature") cfg.policy.temperature = detail::to_double(v, where(k));
                else if (k == "base_warmup_examples")
                    cfg.policy.base_warmup_examples = static_cast<int>(detail::to_int(v, where(k)));
                else if (k == "base_warmup_epochs")
                    cfg.policy.base_warmup_epochs = static_cast<int>(detail::to_int(v, where(k)));
                else throw ConfigError("unknown key '" + k + "' in [policy]");
            }
        } else if (sec == "instruct") {
            for (const auto& [k, v] : kvs) {
                if (k == "preset") detail::apply_instruct_preset(cfg.instruct, v);
                else if (k == "epochs") cfg.instruct.epochs = static_cast<int>(detail::to_int(v, where(k)));
                else if (k == "learning_rate") cfg.instruct.learning_rate = detail::to_double(v, where(k));
                else if (k == "weight_decay") cfg.instruct.weight_decay = detail::to_double(v, where(k));
                else if (k == "warmup_ratio") cfg.instruct.warmup_ratio = detail::to_double(v, where(k));
                else if (k == "scheduler") cfg.instruct.scheduler = v;
                else if (k == "batch_size") cfg.instruct.batch_size = static_cast<int>(detail::to_int(v, where(k)));
                else if (k == "target_mode") cfg.instruct.target_mode = v;
                else throw ConfigError("unknown key '" + k + "' in [instruct]");
            }
        } else if (sec == "refine") {
            for (const auto& [k, v] : kvs) {
                if (k == "preset") detail::apply_refine_preset(cfg.refine, v);
                else if (k == "beta") cfg.refine.beta = detail::to_double(v, where(k));
                else if (k == "learning_rate") cfg.refine.learning_rate = detail::to_double(v, where(k));
                else if (k == "warmup_steps") cfg.refine.warmup_steps = static_cast<int>(detail::to_int(v, where(k)));
                else if (k == "batch_size") cfg.refine.batch_size = static_cast<int>(detail::to_int(v, where(k)));
                else if (k == "max_steps") cfg.refine.max_steps = static_cast<int>(detail::to_int(v, where(k)));
                else if (k == "samples_per_demo") cfg.refine.samples_per_demo = static_cast<int>(detail::to_int(v, where(k)));
                else if (k == "sample_temperature") cfg.refine.sample_temperature = detail::to_double(v, where(k));
                else if (k == "variant") cfg.refine.variant = v;
                else if (k == "max_new_tokens_plain") cfg.refine.max_new_tokens_plain = static_cast<int>(detail::to_int(v, where(k)));
                else if (k == "max_new_tokens_cot") cfg.refine.max_new_tokens_cot = static_cast<int>(detail::to_int(v, where(k)));
                else if (k == "val_every") cfg.refine.val_every = static_cast<int>(detail::to_int(v, where(k)));
                else throw ConfigError("unknown key '" + k + "' in [refine]");
            }
        } else if (sec == "eval") {
            for (const auto& [k, v] : kvs) {
                if (k == "seeds") cfg.eval.seeds = static_cast<int>(detail::to_int(v, where(k)));
                else if (k == "temperature") cfg.eval.temperature = detail::to_double(v, where(k));
                else if (k == "max_new_tokens") cfg.eval.max_new_tokens = static_cast<int>(detail::to_int(v, where(k)));
                else throw ConfigError("unknown key '" + k + "' in [eval]");
            }
        } else if (sec.rfind("task:", 0) == 0) {
            // handled in the task pass below
        } else {
            throw ConfigError("unknown config section [" + sec + "]");
        }
    }

    // task list: explicit [task:ID] sections refine the [corpus] defaults
    if (task_ids.empty()) task_ids = {task_defaults.id};
    for (const auto& id : task_ids) {
        TaskConfig t = task_defaults;
        t.id = id;
        if (const auto* kvs = ini.section("task:" + id)) {
            for (const auto& [k, v] : *kvs) {
                auto where = "[task:" + id + "] " + k;
                if (k == "kind") {
                    if (v == "multiple_choice") t.kind = TaskKind::multiple_choice;
                    else if (v == "numeric") t.kind = TaskKind::numeric;
                    else throw ConfigError(where + ": must be multiple_choice|numeric");
                } else if (k == "n_choices") t.n_choices = static_cast<int>(detail::to_int(v, where));
                else if (k == "train_n") t.train_n = static_cast<int>(detail::to_int(v, where));
                else if (k == "test_n") t.test_n = static_cast<int>(detail::to_int(v, where));
                else if (k == "instruction") t.instruction = v;
                else throw ConfigError("unknown key '" + k + "' in [task:" + id + "]");
            }
        }
        cfg.tasks.push_back(t);
    }

    if (overrides.seed) cfg.seed = *overrides.seed;
    if (overrides.out_dir) cfg.out_dir = *overrides.out_dir;
    if (overrides.variant) cfg.refine.variant = *overrides.variant;
    if (overrides.teacher) cfg.teacher.kind = *overrides.teacher;

    // validate early so every command fails the same way
    for (const auto& t : cfg.tasks) t.spec().validate();
    cfg.instruct.validate();
    cfg.refine.validate();
    if (cfg.teacher.kind != "oracle" && cfg.teacher.kind != "external")
        throw ConfigError("[teacher] kind must be oracle|external");
    if (cfg.eval.seeds < 1) throw ConfigError("[eval] seeds must be >= 1");
    if (cfg.policy.base_warmup_examples < 0 || cfg.policy.base_warmup_epochs < 0)
        throw ConfigError("[policy] base warmup settings must be >= 0");
    return cfg;
}

inline RunConfig load_run_config_file(const std::string& path, const Overrides& overrides = {}) {
    return load_run_config(IniFile::parse_file(path), overrides);
}

// Canonical resolved form: fixed section and key order, so equal configs
// serialize identically and the hash is stable.
inline std::string to_ini(const RunConfig& cfg) {
    std::ostringstream out;
    auto num = [](double v) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.10g", v);
        return std::string(buf);
    };
    out << "[run]\n";
    out << "run_id = " << cfg.run_id << "\n";
    out << "out_dir = " << cfg.out_dir << "\n";
    out << "seed = " << cfg.seed << "\n";
    out << "[corpus]\n";
    out << "tasks = ";
    for (size_t i = 0; i < cfg.tasks.size(); ++i) out << (i ? "," : "") << cfg.tasks[i].id;
    out << "\n";
    for (const auto& t : cfg.tasks) {
        out << "[task:" << t.id << "]\n";
        out << "kind = " << (t.kind == TaskKind::multiple_choice ? "multiple_choice" : "numeric")
            << "\n";
        if (t.kind == TaskKind::multiple_choice) out << "n_choices = " << t.n_choices << "\n";
        out << "train_n = " << t.train_n << "\n";
        out << "test_n = " << t.test_n << "\n";
        if (!t.instruction.empty()) out << "instruction = " << t.instruction << "\n";
    }
    out << "[teacher]\n";
    out << "kind = " << cfg.teacher.kind << "\n";
    out << "annotation_temperature = " << num(cfg.teacher.annotation_temperature) << "\n";
    if (cfg.teacher.kind == "external") {
        out << "host = " << cfg.teacher.endpoint.host << "\n";
        out << "port = " << cfg.teacher.endpoint.port << "\n";
        out << "path = " << cfg.teacher.endpoint.path << "\n";
        out << "model = " << cfg.teacher.endpoint.model << "\n";
        out << "api_key_env = " << cfg.teacher.endpoint.api_key_env << "\n";
    }
    if (!cfg.teacher.audit_path.empty()) out << "audit_path = " << cfg.teacher.audit_path << "\n";
    out << "[policy]\n";
    out << "layers = " << cfg.policy.arch.layers << "\n";
    out << "width = " << cfg.policy.arch.width << "\n";
    out << "heads = " << cfg.policy.arch.heads << "\n";
    out << "context = " << cfg.policy.arch.context << "\n";
    out << "temperature = " << num(cfg.policy.temperature) << "\n";
    out << "base_warmup_examples = " << cfg.policy.base_warmup_examples << "\n";
    out << "base_warmup_epochs = " << cfg.policy.base_warmup_epochs << "\n";
    out << "[instruct]\n";
    out << "epochs = " << cfg.instruct.epochs << "\n";
    out << "learning_rate = " << num(cfg.instruct.learning_rate) << "\n";
    out << "weight_decay = " << num(cfg.instruct.weight_decay) << "\n";
    out << "warmup_ratio = " << num(cfg.instruct.warmup_ratio) << "\n";
    out << "scheduler = " << cfg.instruct.scheduler << "\n";
    out << "batch_size = " << cfg.instruct.batch_size << "\n";
    out << "target_mode = " << cfg.instruct.target_mode << "\n";
    out << "[refine]\n";
    out << "beta = " << num(cfg.refine.beta) << "\n";
    out << "learning_rate = " << num(cfg.refine.learning_rate) << "\n";
    out << "warmup_steps = " << cfg.refine.warmup_steps << "\n";
    out << "batch_size = " << cfg.refine.batch_size << "\n";
    out << "max_steps = " << cfg.refine.max_steps << "\n";
    out << "samples_per_demo = " << cfg.refine.samples_per_demo << "\n";
    out << "sample_temperature = " << num(cfg.refine.sample_temperature) << "\n";
    out << "variant = " << cfg.refine.variant << "\n";
    out << "max_new_tokens_plain = " << cfg.refine.max_new_tokens_plain << "\n";
    out << "max_new_tokens_cot = " << cfg.refine.max_new_tokens_cot << "\n";
    out << "val_every = " << cfg.refine.val_every << "\n";
    out << "[eval]\n";
    out << "seeds = " << cfg.eval.seeds << "\n";
    out << "temperature = " << num(cfg.eval.temperature) << "\n";
    out << "max_new_tokens = " << cfg.eval.max_new_tokens << "\n";
    return out.str();
}

inline std::string config_hash(const RunConfig& cfg) {
    return hash_hex(fnv1a64(to_ini(cfg)));
}

}  // namespace selfrefine::cli

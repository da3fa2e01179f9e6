#pragma once

// Stage orchestration behind the CLI: artifact layout, config-hash stage
// skipping, run locking, and the gen-data -> annotate -> tune -> refine ->
// eval -> report flow plus the matrix/curve analyses.
//
// Artifact layout: out_dir/{corpus,checkpoints,pairs,eval,reports}/run_id.
// Every stage writes a stamp keyed by the hash of its config slice and
// input artifacts; a rerun with matching stamp is a no-op.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "config.hpp"
#include "corpus.hpp"
#include "eval.hpp"
#include "instruct.hpp"
#include "policy.hpp"
#include "refine.hpp"
#include "report.hpp"
#include "teacher.hpp"
#include "util.hpp"

namespace selfrefine::cli {

namespace fs = std::filesystem;

// ----------------------------- paths -----------------------------

inline int fraction_pct(double f) {
    const int pct = static_cast<int>(std::lround(f * 100.0));
    if (pct != 100 && pct != 75 && pct != 50 && pct != 25)
        throw ConfigError("fraction must be one of 1.0, 0.75, 0.5, 0.25");
    return pct;
}

struct RunPaths {
    std::string out_dir;
    std::string run_id;

    std::string corpus_dir() const { return out_dir + "/corpus/" + run_id; }
    std::string checkpoints_dir() const { return out_dir + "/checkpoints/" + run_id; }
    std::string pairs_dir() const { return out_dir + "/pairs/" + run_id; }
    std::string eval_dir() const { return out_dir + "/eval/" + run_id; }
    std::string reports_dir() const { return out_dir + "/reports/" + run_id; }
    std::string stamps_dir() const { return out_dir + "/.stamps/" + run_id; }
    std::string lock_path() const { return out_dir + "/.lock-" + run_id; }
    std::string resolved_config() const { return out_dir + "/" + run_id + ".resolved.ini"; }

    std::string tasks_file(const std::string& task, const std::string& split) const {
        return corpus_dir() + "/tasks-" + task + "-" + split + ".jsonl";
    }
    std::string demos_file(const std::string& task, const std::string& split) const {
        return corpus_dir() + "/demos-" + task + "-" + split + ".jsonl";
    }
    std::string quarantine_file(const std::string& task, const std::string& split) const {
        return corpus_dir() + "/quarantine-" + task + "-" + split + ".jsonl";
    }
    std::string splits_file(const std::string& task) const {
        return corpus_dir() + "/splits-" + task + ".json";
    }

    std::string base_ckpt(const std::string& task, uint64_t seed) const {
        return checkpoints_dir() + "/" + task + "/base-s" + std::to_string(seed) + ".ckpt";
    }
    // Refined checkpoint names carry every axis that changes the artifact:
    // variant, source phase, the split fraction and the task whose training
    // split drives the refinement (for the cross setting).
    std::string it_ckpt(const std::string& task, double fraction, uint64_t seed) const {
        return checkpoints_dir() + "/" + task + "/it-f" + std::to_string(fraction_pct(fraction)) +
               "-s" + std::to_string(seed) + ".ckpt";
    }
    std::string refined_ckpt(const std::string& task, double fraction, uint64_t seed,
                             const std::string& variant, bool from_base,
                             const std::string& refine_on) const {
        std::string name = "ref-" + variant + "-f" + std::to_string(fraction_pct(fraction)) +
                           "-s" + std::to_string(seed);
        if (from_base) name += "-frombase";
        if (refine_on != task) name += "-on-" + refine_on;
        return checkpoints_dir() + "/" + task + "/" + name + ".ckpt";
    }
    std::string pairs_file(const std::string& task, double fraction, uint64_t seed,
                           const std::string& variant, bool from_base,
                           const std::string& refine_on) const {
        std::string name = "pairs-" + variant + "-f" + std::to_string(fraction_pct(fraction)) +
                           "-s" + std::to_string(seed);
        if (from_base) name += "-frombase";
        if (refine_on != task) name += "-on-" + refine_on;
        return pairs_dir() + "/" + task + "/" + name + ".jsonl";
    }
    std::string log_for(const std::string& ckpt) const {
        return ckpt.substr(0, ckpt.size() - 5) + ".log.csv";
    }

    std::string results_csv() const { return eval_dir() + "/results.csv"; }
    std::string matrix_csv() const { return eval_dir() + "/matrix.csv"; }
    std::string curve_csv(const std::string& task) const {
        return eval_dir() + "/curve-" + task + ".csv";
    }
};

// ----------------------------- lock -----------------------------

// Directory-based exclusive lock: mkdir is atomic on every platform we care
// about. One command per process per run directory.
class RunLock {
  public:
    explicit RunLock(const std::string& path) : path_(path) {
        fs::create_directories(fs::path(path).parent_path());
        std::error_code ec;
        if (!fs::create_directory(path_, ec) || ec)
            throw LockError("run directory is locked by another command (" + path_ +
                            "); remove it if the previous run crashed");
    }
    ~RunLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

  private:
    std::string path_;
};

// ----------------------------- stamps -----------------------------

inline std::string file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("missing artifact: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return hash_hex(fnv1a64(ss.str()));
}

// ----------------------------- pipeline -----------------------------

class Pipeline {
  public:
    Pipeline(RunConfig cfg, teacher::Transport transport = {}, bool verbose = true)
        : cfg_(std::move(cfg)),
          paths_{cfg_.out_dir, cfg_.run_id},
          vocab_(policy::Vocabulary::standard()),
          transport_(std::move(transport)),
          verbose_(verbose) {}

    const RunConfig& config() const { return cfg_; }
    const RunPaths& paths() const { return paths_; }
    const policy::Vocabulary& vocab() const { return vocab_; }

    void write_resolved_config() {
        fs::create_directories(cfg_.out_dir);
        std::ofstream out(paths_.resolved_config(), std::ios::binary);
        if (!out) throw IoError("cannot write resolved config snapshot");
        out << to_ini(cfg_);
    }

    // ---- gen-data ----
    void gen_data() {
        fs::create_directories(paths_.corpus_dir());
        for (const auto& task : cfg_.tasks) {
            const std::string stamp_name = "gen-" + task.id;
            const std::string h = hash_hex(fnv1a64(
                task_slice(task) + "seed=" + std::to_string(cfg_.seed)));
            if (stamp_ok(stamp_name, h) && fs::exists(paths_.tasks_file(task.id, "train")) &&
                fs::exists(paths_.tasks_file(task.id, "test"))) {
                note("gen-data: " + task.id + " up to date");
                continue;
            }
            // one generation pass keeps train and test disjoint
            const auto items = corpus::gen_synthetic_tasks(
                task.spec(), task.train_n + task.test_n, derive_seed(cfg_.seed, "gen/" + task.id));
            std::vector<corpus::SyntheticItem> train(items.begin(),
                                                     items.begin() + task.train_n);
            std::vector<corpus::SyntheticItem> test(items.begin() + task.train_n, items.end());
            corpus::save_items(train, paths_.tasks_file(task.id, "train"));
            corpus::save_items(test, paths_.tasks_file(task.id, "test"));
            write_stamp(stamp_name, h);
            note("gen-data: " + task.id + " wrote " + std::to_string(train.size()) + " train / " +
                 std::to_string(test.size()) + " test tasks");
        }
    }

    // ---- annotate ----
    void annotate() {
        fs::create_directories(paths_.corpus_dir());
        const teacher::Teacher t = make_teacher();
        for (const auto& task : cfg_.tasks) {
            for (const std::string split : {"train", "test"}) {
                const std::string tasks_path = paths_.tasks_file(task.id, split);
                if (!fs::exists(tasks_path))
                    throw MissingArtifactError("task file " + tasks_path +
                                               " not found; run `gen-data` first");
                const std::string stamp_name = "annotate-" + task.id + "-" + split;
                const std::string h = hash_hex(
                    fnv1a64(teacher_slice() + task_slice(task) + file_hash(tasks_path)));
                if (stamp_ok(stamp_name, h) && fs::exists(paths_.demos_file(task.id, split))) {
                    note("annotate: " + task.id + "/" + split + " up to date");
                    continue;
                }
                const auto items = corpus::load_items(tasks_path);
                auto built = teacher::build_demonstrations(task.spec(), items, t, task.instruction);
                corpus::save_demonstrations(built.demos, paths_.demos_file(task.id, split));
                if (!built.quarantined.empty())
                    teacher::save_quarantine(built.quarantined,
                                             paths_.quarantine_file(task.id, split));
                write_stamp(stamp_name, h);
                note("annotate: " + task.id + "/" + split + " -> " +
                     std::to_string(built.demos.size()) + " demos, " +
                     std::to_string(built.quarantined.size()) + " quarantined");
            }
            // splits over the train demonstrations
            const auto demos = corpus::load_demonstrations(paths_.demos_file(task.id, "train"));
            const auto splits = corpus::make_splits(demos, derive_seed(cfg_.seed, "splits/" + task.id));
            corpus::save_splits(splits, paths_.splits_file(task.id));
        }
    }

    // ---- training stages ----

    std::string ensure_base(const std::string& task_id, uint64_t seed) {
        const std::string ckpt = paths_.base_ckpt(task_id, seed);
        const std::string demos_path = require_demos(task_id, "train");
        const std::string stamp_name = "base-" + task_id + "-s" + std::to_string(seed);
        const std::string h =
            hash_hex(fnv1a64(policy_slice() + file_hash(demos_path) + std::to_string(seed)));
        if (stamp_ok(stamp_name, h) && fs::exists(ckpt)) return ckpt;

        const auto demos = corpus::load_demonstrations(demos_path);
        auto base = policy::init_policy<float>(cfg_.policy.arch, vocab_,
                                               derive_seed(seed, "init/" + task_id));
        const auto examples = warmup_examples(demos, seed);
        instruct::InstructConfig wcfg = cfg_.instruct;
        wcfg.epochs = cfg_.policy.base_warmup_epochs;
        wcfg.weight_decay = 0.0;
        wcfg.seed = derive_seed(seed, "warmup/" + task_id);
        auto result = wcfg.epochs > 0 && !examples.empty()
                          ? instruct::tune_examples(base, examples, wcfg, policy::Phase::base)
                          : instruct::TuneResult<float>{base, {}, false, {}};
        if (result.aborted) throw TrainError("base warmup aborted: " + result.abort_reason);
        save(result.policy, policy::Phase::base, 0, 0.0, ckpt);
        write_stamp(stamp_name, h);
        note("tune: wrote base checkpoint " + ckpt);
        return ckpt;
    }

    std::string ensure_instructed(const std::string& task_id, double fraction, uint64_t seed) {
        const std::string ckpt = paths_.it_ckpt(task_id, fraction, seed);
        const std::string demos_path = require_demos(task_id, "train");
        const std::string base = ensure_base(task_id, seed);
        const std::string stamp_name = "it-" + task_id + "-f" +
                                       std::to_string(fraction_pct(fraction)) + "-s" +
                                       std::to_string(seed);
        const std::string h = hash_hex(fnv1a64(policy_slice() + instruct_slice() +
                                               file_hash(demos_path) + file_hash(base) +
                                               std::to_string(fraction_pct(fraction))));
        if (stamp_ok(stamp_name, h) && fs::exists(ckpt)) return ckpt;

        const auto demos = split_demos(task_id, fraction);
        auto [base_policy, base_meta] = policy::load_checkpoint(base, vocab_, cfg_.policy.arch);
        instruct::InstructConfig icfg = cfg_.instruct;
        icfg.seed = derive_seed(seed, "instruct/" + task_id);
        auto result = instruct::instruction_tune(base_policy, demos, icfg);
        report::write_instruct_log_csv(result.log, paths_.log_for(ckpt));
        if (result.aborted) {
            save(result.policy, policy::Phase::instructed,
                 static_cast<int64_t>(result.log.size()), 0.0, ckpt);
            throw TrainError("instruction tuning aborted (" + result.abort_reason +
                             "); last-good checkpoint at " + ckpt);
        }
        const double final_loss = result.log.empty() ? 0.0 : result.log.back().loss;
        save(result.policy, policy::Phase::instructed, static_cast<int64_t>(result.log.size()),
             final_loss, ckpt);
        write_stamp(stamp_name, h);
        note("tune: wrote instructed checkpoint " + ckpt);
        return ckpt;
    }

    std::string ensure_refined(const std::string& task_id, double fraction, uint64_t seed,
                               bool from_base = false, std::string refine_on = {}) {
        if (refine_on.empty()) refine_on = task_id;
        const std::string variant = cfg_.refine.variant;
        const std::string ckpt =
            paths_.refined_ckpt(task_id, fraction, seed, variant, from_base, refine_on);
        const std::string source = from_base ? ensure_base(task_id, seed)
                                             : ensure_instructed(task_id, fraction, seed);
        const std::string refine_demos_path = require_demos(refine_on, "train");
        const std::string stamp_name =
            "ref-" + task_id + "-" + variant + "-f" + std::to_string(fraction_pct(fraction)) +
            "-s" + std::to_string(seed) + (from_base ? "-frombase" : "") +
            (refine_on != task_id ? "-on-" + refine_on : "");
        const std::string h = hash_hex(fnv1a64(policy_slice() + refine_slice() +
                                               file_hash(source) + file_hash(refine_demos_path) +
                                               std::to_string(fraction_pct(fraction))));
        if (stamp_ok(stamp_name, h) && fs::exists(ckpt)) return ckpt;

        const auto demos = split_demos(refine_on, fraction);
        auto [source_policy, source_meta] = policy::load_checkpoint(source, vocab_, cfg_.policy.arch);
        refine::RefineConfig rcfg = cfg_.refine;
        rcfg.sample_temperature = cfg_.policy.temperature;
        rcfg.seed = derive_seed(seed, "refine/" + task_id + "/" + refine_on);
        auto result = refine::self_refine(source_policy, demos, rcfg);
        const std::string pairs_path =
            paths_.pairs_file(task_id, fraction, seed, variant, from_base, refine_on);
        fs::create_directories(fs::path(pairs_path).parent_path());
        refine::save_pairs(result.build.pairs, pairs_path);
        report::write_refine_log_csv(result.log, paths_.log_for(ckpt));
        if (result.aborted) {
            save(result.policy, policy::Phase::refined, result.selected_step,
                 result.selected_val_loss, ckpt);
            throw TrainError("self-refinement aborted (" + result.abort_reason +
                             "); last-good checkpoint at " + ckpt);
        }
        save(result.policy, policy::Phase::refined, result.selected_step,
             result.selected_val_loss, ckpt);
        write_stamp(stamp_name, h);
        note("refine: wrote refined checkpoint " + ckpt + " (selected step " +
             std::to_string(result.selected_step) + ", " +
             std::to_string(result.build.pairs.size()) + " pairs, " +
             std::to_string(result.build.dropped) + " dropped, " +
             std::to_string(result.build.rejected_correct) + " rejected-correct)");
        return ckpt;
    }

    void tune(std::optional<double> fraction) {
        const double f = fraction.value_or(1.0);
        for (const auto& task : cfg_.tasks) ensure_instructed(task.id, f, cfg_.seed);
    }

    void refine_stage(std::optional<double> fraction) {
        const double f = fraction.value_or(1.0);
        for (const auto& task : cfg_.tasks) ensure_refined(task.id, f, cfg_.seed);
    }

    // ---- evaluation stages ----

    policy::GenerationConfig eval_gen_config() const {
        policy::GenerationConfig gen;
        gen.temperature = cfg_.eval.temperature;
        gen.max_new_tokens = cfg_.eval.max_new_tokens;
        return gen;
    }

    std::optional<policy::PolicyModel<float>> load_policy_if_exists(const std::string& path) const {
        if (!fs::exists(path)) return std::nullopt;
        return policy::load_checkpoint(path, vocab_, cfg_.policy.arch).first;
    }

    // Single-seed in-domain summary over the standard regimes.
    std::vector<eval::AccuracyCell> eval_stage() {
        fs::create_directories(paths_.eval_dir());
        std::vector<eval::AccuracyCell> cells;
        const auto gen = eval_gen_config();
        for (const auto& task : cfg_.tasks) {
            const auto demos = corpus::load_demonstrations(require_demos(task.id, "test"));
            auto eval_ckpt = [&](const std::string& path, eval::Regime regime,
                                 eval::PromptKind kind, const std::string& trained_on) {
                eval::AccuracyCell cell;
                cell.trained_on = trained_on;
                cell.evaluated_on = task.id;
                cell.regime = regime;
                cell.n = demos.size();
                cell.seeds = 1;
                auto pol = load_policy_if_exists(path);
                if (!pol) {
                    cell.present = false;
                    cells.push_back(cell);
                    return;
                }
                policy::GenerationConfig g = gen;
                g.seed = derive_seed(cfg_.seed, "eval/" + task.id + "/" +
                                                    eval::regime_name(regime));
                cell.accuracy = eval::evaluate(*pol, demos, kind, g).accuracy;
                cells.push_back(cell);
            };
            const std::string base = ensure_base(task.id, cfg_.seed);
            eval_ckpt(base, eval::Regime::baseline, eval::PromptKind::standard, "-");
            eval_ckpt(base, eval::Regime::baseline_cot, eval::PromptKind::cot, "-");
            eval_ckpt(paths_.it_ckpt(task.id, 1.0, cfg_.seed), eval::Regime::instruction_tuning,
                      eval::PromptKind::cot, task.id);
            eval_ckpt(paths_.refined_ckpt(task.id, 1.0, cfg_.seed, cfg_.refine.variant, false,
                                          task.id),
                      eval::Regime::self_refine, eval::PromptKind::cot, task.id);
        }
        report::write_matrix_csv(cells, paths_.results_csv());
        note("eval: wrote " + paths_.results_csv());
        return cells;
    }

    std::vector<uint64_t> analysis_seeds() const {
        std::vector<uint64_t> seeds;
        for (int i = 0; i < cfg_.eval.seeds; ++i)
            seeds.push_back(derive_seed(cfg_.seed, "analysis_seed", static_cast<uint64_t>(i)));
        return seeds;
    }

    // Full grid including the cross setting; trains whatever is missing.
    std::vector<eval::AccuracyCell> matrix_stage() {
        fs::create_directories(paths_.eval_dir());
        const auto seeds = analysis_seeds();
        std::vector<std::string> ids;
        for (const auto& t : cfg_.tasks) ids.push_back(t.id);

        for (const auto& train_task : ids) {
            for (uint64_t seed : seeds) {
                ensure_instructed(train_task, 1.0, seed);
                ensure_refined(train_task, 1.0, seed);
                for (const auto& eval_task : ids)
                    if (eval_task != train_task)
                        ensure_refined(train_task, 1.0, seed, false, eval_task);
            }
        }

        eval::MatrixSpec spec;
        spec.train_tasks = ids;
        spec.eval_tasks = ids;
        spec.regimes = {eval::Regime::baseline, eval::Regime::baseline_cot,
                        eval::Regime::instruction_tuning, eval::Regime::self_refine,
                        eval::Regime::cross_self_refine};
        spec.seeds = seeds;
        const auto cells = eval::cross_matrix(spec, matrix_sources());
        report::write_matrix_csv(cells, paths_.matrix_csv());
        note("matrix: wrote " + paths_.matrix_csv());
        return cells;
    }

    eval::MatrixSources matrix_sources() {
        eval::MatrixSources sources;
        sources.gen_config = eval_gen_config();
        sources.test_demos = [this](const std::string& task) {
            return corpus::load_demonstrations(require_demos(task, "test"));
        };
        sources.policy_for = [this](const std::string& trained_on, eval::Regime regime,
                                    uint64_t seed, const std::string& evaluated_on)
            -> std::optional<policy::PolicyModel<float>> {
            switch (regime) {
                case eval::Regime::baseline:
                case eval::Regime::baseline_cot:
                    return load_policy_if_exists(paths_.base_ckpt(evaluated_on, seed));
                case eval::Regime::instruction_tuning:
                    return load_policy_if_exists(paths_.it_ckpt(trained_on, 1.0, seed));
                case eval::Regime::self_refine:
                    return load_policy_if_exists(paths_.refined_ckpt(
                        trained_on, 1.0, seed, cfg_.refine.variant, false, trained_on));
                case eval::Regime::cross_self_refine:
                    return load_policy_if_exists(paths_.refined_ckpt(
                        trained_on, 1.0, seed, cfg_.refine.variant, false, evaluated_on));
            }
            return std::nullopt;
        };
        return sources;
    }

    // Low-resource curve for one task; trains missing checkpoints.
    std::vector<eval::CurveRow> curve_stage_for(const std::string& task_id) {
        fs::create_directories(paths_.eval_dir());
        const auto seeds = analysis_seeds();
        const std::vector<double> fractions = corpus::split_fractions();
        for (double f : fractions) {
            for (uint64_t seed : seeds) {
                ensure_instructed(task_id, f, seed);
                ensure_refined(task_id, f, seed, false);
                ensure_refined(task_id, f, seed, true);
            }
        }
        eval::CurveSources sources;
        sources.gen_config = eval_gen_config();
        sources.test_demos = [this, task_id]() {
            return corpus::load_demonstrations(require_demos(task_id, "test"));
        };
        sources.policy_for = [this, task_id](double fraction, eval::CurveRegime regime,
                                             uint64_t seed)
            -> std::optional<policy::PolicyModel<float>> {
            switch (regime) {
                case eval::CurveRegime::it_only:
                    return load_policy_if_exists(paths_.it_ckpt(task_id, fraction, seed));
                case eval::CurveRegime::refine_only:
                    return load_policy_if_exists(paths_.refined_ckpt(
                        task_id, fraction, seed, cfg_.refine.variant, true, task_id));
                case eval::CurveRegime::it_refine:
                    return load_policy_if_exists(paths_.refined_ckpt(
                        task_id, fraction, seed, cfg_.refine.variant, false, task_id));
            }
            return std::nullopt;
        };
        const auto rows = eval::low_resource_curve(
            fractions,
            {eval::CurveRegime::it_only, eval::CurveRegime::refine_only,
             eval::CurveRegime::it_refine},
            seeds, sources);
        report::write_curve_csv(rows, paths_.curve_csv(task_id));
        note("curve: wrote " + paths_.curve_csv(task_id));
        return rows;
    }

    void curve_stage() {
        for (const auto& task : cfg_.tasks) curve_stage_for(task.id);
    }

    // ---- report ----
    void report_stage() {
        std::vector<eval::AccuracyCell> cells;
        if (fs::exists(paths_.matrix_csv())) cells = read_matrix_csv(paths_.matrix_csv());
        else if (fs::exists(paths_.results_csv())) cells = read_matrix_csv(paths_.results_csv());
        std::vector<eval::CurveRow> curves;
        for (const auto& task : cfg_.tasks) {
            const std::string p = paths_.curve_csv(task.id);
            if (fs::exists(p)) {
                const auto rows = read_curve_csv(p);
                curves.insert(curves.end(), rows.begin(), rows.end());
            }
        }
        if (cells.empty() && curves.empty())
            throw MissingArtifactError("no evaluation results under " + paths_.eval_dir() +
                                       "; run `eval`, `matrix` or `curve` first");
        const auto files = report::emit_report(cells, curves, paths_.reports_dir());
        for (const auto& f : files) note("report: wrote " + f);
    }

    void run_pipeline() {
        gen_data();
        annotate();
        tune(1.0);
        refine_stage(1.0);
        eval_stage();
        report_stage();
    }

    // ---- shared helpers ----

    teacher::Teacher make_teacher() const {
        const auto handle = cfg_.teacher.handle();
        if (handle.kind == teacher::TeacherHandle::Kind::oracle)
            return teacher::Teacher(handle);
        if (!transport_)
            throw ConfigError(
                "external teacher requires a transport; the CLI wires the HTTP one from "
                "pipeline_net.hpp");
        return teacher::Teacher(handle, teacher::ChatClient(handle.endpoint, transport_, 3,
                                                            cfg_.teacher.audit_path));
    }

    std::vector<corpus::Demonstration> split_demos(const std::string& task_id, double fraction) {
        const auto demos = corpus::load_demonstrations(require_demos(task_id, "train"));
        if (fraction_pct(fraction) == 100) return demos;
        const std::string manifest = paths_.splits_file(task_id);
        if (!fs::exists(manifest))
            throw MissingArtifactError("split manifest " + manifest +
                                       " not found; run `annotate` first");
        const auto splits = corpus::load_splits(manifest);
        return corpus::select_split(demos, corpus::split_for(splits, fraction));
    }

  private:
    std::string require_demos(const std::string& task_id, const std::string& split) const {
        const std::string path = paths_.demos_file(task_id, split);
        if (!fs::exists(path))
            throw MissingArtifactError("demonstrations for task '" + task_id + "' (" + split +
                                       ") not found at " + path + "; run `annotate` first");
        return path;
    }

    // Format warmup: the base phase learns to answer in the task's output
    // format with labels drawn uniformly at random, independent of the
    // question, so its accuracy sits at chance level.
    std::vector<instruct::TrainExample> warmup_examples(
        const std::vector<corpus::Demonstration>& demos, uint64_t seed) const {
        std::vector<instruct::TrainExample> out;
        if (demos.empty() || cfg_.policy.base_warmup_examples == 0) return out;
        Rng rng(derive_seed(seed, "warmup_labels"));
        for (int i = 0; i < cfg_.policy.base_warmup_examples; ++i) {
            const corpus::Demonstration& d = demos[static_cast<size_t>(i) % demos.size()];
            std::string answer;
            if (d.kind() == TaskKind::multiple_choice) {
                const size_t pick = rng.next_below(d.choices.size());
                answer = d.choices[pick].first;
            } else {
                answer = std::to_string(rng.next_int(2, 99));
            }
            instruct::TrainExample ex;
            ex.id = d.id + "#warmup" + std::to_string(i);
            ex.prompt =
                policy::make_prompt_tokens(vocab_, corpus::render_prompt(d, i % 2 == 1));
            ex.answer = policy::make_answer_tokens(vocab_, answer);
            out.push_back(std::move(ex));
        }
        return out;
    }

    void save(const policy::PolicyModel<float>& pol, policy::Phase phase, int64_t step,
              double val_loss, const std::string& path) {
        fs::create_directories(fs::path(path).parent_path());
        policy::PolicyModel<float> tagged = pol;
        tagged.phase = phase;
        policy::CheckpointMeta meta{phase, step, val_loss, config_hash(cfg_)};
        policy::save_checkpoint(tagged, meta, path);
    }

    bool stamp_ok(const std::string& name, const std::string& hash) const {
        std::ifstream in(paths_.stamps_dir() + "/" + name + ".stamp");
        if (!in) return false;
        std::string stored;
        std::getline(in, stored);
        return stored == hash;
    }

    void write_stamp(const std::string& name, const std::string& hash) {
        fs::create_directories(paths_.stamps_dir());
        std::ofstream out(paths_.stamps_dir() + "/" + name + ".stamp", std::ios::binary);
        out << hash << '\n';
    }

    // config slices entering stage hashes
    std::string task_slice(const TaskConfig& t) const {
        return "task=" + t.id + ";kind=" + (t.kind == TaskKind::multiple_choice ? "mc" : "num") +
               ";k=" + std::to_string(t.n_choices) + ";train=" + std::to_string(t.train_n) +
               ";test=" + std::to_string(t.test_n) + ";inst=" + t.instruction + ";";
    }
    std::string teacher_slice() const {
        return "teacher=" + cfg_.teacher.kind + ";temp=" +
               std::to_string(cfg_.teacher.annotation_temperature) + ";model=" +
               cfg_.teacher.endpoint.model + ";";
    }
    std::string policy_slice() const {
        std::ostringstream s;
        s << "arch=" << cfg_.policy.arch.layers << "x" << cfg_.policy.arch.width << "h"
          << cfg_.policy.arch.heads << "c" << cfg_.policy.arch.context
          << ";warmup=" << cfg_.policy.base_warmup_examples << "x"
          << cfg_.policy.base_warmup_epochs << ";";
        return s.str();
    }
    std::string instruct_slice() const {
        std::ostringstream s;
        s << "it=" << cfg_.instruct.epochs << "," << cfg_.instruct.learning_rate << ","
          << cfg_.instruct.weight_decay << "," << cfg_.instruct.warmup_ratio << ","
          << cfg_.instruct.batch_size << "," << cfg_.instruct.target_mode << ";";
        return s.str();
    }
    std::string refine_slice() const {
        std::ostringstream s;
        s << "dpo=" << cfg_.refine.beta << "," << cfg_.refine.learning_rate << ","
          << cfg_.refine.warmup_steps << "," << cfg_.refine.batch_size << ","
          << cfg_.refine.max_steps << "," << cfg_.refine.samples_per_demo << ","
          << cfg_.refine.sample_temperature << "," << cfg_.refine.variant << ","
          << cfg_.refine.max_new_tokens_plain << "," << cfg_.refine.max_new_tokens_cot << ","
          << cfg_.refine.val_every << ";";
        return s.str();
    }

    void note(const std::string& msg) const {
        if (verbose_) std::cout << msg << std::endl;
    }

    // CSV readers for the report stage (own schema only)
    static std::vector<std::string> csv_fields(const std::string& line) {
        std::vector<std::string> fields;
        std::string cur;
        for (char c : line) {
            if (c == ',') {
                fields.push_back(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        fields.push_back(cur);
        return fields;
    }

    static std::vector<eval::AccuracyCell> read_matrix_csv(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open " + path);
        std::vector<eval::AccuracyCell> cells;
        std::string line;
        std::getline(in, line);  // header
        while (std::getline(in, line)) {
            if (trim(line).empty()) continue;
            const auto f = csv_fields(line);
            if (f.size() != 6) throw DataError("unexpected matrix row in " + path + ": " + line);
            eval::AccuracyCell c;
            c.trained_on = f[0];
            c.evaluated_on = f[1];
            if (f[2] == "baseline") c.regime = eval::Regime::baseline;
            else if (f[2] == "baseline_cot") c.regime = eval::Regime::baseline_cot;
            else if (f[2] == "instruction_tuning") c.regime = eval::Regime::instruction_tuning;
            else if (f[2] == "self_refine") c.regime = eval::Regime::self_refine;
            else if (f[2] == "cross_self_refine") c.regime = eval::Regime::cross_self_refine;
            else throw DataError("unknown regime '" + f[2] + "' in " + path);
            c.present = !f[3].empty();
            if (c.present) {
                c.accuracy = std::stod(f[3]);
                c.stderr_pct = std::stod(f[4]);
                c.n = static_cast<size_t>(std::stoull(f[5]));
            }
            cells.push_back(c);
        }
        return cells;
    }

    static std::vector<eval::CurveRow> read_curve_csv(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open " + path);
        std::vector<eval::CurveRow> rows;
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            if (trim(line).empty()) continue;
            const auto f = csv_fields(line);
            if (f.size() != 5) throw DataError("unexpected curve row in " + path + ": " + line);
            eval::CurveRow r;
            r.fraction = std::stod(f[0]);
            if (f[1] == "it_only") r.regime = eval::CurveRegime::it_only;
            else if (f[1] == "refine_only") r.regime = eval::CurveRegime::refine_only;
            else if (f[1] == "it_refine") r.regime = eval::CurveRegime::it_refine;
            else throw DataError("unknown curve regime '" + f[1] + "' in " + path);
            r.present = !f[2].empty();
            if (r.present) {
                r.accuracy = std::stod(f[2]);
                r.stderr_pct = std::stod(f[3]);
                r.n = static_cast<size_t>(std::stoull(f[4]));
            }
            rows.push_back(r);
        }
        return rows;
    }

    RunConfig cfg_;
    RunPaths paths_;
    policy::Vocabulary vocab_;
    teacher::Transport transport_;
    bool verbose_;
};

}  // namespace selfrefine::cli

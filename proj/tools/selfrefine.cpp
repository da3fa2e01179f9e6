// Command-line front end for the two-phase training pipeline:
// gen-data -> annotate -> tune -> refine -> eval -> report, plus the
// cross-task matrix and low-resource curve analyses.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "selfrefine/pipeline.hpp"
#include "selfrefine/pipeline_net.hpp"

namespace {

constexpr const char* kExitCodeHelp =
    "Exit codes:\n"
    "  0  success\n"
    "  2  configuration error\n"
    "  3  data validation error\n"
    "  4  I/O error\n"
    "  5  missing upstream artifact (the error names the producing command)\n"
    "  6  training / numeric error\n"
    "  7  run directory locked by another command\n"
    "  8  annotation / external service error\n"
    "  9  checkpoint error\n"
    "  1  unexpected failure\n";

struct CommonOptions {
    std::string config_path = "configs/toy.ini";
    std::optional<uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<std::string> variant;
    std::optional<double> fraction;
    std::optional<std::string> teacher;
    bool quiet = false;
};

void add_common(CLI::App* cmd, CommonOptions& opts) {
    cmd->add_option("--config", opts.config_path, "Run configuration file (INI)")
        ->capture_default_str();
    cmd->add_option("--seed", opts.seed, "Override the global seed");
    cmd->add_option("--out", opts.out_dir, "Override the output directory");
    cmd->add_option("--variant", opts.variant, "Preference-pair variant")
        ->check(CLI::IsMember({"cot", "answer"}));
    cmd->add_option("--fraction", opts.fraction, "Demonstration fraction for tune/refine")
        ->check(CLI::IsMember(std::vector<double>{1.0, 0.75, 0.5, 0.25}));
    cmd->add_option("--teacher", opts.teacher, "Teacher kind")
        ->check(CLI::IsMember({"oracle", "external"}));
    cmd->add_flag("--quiet", opts.quiet, "Suppress progress output");
}

int run_command(const std::string& name, const CommonOptions& opts) {
    selfrefine::cli::Overrides overrides;
    overrides.seed = opts.seed;
    overrides.out_dir = opts.out_dir;
    overrides.variant = opts.variant;
    overrides.fraction = opts.fraction;
    overrides.teacher = opts.teacher;
    auto cfg = selfrefine::cli::load_run_config_file(opts.config_path, overrides);

    selfrefine::cli::Pipeline pipeline(cfg, selfrefine::cli::default_transport(), !opts.quiet);
    selfrefine::cli::RunLock lock(pipeline.paths().lock_path());
    pipeline.write_resolved_config();

    if (name == "gen-data") pipeline.gen_data();
    else if (name == "annotate") pipeline.annotate();
    else if (name == "tune") pipeline.tune(opts.fraction);
    else if (name == "refine") pipeline.refine_stage(opts.fraction);
    else if (name == "eval") pipeline.eval_stage();
    else if (name == "matrix") pipeline.matrix_stage();
    else if (name == "curve") pipeline.curve_stage();
    else if (name == "report") pipeline.report_stage();
    else if (name == "pipeline") pipeline.run_pipeline();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Two-phase instruction-tuning + DPO self-refinement pipeline for a toy "
                 "causal language model"};
    app.footer(kExitCodeHelp);
    app.require_subcommand(1);

    const std::vector<std::pair<std::string, std::string>> commands = {
        {"gen-data", "Generate synthetic task files"},
        {"annotate", "Produce teacher demonstrations and splits"},
        {"tune", "Base format warmup + instruction-tuning"},
        {"refine", "Self-refinement with DPO over self-sampled responses"},
        {"eval", "Evaluate baseline/instructed/refined checkpoints"},
        {"matrix", "In-domain / out-domain / cross accuracy matrix"},
        {"curve", "Low-resource accuracy curve over split fractions"},
        {"report", "Emit CSV + SVG report files"},
        {"pipeline", "Run gen-data, annotate, tune, refine, eval, report"},
    };
    std::vector<std::unique_ptr<CommonOptions>> option_blocks;
    for (const auto& [name, desc] : commands) {
        auto opts = std::make_unique<CommonOptions>();
        add_common(app.add_subcommand(name, desc), *opts);
        option_blocks.push_back(std::move(opts));
    }

    CLI11_PARSE(app, argc, argv);

    std::string chosen;
    const CommonOptions* opts = nullptr;
    for (size_t i = 0; i < commands.size(); ++i) {
        if (app.get_subcommand(commands[i].first)->parsed()) {
            chosen = commands[i].first;
            opts = option_blocks[i].get();
        }
    }
    if (!opts) {
        std::cerr << "no command selected\n";
        return 2;
    }

    try {
        return run_command(chosen, *opts);
    } catch (const selfrefine::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const selfrefine::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const selfrefine::LengthError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const selfrefine::IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return 4;
    } catch (const selfrefine::MissingArtifactError& e) {
        std::cerr << "missing artifact: " << e.what() << "\n";
        return 5;
    } catch (const selfrefine::TrainError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return 6;
    } catch (const selfrefine::LockError& e) {
        std::cerr << "lock error: " << e.what() << "\n";
        return 7;
    } catch (const selfrefine::AnnotationError& e) {
        std::cerr << "annotation error: " << e.what() << "\n";
        return 8;
    } catch (const selfrefine::CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return 9;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

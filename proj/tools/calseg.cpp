// Command-line driver for the calseg pipeline, built on the C API only.

#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "calseg/calseg.h"

namespace {

struct RunDeleter {
    void operator()(calseg_run* r) const { calseg_run_destroy(r); }
};
using RunHandle = std::unique_ptr<calseg_run, RunDeleter>;

struct CommonOpts {
    std::string config_file;
    std::vector<std::string> sets;
    std::string out_dir;
    std::string seed;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_file, "config file (key = value lines)");
    cmd->add_option("--set", opts.sets, "override a config key, e.g. --set calib.alpha=0")
        ->take_all();
    cmd->add_option("-o,--out", opts.out_dir, "run directory (config key out_dir)");
    cmd->add_option("--seed", opts.seed, "root seed (config key seed)");
}

int fail(calseg_run* run, const char* what) {
    std::fprintf(stderr, "calseg %s: %s\n", what, calseg_run_last_error(run));
    return 1;
}

int apply_common(calseg_run* run, const CommonOpts& opts) {
    if (!opts.config_file.empty() &&
        calseg_run_load_config(run, opts.config_file.c_str()) != CALSEG_OK) {
        return fail(run, "config");
    }
    for (const auto& kv : opts.sets) {
        const auto pos = kv.find('=');
        if (pos == std::string::npos) {
            std::fprintf(stderr, "calseg: --set expects key=value, got '%s'\n", kv.c_str());
            return 1;
        }
        if (calseg_run_set(run, kv.substr(0, pos).c_str(), kv.substr(pos + 1).c_str()) !=
            CALSEG_OK) {
            return fail(run, "config");
        }
    }
    if (!opts.out_dir.empty() && calseg_run_set(run, "out_dir", opts.out_dir.c_str()) != CALSEG_OK) {
        return fail(run, "config");
    }
    if (!opts.seed.empty() && calseg_run_set(run, "seed", opts.seed.c_str()) != CALSEG_OK) {
        return fail(run, "config");
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Calibration-guided source-free domain adaptation on synthetic "
                 "two-domain segmentation data"};
    app.require_subcommand(1);
    app.set_version_flag("--version", calseg_version());

    CommonOpts opts;
    bool force = false;
    std::string checkpoint, split = "target_test", eval_name;
    std::string runs_root;
    bool show_schema = false;

    auto* generate = app.add_subcommand("generate", "generate the source/target datasets");
    add_common(generate, opts);
    generate->add_flag("--force", force, "overwrite an existing data directory");

    auto* train_source = app.add_subcommand("train-source", "source pre-training");
    add_common(train_source, opts);
    train_source->add_flag("--schema", show_schema, "print the config schema and exit");

    auto* select_source =
        app.add_subcommand("select-source", "pick the checkpoint with the best validation ECE");
    add_common(select_source, opts);

    auto* train_valuenet =
        app.add_subcommand("train-valuenet", "train the per-image ECE estimator");
    add_common(train_valuenet, opts);

    auto* adapt = app.add_subcommand("adapt", "calibration-guided target self-training");
    add_common(adapt, opts);

    auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on a dataset split");
    add_common(evaluate, opts);
    evaluate->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    evaluate->add_option("--split", split,
                         "source_train | source_val | target_train | target_test");
    evaluate->add_option("--name", eval_name, "output name under eval/")->required();

    auto* report = app.add_subcommand("report", "aggregate runs into a summary table and plots");
    report->add_option("runs_root", runs_root, "directory containing run directories")
        ->required();

    CLI11_PARSE(app, argc, argv);

    if (show_schema) {
        std::fputs(calseg_config_schema(), stdout);
        return 0;
    }

    calseg_run* raw = nullptr;
    if (calseg_run_create(&raw) != CALSEG_OK || !raw) {
        std::fprintf(stderr, "calseg: cannot create run handle\n");
        return 1;
    }
    RunHandle run(raw);

    if (report->parsed()) {
        if (calseg_run_report(run.get(), runs_root.c_str()) != CALSEG_OK) {
            return fail(run.get(), "report");
        }
        std::printf("report written to %s/report\n", runs_root.c_str());
        return 0;
    }

    if (int rc = apply_common(run.get(), opts); rc != 0) return rc;

    calseg_status status = CALSEG_OK;
    const char* what = "";
    if (generate->parsed()) {
        what = "generate";
        status = calseg_run_generate(run.get(), force ? 1 : 0);
    } else if (train_source->parsed()) {
        what = "train-source";
        status = calseg_run_train_source(run.get());
    } else if (select_source->parsed()) {
        what = "select-source";
        status = calseg_run_select_source(run.get());
    } else if (train_valuenet->parsed()) {
        what = "train-valuenet";
        status = calseg_run_train_valuenet(run.get());
    } else if (adapt->parsed()) {
        what = "adapt";
        status = calseg_run_adapt(run.get());
    } else if (evaluate->parsed()) {
        what = "evaluate";
        status = calseg_run_evaluate(run.get(), checkpoint.c_str(), split.c_str(),
                                     eval_name.c_str());
    }
    if (status != CALSEG_OK) return fail(run.get(), what);
    std::printf("%s: done\n", what);
    return 0;
}

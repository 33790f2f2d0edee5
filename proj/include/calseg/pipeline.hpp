#pragma once

#include <filesystem>
#include <string>

#include "calseg/config.hpp"

namespace calseg {

// Artifact layout inside a run directory.
struct RunPaths {
    std::filesystem::path root;

    explicit RunPaths(std::filesystem::path r) : root(std::move(r)) {}
    std::filesystem::path config_echo() const { return root / "config_resolved.txt"; }
    std::filesystem::path data_dir() const { return root / "data"; }
    std::filesystem::path dataset(const std::string& split) const { return data_dir() / split; }
    std::filesystem::path source_dir() const { return root / "source"; }
    std::filesystem::path valuenet_dir() const { return root / "valuenet"; }
    std::filesystem::path adapt_dir() const { return root / "adapt"; }
    std::filesystem::path eval_dir(const std::string& name) const { return root / "eval" / name; }
    std::filesystem::path source_selected() const { return source_dir() / "selected.ckpt"; }
    std::filesystem::path valuenet_selected() const { return valuenet_dir() / "selected.ckpt"; }
    std::filesystem::path adapt_selected() const { return adapt_dir() / "selected.ckpt"; }
};

void cmd_generate(const RunConfig& cfg, bool force);
void cmd_train_source(const RunConfig& cfg);
void cmd_select_source(const RunConfig& cfg);
void cmd_train_valuenet(const RunConfig& cfg);
void cmd_adapt(const RunConfig& cfg);

struct EvalSummary {
    std::string checkpoint;
    std::string stage;
    std::string split;
    int n_images = 0;
    double miou = 0;
    double ece_mean = 0, ece_max = 0, ece_min = 0;
    double ece_pooled = 0;
};
// Evaluates a checkpoint on a dataset split and writes the per-class IoU
// table, dataset ECE and reliability diagram under eval/<name>/.
EvalSummary cmd_evaluate(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                         const std::string& split, const std::string& name);

// Aggregates evaluation results of all runs under runs_root into an
// alpha-sweep summary table and SVG plots inside runs_root/report/.
void cmd_report(const std::filesystem::path& runs_root);

}  // namespace calseg

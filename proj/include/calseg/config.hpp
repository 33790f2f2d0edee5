#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "calseg/calibration.hpp"
#include "calseg/datagen.hpp"

namespace calseg {

// SGD hyperparameters shared by the training stages.
struct SgdConfig {
    int epochs = 0;
    int batch = 4;
    double lr = 5e-4;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double poly_power = 0.9;
};

struct SourceConfig : SgdConfig {
    int ece_warmup_epochs = 2;  // epochs of pure cross-entropy before the
                                // calibration loss joins
    bool flip = true;           // horizontal-flip augmentation
};

struct ValueNetConfig : SgdConfig {};

struct TargetConfig : SgdConfig {
    double delta = 0.15;   // pseudo-label selection ratio
    double epsilon = 0.1;  // weight of the weighted CE inside the SCE loss
    double eta = 0.005;    // weight of the entropy regularizer
    int rounds = 3;
    int epochs_per_round = 4;  // first epoch of each round is the statistic warm-up
};

// Fully resolved run configuration. Every key has a documented default; the
// parser rejects unknown keys. See config_schema_text() for the reference.
struct RunConfig {
    std::uint64_t seed = 1;
    std::string out_dir = "runs/default";

    int height = 64;
    int width = 64;
    int classes = 5;
    int source_images = 240;
    int target_images = 300;
    double source_val_fraction = 1.0 / 6.0;   // 240 -> 200 train / 40 val
    double target_test_fraction = 1.0 / 3.0;  // 300 -> 200 train / 100 test
    std::vector<double> class_freq = {0.55, 0.25, 0.12, 0.06, 0.02};
    std::vector<std::array<double, 3>> palette = {
        {0.52, 0.52, 0.55}, {0.85, 0.25, 0.22}, {0.20, 0.42, 0.85},
        {0.92, 0.82, 0.25}, {0.25, 0.78, 0.38}};
    std::vector<double> palette_noise = {0.03, 0.03, 0.03, 0.03, 0.03};
    DomainShift shift = {0.15, 0.1, 0.05};

    std::vector<int> model_widths = {16, 32, 32, 32};
    int model_tap = 3;  // value net taps the activations after this block

    CalibConfig calib;
    SourceConfig source;
    ValueNetConfig valuenet;
    TargetConfig target;

    RunConfig();
    void validate() const;

    // Derived domain specs: both domains share the layout process and differ
    // only in the appearance shift (the target additionally has its own
    // image count).
    DomainSpec source_spec() const;
    DomainSpec target_spec() const;

    std::filesystem::path run_dir() const { return out_dir; }
};

// key = value lines; '#' starts a comment. Unknown keys are rejected.
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);
void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value);
// Fully resolved echo of the configuration, in schema order.
std::string serialize_config(const RunConfig& cfg);
// One line per key: "key  default  documentation".
std::string config_schema_text();

}  // namespace calseg

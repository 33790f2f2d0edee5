#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "calseg/model.hpp"

namespace calseg {

// Container behind the "CALCKPT1" checkpoint file: named float32 parameter
// arrays (BatchNorm running statistics included) plus a metrics block.
// load(save(m)) restores a model that produces bit-identical forward passes.
struct Checkpoint {
    struct Array {
        std::string name;
        std::vector<int> shape;
        std::vector<float> values;
    };

    std::uint32_t version = 1;
    std::string stage;
    std::vector<Array> arrays;
    std::vector<std::pair<std::string, double>> metrics;

    const Array* find(const std::string& name) const;
    double metric(const std::string& name) const;
    bool has_metric(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Snapshot model state into checkpoint arrays / restore it back by name.
void store_model(Checkpoint& ckpt, SegModel<float>& model);
void store_model(Checkpoint& ckpt, ValueNet<float>& net);
void restore_model(const Checkpoint& ckpt, SegModel<float>& model);
void restore_model(const Checkpoint& ckpt, ValueNet<float>& net);
bool checkpoint_has_valuenet(const Checkpoint& ckpt);

// FNV-1a over the raw bytes of parameters whose name passes the filter;
// buffers (running statistics) are excluded unless include_buffers is set.
template <class T, class Net>
std::uint64_t state_checksum(Net& net, bool include_buffers,
                             const std::function<bool(const std::string&)>& name_filter = {});

}  // namespace calseg

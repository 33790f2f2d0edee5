#pragma once

#include <functional>
#include <vector>

#include "calseg/calibration.hpp"
#include "calseg/config.hpp"
#include "calseg/datagen.hpp"
#include "calseg/model.hpp"

namespace calseg {

// Mean pixel-level cross-entropy over non-ignored pixels; labels use 255 as
// the ignore sentinel. Throws if every pixel is ignored.
template <class T>
ad::Tensor<T> seg_loss(const ad::Tensor<T>& logits, const std::vector<int>& labels);

double poly_lr(double base, std::int64_t iter, std::int64_t max_iter, double power);

// Plain SGD with momentum, weight decay and polynomial learning-rate decay.
// Only parameters whose requires_grad flag is set are updated, so the stage
// masks double as the optimizer's parameter filter.
template <class T>
class SgdOptimizer {
public:
    SgdOptimizer(std::vector<ParamRef<T>> params, const SgdConfig& cfg, std::int64_t max_iter);
    void zero_grad();
    void step();
    std::int64_t iter() const { return iter_; }
    double current_lr() const;

private:
    std::vector<ParamRef<T>> params_;
    std::vector<std::vector<T>> velocity_;
    SgdConfig cfg_;
    std::int64_t max_iter_ = 1;
    std::int64_t iter_ = 0;
};

struct EceStats {
    double mean = 0, max = 0, min = 0;
    double criterion() const { return mean + max + min; }
};
EceStats ece_stats(const std::vector<double>& per_image);

struct PoolEntry {
    int epoch = 0;
    EceStats val_ece;
};

// argmin of mean+max+min over the pool; ties resolve to the earliest epoch.
std::size_t select_source_checkpoint(const std::vector<PoolEntry>& pool);

struct SourceEpochRecord {
    int epoch = 0;  // 1-based
    double loss_seg = 0;
    double loss_ece_diff = 0;
    EceStats val_ece;
    double val_miou = 0;
};

// One SGD pass per epoch on L_src = L_seg + alpha * L_ECEdiff (the ECE term
// joins after cfg.ece_warmup_epochs); checkpoints and validation statistics
// are delivered through on_epoch.
void train_source(const Dataset& train, const Dataset& val, SegModel<float>& model,
                  const SourceConfig& cfg, const CalibConfig& calib, std::uint64_t root_seed,
                  const std::function<void(const SourceEpochRecord&)>& on_epoch);

struct ValueEpochRecord {
    int epoch = 0;
    double match_train = 0;
    double match_val = 0;
};

// Regresses per-image ECE from the tapped features with MSE. The
// segmentation parameters must be frozen (stage mask valuenet) beforehand.
void train_value_net(const Dataset& train, const Dataset& val, SegModel<float>& seg,
                     ValueNet<float>& vnet, const ValueNetConfig& cfg, int bins,
                     std::uint64_t root_seed,
                     const std::function<void(const ValueEpochRecord&)>& on_epoch);

extern template class SgdOptimizer<float>;
extern template class SgdOptimizer<double>;

}  // namespace calseg

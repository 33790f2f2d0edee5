#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "calseg/calibration.hpp"
#include "calseg/config.hpp"
#include "calseg/datagen.hpp"
#include "calseg/model.hpp"
#include "calseg/source_stage.hpp"

namespace calseg {

// Calibration-guided confidence: P = (1 - ECEhat) * p, broadcast per image.
float adjusted_confidence(float max_prob, float ece_hat);

struct ClassThresholds {
    std::vector<double> xi;      // per-class threshold on adjusted confidence
    std::vector<double> weight;  // softmax-normalized, sums to 1
};

// Per class: sort adjusted confidences descending, take index
// min(floor(delta*m), m-1) (0-based). Classes with no predicted pixels get
// xi = 1 so nothing passes.
ClassThresholds compute_class_thresholds(const std::vector<float>& adjusted_conf,
                                         const std::vector<int>& prediction, int num_classes,
                                         double delta);

enum class PseudoProvenance : std::uint8_t { unlabeled = 0, global_rule = 1, local_rule = 2, both = 3 };

struct PseudoLabelMap {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> labels;      // class index or 255
    std::vector<std::uint8_t> provenance;  // PseudoProvenance per pixel

    std::int64_t labeled_count() const;
};

// A pixel predicted as c is labeled c when its adjusted confidence exceeds
// the global threshold xi_c or the per-image threshold built with the same
// top-delta rule on this image alone; otherwise 255.
PseudoLabelMap assign_pseudo_labels(const std::vector<int>& prediction,
                                    const std::vector<float>& adjusted_conf, int height,
                                    int width, const ClassThresholds& global, int num_classes,
                                    double delta);

// Losses of the self-training objective. probs has shape [N,C,H,W] and lives
// on the probability simplex; pseudo labels are flattened [N*H*W].
template <class T>
struct SceLossResult {
    ad::Tensor<T> total;  // epsilon * wce + rce
    ad::Tensor<T> wce;
    ad::Tensor<T> rce;
};
template <class T>
SceLossResult<T> sce_loss(const ad::Tensor<T>& probs, const std::vector<std::uint8_t>& pseudo,
                          const std::vector<double>& class_weights, double epsilon);

// Mean per-pixel Shannon entropy, -sum f log f with 0 log 0 = 0.
template <class T>
ad::Tensor<T> entropy_loss(const ad::Tensor<T>& probs);

// Negative learning: one complementary class sampled uniformly per labeled
// pixel, penalized by -log(1 - f) with f capped at 1 - 1e-7.
template <class T>
ad::Tensor<T> negative_loss(const ad::Tensor<T>& probs, const std::vector<std::uint8_t>& pseudo,
                            Rng& rng);

// Mean prediction entropy of a logits tensor (not differentiable); the
// quantity logged per epoch for target model selection.
double mean_prediction_entropy(const ad::Tensor<float>& logits);

// argmin; ties resolve to the earliest entry.
std::size_t select_min_entropy(const std::vector<double>& per_epoch_entropy);

struct IoUResult {
    std::vector<double> per_class;
    std::vector<bool> present;  // class occurs in prediction or label
    double mean = 0;
};
// Pixels labeled 255 are excluded; classes absent from both prediction and
// label do not enter the mean.
IoUResult miou(const std::vector<int>& prediction, const std::vector<std::uint8_t>& labels,
               int num_classes);

// One statistic warm-up epoch: BatchNorm layers of both networks run on
// batch statistics and update their running estimates, while the SGD step on
// L_tar can only move gamma/beta (stage mask warmup, validated here).
struct TargetEpochLosses {
    double sce = 0, neg = 0, ent = 0;
};
TargetEpochLosses statistic_warmup(SegModel<float>& model, ValueNet<float>& vnet,
                                   const Dataset& target, const std::vector<PseudoLabelMap>& pseudo,
                                   const ClassThresholds& thresholds, const TargetConfig& cfg,
                                   SgdOptimizer<float>& opt, Rng& shuffle_rng, Rng& negsample_rng);

struct AdaptEpochRecord {
    int round = 0;  // 1-based
    int epoch = 0;  // 1-based within the round; epoch 1 is the warm-up
    TargetEpochLosses losses;
    double mean_entropy = 0;  // evaluation pass over the target train set
    std::vector<double> labeled_fraction;  // per class, fixed for the round
};

struct RoundArtifacts {
    int round = 0;
    ClassThresholds thresholds;
    std::vector<PseudoLabelMap> pseudo;
    std::vector<double> ece_hat;  // clamped value-net estimates per image
};

struct AdaptHooks {
    std::function<void(const RoundArtifacts&)> on_round;
    std::function<void(const AdaptEpochRecord&)> on_epoch;
};

struct AdaptResult {
    std::vector<double> entropies;  // one per epoch across all rounds
    std::size_t best_index = 0;     // argmin entropy
    int best_round = 0, best_epoch = 0;
};

// Full calibration-aware self-training: per round recompute value-net ECE
// estimates, thresholds and pseudo-labels, run the warm-up epoch, then SGD
// epochs on L_tar = L_sce + L_neg + eta * L_ent with the adapt stage mask.
AdaptResult adapt(const Dataset& target_train, SegModel<float>& model, ValueNet<float>& vnet,
                  const TargetConfig& cfg, int bins, std::uint64_t root_seed,
                  const AdaptHooks& hooks);

}  // namespace calseg

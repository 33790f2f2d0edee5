#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "calseg/ops.hpp"

namespace calseg {

struct CalibConfig {
    int bins = 10;
    double temperature = 1e-5;  // LogSumExp smoothing of the max-confidence
    double alpha = 1.0;         // weight of the calibration loss in the source objective

    void validate() const;
};

// Per-bin accuracy/confidence histogram over fixed-width bins ((m-1)/M, m/M].
// A confidence of exactly 0 belongs to the first bin.
struct ReliabilityDiagram {
    struct Bin {
        std::int64_t count = 0;
        double conf = 0;  // mean confidence of members, 0 for empty bins
        double acc = 0;   // accuracy of members, 0 for empty bins
    };
    std::vector<Bin> bins;
    std::int64_t total = 0;

    int num_bins() const { return static_cast<int>(bins.size()); }
    double ece() const;
};

// Bin index (0-based) for a confidence value; values beyond [0,1] are clamped
// to the boundary bins.
int bin_index(double confidence, int bins);

// Eq.-style ECE: sum_m (|B_m|/n) * |acc(B_m) - conf(B_m)|.
// Confidences must lie in [0,1]; empty input is an error.
ReliabilityDiagram compute_ece(const std::vector<double>& confidence,
                               const std::vector<bool>& correct, int bins);

// Per-pixel top-1 probability and class, computed with the max-shifted
// softmax. Ties resolve to the lowest class index.
template <class T>
struct ConfidencePrediction {
    std::vector<T> confidence;  // size N*H*W
    std::vector<int> prediction;
};
template <class T>
ConfidencePrediction<T> confidence_and_prediction(const ad::Tensor<T>& logits);

// Differentiable calibration loss: identical binning to compute_ece except
// the per-sample confidence is logsumexp(softmax probabilities, t), so the
// graph stays differentiable. Bin membership is a hard assignment; gradients
// flow only through the per-bin mean confidences. Pixels labeled 255 are
// excluded; if nothing is left, this is an error.
template <class T>
ad::Tensor<T> diff_ece_loss(const ad::Tensor<T>& logits, const std::vector<int>& labels,
                            const CalibConfig& cfg);

// Hard (non-differentiable) ECE per image; every image needs at least one
// valid pixel. labels use 255 as the ignore sentinel.
template <class T>
std::vector<double> ece_per_image(const ad::Tensor<T>& logits, const std::vector<int>& labels,
                                  int bins);

// CSV columns: bin_lo, bin_hi, count, conf, acc. Exact round-trip.
void export_reliability_csv(const ReliabilityDiagram& d, const std::filesystem::path& path);
ReliabilityDiagram load_reliability_csv(const std::filesystem::path& path);
// Bar chart of per-bin accuracy vs confidence with the diagonal reference.
void export_reliability_svg(const ReliabilityDiagram& d, const std::filesystem::path& path);

}  // namespace calseg

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "calseg/common.hpp"
#include "calseg/rng.hpp"

namespace calseg {

// Appearance-only domain shift; labels never depend on it.
struct DomainShift {
    double hue = 0.0;         // rotation around the gray axis, fraction of a full turn
    double brightness = 0.0;  // additive offset
    double noise_sigma = 0.0; // per-pixel Gaussian noise
};

struct DomainSpec {
    int n_images = 0;
    int height = 0;
    int width = 0;
    int num_classes = 0;
    std::vector<double> class_freq_targets;           // expected pixel share per class
    std::vector<std::array<double, 3>> palette_mean;  // per-class RGB in [0,1]
    std::vector<double> palette_noise;                // per-class pixel color jitter sigma
    DomainShift shift;
    std::uint64_t seed = 0;

    void validate() const;
};

constexpr std::uint8_t kIgnoreLabel = 255;

struct LabeledImage {
    int height = 0;
    int width = 0;
    std::vector<float> pixels;         // 3*H*W, CHW planes, values in [0,1]
    std::vector<std::uint8_t> labels;  // H*W, class index or 255
};

using Dataset = std::vector<LabeledImage>;

// Deterministic for a fixed (spec.seed, index); images are layered rectangles,
// ellipses and strips colored from the class palette, then domain-shifted.
LabeledImage generate_image(const DomainSpec& spec, int index);
Dataset generate_domain(const DomainSpec& spec);

// Deterministic horizontal mirror of image and label map together.
LabeledImage hflip(const LabeledImage& img);
// Horizontal flip with probability 0.5.
LabeledImage augment(const LabeledImage& img, Rng& rng);

// Seeded disjoint split; throws if either side would be empty.
std::pair<Dataset, Dataset> split_validation(const Dataset& data, double fraction,
                                             std::uint64_t seed);

// On-disk record: "CALSEG1" magic, little-endian u32 H, W, C, H*W*3 float32
// pixels, then H*W u8 labels.
void write_record(const std::filesystem::path& path, const LabeledImage& img, int num_classes);
LabeledImage read_record(const std::filesystem::path& path, int* num_classes = nullptr);

// Dataset directory: records/ plus an index file listing the records and the
// serialized DomainSpec.
void write_dataset(const std::filesystem::path& dir, const Dataset& data,
                   const DomainSpec& spec);
Dataset load_dataset(const std::filesystem::path& dir, DomainSpec* spec = nullptr);

std::vector<std::pair<std::string, std::string>> serialize_spec(const DomainSpec& spec);
DomainSpec parse_spec(const std::vector<std::pair<std::string, std::string>>& kv);

}  // namespace calseg

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "calseg/ops.hpp"
#include "calseg/rng.hpp"

namespace calseg {

// Named view of one trainable tensor. The requires_grad flag on the tensor is
// the trainability mask: frozen parameters receive no gradients and the
// optimizer never touches them.
template <class T>
struct ParamRef {
    std::string name;
    ad::Tensor<T> tensor;
};

// Named view of a non-trainable buffer (BatchNorm running statistics).
template <class T>
struct BufferRef {
    std::string name;
    std::vector<T>* values;
};

template <class T>
struct Conv2dLayer {
    ad::Tensor<T> weight;  // [Cout,Cin,kh,kw]
    ad::Tensor<T> bias;    // [Cout]
    int pad = 0;

    static Conv2dLayer make(int cin, int cout, int k, int pad, Rng& rng);
    ad::Tensor<T> forward(const ad::Tensor<T>& x) const {
        return ad::conv2d(x, weight, bias, pad);
    }
};

template <class T>
struct LinearLayer {
    ad::Tensor<T> weight;  // [K,F]
    ad::Tensor<T> bias;    // [K]

    static LinearLayer make(int in, int out, Rng& rng);
    ad::Tensor<T> forward(const ad::Tensor<T>& x) const { return ad::linear(x, weight, bias); }
};

// conv -> BN -> relu
template <class T>
struct ConvBlock {
    Conv2dLayer<T> conv;
    ad::BatchNormState<T> bn;

    static ConvBlock make(int cin, int cout, int k, int pad, Rng& rng);
    ad::Tensor<T> forward(const ad::Tensor<T>& x, ad::BNMode mode) {
        return ad::relu(ad::batchnorm(conv.forward(x), bn, mode));
    }
};

// Stride-1 fully convolutional segmentation network: four 3x3 conv blocks and
// a 1x1 classifier head, all spatial sizes preserved. The activations after
// block `tap_index` feed the value net.
template <class T>
class SegModel {
public:
    SegModel() = default;
    SegModel(int in_channels, int num_classes, std::vector<int> widths, int tap_index,
             std::uint64_t seed);

    struct Output {
        ad::Tensor<T> logits;   // [N,C,H,W]
        ad::Tensor<T> feature;  // [N,F,H,W], tapped after block tap_index
    };
    Output forward(const ad::Tensor<T>& x, ad::BNMode mode);

    int num_classes() const { return num_classes_; }
    int in_channels() const { return in_channels_; }
    int tap_index() const { return tap_index_; }
    int feature_channels() const { return widths_[static_cast<std::size_t>(tap_index_)]; }
    int num_blocks() const { return static_cast<int>(blocks_.size()); }

    std::vector<ParamRef<T>> params();
    std::vector<BufferRef<T>> buffers();
    // Parameters of blocks strictly below/at the tap (the feature extractor).
    bool is_extractor_param(const std::string& name) const;

private:
    int in_channels_ = 0, num_classes_ = 0, tap_index_ = 0;
    std::vector<int> widths_;
    std::vector<ConvBlock<T>> blocks_;
    Conv2dLayer<T> head_;
};

// Per-image ECE regressor: two conv blocks on the tapped feature map, global
// average pooling, a linear head and a sigmoid squashed away from {0,1}.
template <class T>
class ValueNet {
public:
    ValueNet() = default;
    ValueNet(int in_channels, std::uint64_t seed);

    // [N,F,H,W] -> [N,1], every output strictly inside (0,1)
    ad::Tensor<T> forward(const ad::Tensor<T>& feature, ad::BNMode mode);

    int in_channels() const { return in_channels_; }
    std::vector<ParamRef<T>> params();
    std::vector<BufferRef<T>> buffers();

private:
    int in_channels_ = 0;
    std::vector<ConvBlock<T>> blocks_;
    LinearLayer<T> fc_;
};

enum class Stage { source, valuenet, warmup, adapt };

Stage stage_from_string(const std::string& s);
std::string stage_to_string(Stage s);

// Sets the trainability masks for a pipeline stage:
//   source   - all segmentation parameters trainable (value net may be absent)
//   valuenet - segmentation frozen, value net trainable
//   warmup   - only BatchNorm gamma/beta of both networks trainable
//   adapt    - segmentation blocks above the tap plus the head trainable;
//              feature extractor and value net frozen
template <class T>
void set_stage_masks(SegModel<T>& model, ValueNet<T>* valuenet, Stage stage);

extern template class SegModel<float>;
extern template class SegModel<double>;
extern template class ValueNet<float>;
extern template class ValueNet<double>;

}  // namespace calseg

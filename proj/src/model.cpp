#include "calseg/model.hpp"

#include <cmath>

namespace calseg {

namespace {

// He fan-in initialization.
template <class T>
ad::Tensor<T> he_init(ad::Shape shape, std::int64_t fan_in, Rng& rng) {
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<T> vals(static_cast<std::size_t>(ad::shape_numel(shape)));
    for (auto& v : vals) v = static_cast<T>(rng.normal() * std_dev);
    return ad::Tensor<T>::from(std::move(shape), std::move(vals));
}

}  // namespace

template <class T>
Conv2dLayer<T> Conv2dLayer<T>::make(int cin, int cout, int k, int pad, Rng& rng) {
    Conv2dLayer<T> l;
    l.weight = he_init<T>({cout, cin, k, k}, static_cast<std::int64_t>(cin) * k * k, rng);
    l.bias = ad::Tensor<T>::zeros({cout});
    l.pad = pad;
    return l;
}

template <class T>
LinearLayer<T> LinearLayer<T>::make(int in, int out, Rng& rng) {
    LinearLayer<T> l;
    l.weight = he_init<T>({out, in}, in, rng);
    l.bias = ad::Tensor<T>::zeros({out});
    return l;
}

template <class T>
ConvBlock<T> ConvBlock<T>::make(int cin, int cout, int k, int pad, Rng& rng) {
    ConvBlock<T> b;
    b.conv = Conv2dLayer<T>::make(cin, cout, k, pad, rng);
    b.bn = ad::BatchNormState<T>::make(cout);
    return b;
}

template <class T>
SegModel<T>::SegModel(int in_channels, int num_classes, std::vector<int> widths, int tap_index,
                      std::uint64_t seed)
    : in_channels_(in_channels),
      num_classes_(num_classes),
      tap_index_(tap_index),
      widths_(std::move(widths)) {
    if (widths_.empty()) fail_invalid("SegModel: needs at least one block");
    if (tap_index_ < 0 || tap_index_ >= static_cast<int>(widths_.size())) {
        fail_invalid("SegModel: tap index out of range");
    }
    Rng rng(seed);
    int cin = in_channels_;
    for (int w : widths_) {
        blocks_.push_back(ConvBlock<T>::make(cin, w, 3, 1, rng));
        cin = w;
    }
    head_ = Conv2dLayer<T>::make(cin, num_classes_, 1, 0, rng);
}

template <class T>
typename SegModel<T>::Output SegModel<T>::forward(const ad::Tensor<T>& x, ad::BNMode mode) {
    if (x.ndim() != 4 || x.dim(1) != in_channels_) {
        fail_invalid("SegModel: expected input [N," + std::to_string(in_channels_) +
                     ",H,W], got " + ad::shape_str(x.shape()));
    }
    Output out;
    ad::Tensor<T> h = x;
    for (int i = 0; i < static_cast<int>(blocks_.size()); ++i) {
        h = blocks_[static_cast<std::size_t>(i)].forward(h, mode);
        if (i == tap_index_) out.feature = h;
    }
    out.logits = head_.forward(h);
    return out;
}

template <class T>
std::vector<ParamRef<T>> SegModel<T>::params() {
    std::vector<ParamRef<T>> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const std::string p = "seg.block" + std::to_string(i + 1);
        out.push_back({p + ".conv.weight", blocks_[i].conv.weight});
        out.push_back({p + ".conv.bias", blocks_[i].conv.bias});
        out.push_back({p + ".bn.gamma", blocks_[i].bn.gamma});
        out.push_back({p + ".bn.beta", blocks_[i].bn.beta});
    }
    out.push_back({"seg.head.weight", head_.weight});
    out.push_back({"seg.head.bias", head_.bias});
    return out;
}

template <class T>
std::vector<BufferRef<T>> SegModel<T>::buffers() {
    std::vector<BufferRef<T>> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const std::string p = "seg.block" + std::to_string(i + 1);
        out.push_back({p + ".bn.running_mean", &blocks_[i].bn.running_mean});
        out.push_back({p + ".bn.running_var", &blocks_[i].bn.running_var});
    }
    return out;
}

template <class T>
bool SegModel<T>::is_extractor_param(const std::string& name) const {
    for (int i = 0; i <= tap_index_; ++i) {
        const std::string p = "seg.block" + std::to_string(i + 1) + ".";
        if (name.rfind(p, 0) == 0) return true;
    }
    return false;
}

template <class T>
ValueNet<T>::ValueNet(int in_channels, std::uint64_t seed) : in_channels_(in_channels) {
    Rng rng(seed);
    blocks_.push_back(ConvBlock<T>::make(in_channels, 32, 3, 1, rng));
    blocks_.push_back(ConvBlock<T>::make(32, 16, 3, 1, rng));
    fc_ = LinearLayer<T>::make(16, 1, rng);
}

template <class T>
ad::Tensor<T> ValueNet<T>::forward(const ad::Tensor<T>& feature, ad::BNMode mode) {
    if (feature.ndim() != 4 || feature.dim(1) != in_channels_) {
        fail_invalid("ValueNet: expected input [N," + std::to_string(in_channels_) +
                     ",H,W], got " + ad::shape_str(feature.shape()));
    }
    ad::Tensor<T> h = feature;
    for (auto& b : blocks_) h = b.forward(h, mode);
    ad::Tensor<T> pooled = ad::global_avg_pool(h);
    ad::Tensor<T> y = ad::sigmoid(fc_.forward(pooled));
    // Keep the output strictly inside (0,1) even under float saturation.
    return ad::clamp(y, T(1e-6), T(1) - T(1e-6));
}

template <class T>
std::vector<ParamRef<T>> ValueNet<T>::params() {
    std::vector<ParamRef<T>> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const std::string p = "value.block" + std::to_string(i + 1);
        out.push_back({p + ".conv.weight", blocks_[i].conv.weight});
        out.push_back({p + ".conv.bias", blocks_[i].conv.bias});
        out.push_back({p + ".bn.gamma", blocks_[i].bn.gamma});
        out.push_back({p + ".bn.beta", blocks_[i].bn.beta});
    }
    out.push_back({"value.fc.weight", fc_.weight});
    out.push_back({"value.fc.bias", fc_.bias});
    return out;
}

template <class T>
std::vector<BufferRef<T>> ValueNet<T>::buffers() {
    std::vector<BufferRef<T>> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const std::string p = "value.block" + std::to_string(i + 1);
        out.push_back({p + ".bn.running_mean", &blocks_[i].bn.running_mean});
        out.push_back({p + ".bn.running_var", &blocks_[i].bn.running_var});
    }
    return out;
}

Stage stage_from_string(const std::string& s) {
    if (s == "source") return Stage::source;
    if (s == "valuenet") return Stage::valuenet;
    if (s == "warmup") return Stage::warmup;
    if (s == "adapt") return Stage::adapt;
    fail_invalid("unknown stage '" + s + "'");
}

std::string stage_to_string(Stage s) {
    switch (s) {
        case Stage::source: return "source";
        case Stage::valuenet: return "valuenet";
        case Stage::warmup: return "warmup";
        case Stage::adapt: return "adapt";
    }
    fail_invalid("unknown stage tag");
}

namespace {

bool is_bn_affine(const std::string& name) {
    return name.find(".bn.gamma") != std::string::npos ||
           name.find(".bn.beta") != std::string::npos;
}

}  // namespace

template <class T>
void set_stage_masks(SegModel<T>& model, ValueNet<T>* valuenet, Stage stage) {
    for (auto& p : model.params()) {
        bool trainable = false;
        switch (stage) {
            case Stage::source: trainable = true; break;
            case Stage::valuenet: trainable = false; break;
            case Stage::warmup: trainable = is_bn_affine(p.name); break;
            case Stage::adapt: trainable = !model.is_extractor_param(p.name); break;
        }
        p.tensor.set_requires_grad(trainable);
    }
    if (valuenet) {
        for (auto& p : valuenet->params()) {
            bool trainable = false;
            switch (stage) {
                case Stage::source: trainable = false; break;
                case Stage::valuenet: trainable = true; break;
                case Stage::warmup: trainable = is_bn_affine(p.name); break;
                case Stage::adapt: trainable = false; break;
            }
            p.tensor.set_requires_grad(trainable);
        }
    }
}

#define CALSEG_INSTANTIATE_MODEL(T)                                       \
    template struct Conv2dLayer<T>;                                       \
    template struct LinearLayer<T>;                                       \
    template struct ConvBlock<T>;                                         \
    template class SegModel<T>;                                           \
    template class ValueNet<T>;                                           \
    template void set_stage_masks(SegModel<T>&, ValueNet<T>*, Stage);

CALSEG_INSTANTIATE_MODEL(float)
CALSEG_INSTANTIATE_MODEL(double)

#undef CALSEG_INSTANTIATE_MODEL

}  // namespace calseg

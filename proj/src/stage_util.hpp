#pragma once

// Internal helpers shared by the training stages and the evaluator.

#include <cmath>
#include <functional>

#include "calseg/datagen.hpp"
#include "calseg/model.hpp"

namespace calseg::detail {

struct Batch {
    ad::Tensor<float> images;  // [B,3,H,W]
    std::vector<int> labels;   // B*H*W, 255 = ignore
};

// Assembles a batch from dataset rows idx[0..count); flip[i] mirrors row i.
inline Batch make_batch(const Dataset& data, const std::size_t* idx, int count,
                        const std::vector<char>* flip = nullptr) {
    if (count <= 0) fail_invalid("make_batch: empty batch");
    const auto& first = data[idx[0]];
    const int H = first.height, W = first.width;
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    Batch b;
    b.images = ad::Tensor<float>::zeros({count, 3, H, W});
    b.labels.resize(static_cast<std::size_t>(count) * hw);
    auto img = b.images.data();
    for (int i = 0; i < count; ++i) {
        const LabeledImage* src = &data[idx[i]];
        LabeledImage flipped;
        if (flip && (*flip)[static_cast<std::size_t>(i)]) {
            flipped = hflip(*src);
            src = &flipped;
        }
        if (src->height != H || src->width != W) fail_invalid("make_batch: mixed image sizes");
        std::copy(src->pixels.begin(), src->pixels.end(),
                  img.begin() + static_cast<std::ptrdiff_t>(i * 3 * hw));
        for (std::size_t p = 0; p < hw; ++p) {
            b.labels[i * hw + p] = src->labels[p];
        }
    }
    return b;
}

// Forward pass over a dataset in eval mode, batched; fn receives the model
// output and the dataset index range [lo, hi).
inline void for_each_eval_batch(
    SegModel<float>& model, const Dataset& data, int batch,
    const std::function<void(const SegModel<float>::Output&, std::size_t, std::size_t)>& fn) {
    std::vector<std::size_t> idx;
    for (std::size_t lo = 0; lo < data.size(); lo += static_cast<std::size_t>(batch)) {
        const std::size_t hi = std::min(data.size(), lo + static_cast<std::size_t>(batch));
        idx.clear();
        for (std::size_t i = lo; i < hi; ++i) idx.push_back(i);
        Batch b = make_batch(data, idx.data(), static_cast<int>(idx.size()));
        auto out = model.forward(b.images, ad::BNMode::eval);
        fn(out, lo, hi);
    }
}

inline std::vector<int> batch_labels(const Dataset& data, std::size_t lo, std::size_t hi) {
    const std::size_t hw =
        static_cast<std::size_t>(data[lo].height) * static_cast<std::size_t>(data[lo].width);
    std::vector<int> labels((hi - lo) * hw);
    for (std::size_t i = lo; i < hi; ++i) {
        for (std::size_t p = 0; p < hw; ++p) {
            labels[(i - lo) * hw + p] = data[i].labels[p];
        }
    }
    return labels;
}

}  // namespace calseg::detail

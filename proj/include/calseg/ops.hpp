#pragma once

#include <vector>

#include "calseg/tape.hpp"
#include "calseg/tensor.hpp"

namespace calseg::ad {

// Elementwise. Shapes of binary operands must match exactly; there is no
// broadcasting in this engine.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> scale(const Tensor<T>& a, T s);
template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <class T>
Tensor<T> relu(const Tensor<T>& a);
template <class T>
Tensor<T> sigmoid(const Tensor<T>& a);
// |x| with subgradient 0 at x = 0.
template <class T>
Tensor<T> abs_val(const Tensor<T>& a);
// x*log(x), defined as 0 at x <= 0 (subgradient 0 there).
template <class T>
Tensor<T> xlogx(const Tensor<T>& a);
// log(max(x, floor)); gradient is 0 where the floor is active.
template <class T>
Tensor<T> log_floor(const Tensor<T>& a, T floor);
// min(max(x, lo), hi); gradient passes only strictly inside the interval.
template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi);

// Axis operations. The axis is removed from the output shape of logsumexp and
// gather; a fully reduced result has shape [1].
template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis);
// t * log(sum_i exp(z_i / t)) over `axis`, evaluated in the max-shifted form
// so it never overflows for finite input and any t > 0.
template <class T>
Tensor<T> logsumexp(const Tensor<T>& a, int axis, T t);
// out[o, i] = a[o, index[o, i], i] where o/i run over the dimensions before
// and after `axis`. Indices are not differentiated.
template <class T>
Tensor<T> gather(const Tensor<T>& a, int axis, const std::vector<int>& index);

// Reductions to a scalar tensor of shape [1].
template <class T>
Tensor<T> sum(const Tensor<T>& a);
template <class T>
Tensor<T> mean(const Tensor<T>& a);

// Neural-network operators.
// x: [N,Cin,H,W], w: [Cout,Cin,kh,kw], b: [Cout]; stride 1, zero padding.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int pad);
// x: [N,F], w: [K,F], b: [K] -> [N,K]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);
// [N,C,H,W] -> [N,C]
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

template <class T>
struct BatchNormState {
    Tensor<T> gamma;
    Tensor<T> beta;
    std::vector<T> running_mean;
    std::vector<T> running_var;
    T eps = T(1e-5);
    T momentum = T(0.1);

    static BatchNormState make(int channels);
    int channels() const { return static_cast<int>(running_mean.size()); }
};

enum class BNMode {
    train,      // normalize by batch stats, momentum-update running stats,
                // gradients flow through the batch statistics
    eval,       // normalize by running stats, no updates
    stat_only,  // batch-stat normalization + running update, but the batch
                // statistics are treated as constants in the backward pass so
                // parameter gradients reach only the affine transform
};

// x: [N,C,H,W]. train/stat_only require N >= 2.
template <class T>
Tensor<T> batchnorm(const Tensor<T>& x, BatchNormState<T>& bn, BNMode mode);

}  // namespace calseg::ad

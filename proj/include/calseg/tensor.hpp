#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "calseg/common.hpp"

namespace calseg::ad {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Reverse-mode tensor handle. Copies are shallow: values and gradient live in
// shared storage, so the tensor captured by a tape node and the caller's
// handle see the same gradient buffer.
template <class T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, T value);
    static Tensor from(Shape shape, std::vector<T> values);
    static Tensor scalar(T value) { return full({1}, value); }

    bool defined() const { return d_ != nullptr; }
    const Shape& shape() const { return check().shape; }
    int ndim() const { return static_cast<int>(shape().size()); }
    int dim(int i) const { return shape().at(static_cast<std::size_t>(i)); }
    std::int64_t numel() const { return static_cast<std::int64_t>(check().values.size()); }

    std::span<const T> data() const { return check().values; }
    std::span<T> data() { return check().values; }

    bool requires_grad() const { return check().requires_grad; }
    Tensor& set_requires_grad(bool v) {
        check().requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !check().grad.empty(); }
    // Gradient buffer, allocated and zeroed on first use. Const methods: the
    // gradient lives in the shared storage, and tape closures hold const
    // copies of the handle.
    std::span<T> grad() const {
        auto& d = check_mut();
        if (d.grad.empty()) d.grad.assign(d.values.size(), T(0));
        return d.grad;
    }
    std::span<const T> grad_view() const { return check().grad; }
    void zero_grad() const { check_mut().grad.clear(); }

    T item() const {
        if (numel() != 1) fail_invalid("item(): tensor is not scalar, shape " + shape_str(shape()));
        return check().values[0];
    }

    // Deep copy of the values; the copy is a fresh leaf.
    Tensor clone_detached() const {
        Tensor t = from(check().shape, check().values);
        return t;
    }

    bool same_storage(const Tensor& other) const { return d_ == other.d_; }

private:
    struct Data {
        Shape shape;
        std::vector<T> values;
        std::vector<T> grad;
        bool requires_grad = false;
    };

    Data& check() {
        if (!d_) fail_invalid("use of undefined tensor");
        return *d_;
    }
    const Data& check() const {
        if (!d_) fail_invalid("use of undefined tensor");
        return *d_;
    }
    // shared_ptr does not propagate constness to the pointee.
    Data& check_mut() const {
        if (!d_) fail_invalid("use of undefined tensor");
        return *d_;
    }

    std::shared_ptr<Data> d_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace calseg::ad

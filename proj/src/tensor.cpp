#include "calseg/tensor.hpp"

namespace calseg::ad {

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) {
        if (d <= 0) fail_invalid("tensor dimensions must be positive, got " + shape_str(s));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
    return full(std::move(shape), T(0));
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
    Tensor t;
    auto n = shape_numel(shape);
    t.d_ = std::make_shared<Data>();
    t.d_->shape = std::move(shape);
    t.d_->values.assign(static_cast<std::size_t>(n), value);
    return t;
}

template <class T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values) {
    auto n = shape_numel(shape);
    if (n != static_cast<std::int64_t>(values.size())) {
        fail_invalid("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.d_ = std::make_shared<Data>();
    t.d_->shape = std::move(shape);
    t.d_->values = std::move(values);
    return t;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace calseg::ad

#pragma once

#include <functional>
#include <vector>

#include "calseg/tensor.hpp"

namespace calseg::ad {

// Gradient tape with stack discipline: constructing a tape makes it the active
// one for the current thread, destroying it restores the previous tape.
// Operators record a pull closure when an input requires gradients; closures
// run in reverse order, which is a valid topological order by construction.
// Each tape supports exactly one backward pass.
template <class T>
class Tape {
public:
    Tape() : prev_(active_) { active_ = this; }
    ~Tape() { active_ = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_; }

    void record(std::function<void()> pull) { nodes_.push_back(std::move(pull)); }

    std::size_t size() const { return nodes_.size(); }
    bool used() const { return used_; }

    // Seeds d(loss)/d(loss) = 1 and propagates through all recorded nodes.
    void backward(Tensor<T> loss) {
        if (used_) fail_invalid("backward() called twice on the same tape");
        if (loss.numel() != 1) {
            fail_invalid("backward() requires a scalar loss, got shape " +
                         shape_str(loss.shape()));
        }
        used_ = true;
        loss.grad()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> nodes_;
    bool used_ = false;
    Tape* prev_ = nullptr;
    static thread_local Tape* active_;
};

template <class T>
thread_local Tape<T>* Tape<T>::active_ = nullptr;

}  // namespace calseg::ad

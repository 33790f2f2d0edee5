#include "calseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "calseg/parallel.hpp"

namespace calseg::ad {

namespace {

template <class T>
bool tracing(std::initializer_list<const Tensor<T>*> inputs) {
    if (!Tape<T>::active()) return false;
    for (const auto* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

template <class T>
void record(Tensor<T>& out, std::function<void()> pull) {
    out.set_requires_grad(true);
    Tape<T>::active()->record(std::move(pull));
}

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        fail_invalid(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
    }
}

template <class T>
void check_finite(const Tensor<T>& a, const char* op) {
    for (T v : a.data()) {
        if (!std::isfinite(v)) fail_invalid(std::string(op) + ": non-finite input");
    }
}

struct AxisView {
    std::int64_t outer, len, inner;
};

template <class T>
AxisView axis_view(const Tensor<T>& a, int axis, const char* op) {
    const auto& s = a.shape();
    if (axis < 0 || axis >= static_cast<int>(s.size())) {
        fail_invalid(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(s));
    }
    AxisView v{1, s[static_cast<std::size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) v.outer *= s[static_cast<std::size_t>(i)];
    for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) {
        v.inner *= s[static_cast<std::size_t>(i)];
    }
    return v;
}

Shape drop_axis(const Shape& s, int axis) {
    Shape out;
    for (int i = 0; i < static_cast<int>(s.size()); ++i) {
        if (i != axis) out.push_back(s[static_cast<std::size_t>(i)]);
    }
    if (out.empty()) out.push_back(1);
    return out;
}

// ---- GEMM kernels ------------------------------------------------------
// Row-major. Every C element is reduced in ascending-k order regardless of
// the thread count, so results are bit-stable.

// C[M,N] += A[M,K] * B[K,N]
template <class T>
void gemm_nn(std::int64_t M, std::int64_t K, std::int64_t N, const T* A, const T* B, T* C) {
    constexpr std::int64_t NB = 2048;
    parallel_for(N, [&](std::int64_t nlo, std::int64_t nhi) {
        for (std::int64_t n0 = nlo; n0 < nhi; n0 += NB) {
            const std::int64_t nb = std::min(NB, nhi - n0);
            std::int64_t m = 0;
            for (; m + 4 <= M; m += 4) {
                T* __restrict__ c0 = C + (m + 0) * N + n0;
                T* __restrict__ c1 = C + (m + 1) * N + n0;
                T* __restrict__ c2 = C + (m + 2) * N + n0;
                T* __restrict__ c3 = C + (m + 3) * N + n0;
                for (std::int64_t k = 0; k < K; ++k) {
                    const T* __restrict__ b = B + k * N + n0;
                    const T a0 = A[(m + 0) * K + k];
                    const T a1 = A[(m + 1) * K + k];
                    const T a2 = A[(m + 2) * K + k];
                    const T a3 = A[(m + 3) * K + k];
                    for (std::int64_t n = 0; n < nb; ++n) {
                        const T bv = b[n];
                        c0[n] += a0 * bv;
                        c1[n] += a1 * bv;
                        c2[n] += a2 * bv;
                        c3[n] += a3 * bv;
                    }
                }
            }
            for (; m < M; ++m) {
                T* __restrict__ c = C + m * N + n0;
                for (std::int64_t k = 0; k < K; ++k) {
                    const T a = A[m * K + k];
                    const T* __restrict__ b = B + k * N + n0;
                    for (std::int64_t n = 0; n < nb; ++n) c[n] += a * b[n];
                }
            }
        }
    });
}

// C[M,N] += A^T * B where A is stored [K,M]
template <class T>
void gemm_tn(std::int64_t M, std::int64_t K, std::int64_t N, const T* A, const T* B, T* C) {
    constexpr std::int64_t NB = 2048;
    for (std::int64_t n0 = 0; n0 < N; n0 += NB) {
        const std::int64_t nb = std::min(NB, N - n0);
        for (std::int64_t m = 0; m < M; ++m) {
            T* __restrict__ c = C + m * N + n0;
            for (std::int64_t k = 0; k < K; ++k) {
                const T a = A[k * M + m];
                const T* __restrict__ b = B + k * N + n0;
                for (std::int64_t n = 0; n < nb; ++n) c[n] += a * b[n];
            }
        }
    }
}

// C[M,N] += A * B^T where A is [M,K], B is [N,K]; K is the long axis here.
template <class T>
void gemm_nt(std::int64_t M, std::int64_t K, std::int64_t N, const T* A, const T* B, T* C) {
    for (std::int64_t m = 0; m < M; ++m) {
        const T* __restrict__ a = A + m * K;
        for (std::int64_t n = 0; n < N; ++n) {
            const T* __restrict__ b = B + n * K;
            T acc = T(0);
            for (std::int64_t k = 0; k < K; ++k) acc += a[k] * b[k];
            C[m * N + n] += acc;
        }
    }
}

// ---- im2col ------------------------------------------------------------

template <class T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int pad, int Ho, int Wo, T* col) {
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                T* dst = col + ((static_cast<std::int64_t>(c) * kh + ki) * kw + kj) *
                                   (static_cast<std::int64_t>(Ho) * Wo);
                for (int ho = 0; ho < Ho; ++ho) {
                    const int h = ho + ki - pad;
                    if (h < 0 || h >= H) {
                        std::memset(dst + static_cast<std::int64_t>(ho) * Wo, 0,
                                    sizeof(T) * static_cast<std::size_t>(Wo));
                        continue;
                    }
                    const T* src = x + (static_cast<std::int64_t>(c) * H + h) * W;
                    T* drow = dst + static_cast<std::int64_t>(ho) * Wo;
                    for (int wo = 0; wo < Wo; ++wo) {
                        const int w = wo + kj - pad;
                        drow[wo] = (w < 0 || w >= W) ? T(0) : src[w];
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* col, int C, int H, int W, int kh, int kw, int pad, int Ho, int Wo,
                T* x) {
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const T* src = col + ((static_cast<std::int64_t>(c) * kh + ki) * kw + kj) *
                                         (static_cast<std::int64_t>(Ho) * Wo);
                for (int ho = 0; ho < Ho; ++ho) {
                    const int h = ho + ki - pad;
                    if (h < 0 || h >= H) continue;
                    T* dst = x + (static_cast<std::int64_t>(c) * H + h) * W;
                    const T* srow = src + static_cast<std::int64_t>(ho) * Wo;
                    for (int wo = 0; wo < Wo; ++wo) {
                        const int w = wo + kj - pad;
                        if (w >= 0 && w < W) dst[w] += srow[wo];
                    }
                }
            }
        }
    }
}

template <class T, class Fwd, class Bwd>
Tensor<T> unary_op(const Tensor<T>& a, Fwd fwd, Bwd dfdx) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto av = a.data();
    auto ov = out.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) ov[i] = fwd(av[i]);
    if (tracing<T>({&a})) {
        record(out, [a, out, dfdx]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto ag = a.grad();
            auto av2 = a.data();
            for (std::int64_t i = 0; i < a.numel(); ++i) ag[i] += g[i] * dfdx(av2[i]);
        });
    }
    return out;
}

}  // namespace

// ---- elementwise -------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto av = a.data(), bv = b.data();
    auto ov = out.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] + bv[i];
    if (tracing<T>({&a, &b})) {
        record(out, [a, b, out]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            if (a.requires_grad()) {
                auto ag = a.grad();
                for (std::int64_t i = 0; i < a.numel(); ++i) ag[i] += g[i];
            }
            if (b.requires_grad()) {
                auto bg = b.grad();
                for (std::int64_t i = 0; i < b.numel(); ++i) bg[i] += g[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "sub");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto av = a.data(), bv = b.data();
    auto ov = out.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] - bv[i];
    if (tracing<T>({&a, &b})) {
        record(out, [a, b, out]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            if (a.requires_grad()) {
                auto ag = a.grad();
                for (std::int64_t i = 0; i < a.numel(); ++i) ag[i] += g[i];
            }
            if (b.requires_grad()) {
                auto bg = b.grad();
                for (std::int64_t i = 0; i < b.numel(); ++i) bg[i] -= g[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto av = a.data(), bv = b.data();
    auto ov = out.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] * bv[i];
    if (tracing<T>({&a, &b})) {
        record(out, [a, b, out]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            if (a.requires_grad()) {
                auto ag = a.grad();
                auto bv2 = b.data();
                for (std::int64_t i = 0; i < a.numel(); ++i) ag[i] += g[i] * bv2[i];
            }
            if (b.requires_grad()) {
                auto bg = b.grad();
                auto av2 = a.data();
                for (std::int64_t i = 0; i < b.numel(); ++i) bg[i] += g[i] * av2[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto av = a.data();
    auto ov = out.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] * s;
    if (tracing<T>({&a})) {
        record(out, [a, out, s]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto ag = a.grad();
            for (std::int64_t i = 0; i < a.numel(); ++i) ag[i] += g[i] * s;
        });
    }
    return out;
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    return unary_op(
        a, [s](T x) { return x + s; }, [](T) { return T(1); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    return unary_op(
        a, [](T x) { return x > T(0) ? x : T(0); }, [](T x) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    auto fwd = [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
    };
    return unary_op(a, fwd, [fwd](T x) {
        const T y = fwd(x);
        return y * (T(1) - y);
    });
}

template <class T>
Tensor<T> abs_val(const Tensor<T>& a) {
    return unary_op(
        a, [](T x) { return std::abs(x); },
        [](T x) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> xlogx(const Tensor<T>& a) {
    return unary_op(
        a, [](T x) { return x > T(0) ? x * std::log(x) : T(0); },
        [](T x) { return x > T(0) ? std::log(x) + T(1) : T(0); });
}

template <class T>
Tensor<T> log_floor(const Tensor<T>& a, T floor) {
    if (!(floor > T(0))) fail_invalid("log_floor: floor must be positive");
    return unary_op(
        a, [floor](T x) { return std::log(std::max(x, floor)); },
        [floor](T x) { return x > floor ? T(1) / x : T(0); });
}

template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
    if (!(lo <= hi)) fail_invalid("clamp: lo must not exceed hi");
    return unary_op(
        a, [lo, hi](T x) { return std::min(std::max(x, lo), hi); },
        [lo, hi](T x) { return (x > lo && x < hi) ? T(1) : T(0); });
}

// ---- axis operations ---------------------------------------------------

template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
    check_finite(a, "softmax");
    const AxisView v = axis_view(a, axis, "softmax");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto av = a.data();
    auto ov = out.data();
    for (std::int64_t o = 0; o < v.outer; ++o) {
        for (std::int64_t i = 0; i < v.inner; ++i) {
            const std::int64_t base = o * v.len * v.inner + i;
            T m = av[base];
            for (std::int64_t c = 1; c < v.len; ++c) {
                m = std::max(m, av[base + c * v.inner]);
            }
            T s = T(0);
            for (std::int64_t c = 0; c < v.len; ++c) {
                const T e = std::exp(av[base + c * v.inner] - m);
                ov[base + c * v.inner] = e;
                s += e;
            }
            const T inv = T(1) / s;
            for (std::int64_t c = 0; c < v.len; ++c) ov[base + c * v.inner] *= inv;
        }
    }
    if (tracing<T>({&a})) {
        record(out, [a, out, v]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto y = out.data();
            auto ag = a.grad();
            for (std::int64_t o = 0; o < v.outer; ++o) {
                for (std::int64_t i = 0; i < v.inner; ++i) {
                    const std::int64_t base = o * v.len * v.inner + i;
                    T dot = T(0);
                    for (std::int64_t c = 0; c < v.len; ++c) {
                        dot += g[base + c * v.inner] * y[base + c * v.inner];
                    }
                    for (std::int64_t c = 0; c < v.len; ++c) {
                        const std::int64_t k = base + c * v.inner;
                        ag[k] += y[k] * (g[k] - dot);
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> logsumexp(const Tensor<T>& a, int axis, T t) {
    if (!(t > T(0))) fail_invalid("logsumexp: temperature must be positive");
    check_finite(a, "logsumexp");
    const AxisView v = axis_view(a, axis, "logsumexp");
    Tensor<T> out = Tensor<T>::zeros(drop_axis(a.shape(), axis));
    auto av = a.data();
    auto ov = out.data();
    for (std::int64_t o = 0; o < v.outer; ++o) {
        for (std::int64_t i = 0; i < v.inner; ++i) {
            const std::int64_t base = o * v.len * v.inner + i;
            T m = av[base];
            for (std::int64_t c = 1; c < v.len; ++c) {
                m = std::max(m, av[base + c * v.inner]);
            }
            T s = T(0);
            for (std::int64_t c = 0; c < v.len; ++c) {
                s += std::exp((av[base + c * v.inner] - m) / t);
            }
            ov[o * v.inner + i] = m + t * std::log(s);
        }
    }
    if (tracing<T>({&a})) {
        record(out, [a, out, v, t]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto av2 = a.data();
            auto ag = a.grad();
            for (std::int64_t o = 0; o < v.outer; ++o) {
                for (std::int64_t i = 0; i < v.inner; ++i) {
                    const std::int64_t base = o * v.len * v.inner + i;
                    T m = av2[base];
                    for (std::int64_t c = 1; c < v.len; ++c) {
                        m = std::max(m, av2[base + c * v.inner]);
                    }
                    T s = T(0);
                    for (std::int64_t c = 0; c < v.len; ++c) {
                        s += std::exp((av2[base + c * v.inner] - m) / t);
                    }
                    const T go = g[o * v.inner + i];
                    if (go == T(0)) continue;
                    for (std::int64_t c = 0; c < v.len; ++c) {
                        const std::int64_t k = base + c * v.inner;
                        ag[k] += go * std::exp((av2[k] - m) / t) / s;
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> gather(const Tensor<T>& a, int axis, const std::vector<int>& index) {
    const AxisView v = axis_view(a, axis, "gather");
    if (static_cast<std::int64_t>(index.size()) != v.outer * v.inner) {
        fail_invalid("gather: index size " + std::to_string(index.size()) + " != " +
                     std::to_string(v.outer * v.inner));
    }
    for (int idx : index) {
        if (idx < 0 || idx >= v.len) fail_invalid("gather: index out of range");
    }
    Tensor<T> out = Tensor<T>::zeros(drop_axis(a.shape(), axis));
    auto av = a.data();
    auto ov = out.data();
    for (std::int64_t o = 0; o < v.outer; ++o) {
        for (std::int64_t i = 0; i < v.inner; ++i) {
            const std::int64_t flat = o * v.inner + i;
            ov[flat] = av[(o * v.len + index[static_cast<std::size_t>(flat)]) * v.inner + i];
        }
    }
    if (tracing<T>({&a})) {
        record(out, [a, out, v, index]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto ag = a.grad();
            for (std::int64_t o = 0; o < v.outer; ++o) {
                for (std::int64_t i = 0; i < v.inner; ++i) {
                    const std::int64_t flat = o * v.inner + i;
                    ag[(o * v.len + index[static_cast<std::size_t>(flat)]) * v.inner + i] +=
                        g[flat];
                }
            }
        });
    }
    return out;
}

// ---- reductions --------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = T(0);
    for (T x : a.data()) acc += x;
    Tensor<T> out = Tensor<T>::scalar(acc);
    if (tracing<T>({&a})) {
        record(out, [a, out]() mutable {
            if (!out.has_grad()) return;
            const T g = out.grad()[0];
            auto ag = a.grad();
            for (std::int64_t i = 0; i < a.numel(); ++i) ag[i] += g;
        });
    }
    return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// ---- neural-network operators -------------------------------------------

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int pad) {
    if (x.ndim() != 4 || w.ndim() != 4) fail_invalid("conv2d: x and w must be 4-d");
    const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != Ci) {
        fail_invalid("conv2d: input channels " + std::to_string(Ci) + " != kernel channels " +
                     std::to_string(w.dim(1)));
    }
    if (b.ndim() != 1 || b.dim(0) != Co) fail_invalid("conv2d: bias must have shape [Cout]");
    if (pad < 0) fail_invalid("conv2d: negative padding");
    const int Ho = H + 2 * pad - kh + 1;
    const int Wo = W + 2 * pad - kw + 1;
    if (Ho <= 0 || Wo <= 0) fail_invalid("conv2d: kernel larger than padded input");

    const std::int64_t K = static_cast<std::int64_t>(Ci) * kh * kw;
    const std::int64_t hw = static_cast<std::int64_t>(Ho) * Wo;
    const bool pointwise = (kh == 1 && kw == 1 && pad == 0);

    Tensor<T> out = Tensor<T>::zeros({N, Co, Ho, Wo});
    auto xv = x.data();
    auto wv = w.data();
    auto bv = b.data();
    auto ov = out.data();

    // The column buffer is shared with the backward closure.
    auto cols = std::make_shared<std::vector<T>>();
    if (!pointwise) cols->resize(static_cast<std::size_t>(N) * K * hw);

    for (int n = 0; n < N; ++n) {
        const T* xin = xv.data() + static_cast<std::int64_t>(n) * Ci * H * W;
        const T* col = xin;
        if (!pointwise) {
            T* cbuf = cols->data() + static_cast<std::int64_t>(n) * K * hw;
            im2col(xin, Ci, H, W, kh, kw, pad, Ho, Wo, cbuf);
            col = cbuf;
        }
        T* o = ov.data() + static_cast<std::int64_t>(n) * Co * hw;
        for (int co = 0; co < Co; ++co) {
            std::fill(o + co * hw, o + (co + 1) * hw, bv[co]);
        }
        gemm_nn<T>(Co, K, hw, wv.data(), col, o);
    }

    if (tracing<T>({&x, &w, &b})) {
        record(out, [x, w, b, out, cols, pad, pointwise]() mutable {
            if (!out.has_grad()) return;
            const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
            const int Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
            const int Ho = out.dim(2), Wo = out.dim(3);
            const std::int64_t K = static_cast<std::int64_t>(Ci) * kh * kw;
            const std::int64_t hw = static_cast<std::int64_t>(Ho) * Wo;
            auto g = out.grad();
            if (b.requires_grad()) {
                auto bg = b.grad();
                for (int n = 0; n < N; ++n) {
                    for (int co = 0; co < Co; ++co) {
                        const T* gp = g.data() + (static_cast<std::int64_t>(n) * Co + co) * hw;
                        T acc = T(0);
                        for (std::int64_t i = 0; i < hw; ++i) acc += gp[i];
                        bg[co] += acc;
                    }
                }
            }
            std::vector<T> dcol;
            if (x.requires_grad() && !pointwise) {
                dcol.resize(static_cast<std::size_t>(K) * hw);
            }
            auto xv2 = x.data();
            for (int n = 0; n < N; ++n) {
                const T* gp = g.data() + static_cast<std::int64_t>(n) * Co * hw;
                const T* col = pointwise
                                   ? xv2.data() + static_cast<std::int64_t>(n) * Ci * H * W
                                   : cols->data() + static_cast<std::int64_t>(n) * K * hw;
                if (w.requires_grad()) {
                    gemm_nt<T>(Co, hw, K, gp, col, w.grad().data());
                }
                if (x.requires_grad()) {
                    T* dst = x.grad().data() + static_cast<std::int64_t>(n) * Ci * H * W;
                    if (pointwise) {
                        gemm_tn<T>(K, Co, hw, w.data().data(), gp, dst);
                    } else {
                        std::fill(dcol.begin(), dcol.end(), T(0));
                        gemm_tn<T>(K, Co, hw, w.data().data(), gp, dcol.data());
                        col2im_add(dcol.data(), Ci, H, W, kh, kw, pad, Ho, Wo, dst);
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.ndim() != 2 || w.ndim() != 2) fail_invalid("linear: x and w must be 2-d");
    const int N = x.dim(0), F = x.dim(1);
    const int K = w.dim(0);
    if (w.dim(1) != F) fail_invalid("linear: feature size mismatch");
    if (b.ndim() != 1 || b.dim(0) != K) fail_invalid("linear: bias must have shape [K]");
    Tensor<T> out = Tensor<T>::zeros({N, K});
    auto xv = x.data();
    auto wv = w.data();
    auto bv = b.data();
    auto ov = out.data();
    for (int n = 0; n < N; ++n) {
        for (int k = 0; k < K; ++k) {
            T acc = bv[k];
            for (int f = 0; f < F; ++f) acc += xv[n * F + f] * wv[k * F + f];
            ov[n * K + k] = acc;
        }
    }
    if (tracing<T>({&x, &w, &b})) {
        record(out, [x, w, b, out]() mutable {
            if (!out.has_grad()) return;
            const int N = x.dim(0), F = x.dim(1), K = w.dim(0);
            auto g = out.grad();
            auto xv2 = x.data();
            auto wv2 = w.data();
            for (int n = 0; n < N; ++n) {
                for (int k = 0; k < K; ++k) {
                    const T gv = g[n * K + k];
                    if (gv == T(0)) continue;
                    if (x.requires_grad()) {
                        auto xg = x.grad();
                        for (int f = 0; f < F; ++f) xg[n * F + f] += gv * wv2[k * F + f];
                    }
                    if (w.requires_grad()) {
                        auto wg = w.grad();
                        for (int f = 0; f < F; ++f) wg[k * F + f] += gv * xv2[n * F + f];
                    }
                    if (b.requires_grad()) b.grad()[k] += gv;
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    if (x.ndim() != 4) fail_invalid("global_avg_pool: input must be 4-d");
    const int N = x.dim(0), C = x.dim(1);
    const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    Tensor<T> out = Tensor<T>::zeros({N, C});
    auto xv = x.data();
    auto ov = out.data();
    for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
        T acc = T(0);
        const T* p = xv.data() + nc * hw;
        for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
        ov[nc] = acc / static_cast<T>(hw);
    }
    if (tracing<T>({&x})) {
        record(out, [x, out, hw]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto xg = x.grad();
            const T inv = T(1) / static_cast<T>(hw);
            for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(g.size()); ++nc) {
                const T gv = g[nc] * inv;
                T* p = xg.data() + nc * hw;
                for (std::int64_t i = 0; i < hw; ++i) p[i] += gv;
            }
        });
    }
    return out;
}

template <class T>
BatchNormState<T> BatchNormState<T>::make(int channels) {
    BatchNormState<T> bn;
    bn.gamma = Tensor<T>::full({channels}, T(1));
    bn.beta = Tensor<T>::zeros({channels});
    bn.running_mean.assign(static_cast<std::size_t>(channels), T(0));
    bn.running_var.assign(static_cast<std::size_t>(channels), T(1));
    return bn;
}

template <class T>
Tensor<T> batchnorm(const Tensor<T>& x, BatchNormState<T>& bn, BNMode mode) {
    if (x.ndim() != 4) fail_invalid("batchnorm: input must be 4-d");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (C != bn.channels()) {
        fail_invalid("batchnorm: channel count " + std::to_string(C) +
                     " does not match layer state " + std::to_string(bn.channels()));
    }
    const bool use_batch_stats = (mode == BNMode::train || mode == BNMode::stat_only);
    if (use_batch_stats && N < 2) {
        fail_invalid("batchnorm: batch size must be >= 2 in train/stat-only mode");
    }

    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    const std::int64_t R = static_cast<std::int64_t>(N) * hw;
    std::vector<T> mu(static_cast<std::size_t>(C)), var(static_cast<std::size_t>(C));
    auto xv = x.data();
    if (use_batch_stats) {
        for (int c = 0; c < C; ++c) {
            T m = T(0);
            for (int n = 0; n < N; ++n) {
                const T* p = xv.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) m += p[i];
            }
            m /= static_cast<T>(R);
            T v = T(0);
            for (int n = 0; n < N; ++n) {
                const T* p = xv.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    const T d = p[i] - m;
                    v += d * d;
                }
            }
            v /= static_cast<T>(R);
            mu[static_cast<std::size_t>(c)] = m;
            var[static_cast<std::size_t>(c)] = v;
            bn.running_mean[static_cast<std::size_t>(c)] =
                (T(1) - bn.momentum) * bn.running_mean[static_cast<std::size_t>(c)] +
                bn.momentum * m;
            bn.running_var[static_cast<std::size_t>(c)] =
                (T(1) - bn.momentum) * bn.running_var[static_cast<std::size_t>(c)] +
                bn.momentum * v;
        }
    } else {
        mu = bn.running_mean;
        var = bn.running_var;
    }

    std::vector<T> inv(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
        inv[static_cast<std::size_t>(c)] =
            T(1) / std::sqrt(var[static_cast<std::size_t>(c)] + bn.eps);
    }

    Tensor<T> out = Tensor<T>::zeros(x.shape());
    // Normalized activations are kept for the backward pass.
    auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.numel()));
    auto ov = out.data();
    auto gv = bn.gamma.data();
    auto bv = bn.beta.data();
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
            const T m = mu[static_cast<std::size_t>(c)];
            const T iv = inv[static_cast<std::size_t>(c)];
            const T ga = gv[c], be = bv[c];
            for (std::int64_t i = 0; i < hw; ++i) {
                const T xh = (xv[base + i] - m) * iv;
                (*xhat)[static_cast<std::size_t>(base + i)] = xh;
                ov[base + i] = ga * xh + be;
            }
        }
    }

    Tensor<T> gamma = bn.gamma;
    Tensor<T> beta = bn.beta;
    if (tracing<T>({&x, &gamma, &beta})) {
        auto invp = std::make_shared<std::vector<T>>(std::move(inv));
        record(out, [x, gamma, beta, out, xhat, invp, mode, R, hw]() mutable {
            if (!out.has_grad()) return;
            const int N = x.dim(0), C = x.dim(1);
            auto g = out.grad();
            auto ga = gamma.data();
            for (int c = 0; c < C; ++c) {
                T dg = T(0), db = T(0);
                for (int n = 0; n < N; ++n) {
                    const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
                    for (std::int64_t i = 0; i < hw; ++i) {
                        dg += g[base + i] * (*xhat)[static_cast<std::size_t>(base + i)];
                        db += g[base + i];
                    }
                }
                if (gamma.requires_grad()) gamma.grad()[c] += dg;
                if (beta.requires_grad()) beta.grad()[c] += db;
                if (!x.requires_grad()) continue;
                auto xg = x.grad();
                const T iv = (*invp)[static_cast<std::size_t>(c)];
                if (mode == BNMode::train) {
                    // Gradient through the batch statistics.
                    const T s1 = db * ga[c];
                    const T s2 = dg * ga[c];
                    const T rinv = T(1) / static_cast<T>(R);
                    for (int n = 0; n < N; ++n) {
                        const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
                        for (std::int64_t i = 0; i < hw; ++i) {
                            const T dxh = g[base + i] * ga[c];
                            const T xh = (*xhat)[static_cast<std::size_t>(base + i)];
                            xg[base + i] += iv * (dxh - rinv * (s1 + xh * s2));
                        }
                    }
                } else {
                    // eval / stat_only: statistics are constants.
                    for (int n = 0; n < N; ++n) {
                        const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
                        for (std::int64_t i = 0; i < hw; ++i) {
                            xg[base + i] += g[base + i] * ga[c] * iv;
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---- explicit instantiations ---------------------------------------------

#define CALSEG_INSTANTIATE_OPS(T)                                                            \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                              \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                              \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                              \
    template Tensor<T> scale(const Tensor<T>&, T);                                           \
    template Tensor<T> add_scalar(const Tensor<T>&, T);                                      \
    template Tensor<T> relu(const Tensor<T>&);                                               \
    template Tensor<T> sigmoid(const Tensor<T>&);                                            \
    template Tensor<T> abs_val(const Tensor<T>&);                                            \
    template Tensor<T> xlogx(const Tensor<T>&);                                              \
    template Tensor<T> log_floor(const Tensor<T>&, T);                                       \
    template Tensor<T> clamp(const Tensor<T>&, T, T);                                        \
    template Tensor<T> softmax(const Tensor<T>&, int);                                       \
    template Tensor<T> logsumexp(const Tensor<T>&, int, T);                                  \
    template Tensor<T> gather(const Tensor<T>&, int, const std::vector<int>&);               \
    template Tensor<T> sum(const Tensor<T>&);                                                \
    template Tensor<T> mean(const Tensor<T>&);                                               \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int);    \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);         \
    template Tensor<T> global_avg_pool(const Tensor<T>&);                                    \
    template struct BatchNormState<T>;                                                       \
    template Tensor<T> batchnorm(const Tensor<T>&, BatchNormState<T>&, BNMode);

CALSEG_INSTANTIATE_OPS(float)
CALSEG_INSTANTIATE_OPS(double)

#undef CALSEG_INSTANTIATE_OPS

}  // namespace calseg::ad

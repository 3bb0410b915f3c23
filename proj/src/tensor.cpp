#include "tnr/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <sstream>

#include "tnr/rng.hpp"
#include "conv3x3.hpp"

namespace tnr {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<TensorStorage<T>>()) {
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<TensorStorage<T>>()) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) throw ShapeError("item: tensor has shape " + shape_str(shape()));
    return node_->data[0];
}

template <typename T>
std::span<T> Tensor<T>::grad() const {
    if (node_->grad.size() != node_->data.size()) node_->grad.assign(node_->data.size(), T(0));
    return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
    return Tensor(node_->shape, node_->data);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
        throw ShapeError("reshape: " + shape_str(node_->shape) + " -> " + shape_str(shape));
    }
    return Tensor(std::move(shape), node_->data);
}

// ---- tape -------------------------------------------------------------------

namespace {

template <typename T>
Tape<T>*& active_slot() {
    thread_local Tape<T>* tape = nullptr;
    return tape;
}

}  // namespace

template <typename T>
Tape<T>* Tape<T>::active() {
    return active_slot<T>();
}

template <typename T>
void Tape<T>::record(Tensor<T> output, Backward fn) {
    entries_.push_back({std::move(output), std::move(fn)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
        throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    for (auto& e : entries_) {
        auto g = e.output.grad();
        std::fill(g.begin(), g.end(), T(0));
    }
    Tensor<T> seed = loss;
    seed.grad()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(active_slot<T>()) {
    active_slot<T>() = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
    active_slot<T>() = previous_;
}

template <typename T>
NoGradScope<T>::NoGradScope() : previous_(active_slot<T>()) {
    active_slot<T>() = nullptr;
}

template <typename T>
NoGradScope<T>::~NoGradScope() {
    active_slot<T>() = previous_;
}

// ---- helpers ----------------------------------------------------------------

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using MapConstMat = Eigen::Map<const RowMat<T>>;

template <typename T, typename... In>
bool tracking(const In&... inputs) {
    return Tape<T>::active() != nullptr && (inputs.requires_grad() || ...);
}

template <typename T>
void check_finite([[maybe_unused]] const Tensor<T>& t, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
    for (T v : t.data()) {
        assert(std::isfinite(v) && op);
    }
#endif
}

template <typename T>
void attach(Tensor<T>& out, typename Tape<T>::Backward fn) {
    out.set_requires_grad(true);
    Tape<T>::active()->record(out, std::move(fn));
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
    if (s.size() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(s));
    }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

struct ConvGeometry {
    std::size_t n, c, h, w, f, k, stride, pad, ho, wo;
    std::size_t patch() const { return c * k * k; }
    std::size_t out_plane() const { return ho * wo; }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
    const auto hw = g.out_plane();
    for (std::size_t c = 0; c < g.c; ++c) {
        const T* plane = x + c * g.h * g.w;
        for (std::size_t ki = 0; ki < g.k; ++ki) {
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                T* row = col + ((c * g.k + ki) * g.k + kj) * hw;
                for (std::size_t oh = 0; oh < g.ho; ++oh) {
                    const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
                    T* dst = row + oh * g.wo;
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) {
                        std::fill(dst, dst + g.wo, T(0));
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(ih) * g.w;
                    for (std::size_t ow = 0; ow < g.wo; ++ow) {
                        const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                                        static_cast<std::ptrdiff_t>(g.pad);
                        dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w))
                                      ? T(0)
                                      : src[static_cast<std::size_t>(iw)];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
    const auto hw = g.out_plane();
    for (std::size_t c = 0; c < g.c; ++c) {
        T* plane = dx + c * g.h * g.w;
        for (std::size_t ki = 0; ki < g.k; ++ki) {
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                const T* row = col + ((c * g.k + ki) * g.k + kj) * hw;
                for (std::size_t oh = 0; oh < g.ho; ++oh) {
                    const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    T* dst = plane + static_cast<std::size_t>(ih) * g.w;
                    const T* src = row + oh * g.wo;
                    for (std::size_t ow = 0; ow < g.wo; ++ow) {
                        const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                                        static_cast<std::ptrdiff_t>(g.pad);
                        if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.w)) {
                            dst[static_cast<std::size_t>(iw)] += src[ow];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

// ---- convolution / linear algebra ---------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
    require_rank(input.shape(), 4, "conv2d input");
    require_rank(kernel.shape(), 4, "conv2d kernel");
    require_rank(bias.shape(), 1, "conv2d bias");
    ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0),
                   kernel.dim(2), stride, padding, 0, 0};
    if (kernel.dim(1) != g.c || kernel.dim(3) != g.k) {
        throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " incompatible with input " +
                         shape_str(input.shape()));
    }
    if (g.k % 2 == 0) throw ShapeError("conv2d: kernel extent must be odd, got " + std::to_string(g.k));
    if (bias.dim(0) != g.f) {
        throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " +
                         std::to_string(g.f) + " filters");
    }
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    if (g.h + 2 * padding < g.k || g.w + 2 * padding < g.k) {
        throw ShapeError("conv2d: kernel larger than padded input " + shape_str(input.shape()));
    }
    if ((g.h + 2 * padding - g.k) % stride != 0 || (g.w + 2 * padding - g.k) % stride != 0) {
        throw ShapeError("conv2d: stride " + std::to_string(stride) + " and padding " +
                         std::to_string(padding) + " give fractional output extents for input " +
                         shape_str(input.shape()));
    }
    g.ho = (g.h + 2 * padding - g.k) / stride + 1;
    g.wo = (g.w + 2 * padding - g.k) / stride + 1;

    Tensor<T> out({g.n, g.f, g.ho, g.wo});
    const bool direct = g.k == 3 && stride == 1 && padding == 1;
    const auto in_stride = g.c * g.h * g.w;
    const auto out_stride = g.f * g.out_plane();
    if (direct) {
        const auto layout = detail::plane_layout(g.h, g.w);
        std::vector<T> padded;
        for (std::size_t n = 0; n < g.n; ++n) {
            detail::pad_planes(input.data().data() + n * in_stride, g.c, layout, padded);
            detail::conv3x3_forward(padded.data(), g.c, layout, kernel.data().data(), bias.data().data(), g.f,
                                    out.data().data() + n * out_stride, false);
        }
    } else {
        std::vector<T> col(g.patch() * g.out_plane());
        MapConstMat<T> wmat(kernel.data().data(), g.f, g.patch());
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bvec(bias.data().data(), g.f);
        for (std::size_t n = 0; n < g.n; ++n) {
            im2col(input.data().data() + n * in_stride, g, col.data());
            MapConstMat<T> cmat(col.data(), g.patch(), g.out_plane());
            MapMat<T> y(out.data().data() + n * out_stride, g.f, g.out_plane());
            y.noalias() = wmat * cmat;
            y.colwise() += bvec;
        }
    }
    check_finite(out, "conv2d");

    if (tracking<T>(input, kernel, bias)) {
        attach(out, [input, kernel, bias, out, g, direct]() {
            auto dy_all = out.grad();
            const auto in_stride = g.c * g.h * g.w;
            const auto out_stride = g.f * g.out_plane();
            T* dw_ptr = kernel.requires_grad() ? kernel.grad().data() : nullptr;
            T* db_ptr = bias.requires_grad() ? bias.grad().data() : nullptr;
            T* dx_ptr = input.requires_grad() ? input.grad().data() : nullptr;
            if (db_ptr) {
                for (std::size_t n = 0; n < g.n; ++n)
                    for (std::size_t f = 0; f < g.f; ++f) {
                        const T* d = dy_all.data() + n * out_stride + f * g.out_plane();
                        T s = T(0);
                        for (std::size_t i = 0; i < g.out_plane(); ++i) s += d[i];
                        db_ptr[f] += s;
                    }
            }
            if (direct) {
                const auto layout = detail::plane_layout(g.h, g.w);
                std::vector<T> padded, dy_strided;
                const auto flipped =
                    dx_ptr ? detail::flip_transpose(kernel.data().data(), g.f, g.c) : std::vector<T>{};
                for (std::size_t n = 0; n < g.n; ++n) {
                    const T* dy = dy_all.data() + n * out_stride;
                    if (dw_ptr) {
                        detail::pad_planes(input.data().data() + n * in_stride, g.c, layout, padded);
                        detail::stride_planes(dy, g.f, layout, dy_strided);
                        detail::conv3x3_weight_grad(padded.data(), g.c, layout, dy_strided.data(), g.f, dw_ptr);
                    }
                    if (dx_ptr) {
                        detail::pad_planes(dy, g.f, layout, padded);
                        detail::conv3x3_forward(padded.data(), g.f, layout, flipped.data(), static_cast<const T*>(nullptr),
                                                g.c, dx_ptr + n * in_stride, true);
                    }
                }
                return;
            }
            std::vector<T> col(g.patch() * g.out_plane());
            MapConstMat<T> wmat(kernel.data().data(), g.f, g.patch());
            for (std::size_t n = 0; n < g.n; ++n) {
                MapConstMat<T> dy(dy_all.data() + n * out_stride, g.f, g.out_plane());
                if (dw_ptr) {
                    im2col(input.data().data() + n * in_stride, g, col.data());
                    MapConstMat<T> cmat(col.data(), g.patch(), g.out_plane());
                    MapMat<T> dw(dw_ptr, g.f, g.patch());
                    dw.noalias() += dy * cmat.transpose();
                }
                if (dx_ptr) {
                    MapMat<T> dcol(col.data(), g.patch(), g.out_plane());
                    dcol.noalias() = wmat.transpose() * dy;
                    col2im_add(col.data(), g, dx_ptr + n * in_stride);
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank(a.shape(), 2, "matmul lhs");
    require_rank(b.shape(), 2, "matmul rhs");
    if (a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out({m, n});
    MapMat<T>(out.data().data(), m, n).noalias() =
        MapConstMat<T>(a.data().data(), m, k) * MapConstMat<T>(b.data().data(), k, n);
    check_finite(out, "matmul");
    if (tracking<T>(a, b)) {
        attach(out, [a, b, out, m, k, n]() {
            MapConstMat<T> dc(out.grad().data(), m, n);
            if (a.requires_grad()) {
                MapMat<T>(a.grad().data(), m, k).noalias() +=
                    dc * MapConstMat<T>(b.data().data(), k, n).transpose();
            }
            if (b.requires_grad()) {
                MapMat<T>(b.grad().data(), k, n).noalias() +=
                    MapConstMat<T>(a.data().data(), m, k).transpose() * dc;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    require_rank(x.shape(), 2, "add_bias input");
    require_rank(bias.shape(), 1, "add_bias bias");
    if (x.dim(1) != bias.dim(0)) {
        throw ShapeError("add_bias: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
    }
    const auto rows = x.dim(0), cols = x.dim(1);
    Tensor<T> out(x.shape());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] + bias[c];
    if (tracking<T>(x, bias)) {
        attach(out, [x, bias, out, rows, cols]() {
            auto g = out.grad();
            if (x.requires_grad()) {
                auto gx = x.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (bias.requires_grad()) {
                auto gb = bias.grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
            }
        });
    }
    return out;
}

// ---- elementwise ------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
    if (tracking<T>(a, b)) {
        attach(out, [a, b, out]() {
            auto g = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
    if (tracking<T>(a, b)) {
        attach(out, [a, b, out]() {
            auto g = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * factor;
    if (tracking<T>(x)) {
        attach(out, [x, out, factor]() {
            auto g = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.data()) acc += v;
    auto out = Tensor<T>::scalar(acc);
    if (tracking<T>(x)) {
        attach(out, [x, out]() {
            const T g = out.grad()[0];
            for (auto& v : x.grad()) v += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    if (tracking<T>(x)) {
        attach(out, [x, out]() {
            auto g = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (x[i] > T(0)) gx[i] += g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const T v = x[i];
        // Split by sign so exp never overflows.
        if (v >= T(0)) {
            out[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            out[i] = e / (T(1) + e);
        }
    }
    if (tracking<T>(x)) {
        attach(out, [x, out]() {
            auto g = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * out[i] * (T(1) - out[i]);
        });
    }
    return out;
}

// ---- spatial ----------------------------------------------------------------

template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x) {
    require_rank(x.shape(), 4, "maxpool2");
    const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0) {
        throw ShapeError("maxpool2: spatial extents must be even, got " + shape_str(x.shape()));
    }
    const auto ho = h / 2, wo = w / 2;
    Tensor<T> out({n, c, ho, wo});
    std::vector<std::size_t> argmax(out.numel());
    std::size_t o = 0;
    for (std::size_t p = 0; p < n * c; ++p) {
        const std::size_t base = p * h * w;
        for (std::size_t i = 0; i < ho; ++i) {
            for (std::size_t j = 0; j < wo; ++j, ++o) {
                const std::size_t cand[4] = {base + 2 * i * w + 2 * j, base + 2 * i * w + 2 * j + 1,
                                             base + (2 * i + 1) * w + 2 * j,
                                             base + (2 * i + 1) * w + 2 * j + 1};
                std::size_t best = cand[0];
                for (int q = 1; q < 4; ++q)
                    if (x[cand[q]] > x[best]) best = cand[q];
                argmax[o] = best;
                out[o] = x[best];
            }
        }
    }
    if (tracking<T>(x)) {
        attach(out, [x, out, argmax = std::move(argmax)]() {
            auto g = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> upsample_nearest2(const Tensor<T>& x) {
    require_rank(x.shape(), 4, "upsample_nearest2");
    const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<T> out({n, c, 2 * h, 2 * w});
    for (std::size_t p = 0; p < n * c; ++p) {
        const T* src = x.data().data() + p * h * w;
        T* dst = out.data().data() + p * 4 * h * w;
        for (std::size_t i = 0; i < 2 * h; ++i)
            for (std::size_t j = 0; j < 2 * w; ++j) dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
    }
    if (tracking<T>(x)) {
        attach(out, [x, out, n, c, h, w]() {
            const T* g = out.grad().data();
            T* gx = x.grad().data();
            for (std::size_t p = 0; p < n * c; ++p) {
                const T* src = g + p * 4 * h * w;
                T* dst = gx + p * h * w;
                for (std::size_t i = 0; i < 2 * h; ++i)
                    for (std::size_t j = 0; j < 2 * w; ++j) dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    require_rank(x.shape(), 4, "global_avg_pool");
    const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> out({n, c});
    for (std::size_t p = 0; p < n * c; ++p) {
        T acc = T(0);
        for (std::size_t i = 0; i < hw; ++i) acc += x[p * hw + i];
        out[p] = acc / static_cast<T>(hw);
    }
    if (tracking<T>(x)) {
        attach(out, [x, out, n, c, hw]() {
            auto g = out.grad();
            auto gx = x.grad();
            for (std::size_t p = 0; p < n * c; ++p) {
                const T v = g[p] / static_cast<T>(hw);
                for (std::size_t i = 0; i < hw; ++i) gx[p * hw + i] += v;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
    if (x.rank() < 1) throw ShapeError("flatten: scalar input");
    const auto n = x.dim(0);
    Tensor<T> out = x.reshaped({n, n ? x.numel() / n : 0});
    if (tracking<T>(x)) {
        attach(out, [x, out]() {
            auto g = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, std::uint64_t seed, bool training) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw std::invalid_argument("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
    }
    if (!training || rate == 0.0) return x;
    Rng rng(seed);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    std::vector<T> mask(x.numel());
    for (auto& m : mask) m = rng.bernoulli(rate) ? T(0) : keep_scale;
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * mask[i];
    if (tracking<T>(x)) {
        attach(out, [x, out, mask = std::move(mask)]() {
            auto g = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
        });
    }
    return out;
}

// ---- losses -----------------------------------------------------------------

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels,
                                double smoothing) {
    require_rank(logits.shape(), 2, "softmax_cross_entropy");
    const auto n = logits.dim(0), k = logits.dim(1);
    if (labels.size() != n) {
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for logits " + shape_str(logits.shape()));
    }
    if (!(smoothing >= 0.0 && smoothing < 1.0)) {
        throw std::invalid_argument("softmax_cross_entropy: smoothing must lie in [0, 1)");
    }
    if (n == 0) throw ShapeError("softmax_cross_entropy: empty batch");
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= k) {
            throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) +
                                    " outside [0," + std::to_string(k) + ")");
        }
    }
    const double off_d = smoothing / static_cast<double>(k), on_d = 1.0 - smoothing + off_d;
    const T off = static_cast<T>(off_d), on = static_cast<T>(on_d);
    std::vector<T> probs(n * k);
    // reductions in double; float sums over many classes drift
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const T* z = logits.data().data() + r * k;
        const double zmax = *std::max_element(z, z + k);
        double denom = 0.0;
        for (std::size_t i = 0; i < k; ++i) denom += std::exp(static_cast<double>(z[i]) - zmax);
        const double log_denom = std::log(denom);
        double row = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            const double logp = static_cast<double>(z[i]) - zmax - log_denom;
            probs[r * k + i] = static_cast<T>(std::exp(logp));
            row -= ((static_cast<int>(i) == labels[r]) ? on_d : off_d) * logp;
        }
        total += row;
    }
    auto out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(n)));
    check_finite(out, "softmax_cross_entropy");
    if (tracking<T>(logits)) {
        std::vector<int> ys(labels.begin(), labels.end());
        attach(out, [logits, out, probs = std::move(probs), ys = std::move(ys), n, k, on, off]() {
            const T g = out.grad()[0] / static_cast<T>(n);
            auto gz = logits.grad();
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t i = 0; i < k; ++i) {
                    const T q = (static_cast<int>(i) == ys[r]) ? on : off;
                    gz[r * k + i] += g * (probs[r * k + i] - q);
                }
        });
    }
    return out;
}

namespace {

template <typename T>
T sign_of(T v) {
    return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
}

// Adds d(mean-over-batch TV)/d(img) scaled by `weight` into `grad`.
template <typename T>
void tv_backward(const Tensor<T>& img, T weight, std::span<T> grad) {
    const auto n = img.dim(0), c = img.dim(1), h = img.dim(2), w = img.dim(3);
    const T s = weight / static_cast<T>(n);
    for (std::size_t p = 0; p < n * c; ++p) {
        const T* x = img.data().data() + p * h * w;
        T* g = grad.data() + p * h * w;
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                if (i + 1 < h) {
                    const T d = s * sign_of(x[(i + 1) * w + j] - x[i * w + j]);
                    g[(i + 1) * w + j] += d;
                    g[i * w + j] -= d;
                }
                if (j + 1 < w) {
                    const T d = s * sign_of(x[i * w + j + 1] - x[i * w + j]);
                    g[i * w + j + 1] += d;
                    g[i * w + j] -= d;
                }
            }
    }
}

template <typename T>
T tv_value(const Tensor<T>& img) {
    const auto n = img.dim(0), c = img.dim(1), h = img.dim(2), w = img.dim(3);
    T total = T(0);
    for (std::size_t p = 0; p < n * c; ++p) {
        const T* x = img.data().data() + p * h * w;
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                if (i + 1 < h) total += std::abs(x[(i + 1) * w + j] - x[i * w + j]);
                if (j + 1 < w) total += std::abs(x[i * w + j + 1] - x[i * w + j]);
            }
    }
    return total / static_cast<T>(n);
}

void require_image(const Shape& s, const char* op) {
    require_rank(s, 4, op);
    if (s[0] == 0 || s[2] < 2 || s[3] < 2) {
        throw ShapeError(std::string(op) + ": needs a non-empty batch with H, W >= 2, got " +
                         shape_str(s));
    }
}

}  // namespace

template <typename T>
Tensor<T> total_variation(const Tensor<T>& img) {
    require_image(img.shape(), "total_variation");
    auto out = Tensor<T>::scalar(tv_value(img));
    if (tracking<T>(img)) {
        attach(out, [img, out]() { tv_backward(img, out.grad()[0], img.grad()); });
    }
    return out;
}

template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& recon, const Tensor<T>& target, double tv_weight,
                              RecNorm norm) {
    require_same_shape(recon, target, "reconstruction_loss");
    require_image(recon.shape(), "reconstruction_loss");
    const auto n = recon.dim(0);
    const auto per = recon.numel() / n;
    std::vector<T> norms(n);
    T total = T(0);
    for (std::size_t s = 0; s < n; ++s) {
        T sq = T(0);
        for (std::size_t i = 0; i < per; ++i) {
            const T r = recon[s * per + i] - target[s * per + i];
            sq += r * r;
        }
        norms[s] = norm == RecNorm::l2 ? std::sqrt(sq) : sq;
        total += norms[s];
    }
    T value = total / static_cast<T>(n);
    // TV averaged per pixel
    const T tvw = static_cast<T>(tv_weight / static_cast<double>(per));
    if (tv_weight != 0.0) value += tvw * tv_value(recon);
    auto out = Tensor<T>::scalar(value);
    check_finite(out, "reconstruction_loss");
    if (tracking<T>(recon, target)) {
        attach(out, [recon, target, out, norms = std::move(norms), n, per, tvw, norm]() {
            const T g = out.grad()[0];
            T* gr = recon.requires_grad() ? recon.grad().data() : nullptr;
            T* gt = target.requires_grad() ? target.grad().data() : nullptr;
            for (std::size_t s = 0; s < n; ++s) {
                T coef;
                if (norm == RecNorm::l2) {
                    if (norms[s] == T(0)) continue;
                    coef = g / (norms[s] * static_cast<T>(n));
                } else {
                    coef = T(2) * g / static_cast<T>(n);
                }
                for (std::size_t i = 0; i < per; ++i) {
                    const T d = coef * (recon[s * per + i] - target[s * per + i]);
                    if (gr) gr[s * per + i] += d;
                    if (gt) gt[s * per + i] -= d;
                }
            }
            if (gr && tvw != T(0)) tv_backward(recon, g * tvw, recon.grad());
        });
    }
    return out;
}

// ---- instantiations ---------------------------------------------------------

#define TNR_INSTANTIATE(T)                                                                       \
    template class Tensor<T>;                                                                    \
    template class Tape<T>;                                                                      \
    template class TapeScope<T>;                                                                 \
    template class NoGradScope<T>;                                                               \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, \
                              std::size_t);                                                      \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                             \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
    template Tensor<T> scale(const Tensor<T>&, T);                                               \
    template Tensor<T> sum(const Tensor<T>&);                                                    \
    template Tensor<T> relu(const Tensor<T>&);                                                   \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                \
    template Tensor<T> maxpool2(const Tensor<T>&);                                               \
    template Tensor<T> upsample_nearest2(const Tensor<T>&);                                      \
    template Tensor<T> global_avg_pool(const Tensor<T>&);                                        \
    template Tensor<T> flatten(const Tensor<T>&);                                                \
    template Tensor<T> dropout(const Tensor<T>&, double, std::uint64_t, bool);                   \
    template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>, double);    \
    template Tensor<T> total_variation(const Tensor<T>&);                                        \
    template Tensor<T> reconstruction_loss(const Tensor<T>&, const Tensor<T>&, double, RecNorm);

TNR_INSTANTIATE(float)
TNR_INSTANTIATE(double)

#undef TNR_INSTANTIATE

}  // namespace tnr

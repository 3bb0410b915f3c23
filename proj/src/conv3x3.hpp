#pragma once

// Direct 3x3, stride-1, pad-1 convolution kernels. Rows are processed in
// fixed-width chunks so the inner loops vectorize; inputs are copied into
// zero-padded planes whose row stride leaves slack for chunk over-reads.

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <vector>

namespace tnr::detail {

struct Plane3x3 {
    std::size_t h, w;      // logical extents
    std::size_t stride;    // padded row stride
    std::size_t rows;      // padded rows
    std::size_t chunk;     // vector chunk width
    std::size_t plane() const { return rows * stride; }
};

inline Plane3x3 plane_layout(std::size_t h, std::size_t w) {
    const std::size_t chunk = w > 8 ? 16 : 8;
    const std::size_t chunks = (w + chunk - 1) / chunk;
    // +2 for the halo; +2 more so the last chunk may read past the edge.
    return {h, w, chunks * chunk + 2, h + 3, chunk};
}

/// Copies `channels` planes of h*w into zero-padded planes (1-pixel halo).
template <typename T>
void pad_planes(const T* src, std::size_t channels, const Plane3x3& p, std::vector<T>& dst) {
    dst.assign(channels * p.plane(), T(0));
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t i = 0; i < p.h; ++i) {
            const T* s = src + (c * p.h + i) * p.w;
            std::copy(s, s + p.w, dst.data() + c * p.plane() + (i + 1) * p.stride + 1);
        }
    }
}

/// out[f] (+)= bias[f] + sum_c corr(in_pad[c], weights[f][c]) for one sample,
/// for FB consecutive filters starting at f0. weights laid out [F][C][9].
template <typename T, std::size_t CH, std::size_t FB>
void conv3x3_filter_block(const T* in_pad, std::size_t channels, const Plane3x3& p, const T* weights,
                          const T* bias, std::size_t f0, T* out, bool accumulate) {
    using Vec = Eigen::Array<T, CH, 1>;
    using In = Eigen::Map<const Vec>;
    Vec acc[FB];
    for (std::size_t i = 0; i < p.h; ++i) {
        for (std::size_t j0 = 0; j0 < p.w; j0 += CH) {
            for (std::size_t b = 0; b < FB; ++b) acc[b].setConstant(bias ? bias[f0 + b] : T(0));
            for (std::size_t c = 0; c < channels; ++c) {
                const T* r0 = in_pad + c * p.plane() + i * p.stride + j0;
                const T* r1 = r0 + p.stride;
                const T* r2 = r1 + p.stride;
                const Vec x[9] = {In(r0), In(r0 + 1), In(r0 + 2), In(r1), In(r1 + 1),
                                  In(r1 + 2), In(r2), In(r2 + 1), In(r2 + 2)};
                for (std::size_t b = 0; b < FB; ++b) {
                    const T* k = weights + ((f0 + b) * channels + c) * 9;
                    for (std::size_t t = 0; t < 9; ++t) acc[b] += k[t] * x[t];
                }
            }
            const std::size_t len = std::min(CH, p.w - j0);
            for (std::size_t b = 0; b < FB; ++b) {
                Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> o(out + ((f0 + b) * p.h + i) * p.w + j0,
                                                                 static_cast<Eigen::Index>(len));
                if (accumulate) {
                    o += acc[b].head(static_cast<Eigen::Index>(len));
                } else {
                    o = acc[b].head(static_cast<Eigen::Index>(len));
                }
            }
        }
    }
}

template <typename T, std::size_t CH>
void conv3x3_forward_chunked(const T* in_pad, std::size_t channels, const Plane3x3& p, const T* weights,
                             const T* bias, std::size_t filters, T* out, bool accumulate) {
    std::size_t f = 0;
    for (; f + 4 <= filters; f += 4)
        conv3x3_filter_block<T, CH, 4>(in_pad, channels, p, weights, bias, f, out, accumulate);
    for (; f < filters; ++f)
        conv3x3_filter_block<T, CH, 1>(in_pad, channels, p, weights, bias, f, out, accumulate);
}

template <typename T>
void conv3x3_forward(const T* in_pad, std::size_t channels, const Plane3x3& p, const T* weights,
                     const T* bias, std::size_t filters, T* out, bool accumulate) {
    if (p.chunk == 16) {
        conv3x3_forward_chunked<T, 16>(in_pad, channels, p, weights, bias, filters, out, accumulate);
    } else {
        conv3x3_forward_chunked<T, 8>(in_pad, channels, p, weights, bias, filters, out, accumulate);
    }
}

/// dw[f][c][t] += sum_{i,j} dy[f][i][j] * in_pad[c][i + t/3][j + t%3] for FB
/// consecutive filters starting at f0. dy_pad holds dy with row stride
/// p.stride and zeros past column w.
template <typename T, std::size_t CH, std::size_t FB>
void conv3x3_weight_grad_block(const T* in_pad, std::size_t channels, const Plane3x3& p, const T* dy_pad,
                               std::size_t f0, T* dw) {
    using Vec = Eigen::Array<T, CH, 1>;
    using In = Eigen::Map<const Vec>;
    Vec acc[FB][9];
    for (std::size_t c = 0; c < channels; ++c) {
        for (auto& row : acc)
            for (auto& a : row) a.setZero();
        const T* pc = in_pad + c * p.plane();
        for (std::size_t i = 0; i < p.h; ++i) {
            for (std::size_t j0 = 0; j0 < p.w; j0 += CH) {
                const T* r0 = pc + i * p.stride + j0;
                const T* r1 = r0 + p.stride;
                const T* r2 = r1 + p.stride;
                const Vec x[9] = {In(r0), In(r0 + 1), In(r0 + 2), In(r1), In(r1 + 1),
                                  In(r1 + 2), In(r2), In(r2 + 1), In(r2 + 2)};
                for (std::size_t b = 0; b < FB; ++b) {
                    const Vec g = In(dy_pad + ((f0 + b) * p.h + i) * p.stride + j0);
                    for (std::size_t t = 0; t < 9; ++t) acc[b][t] += g * x[t];
                }
            }
        }
        for (std::size_t b = 0; b < FB; ++b) {
            T* d = dw + ((f0 + b) * channels + c) * 9;
            for (std::size_t t = 0; t < 9; ++t) d[t] += acc[b][t].sum();
        }
    }
}

template <typename T, std::size_t CH>
void conv3x3_weight_grad_chunked(const T* in_pad, std::size_t channels, const Plane3x3& p, const T* dy_pad,
                                 std::size_t filters, T* dw) {
    std::size_t f = 0;
    for (; f + 2 <= filters; f += 2) conv3x3_weight_grad_block<T, CH, 2>(in_pad, channels, p, dy_pad, f, dw);
    for (; f < filters; ++f) conv3x3_weight_grad_block<T, CH, 1>(in_pad, channels, p, dy_pad, f, dw);
}

template <typename T>
void conv3x3_weight_grad(const T* in_pad, std::size_t channels, const Plane3x3& p, const T* dy_pad,
                         std::size_t filters, T* dw) {
    if (p.chunk == 16) {
        conv3x3_weight_grad_chunked<T, 16>(in_pad, channels, p, dy_pad, filters, dw);
    } else {
        conv3x3_weight_grad_chunked<T, 8>(in_pad, channels, p, dy_pad, filters, dw);
    }
}

/// Copies dy planes (h*w each) to row stride p.stride with zero tails.
template <typename T>
void stride_planes(const T* src, std::size_t channels, const Plane3x3& p, std::vector<T>& dst) {
    dst.assign(channels * p.h * p.stride + p.stride, T(0));
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t i = 0; i < p.h; ++i) {
            const T* s = src + (c * p.h + i) * p.w;
            std::copy(s, s + p.w, dst.data() + (c * p.h + i) * p.stride);
        }
}

/// [F][C][9] -> [C][F][9] with each 3x3 tap set rotated by 180 degrees, which
/// turns the input-gradient computation into a forward correlation.
template <typename T>
std::vector<T> flip_transpose(const T* w, std::size_t filters, std::size_t channels) {
    std::vector<T> out(filters * channels * 9);
    for (std::size_t f = 0; f < filters; ++f)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t t = 0; t < 9; ++t) out[(c * filters + f) * 9 + (8 - t)] = w[(f * channels + c) * 9 + t];
    return out;
}

}  // namespace tnr::detail

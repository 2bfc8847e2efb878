#pragma once

// Dense loops shared by the differentiable tape and the plain inference path.
// Both routes call the same functions so that logits computed either way are
// bit-identical.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

namespace hat::kernels {

/// Geometry of a stride-1, unpadded square-kernel convolution.
struct ConvGeom {
    std::size_t batch = 0, channels = 0, height = 0, width = 0, kernel = 0;

    std::size_t out_height() const { return height - kernel + 1; }
    std::size_t out_width() const { return width - kernel + 1; }
    std::size_t patches() const { return out_height() * out_width(); }
    std::size_t patch_size() const { return channels * kernel * kernel; }
    std::size_t input_size() const { return batch * channels * height * width; }
    std::size_t cols_size() const { return batch * patches() * patch_size(); }

    friend bool operator==(const ConvGeom&, const ConvGeom&) = default;
};

/// out[m,n] = op(A)[m,k] * op(B)[k,n], row-major, op = transpose when the flag is set.
/// Stored shapes: A is [m,k] (or [k,m] if trans_a), B is [k,n] (or [n,k] if trans_b).
template <class T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> out, std::size_t m,
            std::size_t k, std::size_t n, bool trans_a, bool trans_b) {
    std::fill(out.begin(), out.end(), T{0});
    if (!trans_b) {
        for (std::size_t i = 0; i < m; ++i) {
            T* row = out.data() + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const T av = trans_a ? a[p * m + i] : a[i * k + p];
                const T* brow = b.data() + p * n;
                for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
            }
        }
    } else {
        for (std::size_t i = 0; i < m; ++i) {
            T* row = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const T* brow = b.data() + j * k;
                T acc{0};
                if (!trans_a) {
                    const T* arow = a.data() + i * k;
                    for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
                } else {
                    for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * brow[p];
                }
                row[j] = acc;
            }
        }
    }
}

/// [batch, channels, h, w] -> [batch * patches, channels * k * k]
template <class T>
void im2col(std::span<const T> x, std::span<T> cols, const ConvGeom& g) {
    const std::size_t oh = g.out_height(), ow = g.out_width(), ps = g.patch_size();
    std::size_t row = 0;
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j, ++row) {
                T* dst = cols.data() + row * ps;
                for (std::size_t c = 0; c < g.channels; ++c)
                    for (std::size_t di = 0; di < g.kernel; ++di) {
                        const T* src =
                            x.data() + ((n * g.channels + c) * g.height + i + di) * g.width + j;
                        for (std::size_t dj = 0; dj < g.kernel; ++dj) *dst++ = src[dj];
                    }
            }
}

/// Adjoint of im2col: scatters patch columns back, summing overlaps.
template <class T>
void col2im(std::span<const T> cols, std::span<T> x, const ConvGeom& g) {
    std::fill(x.begin(), x.end(), T{0});
    const std::size_t oh = g.out_height(), ow = g.out_width(), ps = g.patch_size();
    std::size_t row = 0;
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j, ++row) {
                const T* src = cols.data() + row * ps;
                for (std::size_t c = 0; c < g.channels; ++c)
                    for (std::size_t di = 0; di < g.kernel; ++di) {
                        T* dst = x.data() + ((n * g.channels + c) * g.height + i + di) * g.width + j;
                        for (std::size_t dj = 0; dj < g.kernel; ++dj) dst[dj] += *src++;
                    }
            }
}

/// [outer, rows, cols] -> [outer, cols, rows]
template <class T>
void transpose_last2(std::span<const T> in, std::span<T> out, std::size_t outer, std::size_t rows,
                     std::size_t cols) {
    for (std::size_t o = 0; o < outer; ++o) {
        const T* src = in.data() + o * rows * cols;
        T* dst = out.data() + o * rows * cols;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
    }
}

/// out[o, m, i] = b[m] for a [outer, mid, inner] output.
template <class T>
void broadcast(std::span<const T> b, std::span<T> out, std::size_t outer, std::size_t mid,
               std::size_t inner) {
    T* dst = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t m = 0; m < mid; ++m) {
            std::fill(dst, dst + inner, b[m]);
            dst += inner;
        }
}

/// out[m] = sum over (o, i) of in[o, m, i]. Adjoint of broadcast.
template <class T>
void sum_reduce(std::span<const T> in, std::span<T> out, std::size_t outer, std::size_t mid,
                std::size_t inner) {
    std::fill(out.begin(), out.end(), T{0});
    const T* src = in.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t m = 0; m < mid; ++m) {
            T acc{0};
            for (std::size_t i = 0; i < inner; ++i) acc += src[i];
            out[m] += acc;
            src += inner;
        }
}

/// Flat source indices of the window maxima for a k x k, stride-k pool over
/// [batch, channels, h, w]. Ties pick the first element in row-major order.
/// NaN inputs never win against a finite value; an all-NaN window picks its first slot.
template <class T>
std::vector<std::uint32_t> maxpool_argmax(std::span<const T> x, std::size_t batch,
                                          std::size_t channels, std::size_t h, std::size_t w,
                                          std::size_t k) {
    const std::size_t oh = h / k, ow = w / k;
    std::vector<std::uint32_t> idx;
    idx.reserve(batch * channels * oh * ow);
    for (std::size_t nc = 0; nc < batch * channels; ++nc) {
        const std::size_t base = nc * h * w;
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                std::size_t best = base + (i * k) * w + j * k;
                for (std::size_t di = 0; di < k; ++di)
                    for (std::size_t dj = 0; dj < k; ++dj) {
                        const std::size_t at = base + (i * k + di) * w + j * k + dj;
                        if (x[at] > x[best] || (std::isnan(x[best]) && !std::isnan(x[at])))
                            best = at;
                    }
                idx.push_back(static_cast<std::uint32_t>(best));
            }
    }
    return idx;
}

/// Row-wise log-sum-exp of a [rows, cols] matrix, shifted by the row maximum.
template <class T>
void logsumexp_rows(std::span<const T> z, std::span<T> out, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = z.data() + r * cols;
        const T top = *std::max_element(row, row + cols);
        T acc{0};
        for (std::size_t c = 0; c < cols; ++c) acc += std::exp(row[c] - top);
        out[r] = top + std::log(acc);
    }
}

template <class T>
void softmax_rows(std::span<const T> z, std::span<T> out, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = z.data() + r * cols;
        T* dst = out.data() + r * cols;
        const T top = *std::max_element(row, row + cols);
        T acc{0};
        for (std::size_t c = 0; c < cols; ++c) {
            dst[c] = std::exp(row[c] - top);
            acc += dst[c];
        }
        for (std::size_t c = 0; c < cols; ++c) dst[c] /= acc;
    }
}

} // namespace hat::kernels

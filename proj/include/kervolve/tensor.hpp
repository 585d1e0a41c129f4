#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "kervolve/errors.hpp"

namespace kervolve {

/// Dense N-dimensional array, row-major over the shape order. The universal
/// value type for images, filters, activations and gradients.
template <class T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(std::vector<size_t> shape)
        : shape_(std::move(shape)), data_(checked_size(shape_), T{0}) {}

    TensorT(std::vector<size_t> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_size(shape_) != data_.size()) {
            throw config_error("tensor: data length " + std::to_string(data_.size()) +
                               " does not match shape " + shape_string());
        }
    }

    const std::vector<size_t>& shape() const { return shape_; }
    size_t rank() const { return shape_.size(); }
    size_t size() const { return data_.size(); }
    size_t extent(size_t axis) const { return shape_.at(axis); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }

    T& operator[](size_t flat) { return data_[flat]; }
    const T& operator[](size_t flat) const { return data_[flat]; }

    template <class... Ix>
    T& operator()(Ix... ix) {
        return data_[flat_index(ix...)];
    }
    template <class... Ix>
    const T& operator()(Ix... ix) const {
        return data_[flat_index(ix...)];
    }

    /// Same data, new shape; element count must be preserved.
    TensorT reshaped(std::vector<size_t> shape) const {
        if (checked_size(shape) != data_.size()) {
            throw config_error("tensor: reshape to incompatible element count");
        }
        return TensorT(std::move(shape), data_);
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(),
                           [](T v) { return std::isfinite(static_cast<double>(v)); });
    }

    std::string shape_string() const {
        std::ostringstream os;
        os << '[';
        for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
        os << ']';
        return os.str();
    }

    bool operator==(const TensorT& other) const {
        return shape_ == other.shape_ && data_ == other.data_;
    }

private:
    template <class... Ix>
    size_t flat_index(Ix... ix) const {
        const size_t idx[] = {static_cast<size_t>(ix)...};
        size_t flat = 0;
        for (size_t a = 0; a < sizeof...(Ix); ++a) flat = flat * shape_[a] + idx[a];
        return flat;
    }

    static size_t checked_size(const std::vector<size_t>& shape) {
        size_t n = 1;
        for (size_t e : shape) {
            if (e != 0 && n > static_cast<size_t>(-1) / e) {
                throw config_error("tensor: shape extent overflow");
            }
            n *= e;
        }
        return n;
    }

    std::vector<size_t> shape_;
    std::vector<T> data_;
};

using Tensor = TensorT<double>;

// ---------------------------------------------------------------------------
// Patch extraction (im2col / col2im)
// ---------------------------------------------------------------------------

/// Sliding-window geometry for convolution-style layers.
struct PatchGeometry {
    size_t in_channels = 1;
    size_t in_height = 0;
    size_t in_width = 0;
    size_t kernel_h = 1;
    size_t kernel_w = 1;
    size_t stride_h = 1;
    size_t stride_w = 1;
    size_t pad_h = 0;
    size_t pad_w = 0;

    void validate() const {
        if (stride_h < 1 || stride_w < 1) {
            throw config_error("patch geometry: stride must be >= 1");
        }
        if (in_height + 2 * pad_h < kernel_h || in_width + 2 * pad_w < kernel_w) {
            throw config_error("patch geometry: kernel extent exceeds padded input " +
                               std::to_string(in_height) + "x" + std::to_string(in_width) +
                               " (pad " + std::to_string(pad_h) + "," + std::to_string(pad_w) + ")");
        }
    }

    size_t out_height() const {
        validate();
        return (in_height + 2 * pad_h - kernel_h) / stride_h + 1;
    }
    size_t out_width() const {
        validate();
        return (in_width + 2 * pad_w - kernel_w) / stride_w + 1;
    }
    size_t patch_length() const { return in_channels * kernel_h * kernel_w; }

    bool operator==(const PatchGeometry&) const = default;
};

/// All receptive fields of a batch laid out as matrix rows.
/// Row r holds the flattened patch at (sample b, output row i, output col j)
/// with r = (b*out_h + i)*out_w + j; columns are channel-major then row-major
/// over the kernel window.
template <class T>
struct PatchMatrixT {
    size_t rows = 0;
    size_t cols = 0;
    size_t batch = 0;
    PatchGeometry geometry;
    std::vector<T> data;  // row-major [rows x cols]

    T& at(size_t r, size_t c) { return data[r * cols + c]; }
    const T& at(size_t r, size_t c) const { return data[r * cols + c]; }
};

using PatchMatrix = PatchMatrixT<double>;

template <class T>
PatchMatrixT<T> im2col(const TensorT<T>& x, const PatchGeometry& g) {
    g.validate();
    if (x.rank() != 4 || x.extent(1) != g.in_channels || x.extent(2) != g.in_height ||
        x.extent(3) != g.in_width) {
        throw config_error("im2col: input " + x.shape_string() + " does not match geometry");
    }
    const size_t batch = x.extent(0);
    const size_t oh = g.out_height(), ow = g.out_width();
    PatchMatrixT<T> out;
    out.rows = batch * oh * ow;
    out.cols = g.patch_length();
    out.batch = batch;
    out.geometry = g;
    out.data.assign(out.rows * out.cols, T{0});

    const size_t khw = g.kernel_h * g.kernel_w;
    for (size_t b = 0; b < batch; ++b) {
        for (size_t i = 0; i < oh; ++i) {
            for (size_t j = 0; j < ow; ++j) {
                T* row = out.data.data() + ((b * oh + i) * ow + j) * out.cols;
                for (size_t c = 0; c < g.in_channels; ++c) {
                    for (size_t ki = 0; ki < g.kernel_h; ++ki) {
                        // signed: positions inside the zero pad go negative
                        const ptrdiff_t ih =
                            static_cast<ptrdiff_t>(i * g.stride_h + ki) - static_cast<ptrdiff_t>(g.pad_h);
                        if (ih < 0 || ih >= static_cast<ptrdiff_t>(g.in_height)) continue;
                        for (size_t kj = 0; kj < g.kernel_w; ++kj) {
                            const ptrdiff_t iw =
                                static_cast<ptrdiff_t>(j * g.stride_w + kj) - static_cast<ptrdiff_t>(g.pad_w);
                            if (iw < 0 || iw >= static_cast<ptrdiff_t>(g.in_width)) continue;
                            row[c * khw + ki * g.kernel_w + kj] =
                                x(b, c, static_cast<size_t>(ih), static_cast<size_t>(iw));
                        }
                    }
                }
            }
        }
    }
    return out;
}

/// Adjoint of im2col: scatter-adds each patch-gradient entry back into its
/// source pixel. Overlapping patches accumulate; contributions that fell in
/// the zero padding are dropped.
template <class T>
TensorT<T> col2im(const PatchMatrixT<T>& grad_patches, const PatchGeometry& g, size_t batch) {
    g.validate();
    const size_t oh = g.out_height(), ow = g.out_width();
    if (grad_patches.rows != batch * oh * ow || grad_patches.cols != g.patch_length()) {
        throw config_error("col2im: patch matrix " + std::to_string(grad_patches.rows) + "x" +
                           std::to_string(grad_patches.cols) + " does not match geometry");
    }
    TensorT<T> x({batch, g.in_channels, g.in_height, g.in_width});
    const size_t khw = g.kernel_h * g.kernel_w;
    for (size_t b = 0; b < batch; ++b) {
        for (size_t i = 0; i < oh; ++i) {
            for (size_t j = 0; j < ow; ++j) {
                const T* row = grad_patches.data.data() + ((b * oh + i) * ow + j) * grad_patches.cols;
                for (size_t c = 0; c < g.in_channels; ++c) {
                    for (size_t ki = 0; ki < g.kernel_h; ++ki) {
                        const ptrdiff_t ih =
                            static_cast<ptrdiff_t>(i * g.stride_h + ki) - static_cast<ptrdiff_t>(g.pad_h);
                        if (ih < 0 || ih >= static_cast<ptrdiff_t>(g.in_height)) continue;
                        for (size_t kj = 0; kj < g.kernel_w; ++kj) {
                            const ptrdiff_t iw =
                                static_cast<ptrdiff_t>(j * g.stride_w + kj) - static_cast<ptrdiff_t>(g.pad_w);
                            if (iw < 0 || iw >= static_cast<ptrdiff_t>(g.in_width)) continue;
                            x(b, c, static_cast<size_t>(ih), static_cast<size_t>(iw)) +=
                                row[c * khw + ki * g.kernel_w + kj];
                        }
                    }
                }
            }
        }
    }
    return x;
}

// ---------------------------------------------------------------------------
// Matrix product
// ---------------------------------------------------------------------------

namespace detail {
template <class T>
using EigenRowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<EigenRowMajor<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const EigenRowMajor<T>>;
}  // namespace detail

/// out = a (.T)? * b (.T)?  on row-major 2-D tensors. Eigen does the product;
/// the naive-loop oracle in the verify module cross-checks it.
template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b, bool transpose_a = false,
                  bool transpose_b = false) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw config_error("matmul: expected rank-2 tensors, got " + a.shape_string() + " and " +
                           b.shape_string());
    }
    const size_t m = transpose_a ? a.extent(1) : a.extent(0);
    const size_t ka = transpose_a ? a.extent(0) : a.extent(1);
    const size_t kb = transpose_b ? b.extent(1) : b.extent(0);
    const size_t n = transpose_b ? b.extent(0) : b.extent(1);
    if (ka != kb) {
        throw config_error("matmul: inner extents disagree: " + a.shape_string() +
                           (transpose_a ? "^T" : "") + " * " + b.shape_string() +
                           (transpose_b ? "^T" : ""));
    }
    TensorT<T> out({m, n});
    detail::ConstMatMap<T> ma(a.data(), static_cast<Eigen::Index>(a.extent(0)),
                              static_cast<Eigen::Index>(a.extent(1)));
    detail::ConstMatMap<T> mb(b.data(), static_cast<Eigen::Index>(b.extent(0)),
                              static_cast<Eigen::Index>(b.extent(1)));
    detail::MatMap<T> mo(out.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    if (!transpose_a && !transpose_b) {
        mo.noalias() = ma * mb;
    } else if (transpose_a && !transpose_b) {
        mo.noalias() = ma.transpose() * mb;
    } else if (!transpose_a && transpose_b) {
        mo.noalias() = ma * mb.transpose();
    } else {
        mo.noalias() = ma.transpose() * mb.transpose();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise suite and reductions
// ---------------------------------------------------------------------------

namespace detail {
template <class T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw config_error(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                           b.shape_string());
    }
}
}  // namespace detail

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a, b, "add");
    TensorT<T> out(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a, b, "sub");
    TensorT<T> out(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

template <class T>
TensorT<T> scale(const TensorT<T>& a, T factor) {
    TensorT<T> out(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] * factor;
    return out;
}

template <class T>
TensorT<T> hadamard(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a, b, "hadamard");
    TensorT<T> out(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

template <class T>
TensorT<T> exp_elem(const TensorT<T>& a) {
    TensorT<T> out(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out[i] = std::exp(a[i]);
    return out;
}

/// sigmoid(t) = 1 / (1 + exp(-t)); output strictly in (0,1), sigmoid(0) == 0.5.
template <class T>
T sigmoid(T t) {
    if (t >= T{0}) {
        return T{1} / (T{1} + std::exp(-t));
    }
    // avoid overflow of exp(-t) for very negative t
    const T e = std::exp(t);
    return e / (T{1} + e);
}

template <class T>
TensorT<T> sigmoid_elem(const TensorT<T>& a) {
    TensorT<T> out(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out[i] = sigmoid(a[i]);
    return out;
}

template <class T>
TensorT<T> relu(const TensorT<T>& a) {
    TensorT<T> out(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] > T{0} ? a[i] : T{0};
    return out;
}

template <class T>
T sum(const TensorT<T>& a) {
    return std::accumulate(a.values().begin(), a.values().end(), T{0});
}

template <class T>
T mean(const TensorT<T>& a) {
    if (a.size() == 0) throw config_error("mean: empty tensor");
    return sum(a) / static_cast<T>(a.size());
}

template <class T>
T max_value(const TensorT<T>& a) {
    if (a.size() == 0) throw config_error("max: empty tensor");
    return *std::max_element(a.values().begin(), a.values().end());
}

/// Flat index of the first maximum (lowest index wins ties).
template <class T>
size_t argmax(const TensorT<T>& a) {
    if (a.size() == 0) throw config_error("argmax: empty tensor");
    return static_cast<size_t>(
        std::max_element(a.values().begin(), a.values().end()) - a.values().begin());
}

/// Per-row argmax of a rank-2 tensor; used for class predictions.
template <class T>
std::vector<size_t> argmax_rows(const TensorT<T>& a) {
    if (a.rank() != 2) throw config_error("argmax_rows: expected rank-2 tensor");
    const size_t m = a.extent(0), n = a.extent(1);
    std::vector<size_t> out(m);
    for (size_t r = 0; r < m; ++r) {
        const T* row = a.data() + r * n;
        out[r] = static_cast<size_t>(std::max_element(row, row + n) - row);
    }
    return out;
}

template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) throw config_error("dot: length mismatch");
    T acc{0};
    for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

}  // namespace kervolve

#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kervolve/errors.hpp"
#include "kervolve/tensor.hpp"

namespace kervolve {

enum class KernelKind { linear, polynomial, gaussian, mixture };

inline std::string to_string(KernelKind k) {
    switch (k) {
        case KernelKind::linear: return "linear";
        case KernelKind::polynomial: return "polynomial";
        case KernelKind::gaussian: return "gaussian";
        case KernelKind::mixture: return "mixture";
    }
    return "?";
}

inline KernelKind kernel_kind_from_string(const std::string& s) {
    if (s == "linear") return KernelKind::linear;
    if (s == "polynomial") return KernelKind::polynomial;
    if (s == "gaussian") return KernelKind::gaussian;
    if (s == "mixture") return KernelKind::mixture;
    throw config_error("unknown kernel kind '" + s +
                       "' (expected linear|polynomial|gaussian|mixture)");
}

/// Description of the patch/filter similarity function:
///   linear      x.w
///   polynomial  (x.w + offset)^degree
///   gaussian    exp(-gamma * |x - w|^2)
///   mixture     sigmoid(mix_logit)*gaussian + (1-sigmoid(mix_logit))*polynomial
/// mix_logit is the one learnable kernel parameter; the sigmoid keeps the
/// mixing weight inside (0,1) by construction.
struct KernelSpec {
    KernelKind kind = KernelKind::linear;
    double offset = 1.0;      // polynomial offset, >= 0
    int degree = 2;           // polynomial degree, >= 1
    double gamma = 1.0;       // gaussian bandwidth, > 0
    double mix_logit = 0.0;   // mixture logit (learnable)
    bool mix_learnable = true;

    double mix_weight() const { return sigmoid(mix_logit); }

    void validate() const {
        if (degree < 1) throw config_error("kernel spec: degree must be >= 1");
        if (offset < 0.0) throw config_error("kernel spec: offset must be >= 0");
        const bool needs_gamma = kind == KernelKind::gaussian || kind == KernelKind::mixture;
        if (needs_gamma && !(gamma > 0.0)) {
            throw config_error("kernel spec: gamma must be > 0 for " + to_string(kind));
        }
    }

    std::string describe() const {
        std::string s = to_string(kind);
        switch (kind) {
            case KernelKind::linear: break;
            case KernelKind::polynomial:
                s += "(offset=" + std::to_string(offset) + ", degree=" + std::to_string(degree) + ")";
                break;
            case KernelKind::gaussian:
                s += "(gamma=" + std::to_string(gamma) + ")";
                break;
            case KernelKind::mixture:
                s += "(gamma=" + std::to_string(gamma) + ", offset=" + std::to_string(offset) +
                     ", degree=" + std::to_string(degree) +
                     ", mix_logit=" + std::to_string(mix_logit) + ")";
                break;
        }
        return s;
    }
};

namespace detail {
template <class T>
T int_pow(T base, int e) {
    T acc{1};
    for (int i = 0; i < e; ++i) acc *= base;
    return acc;
}
}  // namespace detail

/// Scalar kernel evaluation between two equal-length vectors.
template <class T>
T kernel_eval(std::span<const T> x, std::span<const T> w, const KernelSpec& spec) {
    spec.validate();
    if (x.size() != w.size()) throw config_error("kernel_eval: length mismatch");
    const T inner = dot(x, w);
    switch (spec.kind) {
        case KernelKind::linear:
            return inner;
        case KernelKind::polynomial:
            return detail::int_pow(inner + static_cast<T>(spec.offset), spec.degree);
        case KernelKind::gaussian: {
            T d2{0};
            for (size_t i = 0; i < x.size(); ++i) {
                const T d = x[i] - w[i];
                d2 += d * d;
            }
            return std::exp(-static_cast<T>(spec.gamma) * d2);
        }
        case KernelKind::mixture: {
            KernelSpec g = spec;
            g.kind = KernelKind::gaussian;
            KernelSpec p = spec;
            p.kind = KernelKind::polynomial;
            const T w_g = static_cast<T>(spec.mix_weight());
            return w_g * kernel_eval(x, w, g) + (T{1} - w_g) * kernel_eval(x, w, p);
        }
    }
    throw config_error("kernel_eval: unreachable");
}

/// Intermediates saved by kernel_forward for the matching backward pass.
/// Holds only [m x n] matrices; the caller keeps patches and filters alive.
template <class T>
struct KernelCacheT {
    bool valid = false;
    KernelSpec spec;
    size_t m = 0, n = 0, k = 0;
    TensorT<T> inner;        // patches * filters^T, all kinds except pure gaussian keep it
    TensorT<T> kappa_g;      // gaussian values (gaussian/mixture)
    TensorT<T> kappa_p;      // polynomial values (mixture)
    std::vector<T> patch_sq; // row norms |x_r|^2 (gaussian/mixture)
    std::vector<T> filter_sq;// row norms |w_f|^2 (gaussian/mixture)
};

using KernelCache = KernelCacheT<double>;

template <class T>
struct KernelGradsT {
    PatchMatrixT<T> patches;   // d loss / d patches, same layout as the input patches
    TensorT<T> filters;        // d loss / d filters [n x k]
    std::optional<T> mix_logit;// d loss / d mix_logit (mixture only)
};

namespace detail {

template <class T>
TensorT<T> as_matrix(const PatchMatrixT<T>& p) {
    return TensorT<T>({p.rows, p.cols}, p.data);
}

template <class T>
void check_finite_or_throw(const TensorT<T>& t, const KernelSpec& spec) {
    if (!t.all_finite()) {
        throw numeric_error("kernel '" + spec.describe() +
                            "' produced non-finite values; consider normalizing inputs or "
                            "reducing the learning rate");
    }
}

/// kappa_p = (inner + offset)^degree, elementwise.
template <class T>
TensorT<T> poly_values(const TensorT<T>& inner, const KernelSpec& spec) {
    TensorT<T> out(inner.shape());
    const T c = static_cast<T>(spec.offset);
    for (size_t i = 0; i < inner.size(); ++i) out[i] = int_pow(inner[i] + c, spec.degree);
    return out;
}

/// kappa_g = exp(-gamma (|x|^2 + |w|^2 - 2 x.w)), elementwise over (r,f).
template <class T>
TensorT<T> gaussian_values(const TensorT<T>& inner, const std::vector<T>& patch_sq,
                           const std::vector<T>& filter_sq, const KernelSpec& spec) {
    const size_t m = inner.extent(0), n = inner.extent(1);
    TensorT<T> out({m, n});
    const T g = static_cast<T>(spec.gamma);
    for (size_t r = 0; r < m; ++r) {
        for (size_t f = 0; f < n; ++f) {
            const T d2 = patch_sq[r] + filter_sq[f] - T{2} * inner(r, f);
            out(r, f) = std::exp(-g * d2);
        }
    }
    return out;
}

template <class T>
std::vector<T> row_square_norms(const T* data, size_t rows, size_t cols) {
    std::vector<T> out(rows, T{0});
    for (size_t r = 0; r < rows; ++r) {
        const T* row = data + r * cols;
        T acc{0};
        for (size_t c = 0; c < cols; ++c) acc += row[c] * row[c];
        out[r] = acc;
    }
    return out;
}

}  // namespace detail

/// Kervolution core: entry (r,f) of the result is kappa(patch_r, filter_f).
/// With a linear spec this is exactly the convolution inner product.
template <class T>
TensorT<T> kernel_forward(const PatchMatrixT<T>& patches, const TensorT<T>& filters,
                          const KernelSpec& spec, KernelCacheT<T>* cache = nullptr) {
    spec.validate();
    if (filters.rank() != 2 || filters.extent(1) != patches.cols) {
        throw config_error("kernel_forward: filters " + filters.shape_string() +
                           " incompatible with patch length " + std::to_string(patches.cols));
    }
    const size_t m = patches.rows, n = filters.extent(0), k = patches.cols;
    const TensorT<T> pm = detail::as_matrix(patches);
    TensorT<T> inner = matmul(pm, filters, false, true);  // [m x n]

    KernelCacheT<T> local;
    KernelCacheT<T>& c = cache ? *cache : local;
    c = KernelCacheT<T>{};
    c.spec = spec;
    c.m = m;
    c.n = n;
    c.k = k;

    TensorT<T> out;
    switch (spec.kind) {
        case KernelKind::linear:
            out = inner;
            break;
        case KernelKind::polynomial:
            out = detail::poly_values(inner, spec);
            c.inner = std::move(inner);
            break;
        case KernelKind::gaussian: {
            c.patch_sq = detail::row_square_norms(patches.data.data(), m, k);
            c.filter_sq = detail::row_square_norms(filters.data(), n, k);
            c.kappa_g = detail::gaussian_values(inner, c.patch_sq, c.filter_sq, spec);
            out = c.kappa_g;
            break;
        }
        case KernelKind::mixture: {
            c.patch_sq = detail::row_square_norms(patches.data.data(), m, k);
            c.filter_sq = detail::row_square_norms(filters.data(), n, k);
            c.kappa_g = detail::gaussian_values(inner, c.patch_sq, c.filter_sq, spec);
            c.kappa_p = detail::poly_values(inner, spec);
            c.inner = std::move(inner);
            const T w_g = static_cast<T>(spec.mix_weight());
            out = TensorT<T>({m, n});
            for (size_t i = 0; i < out.size(); ++i) {
                out[i] = w_g * c.kappa_g[i] + (T{1} - w_g) * c.kappa_p[i];
            }
            break;
        }
    }
    detail::check_finite_or_throw(out, spec);
    c.valid = true;
    return out;
}

namespace detail {

/// Shared backward path for the polynomial term: with
/// P(r,f) = upstream(r,f) * degree * (inner + offset)^(degree-1),
/// grad_patches += P * filters and grad_filters += P^T * patches.
template <class T>
void poly_backward_into(const TensorT<T>& upstream, const TensorT<T>& inner,
                        const KernelSpec& spec, const TensorT<T>& pm, const TensorT<T>& filters,
                        T weight, TensorT<T>& grad_pm, TensorT<T>& grad_filters) {
    TensorT<T> p(upstream.shape());
    const T c = static_cast<T>(spec.offset);
    const T d = static_cast<T>(spec.degree);
    for (size_t i = 0; i < p.size(); ++i) {
        p[i] = weight * upstream[i] * d * int_pow(inner[i] + c, spec.degree - 1);
    }
    const TensorT<T> gp = matmul(p, filters);        // [m x k]
    const TensorT<T> gf = matmul(p, pm, true, false);// [n x k]
    for (size_t i = 0; i < grad_pm.size(); ++i) grad_pm[i] += gp[i];
    for (size_t i = 0; i < grad_filters.size(); ++i) grad_filters[i] += gf[i];
}

/// Gaussian term: d kappa / d x = -2 gamma kappa (x - w), symmetric sign for w.
/// With S = upstream o kappa_g:
///   grad_patches += -2 gamma (rowsum(S) * x_r - S * W)
///   grad_filters += -2 gamma (colsum(S) * w_f - S^T * X)
template <class T>
void gaussian_backward_into(const TensorT<T>& upstream, const TensorT<T>& kappa_g,
                            const KernelSpec& spec, const TensorT<T>& pm,
                            const TensorT<T>& filters, T weight, TensorT<T>& grad_pm,
                            TensorT<T>& grad_filters) {
    const size_t m = upstream.extent(0), n = upstream.extent(1), k = pm.extent(1);
    TensorT<T> s({m, n});
    for (size_t i = 0; i < s.size(); ++i) s[i] = weight * upstream[i] * kappa_g[i];

    std::vector<T> row_sum(m, T{0}), col_sum(n, T{0});
    for (size_t r = 0; r < m; ++r) {
        for (size_t f = 0; f < n; ++f) {
            row_sum[r] += s(r, f);
            col_sum[f] += s(r, f);
        }
    }
    const T g2 = T{2} * static_cast<T>(spec.gamma);
    const TensorT<T> sw = matmul(s, filters);        // [m x k]
    const TensorT<T> sx = matmul(s, pm, true, false);// [n x k]
    for (size_t r = 0; r < m; ++r) {
        for (size_t c = 0; c < k; ++c) {
            grad_pm(r, c) += -g2 * (row_sum[r] * pm(r, c) - sw(r, c));
        }
    }
    for (size_t f = 0; f < n; ++f) {
        for (size_t c = 0; c < k; ++c) {
            grad_filters(f, c) += -g2 * (col_sum[f] * filters(f, c) - sx(f, c));
        }
    }
}

}  // namespace detail

/// Analytic gradients of kernel_forward with respect to patches, filters and
/// (for the mixture) the mixing logit. `patches` and `filters` must be the
/// arguments of the forward call that produced `cache`.
template <class T>
KernelGradsT<T> kernel_backward(const TensorT<T>& upstream, const KernelCacheT<T>& cache,
                                const PatchMatrixT<T>& patches, const TensorT<T>& filters) {
    if (!cache.valid) {
        throw config_error("kernel_backward: cache missing (forward pass not run)");
    }
    if (upstream.rank() != 2 || upstream.extent(0) != cache.m || upstream.extent(1) != cache.n) {
        throw config_error("kernel_backward: upstream " + upstream.shape_string() +
                           " does not match cached forward dimensions");
    }
    if (patches.rows != cache.m || patches.cols != cache.k || filters.extent(0) != cache.n) {
        throw config_error("kernel_backward: patches/filters do not match cached forward");
    }
    const KernelSpec& spec = cache.spec;
    const TensorT<T> pm = detail::as_matrix(patches);

    KernelGradsT<T> grads;
    grads.patches.rows = patches.rows;
    grads.patches.cols = patches.cols;
    grads.patches.batch = patches.batch;
    grads.patches.geometry = patches.geometry;

    TensorT<T> grad_pm({cache.m, cache.k});
    TensorT<T> grad_filters({cache.n, cache.k});

    switch (spec.kind) {
        case KernelKind::linear: {
            grad_pm = matmul(upstream, filters);            // [m x k]
            grad_filters = matmul(upstream, pm, true, false);// [n x k]
            break;
        }
        case KernelKind::polynomial:
            detail::poly_backward_into(upstream, cache.inner, spec, pm, filters, T{1}, grad_pm,
                                       grad_filters);
            break;
        case KernelKind::gaussian:
            detail::gaussian_backward_into(upstream, cache.kappa_g, spec, pm, filters, T{1},
                                           grad_pm, grad_filters);
            break;
        case KernelKind::mixture: {
            const T w_g = static_cast<T>(spec.mix_weight());
            detail::gaussian_backward_into(upstream, cache.kappa_g, spec, pm, filters, w_g,
                                           grad_pm, grad_filters);
            detail::poly_backward_into(upstream, cache.inner, spec, pm, filters, T{1} - w_g,
                                       grad_pm, grad_filters);
            if (spec.mix_learnable) {
                // d kappa_m / d logit = sigmoid'(logit) * (kappa_g - kappa_p)
                const T sp = w_g * (T{1} - w_g);
                T acc{0};
                for (size_t i = 0; i < upstream.size(); ++i) {
                    acc += upstream[i] * sp * (cache.kappa_g[i] - cache.kappa_p[i]);
                }
                grads.mix_logit = acc;
            }
            break;
        }
    }

    grads.patches.data.assign(grad_pm.values().begin(), grad_pm.values().end());
    grads.filters = std::move(grad_filters);
    return grads;
}

// ---------------------------------------------------------------------------
// Explicit feature map and the preprocessing-equivalent construction
// ---------------------------------------------------------------------------

/// Explicit polynomial feature map phi with dot(phi(x), phi(w)) == (x.w + offset)^degree,
/// built from degree-2/3 monomials with square-root multinomial weights. When
/// offset > 0 a constant sqrt(offset) coordinate is appended before expansion.
/// Implemented for equivalence testing; degrees outside {2,3} are rejected.
template <class T>
std::vector<T> explicit_feature_map(std::span<const T> v, double offset, int degree) {
    if (degree != 2 && degree != 3) {
        throw config_error("explicit_feature_map: degree " + std::to_string(degree) +
                           " unsupported (only 2 and 3)");
    }
    if (offset < 0.0) throw config_error("explicit_feature_map: offset must be >= 0");

    std::vector<T> u(v.begin(), v.end());
    if (offset != 0.0) u.push_back(static_cast<T>(std::sqrt(offset)));
    const size_t nvar = u.size();

    std::vector<T> phi;
    if (degree == 2) {
        phi.reserve(nvar * (nvar + 1) / 2);
        const T r2 = static_cast<T>(std::sqrt(2.0));
        for (size_t i = 0; i < nvar; ++i) {
            for (size_t j = i; j < nvar; ++j) {
                const T coef = (i == j) ? T{1} : r2;
                phi.push_back(coef * u[i] * u[j]);
            }
        }
    } else {
        phi.reserve(nvar * (nvar + 1) * (nvar + 2) / 6);
        const T r3 = static_cast<T>(std::sqrt(3.0));
        const T r6 = static_cast<T>(std::sqrt(6.0));
        for (size_t i = 0; i < nvar; ++i) {
            for (size_t j = i; j < nvar; ++j) {
                for (size_t l = j; l < nvar; ++l) {
                    T coef;
                    if (i == j && j == l) {
                        coef = T{1};
                    } else if (i == j || j == l) {
                        coef = r3;  // multinomial weight 3!/2! = 3
                    } else {
                        coef = r6;  // multinomial weight 3! = 6
                    }
                    phi.push_back(coef * u[i] * u[j] * u[l]);
                }
            }
        }
    }
    return phi;
}

/// Result of rewriting a single polynomial kervolution over x as a plain
/// linear convolution over transformed data: each original receptive field
/// becomes one non-overlapping phi block of the transformed image, and every
/// filter is replaced by its phi expansion.
template <class T>
struct PreprocessedConvT {
    TensorT<T> transformed;      // [b, 1, out_h, out_w * phi_len]
    TensorT<T> enlarged_filters; // [n, phi_len]
    PatchGeometry geometry;      // 1 x phi_len patches at stride (1, phi_len)
};

template <class T>
PreprocessedConvT<T> build_preprocessing_equivalent(const TensorT<T>& x, const TensorT<T>& filters,
                                                    const PatchGeometry& g, const KernelSpec& spec) {
    spec.validate();
    const bool poly = spec.kind == KernelKind::polynomial;
    if (!poly && spec.kind != KernelKind::linear) {
        throw config_error("preprocessing equivalent: only linear and polynomial kernels");
    }
    if (poly && spec.degree != 2 && spec.degree != 3) {
        throw config_error("preprocessing equivalent: polynomial degree must be 2 or 3");
    }
    const PatchMatrixT<T> patches = im2col(x, g);
    const size_t batch = x.extent(0);
    const size_t oh = g.out_height(), ow = g.out_width();
    const size_t n = filters.extent(0);

    auto map_row = [&](const T* row, size_t len) -> std::vector<T> {
        if (!poly) return std::vector<T>(row, row + len);
        return explicit_feature_map<T>(std::span<const T>(row, len), spec.offset, spec.degree);
    };

    const std::vector<T> probe = map_row(patches.data.data(), patches.cols);
    const size_t phi_len = probe.size();

    PreprocessedConvT<T> out;
    out.transformed = TensorT<T>({batch, 1, oh, ow * phi_len});
    for (size_t b = 0; b < batch; ++b) {
        for (size_t i = 0; i < oh; ++i) {
            for (size_t j = 0; j < ow; ++j) {
                const size_t r = (b * oh + i) * ow + j;
                const std::vector<T> phi = map_row(patches.data.data() + r * patches.cols,
                                                   patches.cols);
                for (size_t c = 0; c < phi_len; ++c) {
                    out.transformed(b, size_t{0}, i, j * phi_len + c) = phi[c];
                }
            }
        }
    }
    out.enlarged_filters = TensorT<T>({n, phi_len});
    for (size_t f = 0; f < n; ++f) {
        const std::vector<T> phi = map_row(filters.data() + f * patches.cols, patches.cols);
        for (size_t c = 0; c < phi_len; ++c) out.enlarged_filters(f, c) = phi[c];
    }
    out.geometry = PatchGeometry{.in_channels = 1,
                                 .in_height = oh,
                                 .in_width = ow * phi_len,
                                 .kernel_h = 1,
                                 .kernel_w = phi_len,
                                 .stride_h = 1,
                                 .stride_w = phi_len,
                                 .pad_h = 0,
                                 .pad_w = 0};
    return out;
}

}  // namespace kervolve

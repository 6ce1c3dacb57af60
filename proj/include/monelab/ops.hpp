#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "monelab/errors.hpp"
#include "monelab/rng.hpp"
#include "monelab/tensor.hpp"

namespace monelab {

enum class ActKind { silu, sigmoid, softmax };

inline const char* act_name(ActKind k) {
    switch (k) {
        case ActKind::silu: return "silu";
        case ActKind::sigmoid: return "sigmoid";
        case ActKind::softmax: return "softmax";
    }
    return "?";
}

inline ActKind parse_act(const std::string& s) {
    if (s == "silu") return ActKind::silu;
    if (s == "sigmoid") return ActKind::sigmoid;
    if (s == "softmax") return ActKind::softmax;
    throw ConfigError("unknown activation kind '" + s + "'");
}

namespace ops {

template <typename T>
void check_finite(const TensorT<T>& t, const char* what) {
    for (int64_t i = 0; i < t.numel(); ++i)
        if (!std::isfinite(t[i]))
            throw NumericError(std::string("non-finite value in ") + what);
}

// C = A * B, fixed i-l-j loop. Each C[i,j] accumulates over l in ascending
// order, so results are bit-reproducible for a given dtype.
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul expects rank-2 tensors, got " + a.shape_str() + " and " +
                         b.shape_str());
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul inner dimensions disagree: " + a.shape_str() + " vs " +
                         b.shape_str());
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    TensorT<T> c({m, n});
    const T* ap = a.data();
    const T* bp = b.data();
    T* cp = c.data();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t l = 0; l < k; ++l) {
            const T av = ap[i * k + l];
            const T* brow = bp + l * n;
            T* crow = cp + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    check_finite(c, "matmul output");
    return c;
}

// C = A * B^T
template <typename T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw ShapeError("matmul_nt shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    TensorT<T> c({m, n});
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a.data() + i * k;
        for (int64_t j = 0; j < n; ++j) {
            const T* brow = b.data() + j * k;
            T acc = 0;
            for (int64_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
            c.at(i, j) = acc;
        }
    }
    check_finite(c, "matmul_nt output");
    return c;
}

// y = A * x for rank-1 x
template <typename T>
TensorT<T> matvec(const TensorT<T>& a, const TensorT<T>& x) {
    if (a.rank() != 2 || x.rank() != 1 || a.dim(1) != x.dim(0))
        throw ShapeError("matvec shape mismatch: " + a.shape_str() + " vs " + x.shape_str());
    const int64_t m = a.dim(0), k = a.dim(1);
    TensorT<T> y({m});
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a.data() + i * k;
        T acc = 0;
        for (int64_t l = 0; l < k; ++l) acc += arow[l] * x[l];
        y[i] = acc;
    }
    check_finite(y, "matvec output");
    return y;
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& a) {
    if (a.rank() != 2) throw ShapeError("transpose expects rank-2 tensor");
    TensorT<T> t({a.dim(1), a.dim(0)});
    for (int64_t i = 0; i < a.dim(0); ++i)
        for (int64_t j = 0; j < a.dim(1); ++j) t.at(j, i) = a.at(i, j);
    return t;
}

// outer(u, v)[i,j] = u[i] * v[j]
template <typename T>
TensorT<T> outer(const TensorT<T>& u, const TensorT<T>& v) {
    if (u.rank() != 1 || v.rank() != 1) throw ShapeError("outer expects rank-1 tensors");
    TensorT<T> a({u.dim(0), v.dim(0)});
    for (int64_t i = 0; i < u.dim(0); ++i)
        for (int64_t j = 0; j < v.dim(0); ++j) a.at(i, j) = u[i] * v[j];
    return a;
}

template <typename T>
T silu_scalar(T z) {
    return z / (T(1) + std::exp(-z));
}

template <typename T>
T sigmoid_scalar(T z) {
    return T(1) / (T(1) + std::exp(-z));
}

// Softmax along the last axis. Entries equal to -inf are treated as masked
// and receive probability zero; a fully masked row is a degenerate input.
template <typename T>
void softmax_last_axis_inplace(TensorT<T>& t) {
    const int64_t n = t.rank() == 0 ? 0 : t.dim(t.rank() - 1);
    if (n == 0) throw InputError("softmax over empty axis");
    const int64_t rows = t.numel() / n;
    for (int64_t r = 0; r < rows; ++r) {
        T* row = t.data() + r * n;
        T mx = -std::numeric_limits<T>::infinity();
        for (int64_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
        if (mx == -std::numeric_limits<T>::infinity())
            throw InputError("softmax over fully masked row");
        T sum = 0;
        for (int64_t j = 0; j < n; ++j) {
            row[j] = std::isinf(row[j]) && row[j] < 0 ? T(0) : std::exp(row[j] - mx);
            sum += row[j];
        }
        for (int64_t j = 0; j < n; ++j) row[j] /= sum;
    }
}

template <typename T>
void activation_inplace(TensorT<T>& v, ActKind kind) {
    switch (kind) {
        case ActKind::silu:
            for (int64_t i = 0; i < v.numel(); ++i) v[i] = silu_scalar(v[i]);
            break;
        case ActKind::sigmoid:
            for (int64_t i = 0; i < v.numel(); ++i) v[i] = sigmoid_scalar(v[i]);
            break;
        case ActKind::softmax:
            softmax_last_axis_inplace(v);
            break;
    }
    check_finite(v, "activation output");
}

template <typename T>
TensorT<T> activation(const TensorT<T>& v, ActKind kind) {
    TensorT<T> out = v;
    activation_inplace(out, kind);
    return out;
}

// Indices of the k largest entries (of |v| when by_abs), ties broken by
// lower index, returned in ascending index order.
template <typename T>
std::vector<int64_t> topk_indices(std::span<const T> v, int64_t k, bool by_abs) {
    const int64_t n = static_cast<int64_t>(v.size());
    if (k < 1 || k > n)
        throw ShapeError("topk k=" + std::to_string(k) + " out of range for n=" +
                         std::to_string(n));
    auto key = [&](int64_t i) { return by_abs ? std::abs(v[static_cast<size_t>(i)])
                                              : v[static_cast<size_t>(i)]; };

    if (k <= 32) {
        // insertion selection into a small descending buffer; scanning in
        // ascending index order realizes the lower-index tie rule directly
        std::vector<std::pair<T, int64_t>> best;
        best.reserve(static_cast<size_t>(k));
        for (int64_t i = 0; i < n; ++i) {
            const T ki = key(i);
            if (static_cast<int64_t>(best.size()) == k && ki <= best.back().first) continue;
            size_t pos = best.size();
            while (pos > 0 && best[pos - 1].first < ki) --pos;
            best.insert(best.begin() + static_cast<std::ptrdiff_t>(pos), {ki, i});
            if (static_cast<int64_t>(best.size()) > k) best.pop_back();
        }
        std::vector<int64_t> idx;
        idx.reserve(static_cast<size_t>(k));
        for (const auto& [kv, i] : best) idx.push_back(i);
        std::sort(idx.begin(), idx.end());
        return idx;
    }

    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int64_t a, int64_t b) {
        T ka = key(a), kb = key(b);
        if (ka != kb) return ka > kb;
        return a < b;
    });
    idx.resize(static_cast<size_t>(k));
    std::sort(idx.begin(), idx.end());
    return idx;
}

template <typename T>
std::vector<int64_t> topk_indices(const TensorT<T>& v, int64_t k, bool by_abs) {
    if (v.rank() != 1) throw ShapeError("topk_indices expects rank-1 tensor");
    return topk_indices(std::span<const T>(v.data(), static_cast<size_t>(v.numel())), k, by_abs);
}

// i.i.d. normal(0, 0.02^2) entries, deterministic for a given rng state.
template <typename T>
TensorT<T> init_weights(std::vector<int64_t> shape, Rng& rng, double stddev = 0.02) {
    TensorT<T> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(stddev * rng.normal());
    return t;
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("add shape mismatch");
    TensorT<T> c = a;
    for (int64_t i = 0; i < c.numel(); ++i) c[i] += b[i];
    return c;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("mul shape mismatch");
    TensorT<T> c = a;
    for (int64_t i = 0; i < c.numel(); ++i) c[i] *= b[i];
    return c;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T s) {
    TensorT<T> c = a;
    for (int64_t i = 0; i < c.numel(); ++i) c[i] *= s;
    return c;
}

template <typename T>
void axpy(TensorT<T>& y, T alpha, const TensorT<T>& x) {
    if (!y.same_shape(x)) throw ShapeError("axpy shape mismatch");
    for (int64_t i = 0; i < y.numel(); ++i) y[i] += alpha * x[i];
}

template <typename T>
T dot(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("dot shape mismatch");
    T s = 0;
    for (int64_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
    return s;
}

template <typename T>
T l2_norm(const TensorT<T>& a) {
    T s = 0;
    for (int64_t i = 0; i < a.numel(); ++i) s += a[i] * a[i];
    return std::sqrt(s);
}

template <typename T>
T max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff shape mismatch");
    T m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <typename T>
TensorT<T> gather_rows(const TensorT<T>& a, std::span<const int64_t> rows) {
    if (a.rank() != 2) throw ShapeError("gather_rows expects rank-2 tensor");
    const int64_t n = a.dim(1);
    TensorT<T> out({static_cast<int64_t>(rows.size()), n});
    for (size_t r = 0; r < rows.size(); ++r)
        std::copy_n(a.data() + rows[r] * n, n, out.data() + static_cast<int64_t>(r) * n);
    return out;
}

template <typename T>
TensorT<T> gather_cols(const TensorT<T>& a, std::span<const int64_t> cols) {
    if (a.rank() != 2) throw ShapeError("gather_cols expects rank-2 tensor");
    const int64_t m = a.dim(0);
    TensorT<T> out({m, static_cast<int64_t>(cols.size())});
    for (int64_t i = 0; i < m; ++i)
        for (size_t c = 0; c < cols.size(); ++c)
            out.at(i, static_cast<int64_t>(c)) = a.at(i, cols[c]);
    return out;
}

template <typename T>
TensorT<T> gather_elems(const TensorT<T>& v, std::span<const int64_t> idx) {
    if (v.rank() != 1) throw ShapeError("gather_elems expects rank-1 tensor");
    TensorT<T> out({static_cast<int64_t>(idx.size())});
    for (size_t i = 0; i < idx.size(); ++i) out[static_cast<int64_t>(i)] = v[idx[i]];
    return out;
}

template <typename T>
TensorT<T> scatter_elems(const TensorT<T>& v, std::span<const int64_t> idx, int64_t out_size) {
    TensorT<T> out({out_size});
    for (size_t i = 0; i < idx.size(); ++i) out[idx[i]] = v[static_cast<int64_t>(i)];
    return out;
}

// Pre-norm RMS normalization over rows: y = x / rms(x) * gain.
template <typename T>
TensorT<T> rmsnorm_rows(const TensorT<T>& x, const TensorT<T>& gain, T eps = T(1e-6)) {
    if (x.rank() != 2 || gain.rank() != 1 || gain.dim(0) != x.dim(1))
        throw ShapeError("rmsnorm shape mismatch");
    const int64_t rows = x.dim(0), d = x.dim(1);
    TensorT<T> y({rows, d});
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x.data() + r * d;
        T ms = 0;
        for (int64_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
        T inv = T(1) / std::sqrt(ms / static_cast<T>(d) + eps);
        for (int64_t j = 0; j < d; ++j) y.at(r, j) = xr[j] * inv * gain[j];
    }
    return y;
}

// Per-row next-token cross-entropy for integer targets, stable log-sum-exp.
template <typename T>
std::vector<double> cross_entropy_rows(const TensorT<T>& logits,
                                       std::span<const int32_t> targets) {
    if (logits.rank() != 2 || static_cast<int64_t>(targets.size()) != logits.dim(0))
        throw ShapeError("cross_entropy_rows shape mismatch");
    const int64_t rows = logits.dim(0), v = logits.dim(1);
    std::vector<double> out(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const T* row = logits.data() + r * v;
        if (targets[static_cast<size_t>(r)] < 0 || targets[static_cast<size_t>(r)] >= v)
            throw InputError("cross entropy target out of range");
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double lse = 0;
        for (int64_t j = 0; j < v; ++j) lse += std::exp(static_cast<double>(row[j]) - mx);
        lse = std::log(lse) + mx;
        out[static_cast<size_t>(r)] = lse - static_cast<double>(row[targets[static_cast<size_t>(r)]]);
    }
    return out;
}

// Central-difference gradient oracle, f64 only. The backbone of every
// analytic-gradient test in the suite.
inline Tensor64 finite_diff_grad(const std::function<double(const Tensor64&)>& f,
                                 const Tensor64& x, double eps) {
    if (eps <= 0) throw ShapeError("finite_diff_grad requires eps > 0");
    Tensor64 g(x.shape());
    Tensor64 probe = x;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + eps;
        double fp = f(probe);
        probe[i] = orig - eps;
        double fm = f(probe);
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("non-finite function value in finite_diff_grad");
        g[i] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

}  // namespace ops
}  // namespace monelab

#pragma once

#include <functional>
#include <span>
#include <vector>

#include "monelab/ops.hpp"
#include "monelab/tensor.hpp"

namespace monelab {

struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Every op records its forward value and, when gradients
// are enabled and an input requires them, a closure that pulls the node's
// gradient back into its parents. backward() walks nodes in reverse creation
// order, which is a valid topological order by construction.
//
// With grad_enabled=false the tape records values only; the same graph code
// then serves as the inference path.
template <typename T>
class Tape {
public:
    struct Node {
        TensorT<T> value;
        TensorT<T> grad;  // empty until a gradient reaches this node
        std::function<void(Tape&, const TensorT<T>&)> backward;
        bool needs_grad = false;
    };

    bool grad_enabled = true;

    Var constant(TensorT<T> v) { return push(std::move(v), false, nullptr); }

    Var leaf(TensorT<T> v) { return push(std::move(v), grad_enabled, nullptr); }

    Var push(TensorT<T> v, bool needs_grad,
             std::function<void(Tape&, const TensorT<T>&)> backward) {
        Node n;
        n.value = std::move(v);
        n.needs_grad = grad_enabled && needs_grad;
        if (n.needs_grad) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return {static_cast<int32_t>(nodes_.size() - 1)};
    }

    const TensorT<T>& val(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
    bool needs_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].needs_grad; }

    const TensorT<T>& grad(Var v) const {
        const Node& n = nodes_[static_cast<size_t>(v.id)];
        if (n.grad.empty())
            throw NumericError("gradient read before backward reached this node");
        return n.grad;
    }

    bool has_grad(Var v) const { return !nodes_[static_cast<size_t>(v.id)].grad.empty(); }

    void accum_grad(Var v, const TensorT<T>& delta) {
        Node& n = nodes_[static_cast<size_t>(v.id)];
        if (!n.needs_grad) return;
        if (n.grad.empty()) n.grad = TensorT<T>(n.value.shape());
        ops::axpy(n.grad, T(1), delta);
    }

    void backward(Var root) {
        Node& r = nodes_[static_cast<size_t>(root.id)];
        if (r.value.numel() != 1) throw ShapeError("backward root must be a scalar");
        if (!r.needs_grad) throw NumericError("backward on a graph without gradients");
        r.grad = TensorT<T>::full(r.value.shape(), T(1));
        for (int32_t i = root.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.backward && !n.grad.empty()) n.backward(*this, n.grad);
        }
    }

    size_t size() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
};

// Tape op builders. Forward values come from the ops:: kernels so that plain
// and taped computations of the same graph are bit-identical.
namespace tg {

template <typename T>
Var matmul(Tape<T>& tp, Var a, Var b) {
    TensorT<T> v = ops::matmul(tp.val(a), tp.val(b));
    bool ng = tp.needs_grad(a) || tp.needs_grad(b);
    return tp.push(std::move(v), ng, [a, b](Tape<T>& t, const TensorT<T>& g) {
        if (t.needs_grad(a)) t.accum_grad(a, ops::matmul_nt(g, t.val(b)));
        if (t.needs_grad(b)) t.accum_grad(b, ops::matmul(ops::transpose(t.val(a)), g));
    });
}

// C = A * B^T
template <typename T>
Var matmul_nt(Tape<T>& tp, Var a, Var b) {
    TensorT<T> v = ops::matmul_nt(tp.val(a), tp.val(b));
    bool ng = tp.needs_grad(a) || tp.needs_grad(b);
    return tp.push(std::move(v), ng, [a, b](Tape<T>& t, const TensorT<T>& g) {
        if (t.needs_grad(a)) t.accum_grad(a, ops::matmul(g, t.val(b)));
        if (t.needs_grad(b)) t.accum_grad(b, ops::matmul(ops::transpose(g), t.val(a)));
    });
}

template <typename T>
Var matvec(Tape<T>& tp, Var a, Var x) {
    TensorT<T> v = ops::matvec(tp.val(a), tp.val(x));
    bool ng = tp.needs_grad(a) || tp.needs_grad(x);
    return tp.push(std::move(v), ng, [a, x](Tape<T>& t, const TensorT<T>& g) {
        if (t.needs_grad(a)) t.accum_grad(a, ops::outer(g, t.val(x)));
        if (t.needs_grad(x)) t.accum_grad(x, ops::matvec(ops::transpose(t.val(a)), g));
    });
}

template <typename T>
Var add(Tape<T>& tp, Var a, Var b) {
    TensorT<T> v = ops::add(tp.val(a), tp.val(b));
    bool ng = tp.needs_grad(a) || tp.needs_grad(b);
    return tp.push(std::move(v), ng, [a, b](Tape<T>& t, const TensorT<T>& g) {
        t.accum_grad(a, g);
        t.accum_grad(b, g);
    });
}

template <typename T>
Var add_n(Tape<T>& tp, std::vector<Var> xs) {
    if (xs.empty()) throw ShapeError("add_n of nothing");
    TensorT<T> v = tp.val(xs[0]);
    for (size_t i = 1; i < xs.size(); ++i) ops::axpy(v, T(1), tp.val(xs[i]));
    bool ng = false;
    for (Var x : xs) ng |= tp.needs_grad(x);
    return tp.push(std::move(v), ng, [xs](Tape<T>& t, const TensorT<T>& g) {
        for (Var x : xs) t.accum_grad(x, g);
    });
}

template <typename T>
Var mul(Tape<T>& tp, Var a, Var b) {
    TensorT<T> v = ops::mul(tp.val(a), tp.val(b));
    bool ng = tp.needs_grad(a) || tp.needs_grad(b);
    return tp.push(std::move(v), ng, [a, b](Tape<T>& t, const TensorT<T>& g) {
        if (t.needs_grad(a)) t.accum_grad(a, ops::mul(g, t.val(b)));
        if (t.needs_grad(b)) t.accum_grad(b, ops::mul(g, t.val(a)));
    });
}

template <typename T>
Var scale(Tape<T>& tp, Var a, T c) {
    TensorT<T> v = ops::scale(tp.val(a), c);
    return tp.push(std::move(v), tp.needs_grad(a), [a, c](Tape<T>& t, const TensorT<T>& g) {
        t.accum_grad(a, ops::scale(g, c));
    });
}

// a scaled by a scalar-valued variable s
template <typename T>
Var scale_by(Tape<T>& tp, Var a, Var s) {
    if (tp.val(s).numel() != 1) throw ShapeError("scale_by expects a scalar variable");
    TensorT<T> v = ops::scale(tp.val(a), tp.val(s)[0]);
    bool ng = tp.needs_grad(a) || tp.needs_grad(s);
    return tp.push(std::move(v), ng, [a, s](Tape<T>& t, const TensorT<T>& g) {
        if (t.needs_grad(a)) t.accum_grad(a, ops::scale(g, t.val(s)[0]));
        if (t.needs_grad(s)) {
            TensorT<T> ds({1});
            ds[0] = ops::dot(g, t.val(a));
            t.accum_grad(s, ds);
        }
    });
}

template <typename T>
Var silu(Tape<T>& tp, Var a) {
    TensorT<T> v = ops::activation(tp.val(a), ActKind::silu);
    return tp.push(std::move(v), tp.needs_grad(a), [a](Tape<T>& t, const TensorT<T>& g) {
        const TensorT<T>& x = t.val(a);
        TensorT<T> d(x.shape());
        for (int64_t i = 0; i < x.numel(); ++i) {
            T s = ops::sigmoid_scalar(x[i]);
            d[i] = g[i] * (s + x[i] * s * (T(1) - s));
        }
        t.accum_grad(a, d);
    });
}

template <typename T>
Var sigmoid(Tape<T>& tp, Var a) {
    TensorT<T> v = ops::activation(tp.val(a), ActKind::sigmoid);
    return tp.push(std::move(v), tp.needs_grad(a), [a](Tape<T>& t, const TensorT<T>& g) {
        const TensorT<T>& x = t.val(a);
        TensorT<T> d(x.shape());
        for (int64_t i = 0; i < x.numel(); ++i) {
            T s = ops::sigmoid_scalar(x[i]);
            d[i] = g[i] * s * (T(1) - s);
        }
        t.accum_grad(a, d);
    });
}

namespace detail {
template <typename T>
void softmax_backward_rows(const TensorT<T>& p, const TensorT<T>& g, TensorT<T>& dx) {
    const int64_t n = p.dim(p.rank() - 1);
    const int64_t rows = p.numel() / n;
    for (int64_t r = 0; r < rows; ++r) {
        const T* pr = p.data() + r * n;
        const T* gr = g.data() + r * n;
        T dot = 0;
        for (int64_t j = 0; j < n; ++j) dot += pr[j] * gr[j];
        T* dr = dx.data() + r * n;
        for (int64_t j = 0; j < n; ++j) dr[j] = pr[j] * (gr[j] - dot);
    }
}
}  // namespace detail

// Softmax along the last axis; an optional additive mask (0 or -inf entries)
// is applied first. Masked positions end up with probability zero and block
// gradient flow.
template <typename T>
Var softmax_rows(Tape<T>& tp, Var a, const TensorT<T>* mask = nullptr) {
    TensorT<T> pre = tp.val(a);
    if (mask) {
        if (!mask->same_shape(pre)) throw ShapeError("softmax mask shape mismatch");
        for (int64_t i = 0; i < pre.numel(); ++i) pre[i] += (*mask)[i];
    }
    ops::softmax_last_axis_inplace(pre);
    TensorT<T> p = pre;  // captured copy for the backward pass
    return tp.push(std::move(pre), tp.needs_grad(a),
                   [a, p = std::move(p)](Tape<T>& t, const TensorT<T>& g) {
                       TensorT<T> dx(p.shape());
                       detail::softmax_backward_rows(p, g, dx);
                       t.accum_grad(a, dx);
                   });
}

// y = x / rms(x) * gain, rowwise
template <typename T>
Var rmsnorm(Tape<T>& tp, Var x, Var gain, T eps = T(1e-6)) {
    TensorT<T> v = ops::rmsnorm_rows(tp.val(x), tp.val(gain), eps);
    bool ng = tp.needs_grad(x) || tp.needs_grad(gain);
    return tp.push(std::move(v), ng, [x, gain, eps](Tape<T>& t, const TensorT<T>& g) {
        const TensorT<T>& xv = t.val(x);
        const TensorT<T>& gv = t.val(gain);
        const int64_t rows = xv.dim(0), d = xv.dim(1);
        TensorT<T> dx(xv.shape());
        TensorT<T> dgain(gv.shape());
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = xv.data() + r * d;
            const T* gr = g.data() + r * d;
            T ms = 0;
            for (int64_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
            T rms2 = ms / static_cast<T>(d) + eps;
            T inv = T(1) / std::sqrt(rms2);
            // dL/dx_j = inv * gain_j * g_j - x_j * inv^3 / d * sum_k g_k gain_k x_k
            T dot = 0;
            for (int64_t j = 0; j < d; ++j) dot += gr[j] * gv[j] * xr[j];
            for (int64_t j = 0; j < d; ++j) {
                dx.at(r, j) = inv * gv[j] * gr[j] -
                              xr[j] * inv * inv * inv / static_cast<T>(d) * dot;
                dgain[j] += gr[j] * xr[j] * inv;
            }
        }
        if (t.needs_grad(x)) t.accum_grad(x, dx);
        if (t.needs_grad(gain)) t.accum_grad(gain, dgain);
    });
}

template <typename T>
Var gather_rows(Tape<T>& tp, Var a, std::vector<int64_t> rows) {
    TensorT<T> v = ops::gather_rows(tp.val(a), rows);
    return tp.push(std::move(v), tp.needs_grad(a),
                   [a, rows = std::move(rows)](Tape<T>& t, const TensorT<T>& g) {
                       const int64_t n = t.val(a).dim(1);
                       TensorT<T> da(t.val(a).shape());
                       for (size_t r = 0; r < rows.size(); ++r)
                           for (int64_t j = 0; j < n; ++j)
                               da.at(rows[r], j) += g.at(static_cast<int64_t>(r), j);
                       t.accum_grad(a, da);
                   });
}

template <typename T>
Var gather_cols(Tape<T>& tp, Var a, std::vector<int64_t> cols) {
    TensorT<T> v = ops::gather_cols(tp.val(a), cols);
    return tp.push(std::move(v), tp.needs_grad(a),
                   [a, cols = std::move(cols)](Tape<T>& t, const TensorT<T>& g) {
                       const int64_t m = t.val(a).dim(0);
                       TensorT<T> da(t.val(a).shape());
                       for (int64_t i = 0; i < m; ++i)
                           for (size_t c = 0; c < cols.size(); ++c)
                               da.at(i, cols[c]) += g.at(i, static_cast<int64_t>(c));
                       t.accum_grad(a, da);
                   });
}

template <typename T>
Var gather_elems(Tape<T>& tp, Var v, std::vector<int64_t> idx) {
    TensorT<T> out = ops::gather_elems(tp.val(v), idx);
    return tp.push(std::move(out), tp.needs_grad(v),
                   [v, idx = std::move(idx)](Tape<T>& t, const TensorT<T>& g) {
                       TensorT<T> dv(t.val(v).shape());
                       for (size_t i = 0; i < idx.size(); ++i)
                           dv[idx[i]] += g[static_cast<int64_t>(i)];
                       t.accum_grad(v, dv);
                   });
}

// scatter a short vector into a zero vector of out_size
template <typename T>
Var scatter_elems(Tape<T>& tp, Var v, std::vector<int64_t> idx, int64_t out_size) {
    TensorT<T> out = ops::scatter_elems(tp.val(v), idx, out_size);
    return tp.push(std::move(out), tp.needs_grad(v),
                   [v, idx = std::move(idx)](Tape<T>& t, const TensorT<T>& g) {
                       TensorT<T> dv(t.val(v).shape());
                       for (size_t i = 0; i < idx.size(); ++i)
                           dv[static_cast<int64_t>(i)] = g[idx[i]];
                       t.accum_grad(v, dv);
                   });
}

// single row of a matrix as a rank-1 variable
template <typename T>
Var row(Tape<T>& tp, Var a, int64_t r) {
    const TensorT<T>& av = tp.val(a);
    TensorT<T> v({av.dim(1)});
    std::copy_n(av.data() + r * av.dim(1), av.dim(1), v.data());
    return tp.push(std::move(v), tp.needs_grad(a), [a, r](Tape<T>& t, const TensorT<T>& g) {
        TensorT<T> da(t.val(a).shape());
        const int64_t n = da.dim(1);
        for (int64_t j = 0; j < n; ++j) da.at(r, j) = g[j];
        t.accum_grad(a, da);
    });
}

template <typename T>
Var index(Tape<T>& tp, Var v, int64_t i) {
    TensorT<T> out({1});
    out[0] = tp.val(v)[i];
    return tp.push(std::move(out), tp.needs_grad(v), [v, i](Tape<T>& t, const TensorT<T>& g) {
        TensorT<T> dv(t.val(v).shape());
        dv[i] = g[0];
        t.accum_grad(v, dv);
    });
}

// stack rank-1 variables of equal length into a matrix
template <typename T>
Var stack_rows(Tape<T>& tp, std::vector<Var> xs) {
    if (xs.empty()) throw ShapeError("stack_rows of nothing");
    const int64_t d = tp.val(xs[0]).dim(0);
    TensorT<T> v({static_cast<int64_t>(xs.size()), d});
    for (size_t r = 0; r < xs.size(); ++r)
        std::copy_n(tp.val(xs[r]).data(), d, v.data() + static_cast<int64_t>(r) * d);
    bool ng = false;
    for (Var x : xs) ng |= tp.needs_grad(x);
    return tp.push(std::move(v), ng, [xs, d](Tape<T>& t, const TensorT<T>& g) {
        for (size_t r = 0; r < xs.size(); ++r) {
            TensorT<T> gr({d});
            std::copy_n(g.data() + static_cast<int64_t>(r) * d, d, gr.data());
            t.accum_grad(xs[r], gr);
        }
    });
}

template <typename T>
Var abs(Tape<T>& tp, Var a) {
    TensorT<T> v = tp.val(a);
    for (int64_t i = 0; i < v.numel(); ++i) v[i] = std::abs(v[i]);
    return tp.push(std::move(v), tp.needs_grad(a), [a](Tape<T>& t, const TensorT<T>& g) {
        const TensorT<T>& x = t.val(a);
        TensorT<T> d(x.shape());
        for (int64_t i = 0; i < x.numel(); ++i)
            d[i] = g[i] * (x[i] > 0 ? T(1) : (x[i] < 0 ? T(-1) : T(0)));
        t.accum_grad(a, d);
    });
}

// vertical concatenation of matrices with equal column counts
template <typename T>
Var concat_rows(Tape<T>& tp, std::vector<Var> xs) {
    if (xs.empty()) throw ShapeError("concat_rows of nothing");
    const int64_t cols = tp.val(xs[0]).dim(1);
    int64_t rows = 0;
    for (Var x : xs) rows += tp.val(x).dim(0);
    TensorT<T> v({rows, cols});
    int64_t off = 0;
    for (Var x : xs) {
        const TensorT<T>& xv = tp.val(x);
        std::copy_n(xv.data(), xv.numel(), v.data() + off * cols);
        off += xv.dim(0);
    }
    bool ng = false;
    for (Var x : xs) ng |= tp.needs_grad(x);
    return tp.push(std::move(v), ng, [xs, cols](Tape<T>& t, const TensorT<T>& g) {
        int64_t off = 0;
        for (Var x : xs) {
            const int64_t r = t.val(x).dim(0);
            TensorT<T> gx({r, cols});
            std::copy_n(g.data() + off * cols, r * cols, gx.data());
            t.accum_grad(x, gx);
            off += r;
        }
    });
}

// contiguous row slice [r0, r1)
template <typename T>
Var row_range(Tape<T>& tp, Var a, int64_t r0, int64_t r1) {
    const TensorT<T>& av = tp.val(a);
    const int64_t cols = av.dim(1);
    TensorT<T> v({r1 - r0, cols});
    std::copy_n(av.data() + r0 * cols, (r1 - r0) * cols, v.data());
    return tp.push(std::move(v), tp.needs_grad(a),
                   [a, r0, cols](Tape<T>& t, const TensorT<T>& g) {
                       TensorT<T> da(t.val(a).shape());
                       std::copy_n(g.data(), g.numel(), da.data() + r0 * cols);
                       t.accum_grad(a, da);
                   });
}

// token-id embedding lookup: rows of the embedding matrix
template <typename T>
Var embedding(Tape<T>& tp, Var table, std::vector<int64_t> ids) {
    TensorT<T> v = ops::gather_rows(tp.val(table), ids);
    return tp.push(std::move(v), tp.needs_grad(table),
                   [table, ids = std::move(ids)](Tape<T>& t, const TensorT<T>& g) {
                       TensorT<T> dt(t.val(table).shape());
                       const int64_t d = dt.dim(1);
                       for (size_t r = 0; r < ids.size(); ++r)
                           for (int64_t j = 0; j < d; ++j)
                               dt.at(ids[r], j) += g.at(static_cast<int64_t>(r), j);
                       t.accum_grad(table, dt);
                   });
}

template <typename T>
Var col_slice(Tape<T>& tp, Var a, int64_t c0, int64_t c1) {
    const TensorT<T>& av = tp.val(a);
    const int64_t rows = av.dim(0), w = c1 - c0;
    TensorT<T> v({rows, w});
    for (int64_t r = 0; r < rows; ++r)
        std::copy_n(av.data() + r * av.dim(1) + c0, w, v.data() + r * w);
    return tp.push(std::move(v), tp.needs_grad(a),
                   [a, c0, w](Tape<T>& t, const TensorT<T>& g) {
                       TensorT<T> da(t.val(a).shape());
                       const int64_t rows = da.dim(0), n = da.dim(1);
                       for (int64_t r = 0; r < rows; ++r)
                           for (int64_t j = 0; j < w; ++j) da.at(r, c0 + j) = g.at(r, j);
                       (void)n;
                       t.accum_grad(a, da);
                   });
}

template <typename T>
Var concat_cols(Tape<T>& tp, std::vector<Var> xs) {
    if (xs.empty()) throw ShapeError("concat_cols of nothing");
    const int64_t rows = tp.val(xs[0]).dim(0);
    int64_t total = 0;
    for (Var x : xs) total += tp.val(x).dim(1);
    TensorT<T> v({rows, total});
    int64_t off = 0;
    for (Var x : xs) {
        const TensorT<T>& xv = tp.val(x);
        for (int64_t r = 0; r < rows; ++r)
            std::copy_n(xv.data() + r * xv.dim(1), xv.dim(1), v.data() + r * total + off);
        off += xv.dim(1);
    }
    bool ng = false;
    for (Var x : xs) ng |= tp.needs_grad(x);
    return tp.push(std::move(v), ng, [xs, total](Tape<T>& t, const TensorT<T>& g) {
        const int64_t rows = g.dim(0);
        int64_t off = 0;
        for (Var x : xs) {
            const int64_t w = t.val(x).dim(1);
            TensorT<T> gx({rows, w});
            for (int64_t r = 0; r < rows; ++r)
                std::copy_n(g.data() + r * total + off, w, gx.data() + r * w);
            t.accum_grad(x, gx);
            off += w;
        }
    });
}

template <typename T>
Var sum(Tape<T>& tp, Var v) {
    TensorT<T> out({1});
    T s = 0;
    for (int64_t i = 0; i < tp.val(v).numel(); ++i) s += tp.val(v)[i];
    out[0] = s;
    return tp.push(std::move(out), tp.needs_grad(v), [v](Tape<T>& t, const TensorT<T>& g) {
        t.accum_grad(v, TensorT<T>::full(t.val(v).shape(), g[0]));
    });
}

// dot with a constant vector; the workhorse for f_i * P_i style sums where
// the dispatch fractions are constants of the forward pass
template <typename T>
Var dot_const(Tape<T>& tp, Var v, TensorT<T> c) {
    if (!tp.val(v).same_shape(c)) throw ShapeError("dot_const shape mismatch");
    TensorT<T> out({1});
    out[0] = ops::dot(tp.val(v), c);
    return tp.push(std::move(out), tp.needs_grad(v),
                   [v, c = std::move(c)](Tape<T>& t, const TensorT<T>& g) {
                       t.accum_grad(v, ops::scale(c, g[0]));
                   });
}

// mean next-token cross-entropy over all rows, fused with its backward
template <typename T>
Var cross_entropy_mean(Tape<T>& tp, Var logits, std::vector<int32_t> targets) {
    const TensorT<T>& lv = tp.val(logits);
    auto ce = ops::cross_entropy_rows(lv, targets);
    const int64_t rows = lv.dim(0);
    TensorT<T> out({1});
    double total = 0;
    for (double c : ce) total += c;
    out[0] = static_cast<T>(total / static_cast<double>(rows));
    return tp.push(std::move(out), tp.needs_grad(logits),
                   [logits, targets = std::move(targets)](Tape<T>& t, const TensorT<T>& g) {
                       TensorT<T> p = t.val(logits);
                       ops::softmax_last_axis_inplace(p);
                       const int64_t rows = p.dim(0);
                       const T inv = g[0] / static_cast<T>(rows);
                       for (int64_t r = 0; r < rows; ++r)
                           p.at(r, targets[static_cast<size_t>(r)]) -= T(1);
                       t.accum_grad(logits, ops::scale(p, inv));
                   });
}

}  // namespace tg
}  // namespace monelab

#pragma once

#include <algorithm>
#include <map>
#include <memory>
#include <set>

#include "nncomp/tensor.hpp"

namespace nncomp {

using TokenBatch = std::vector<std::vector<int32_t>>;

/// Reverse-mode tape. Single-writer: one recording at a time. Nodes are
/// pushed in topological order by construction, so backward is a single
/// reverse sweep. Gradients of nodes the loss never touched stay zero.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

    int push(const Shape& out_shape, BackwardFn bw) {
        grads_.emplace_back(Tensor<T>::zeros(out_shape));
        backward_.push_back(std::move(bw));
        return static_cast<int>(grads_.size()) - 1;
    }

    Tensor<T>& grad(int node) { return grads_.at(static_cast<size_t>(node)); }

    void run_backward(int loss_node) {
        Tensor<T>& g = grad(loss_node);
        if (g.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
        g[0] = T(1);
        for (int i = loss_node; i >= 0; --i)
            if (backward_[static_cast<size_t>(i)]) backward_[static_cast<size_t>(i)](*this, grads_[static_cast<size_t>(i)]);
    }

    size_t num_nodes() const { return grads_.size(); }

private:
    std::vector<Tensor<T>> grads_;
    std::vector<BackwardFn> backward_;
};

/// A value in the forward graph: the tensor plus (optionally) its tape node.
/// Untracked Vars are constants; ops on them skip recording.
template <typename T>
struct Var {
    std::shared_ptr<Tensor<T>> val;
    Tape<T>* tape = nullptr;
    int node = -1;

    const Tensor<T>& v() const { return *val; }
    bool tracked() const { return tape != nullptr && node >= 0; }
};

template <typename T>
Var<T> constant(Tensor<T> t) {
    return Var<T>{std::make_shared<Tensor<T>>(std::move(t)), nullptr, -1};
}

template <typename T>
Var<T> leaf(Tape<T>& tape, Tensor<T> t) {
    Var<T> v{std::make_shared<Tensor<T>>(std::move(t)), &tape, -1};
    v.node = tape.push(v.val->shape, nullptr);
    return v;
}

namespace detail {

template <typename T>
Tape<T>* joint_tape(std::initializer_list<const Var<T>*> vs) {
    Tape<T>* tp = nullptr;
    for (const Var<T>* v : vs) {
        if (!v->tracked()) continue;
        if (tp && tp != v->tape) throw std::invalid_argument("op: inputs recorded on different tapes");
        tp = v->tape;
    }
    return tp;
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
    for (int64_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (!a.v().same_shape(b.v())) throw std::invalid_argument("add: shape mismatch");
    auto out = std::make_shared<Tensor<T>>(a.v().shape);
    for (int64_t i = 0; i < out->size(); ++i) (*out)[i] = a.v()[i] + b.v()[i];
    Var<T> r{out, nullptr, -1};
    if (Tape<T>* tp = detail::joint_tape<T>({&a, &b})) {
        int an = a.node, bn = b.node;
        r.tape = tp;
        r.node = tp->push(out->shape, [an, bn](Tape<T>& t, const Tensor<T>& g) {
            if (an >= 0) detail::accumulate(t.grad(an), g);
            if (bn >= 0) detail::accumulate(t.grad(bn), g);
        });
    }
    return r;
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    if (!a.v().same_shape(b.v())) throw std::invalid_argument("sub: shape mismatch");
    auto out = std::make_shared<Tensor<T>>(a.v().shape);
    for (int64_t i = 0; i < out->size(); ++i) (*out)[i] = a.v()[i] - b.v()[i];
    Var<T> r{out, nullptr, -1};
    if (Tape<T>* tp = detail::joint_tape<T>({&a, &b})) {
        int an = a.node, bn = b.node;
        r.tape = tp;
        r.node = tp->push(out->shape, [an, bn](Tape<T>& t, const Tensor<T>& g) {
            if (an >= 0) detail::accumulate(t.grad(an), g);
            if (bn >= 0)
                for (int64_t i = 0; i < g.size(); ++i) t.grad(bn)[i] -= g[i];
        });
    }
    return r;
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    if (!a.v().same_shape(b.v())) throw std::invalid_argument("mul: shape mismatch");
    auto out = std::make_shared<Tensor<T>>(a.v().shape);
    for (int64_t i = 0; i < out->size(); ++i) (*out)[i] = a.v()[i] * b.v()[i];
    Var<T> r{out, nullptr, -1};
    if (Tape<T>* tp = detail::joint_tape<T>({&a, &b})) {
        int an = a.node, bn = b.node;
        auto av = a.val, bv = b.val;
        r.tape = tp;
        r.node = tp->push(out->shape, [an, bn, av, bv](Tape<T>& t, const Tensor<T>& g) {
            if (an >= 0)
                for (int64_t i = 0; i < g.size(); ++i) t.grad(an)[i] += g[i] * (*bv)[i];
            if (bn >= 0)
                for (int64_t i = 0; i < g.size(); ++i) t.grad(bn)[i] += g[i] * (*av)[i];
        });
    }
    return r;
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
    auto out = std::make_shared<Tensor<T>>(a.v().shape);
    for (int64_t i = 0; i < out->size(); ++i) (*out)[i] = a.v()[i] * c;
    Var<T> r{out, nullptr, -1};
    if (a.tracked()) {
        int an = a.node;
        r.tape = a.tape;
        r.node = a.tape->push(out->shape, [an, c](Tape<T>& t, const Tensor<T>& g) {
            for (int64_t i = 0; i < g.size(); ++i) t.grad(an)[i] += g[i] * c;
        });
    }
    return r;
}

template <typename T>
Var<T> squared_relu(const Var<T>& x) {
    auto out = std::make_shared<Tensor<T>>(x.v().shape);
    for (int64_t i = 0; i < out->size(); ++i) {
        T v = x.v()[i];
        (*out)[i] = v > T(0) ? v * v : T(0);
    }
    Var<T> r{out, nullptr, -1};
    if (x.tracked()) {
        int xn = x.node;
        auto xv = x.val;
        r.tape = x.tape;
        r.node = x.tape->push(out->shape, [xn, xv](Tape<T>& t, const Tensor<T>& g) {
            for (int64_t i = 0; i < g.size(); ++i) {
                T v = (*xv)[i];
                if (v > T(0)) t.grad(xn)[i] += g[i] * T(2) * v;
            }
        });
    }
    return r;
}

template <typename T>
Var<T> silu(const Var<T>& x) {
    auto out = std::make_shared<Tensor<T>>(x.v().shape);
    for (int64_t i = 0; i < out->size(); ++i) {
        T v = x.v()[i];
        (*out)[i] = v / (T(1) + std::exp(-v));
    }
    Var<T> r{out, nullptr, -1};
    if (x.tracked()) {
        int xn = x.node;
        auto xv = x.val;
        r.tape = x.tape;
        r.node = x.tape->push(out->shape, [xn, xv](Tape<T>& t, const Tensor<T>& g) {
            for (int64_t i = 0; i < g.size(); ++i) {
                T v = (*xv)[i];
                T s = T(1) / (T(1) + std::exp(-v));
                t.grad(xn)[i] += g[i] * s * (T(1) + v * (T(1) - s));
            }
        });
    }
    return r;
}

template <typename T>
Var<T> softplus(const Var<T>& x) {
    auto out = std::make_shared<Tensor<T>>(x.v().shape);
    for (int64_t i = 0; i < out->size(); ++i) {
        T v = x.v()[i];
        (*out)[i] = v > T(20) ? v : std::log1p(std::exp(v));
    }
    Var<T> r{out, nullptr, -1};
    if (x.tracked()) {
        int xn = x.node;
        auto xv = x.val;
        r.tape = x.tape;
        r.node = x.tape->push(out->shape, [xn, xv](Tape<T>& t, const Tensor<T>& g) {
            for (int64_t i = 0; i < g.size(); ++i) {
                T s = T(1) / (T(1) + std::exp(-(*xv)[i]));
                t.grad(xn)[i] += g[i] * s;
            }
        });
    }
    return r;
}

template <typename T>
Var<T> exp_op(const Var<T>& x) {
    auto out = std::make_shared<Tensor<T>>(x.v().shape);
    for (int64_t i = 0; i < out->size(); ++i) (*out)[i] = std::exp(x.v()[i]);
    Var<T> r{out, nullptr, -1};
    if (x.tracked()) {
        int xn = x.node;
        auto ov = out;
        r.tape = x.tape;
        r.node = x.tape->push(out->shape, [xn, ov](Tape<T>& t, const Tensor<T>& g) {
            for (int64_t i = 0; i < g.size(); ++i) t.grad(xn)[i] += g[i] * (*ov)[i];
        });
    }
    return r;
}

// ---------------------------------------------------------------------------
// Matmul: a has shape [..., m, k]; w is 2-D, [k, n] (or [n, k] with
// transpose_w). No other broadcasting; reshape explicitly.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& w, bool transpose_w = false) {
    const Tensor<T>& A = a.v();
    const Tensor<T>& W = w.v();
    if (A.rank() < 2 || W.rank() != 2) throw std::invalid_argument("matmul: need a rank>=2, w rank 2");
    int64_t k = A.shape.back();
    int64_t m = A.shape[A.shape.size() - 2];
    int64_t wk = transpose_w ? W.dim(1) : W.dim(0);
    int64_t n = transpose_w ? W.dim(0) : W.dim(1);
    if (wk != k) throw std::invalid_argument("matmul: inner dims disagree: " + shape_str(A.shape) + " vs " + shape_str(W.shape));
    int64_t batch = A.size() / (m * k);

    Shape out_shape(A.shape.begin(), A.shape.end() - 1);
    out_shape.back() = m;  // unchanged, kept for clarity
    out_shape.push_back(n);
    auto out = std::make_shared<Tensor<T>>(out_shape);

    auto wat = [&W, transpose_w](int64_t kk, int64_t nn) -> T {
        return transpose_w ? W[nn * W.dim(1) + kk] : W[kk * W.dim(1) + nn];
    };
    parallel_for(batch * m, [&](int64_t lo, int64_t hi) {
        for (int64_t r = lo; r < hi; ++r) {
            const T* arow = A.data.data() + r * k;
            T* orow = out->data.data() + r * n;
            for (int64_t j = 0; j < n; ++j) {
                T acc = T(0);
                for (int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * wat(kk, j);
                orow[j] = acc;
            }
        }
    });

    Var<T> r{out, nullptr, -1};
    if (Tape<T>* tp = detail::joint_tape<T>({&a, &w})) {
        int an = a.node, wn = w.node;
        auto av = a.val, wv = w.val;
        r.tape = tp;
        r.node = tp->push(out_shape, [an, wn, av, wv, transpose_w, m, k, n, batch](Tape<T>& t, const Tensor<T>& g) {
            const Tensor<T>& W2 = *wv;
            auto wat2 = [&W2, transpose_w](int64_t kk, int64_t nn) -> T {
                return transpose_w ? W2[nn * W2.dim(1) + kk] : W2[kk * W2.dim(1) + nn];
            };
            if (an >= 0) {
                Tensor<T>& ga = t.grad(an);
                for (int64_t r2 = 0; r2 < batch * m; ++r2) {
                    const T* grow = g.data.data() + r2 * n;
                    T* garow = ga.data.data() + r2 * k;
                    for (int64_t kk = 0; kk < k; ++kk) {
                        T acc = T(0);
                        for (int64_t j = 0; j < n; ++j) acc += grow[j] * wat2(kk, j);
                        garow[kk] += acc;
                    }
                }
            }
            if (wn >= 0) {
                Tensor<T>& gw = t.grad(wn);
                const Tensor<T>& A2 = *av;
                for (int64_t r2 = 0; r2 < batch * m; ++r2) {
                    const T* arow = A2.data.data() + r2 * k;
                    const T* grow = g.data.data() + r2 * n;
                    for (int64_t kk = 0; kk < k; ++kk)
                        for (int64_t j = 0; j < n; ++j) {
                            T d = arow[kk] * grow[j];
                            if (transpose_w)
                                gw[j * k + kk] += d;
                            else
                                gw[kk * n + j] += d;
                        }
                }
            }
        });
    }
    return r;
}

// ---------------------------------------------------------------------------
// RMSNorm over the last dimension. norm_denom overrides the divisor in the
// mean-square statistic (0 = use the actual dim); pruned models keep the
// original divisor so that pruning matches masking exactly.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> rmsnorm(const Var<T>& x, const Var<T>& gamma, T eps, int64_t norm_denom = 0) {
    const Tensor<T>& X = x.v();
    if (X.rank() < 1 || gamma.v().rank() != 1) throw std::invalid_argument("rmsnorm: bad ranks");
    int64_t d = X.shape.back();
    if (gamma.v().dim(0) != d) throw std::invalid_argument("rmsnorm: gamma size mismatch");
    if (d < 1) throw std::invalid_argument("rmsnorm: empty last dim");
    if (eps < T(0)) throw std::invalid_argument("rmsnorm: negative eps");
    int64_t denom = norm_denom > 0 ? norm_denom : d;
    int64_t rows = X.size() / d;

    auto out = std::make_shared<Tensor<T>>(X.shape);
    std::vector<T> inv_rms(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = X.data.data() + r * d;
        T ms = T(0);
        for (int64_t i = 0; i < d; ++i) ms += xr[i] * xr[i];
        ms = ms / static_cast<T>(denom) + eps;
        if (ms <= T(0)) throw std::domain_error("rmsnorm: degenerate norm");
        T ir = T(1) / std::sqrt(ms);
        inv_rms[static_cast<size_t>(r)] = ir;
        T* orow = out->data.data() + r * d;
        for (int64_t i = 0; i < d; ++i) orow[i] = gamma.v()[i] * xr[i] * ir;
    }

    Var<T> res{out, nullptr, -1};
    if (Tape<T>* tp = detail::joint_tape<T>({&x, &gamma})) {
        int xn = x.node, gn = gamma.node;
        auto xv = x.val, gv = gamma.val;
        res.tape = tp;
        res.node = tp->push(X.shape, [xn, gn, xv, gv, inv_rms, d, denom](Tape<T>& t, const Tensor<T>& g) {
            int64_t rows2 = xv->size() / d;
            for (int64_t r = 0; r < rows2; ++r) {
                const T* xr = xv->data.data() + r * d;
                const T* gr = g.data.data() + r * d;
                T ir = inv_rms[static_cast<size_t>(r)];
                if (xn >= 0) {
                    T dot = T(0);
                    for (int64_t i = 0; i < d; ++i) dot += gr[i] * (*gv)[i] * xr[i];
                    T* gx = t.grad(xn).data.data() + r * d;
                    T c = dot * ir * ir * ir / static_cast<T>(denom);
                    for (int64_t i = 0; i < d; ++i) gx[i] += gr[i] * (*gv)[i] * ir - xr[i] * c;
                }
                if (gn >= 0) {
                    Tensor<T>& gg = t.grad(gn);
                    for (int64_t i = 0; i < d; ++i) gg[i] += gr[i] * xr[i] * ir;
                }
            }
        });
    }
    return res;
}

// ---------------------------------------------------------------------------
// Depthwise causal conv over [b, s, c] with kernel [c, w]; left zero padding,
// output at t sees inputs t-w+1..t only.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> causal_conv1d(const Var<T>& x, const Var<T>& kern) {
    const Tensor<T>& X = x.v();
    const Tensor<T>& K = kern.v();
    if (X.rank() != 3 || K.rank() != 2 || K.dim(0) != X.dim(2))
        throw std::invalid_argument("causal_conv1d: want x [b,s,c], k [c,w]");
    int64_t b = X.dim(0), s = X.dim(1), c = X.dim(2), w = K.dim(1);
    auto out = std::make_shared<Tensor<T>>(X.shape);
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t t = 0; t < s; ++t)
            for (int64_t ci = 0; ci < c; ++ci) {
                T acc = T(0);
                for (int64_t j = 0; j < w; ++j) {
                    int64_t src = t - (w - 1) + j;
                    if (src >= 0) acc += K[ci * w + j] * X[(bi * s + src) * c + ci];
                }
                (*out)[(bi * s + t) * c + ci] = acc;
            }
    Var<T> r{out, nullptr, -1};
    if (Tape<T>* tp = detail::joint_tape<T>({&x, &kern})) {
        int xn = x.node, kn = kern.node;
        auto xv = x.val, kv = kern.val;
        r.tape = tp;
        r.node = tp->push(X.shape, [xn, kn, xv, kv, b, s, c, w](Tape<T>& t, const Tensor<T>& g) {
            for (int64_t bi = 0; bi < b; ++bi)
                for (int64_t tt = 0; tt < s; ++tt)
                    for (int64_t ci = 0; ci < c; ++ci) {
                        T gv = g[(bi * s + tt) * c + ci];
                        if (gv == T(0)) continue;
                        for (int64_t j = 0; j < w; ++j) {
                            int64_t src = tt - (w - 1) + j;
                            if (src < 0) continue;
                            if (kn >= 0) t.grad(kn)[ci * w + j] += gv * (*xv)[(bi * s + src) * c + ci];
                            if (xn >= 0) t.grad(xn)[(bi * s + src) * c + ci] += gv * (*kv)[ci * w + j];
                        }
                    }
        });
    }
    return r;
}

// ---------------------------------------------------------------------------
// Embedding lookup: ids [b][s] into table [vocab, d] -> [b, s, d].
// ---------------------------------------------------------------------------

template <typename T>
Var<T> embedding_lookup(const TokenBatch& ids, const Var<T>& table) {
    const Tensor<T>& W = table.v();
    if (W.rank() != 2) throw std::invalid_argument("embedding: table must be [vocab, d]");
    int64_t vocab = W.dim(0), d = W.dim(1);
    int64_t b = static_cast<int64_t>(ids.size());
    int64_t s = b > 0 ? static_cast<int64_t>(ids[0].size()) : 0;
    for (const auto& row : ids) {
        if (static_cast<int64_t>(row.size()) != s) throw std::invalid_argument("embedding: ragged batch");
        for (int32_t id : row)
            if (id < 0 || id >= vocab) throw std::out_of_range("embedding: token id out of range");
    }
    auto out = std::make_shared<Tensor<T>>(Shape{b, s, d});
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t si = 0; si < s; ++si)
            std::copy_n(W.data.data() + ids[bi][si] * d, d, out->data.data() + (bi * s + si) * d);
    Var<T> r{out, nullptr, -1};
    if (table.tracked()) {
        int tn = table.node;
        r.tape = table.tape;
        r.node = table.tape->push(out->shape, [tn, ids, d, s](Tape<T>& t, const Tensor<T>& g) {
            for (int64_t bi = 0; bi < static_cast<int64_t>(ids.size()); ++bi)
                for (int64_t si = 0; si < s; ++si) {
                    const T* grow = g.data.data() + (bi * s + si) * d;
                    T* trow = t.grad(tn).data.data() + ids[bi][si] * d;
                    for (int64_t i = 0; i < d; ++i) trow[i] += grow[i];
                }
        });
    }
    return r;
}

// ---------------------------------------------------------------------------
// Row-wise softmax with causal mask over [..., s, s] score grids: entry
// (t, t') with t' > t is masked out.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> causal_softmax(const Var<T>& x) {
    const Tensor<T>& X = x.v();
    if (X.rank() < 2 || X.shape.back() != X.shape[X.shape.size() - 2])
        throw std::invalid_argument("causal_softmax: want [..., s, s]");
    int64_t s = X.shape.back();
    int64_t grids = X.size() / (s * s);
    auto out = std::make_shared<Tensor<T>>(X.shape);
    for (int64_t gidx = 0; gidx < grids; ++gidx)
        for (int64_t t = 0; t < s; ++t) {
            const T* row = X.data.data() + (gidx * s + t) * s;
            T* orow = out->data.data() + (gidx * s + t) * s;
            T mx = row[0];
            for (int64_t j = 1; j <= t; ++j) mx = std::max(mx, row[j]);
            T z = T(0);
            for (int64_t j = 0; j <= t; ++j) {
                orow[j] = std::exp(row[j] - mx);
                z += orow[j];
            }
            for (int64_t j = 0; j <= t; ++j) orow[j] /= z;
            for (int64_t j = t + 1; j < s; ++j) orow[j] = T(0);
        }
    Var<T> r{out, nullptr, -1};
    if (x.tracked()) {
        int xn = x.node;
        auto ov = out;
        r.tape = x.tape;
        r.node = x.tape->push(X.shape, [xn, ov, s, grids](Tape<T>& t, const Tensor<T>& g) {
            for (int64_t gidx = 0; gidx < grids; ++gidx)
                for (int64_t tt = 0; tt < s; ++tt) {
                    const T* p = ov->data.data() + (gidx * s + tt) * s;
                    const T* gr = g.data.data() + (gidx * s + tt) * s;
                    T dot = T(0);
                    for (int64_t j = 0; j <= tt; ++j) dot += gr[j] * p[j];
                    T* gx = t.grad(xn).data.data() + (gidx * s + tt) * s;
                    for (int64_t j = 0; j <= tt; ++j) gx[j] += p[j] * (gr[j] - dot);
                }
        });
    }
    return r;
}

// ---------------------------------------------------------------------------
// Fused causal grouped-query attention. q [b,s,nq*hd], k/v [b,s,nkv*hd];
// query head i uses kv head floor(i*nkv/nq). Output [b,s,nq*hd].
// ---------------------------------------------------------------------------

template <typename T>
Var<T> gqa_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int64_t n_q, int64_t n_kv) {
    const Tensor<T>& Q = q.v();
    const Tensor<T>& K = k.v();
    const Tensor<T>& V = v.v();
    if (Q.rank() != 3 || K.rank() != 3 || V.rank() != 3) throw std::invalid_argument("attention: want rank-3 inputs");
    if (n_q <= 0 || n_kv <= 0 || n_q % n_kv != 0) throw std::invalid_argument("attention: n_q must be a multiple of n_kv");
    int64_t b = Q.dim(0), s = Q.dim(1);
    if (Q.dim(2) % n_q != 0) throw std::invalid_argument("attention: q dim not divisible by heads");
    int64_t hd = Q.dim(2) / n_q;
    if (K.dim(2) != n_kv * hd || V.dim(2) != n_kv * hd || K.dim(0) != b || K.dim(1) != s || !K.same_shape(V))
        throw std::invalid_argument("attention: k/v shape mismatch");
    T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));

    auto out = std::make_shared<Tensor<T>>(Q.shape);
    // Per (b, head) probability grids, kept for the backward pass.
    auto probs = std::make_shared<Tensor<T>>(Shape{b, n_q, s, s});
    parallel_for(b * n_q, [&](int64_t lo, int64_t hi) {
        for (int64_t bh = lo; bh < hi; ++bh) {
            int64_t bi = bh / n_q, h = bh % n_q;
            int64_t kvh = h * n_kv / n_q;
            for (int64_t t = 0; t < s; ++t) {
                const T* qrow = Q.data.data() + (bi * s + t) * n_q * hd + h * hd;
                T* prow = probs->data.data() + ((bi * n_q + h) * s + t) * s;
                T mx = -std::numeric_limits<T>::infinity();
                for (int64_t u = 0; u <= t; ++u) {
                    const T* krow = K.data.data() + (bi * s + u) * n_kv * hd + kvh * hd;
                    T dot = T(0);
                    for (int64_t i = 0; i < hd; ++i) dot += qrow[i] * krow[i];
                    prow[u] = dot * inv_sqrt;
                    mx = std::max(mx, prow[u]);
                }
                T z = T(0);
                for (int64_t u = 0; u <= t; ++u) {
                    prow[u] = std::exp(prow[u] - mx);
                    z += prow[u];
                }
                T* orow = out->data.data() + (bi * s + t) * n_q * hd + h * hd;
                for (int64_t i = 0; i < hd; ++i) orow[i] = T(0);
                for (int64_t u = 0; u <= t; ++u) {
                    prow[u] /= z;
                    const T* vrow = V.data.data() + (bi * s + u) * n_kv * hd + kvh * hd;
                    for (int64_t i = 0; i < hd; ++i) orow[i] += prow[u] * vrow[i];
                }
                for (int64_t u = t + 1; u < s; ++u) prow[u] = T(0);
            }
        }
    });

    Var<T> r{out, nullptr, -1};
    if (Tape<T>* tp = detail::joint_tape<T>({&q, &k, &v})) {
        int qn = q.node, kn = k.node, vn = v.node;
        auto qv = q.val, kv2 = k.val, vv = v.val;
        r.tape = tp;
        r.node = tp->push(Q.shape, [qn, kn, vn, qv, kv2, vv, probs, b, s, n_q, n_kv, hd, inv_sqrt](Tape<T>& t, const Tensor<T>& g) {
            for (int64_t bi = 0; bi < b; ++bi)
                for (int64_t h = 0; h < n_q; ++h) {
                    int64_t kvh = h * n_kv / n_q;
                    for (int64_t tt = 0; tt < s; ++tt) {
                        const T* grow = g.data.data() + (bi * s + tt) * n_q * hd + h * hd;
                        const T* prow = probs->data.data() + ((bi * n_q + h) * s + tt) * s;
                        // dP and the softmax Jacobian, row at a time.
                        T dot = T(0);
                        std::vector<T> dp(static_cast<size_t>(tt) + 1);
                        for (int64_t u = 0; u <= tt; ++u) {
                            const T* vrow = vv->data.data() + (bi * s + u) * n_kv * hd + kvh * hd;
                            T acc = T(0);
                            for (int64_t i = 0; i < hd; ++i) acc += grow[i] * vrow[i];
                            dp[static_cast<size_t>(u)] = acc;
                            dot += acc * prow[u];
                        }
                        const T* qrow = qv->data.data() + (bi * s + tt) * n_q * hd + h * hd;
                        for (int64_t u = 0; u <= tt; ++u) {
                            T ds = prow[u] * (dp[static_cast<size_t>(u)] - dot) * inv_sqrt;
                            const T* krow = kv2->data.data() + (bi * s + u) * n_kv * hd + kvh * hd;
                            if (qn >= 0) {
                                T* gq = t.grad(qn).data.data() + (bi * s + tt) * n_q * hd + h * hd;
                                for (int64_t i = 0; i < hd; ++i) gq[i] += ds * krow[i];
                            }
                            if (kn >= 0) {
                                T* gk = t.grad(kn).data.data() + (bi * s + u) * n_kv * hd + kvh * hd;
                                for (int64_t i = 0; i < hd; ++i) gk[i] += ds * qrow[i];
                            }
                            if (vn >= 0) {
                                T* gvr = t.grad(vn).data.data() + (bi * s + u) * n_kv * hd + kvh * hd;
                                for (int64_t i = 0; i < hd; ++i) gvr[i] += prow[u] * grow[i];
                            }
                        }
                    }
                }
        });
    }
    return r;
}

// ---------------------------------------------------------------------------
// Selective-scan SSM core. Per head h with state H [p, n]:
//   a_t = exp(-dt_t * A_h),  H_t = a_t * H_{t-1} + dt_t * (x_t outer B_t),
//   y_t = H_t . C_t + D_h * x_t.
// x [b,s,h*p], dt [b,s,h], A [h] (positive), B/C [b,s,g*n], D [h].
// Heads in group g = h / (heads/groups) share that group's B/C columns.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> ssm_scan(const Var<T>& x, const Var<T>& dt, const Var<T>& A, const Var<T>& B, const Var<T>& C,
                const Var<T>& D, int64_t heads, int64_t head_dim, int64_t groups, int64_t state_dim) {
    const Tensor<T>& X = x.v();
    if (X.rank() != 3 || X.dim(2) != heads * head_dim) throw std::invalid_argument("ssm_scan: x shape");
    int64_t b = X.dim(0), s = X.dim(1), p = head_dim, n = state_dim;
    if (dt.v().shape != Shape{b, s, heads}) throw std::invalid_argument("ssm_scan: dt shape");
    if (A.v().shape != Shape{heads} || D.v().shape != Shape{heads}) throw std::invalid_argument("ssm_scan: A/D shape");
    if (B.v().shape != Shape{b, s, groups * n} || C.v().shape != Shape{b, s, groups * n})
        throw std::invalid_argument("ssm_scan: B/C shape");
    if (heads % groups != 0) throw std::invalid_argument("ssm_scan: heads not divisible by groups");
    int64_t hpg = heads / groups;

    auto out = std::make_shared<Tensor<T>>(X.shape);
    // Full state history [b, s, heads, p, n] for the reverse sweep.
    auto hist = std::make_shared<Tensor<T>>(Shape{b, s, heads, p, n});
    parallel_for(b * heads, [&](int64_t lo, int64_t hi) {
        for (int64_t bh = lo; bh < hi; ++bh) {
            int64_t bi = bh / heads, h = bh % heads;
            int64_t g = h / hpg;
            std::vector<T> H(static_cast<size_t>(p * n), T(0));
            for (int64_t t = 0; t < s; ++t) {
                T dtv = dt.v()[(bi * s + t) * heads + h];
                T a = std::exp(-dtv * A.v()[h]);
                const T* xr = X.data.data() + (bi * s + t) * heads * p + h * p;
                const T* Br = B.v().data.data() + (bi * s + t) * groups * n + g * n;
                const T* Cr = C.v().data.data() + (bi * s + t) * groups * n + g * n;
                T* orow = out->data.data() + (bi * s + t) * heads * p + h * p;
                T* hrow = hist->data.data() + (((bi * s + t) * heads + h) * p) * n;
                for (int64_t i = 0; i < p; ++i) {
                    T y = T(0);
                    T dx = dtv * xr[i];
                    for (int64_t j = 0; j < n; ++j) {
                        T hv = a * H[static_cast<size_t>(i * n + j)] + dx * Br[j];
                        H[static_cast<size_t>(i * n + j)] = hv;
                        hrow[i * n + j] = hv;
                        y += Cr[j] * hv;
                    }
                    orow[i] = y + D.v()[h] * xr[i];
                }
            }
        }
    });

    Var<T> r{out, nullptr, -1};
    Tape<T>* tp = detail::joint_tape<T>({&x, &dt, &A, &B, &C, &D});
    if (tp) {
        int xn = x.node, dtn = dt.node, an = A.node, bn = B.node, cn = C.node, dn = D.node;
        auto xv = x.val, dtv2 = dt.val, av = A.val, bv = B.val, cv = C.val, dv = D.val;
        r.tape = tp;
        r.node = tp->push(X.shape, [=](Tape<T>& t, const Tensor<T>& g) {
            for (int64_t bi = 0; bi < b; ++bi)
                for (int64_t h = 0; h < heads; ++h) {
                    int64_t gr = h / hpg;
                    std::vector<T> dH(static_cast<size_t>(p * n), T(0));
                    for (int64_t tt = s - 1; tt >= 0; --tt) {
                        int64_t base = (bi * s + tt);
                        T dtval = (*dtv2)[base * heads + h];
                        T Ah = (*av)[h];
                        T a = std::exp(-dtval * Ah);
                        const T* xr = xv->data.data() + base * heads * p + h * p;
                        const T* Br = bv->data.data() + base * groups * n + gr * n;
                        const T* Cr = cv->data.data() + base * groups * n + gr * n;
                        const T* grow = g.data.data() + base * heads * p + h * p;
                        const T* hrow = hist->data.data() + ((base * heads + h) * p) * n;
                        const T* hprev = tt > 0 ? hist->data.data() + (((bi * s + tt - 1) * heads + h) * p) * n : nullptr;
                        T ddt = T(0), da = T(0);
                        for (int64_t i = 0; i < p; ++i) {
                            T gy = grow[i];
                            T dx_acc = T(0);
                            for (int64_t j = 0; j < n; ++j) {
                                T dh = dH[static_cast<size_t>(i * n + j)] + gy * Cr[j];
                                // grads through the update H = a*Hprev + dt*x*B
                                T hp = hprev ? hprev[i * n + j] : T(0);
                                da += dh * hp;
                                ddt += dh * xr[i] * Br[j];
                                dx_acc += dh * Br[j];
                                if (bn >= 0) t.grad(bn)[base * groups * n + gr * n + j] += dh * dtval * xr[i];
                                if (cn >= 0) t.grad(cn)[base * groups * n + gr * n + j] += gy * hrow[i * n + j];
                                dH[static_cast<size_t>(i * n + j)] = dh * a;  // flows to H_{t-1}
                            }
                            if (xn >= 0) t.grad(xn)[base * heads * p + h * p + i] += gy * (*dv)[h] + dtval * dx_acc;
                            if (dn >= 0) t.grad(dn)[h] += gy * xr[i];
                        }
                        // a = exp(-dt*A): da/ddt = -A*a, da/dA = -dt*a
                        if (dtn >= 0) t.grad(dtn)[base * heads + h] += ddt + da * (-Ah) * a;
                        if (an >= 0) t.grad(an)[h] += da * (-dtval) * a;
                    }
                }
        });
    }
    return r;
}

/// Forward-only chunked scan; same recurrence computed chunk by chunk with
/// the intra-chunk part in quadratic attention-like form. Cross-checked
/// against ssm_scan in the tests.
template <typename T>
Tensor<T> ssm_scan_chunked(const Tensor<T>& X, const Tensor<T>& dt, const Tensor<T>& A, const Tensor<T>& B,
                           const Tensor<T>& C, const Tensor<T>& D, int64_t heads, int64_t head_dim, int64_t groups,
                           int64_t state_dim, int64_t chunk = 16) {
    int64_t b = X.dim(0), s = X.dim(1), p = head_dim, n = state_dim;
    int64_t hpg = heads / groups;
    Tensor<T> out(X.shape);
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t h = 0; h < heads; ++h) {
            int64_t g = h / hpg;
            std::vector<T> H(static_cast<size_t>(p * n), T(0));  // carried state
            for (int64_t c0 = 0; c0 < s; c0 += chunk) {
                int64_t cl = std::min(chunk, s - c0);
                std::vector<T> a(static_cast<size_t>(cl)), cum(static_cast<size_t>(cl));
                for (int64_t t = 0; t < cl; ++t) {
                    T dtv = dt[((bi * s + c0 + t)) * heads + h];
                    a[static_cast<size_t>(t)] = std::exp(-dtv * A[h]);
                    cum[static_cast<size_t>(t)] = (t == 0 ? T(1) : cum[static_cast<size_t>(t - 1)]) * a[static_cast<size_t>(t)];
                }
                for (int64_t t = 0; t < cl; ++t) {
                    int64_t base = bi * s + c0 + t;
                    const T* Cr = C.data.data() + base * groups * n + g * n;
                    const T* xr = X.data.data() + base * heads * p + h * p;
                    T* orow = out.data.data() + base * heads * p + h * p;
                    // contribution of the carried state
                    for (int64_t i = 0; i < p; ++i) {
                        T y = T(0);
                        for (int64_t j = 0; j < n; ++j) y += Cr[j] * H[static_cast<size_t>(i * n + j)];
                        orow[i] = y * cum[static_cast<size_t>(t)] + D[h] * xr[i];
                    }
                    // intra-chunk pairwise terms u <= t
                    for (int64_t u = 0; u <= t; ++u) {
                        int64_t ubase = bi * s + c0 + u;
                        T dtu = dt[ubase * heads + h];
                        T w = dtu * (u == t ? T(1) : cum[static_cast<size_t>(t)] / cum[static_cast<size_t>(u)]);
                        const T* Bu = B.data.data() + ubase * groups * n + g * n;
                        T cb = T(0);
                        for (int64_t j = 0; j < n; ++j) cb += Cr[j] * Bu[j];
                        const T* xu = X.data.data() + ubase * heads * p + h * p;
                        T wcb = w * cb;
                        for (int64_t i = 0; i < p; ++i) orow[i] += wcb * xu[i];
                    }
                }
                // carry state across the chunk boundary
                for (int64_t i = 0; i < p; ++i)
                    for (int64_t j = 0; j < n; ++j) {
                        T hv = H[static_cast<size_t>(i * n + j)] * cum[static_cast<size_t>(cl - 1)];
                        for (int64_t u = 0; u < cl; ++u) {
                            int64_t ubase = bi * s + c0 + u;
                            T dtu = dt[ubase * heads + h];
                            T w = dtu * (u == cl - 1 ? T(1) : cum[static_cast<size_t>(cl - 1)] / cum[static_cast<size_t>(u)]);
                            hv += w * X[ubase * heads * p + h * p + i] * B[ubase * groups * n + g * n + j];
                        }
                        H[static_cast<size_t>(i * n + j)] = hv;
                    }
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(const Var<T>& x) {
    auto out = std::make_shared<Tensor<T>>(Shape{1});
    T acc = T(0);
    for (int64_t i = 0; i < x.v().size(); ++i) acc += x.v()[i];
    (*out)[0] = acc;
    Var<T> r{out, nullptr, -1};
    if (x.tracked()) {
        int xn = x.node;
        r.tape = x.tape;
        r.node = x.tape->push(Shape{1}, [xn](Tape<T>& t, const Tensor<T>& g) {
            for (int64_t i = 0; i < t.grad(xn).size(); ++i) t.grad(xn)[i] += g[0];
        });
    }
    return r;
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
    return scale(sum_all(x), T(1) / static_cast<T>(x.v().size()));
}

/// Mean token cross-entropy: logits [b,s,V] against target ids [b][s].
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const TokenBatch& targets) {
    const Tensor<T>& L = logits.v();
    if (L.rank() != 3) throw std::invalid_argument("cross_entropy: logits must be [b,s,V]");
    int64_t b = L.dim(0), s = L.dim(1), V = L.dim(2);
    if (static_cast<int64_t>(targets.size()) != b) throw std::invalid_argument("cross_entropy: batch mismatch");
    auto out = std::make_shared<Tensor<T>>(Shape{1});
    auto probs = std::make_shared<Tensor<T>>(L.shape);
    T total = T(0);
    for (int64_t bi = 0; bi < b; ++bi) {
        if (static_cast<int64_t>(targets[bi].size()) != s) throw std::invalid_argument("cross_entropy: seq mismatch");
        for (int64_t si = 0; si < s; ++si) {
            int32_t y = targets[bi][si];
            if (y < 0 || y >= V) throw std::out_of_range("cross_entropy: target out of range");
            const T* row = L.data.data() + (bi * s + si) * V;
            T* prow = probs->data.data() + (bi * s + si) * V;
            T mx = *std::max_element(row, row + V);
            T z = T(0);
            for (int64_t j = 0; j < V; ++j) {
                prow[j] = std::exp(row[j] - mx);
                z += prow[j];
            }
            for (int64_t j = 0; j < V; ++j) prow[j] /= z;
            total += -(std::log(prow[y]));
        }
    }
    (*out)[0] = total / static_cast<T>(b * s);
    Var<T> r{out, nullptr, -1};
    if (logits.tracked()) {
        int ln = logits.node;
        r.tape = logits.tape;
        r.node = logits.tape->push(Shape{1}, [ln, probs, targets, b, s, V](Tape<T>& t, const Tensor<T>& g) {
            T inv = g[0] / static_cast<T>(b * s);
            for (int64_t bi = 0; bi < b; ++bi)
                for (int64_t si = 0; si < s; ++si) {
                    const T* prow = probs->data.data() + (bi * s + si) * V;
                    T* grow = t.grad(ln).data.data() + (bi * s + si) * V;
                    for (int64_t j = 0; j < V; ++j) grow[j] += inv * prow[j];
                    grow[targets[bi][si]] -= inv;
                }
        });
    }
    return r;
}

/// Forward KL distillation loss: mean over positions of
/// KL(softmax(teacher) || softmax(student)). Teacher is a constant.
template <typename T>
Var<T> kd_loss(const Var<T>& student, const Tensor<T>& teacher) {
    const Tensor<T>& S = student.v();
    if (S.shape != teacher.shape) throw std::invalid_argument("kd_loss: shape mismatch");
    if (S.rank() < 1) throw std::invalid_argument("kd_loss: rank");
    int64_t V = S.shape.back();
    int64_t rows = S.size() / V;
    auto out = std::make_shared<Tensor<T>>(Shape{1});
    auto q = std::make_shared<Tensor<T>>(S.shape);  // student probs
    auto pt = std::make_shared<Tensor<T>>(S.shape); // teacher probs
    T total = T(0);
    for (int64_t r2 = 0; r2 < rows; ++r2) {
        const T* srow = S.data.data() + r2 * V;
        const T* trow = teacher.data.data() + r2 * V;
        T* qrow = q->data.data() + r2 * V;
        T* prow = pt->data.data() + r2 * V;
        T smx = *std::max_element(srow, srow + V);
        T tmx = *std::max_element(trow, trow + V);
        T zs = T(0), zt = T(0);
        for (int64_t j = 0; j < V; ++j) {
            qrow[j] = std::exp(srow[j] - smx);
            zs += qrow[j];
            prow[j] = std::exp(trow[j] - tmx);
            zt += prow[j];
        }
        T log_zs = std::log(zs), log_zt = std::log(zt);
        for (int64_t j = 0; j < V; ++j) {
            qrow[j] /= zs;
            prow[j] /= zt;
            if (prow[j] > T(0))
                total += prow[j] * ((trow[j] - tmx - log_zt) - (srow[j] - smx - log_zs));
        }
    }
    (*out)[0] = total / static_cast<T>(rows);
    Var<T> r{out, nullptr, -1};
    if (student.tracked()) {
        int sn = student.node;
        r.tape = student.tape;
        r.node = student.tape->push(Shape{1}, [sn, q, pt, rows, V](Tape<T>& t, const Tensor<T>& g) {
            T inv = g[0] / static_cast<T>(rows);
            for (int64_t i = 0; i < rows * V; ++i) t.grad(sn)[i] += inv * ((*q)[i] - (*pt)[i]);
        });
    }
    return r;
}

/// Reverse-mode gradients of a scalar loss w.r.t. the given leaves.
template <typename T>
std::map<int, Tensor<T>> grad(const Var<T>& loss, const std::vector<Var<T>>& params) {
    if (!loss.tracked()) throw std::invalid_argument("grad: loss is not on a tape");
    if (loss.v().size() != 1) throw std::invalid_argument("grad: loss must be scalar");
    loss.tape->run_backward(loss.node);
    std::map<int, Tensor<T>> out;
    for (const Var<T>& p : params) {
        if (!p.tracked() || p.tape != loss.tape) throw std::invalid_argument("grad: param not on the loss tape");
        out.emplace(p.node, loss.tape->grad(p.node));
    }
    return out;
}

}  // namespace nncomp

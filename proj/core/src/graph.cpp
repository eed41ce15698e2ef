#include "qdpd/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "qdpd/errors.hpp"
#include "qdpd/parallel.hpp"

namespace qdpd {

namespace {

inline double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double softplus_d(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

std::vector<int64_t> strides_of(const std::vector<int>& shape) {
    std::vector<int64_t> st(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
        st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * shape[static_cast<size_t>(i) + 1];
    return st;
}

constexpr int64_t kParallelCutoff = 1 << 15;  // flop count under which one thread wins

}  // namespace

Var Graph::make(Tensor value, bool requires_grad, std::function<void()> back) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad && grad_enabled_;
    if (n.requires_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Graph::Node& Graph::node(Var v) {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
        throw DimensionError("invalid Var handle");
    return nodes_[static_cast<size_t>(v.id)];
}

const Graph::Node& Graph::node(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
        throw DimensionError("invalid Var handle");
    return nodes_[static_cast<size_t>(v.id)];
}

Tensor& Graph::gbuf(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.data.empty()) n.grad = Tensor(n.value.shape);
    return n.grad;
}

Var Graph::input(Tensor t) { return make(std::move(t), false); }

Var Graph::input_grad(Tensor t) { return make(std::move(t), true); }

Var Graph::param(Param& p) {
    Var v = make(p.value, true);
    node(v).bound = &p;
    return v;
}

const Tensor& Graph::val(Var v) const { return node(v).value; }

const Tensor& Graph::grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.data.empty())
        throw TrainingError("grad requested for a node the backward pass never reached");
    return n.grad;
}

// ---- binary elementwise -----------------------------------------------------

Var Graph::add(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    check_same_shape(ta, tb, "add");
    Tensor out(ta.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] + tb.data[i];
    Var v = make(std::move(out), wants_grad(a) || wants_grad(b));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id, ib = b.id;
        bool ga = wants_grad(a), gb = wants_grad(b);
        node(v).back = [this, self, ia, ib, ga, gb] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            if (ga) {
                Tensor& d = gbuf(ia);
                for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i];
            }
            if (gb) {
                Tensor& d = gbuf(ib);
                for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i];
            }
        };
    }
    return v;
}

Var Graph::sub(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    check_same_shape(ta, tb, "sub");
    Tensor out(ta.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] - tb.data[i];
    Var v = make(std::move(out), wants_grad(a) || wants_grad(b));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id, ib = b.id;
        bool ga = wants_grad(a), gb = wants_grad(b);
        node(v).back = [this, self, ia, ib, ga, gb] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            if (ga) {
                Tensor& d = gbuf(ia);
                for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i];
            }
            if (gb) {
                Tensor& d = gbuf(ib);
                for (size_t i = 0; i < g.data.size(); ++i) d.data[i] -= g.data[i];
            }
        };
    }
    return v;
}

Var Graph::mul(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    check_same_shape(ta, tb, "mul");
    Tensor out(ta.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] * tb.data[i];
    Var v = make(std::move(out), wants_grad(a) || wants_grad(b));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id, ib = b.id;
        bool ga = wants_grad(a), gb = wants_grad(b);
        node(v).back = [this, self, ia, ib, ga, gb] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            const Tensor& va = nodes_[static_cast<size_t>(ia)].value;
            const Tensor& vb = nodes_[static_cast<size_t>(ib)].value;
            if (ga) {
                Tensor& d = gbuf(ia);
                for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i] * vb.data[i];
            }
            if (gb) {
                Tensor& d = gbuf(ib);
                for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i] * va.data[i];
            }
        };
    }
    return v;
}

Var Graph::scale(Var a, double s) {
    const Tensor& ta = val(a);
    Tensor out(ta.shape);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = static_cast<float>(ta.data[i] * s);
    Var v = make(std::move(out), wants_grad(a));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id;
        node(v).back = [this, self, ia, s] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            Tensor& d = gbuf(ia);
            for (size_t i = 0; i < g.data.size(); ++i)
                d.data[i] += static_cast<float>(g.data[i] * s);
        };
    }
    return v;
}

Var Graph::add_scalar(Var a, double s) {
    const Tensor& ta = val(a);
    Tensor out(ta.shape);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = static_cast<float>(ta.data[i] + s);
    Var v = make(std::move(out), wants_grad(a));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id;
        node(v).back = [this, self, ia] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            Tensor& d = gbuf(ia);
            for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i];
        };
    }
    return v;
}

// ---- unary elementwise ------------------------------------------------------

Var Graph::silu(Var a) {
    const Tensor& ta = val(a);
    Tensor out(ta.shape);
    for (size_t i = 0; i < out.data.size(); ++i) {
        double x = ta.data[i];
        out.data[i] = static_cast<float>(x * sigmoid_d(x));
    }
    Var v = make(std::move(out), wants_grad(a));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id;
        node(v).back = [this, self, ia] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            const Tensor& va = nodes_[static_cast<size_t>(ia)].value;
            Tensor& d = gbuf(ia);
            for (size_t i = 0; i < g.data.size(); ++i) {
                double x = va.data[i];
                double s = sigmoid_d(x);
                d.data[i] += static_cast<float>(g.data[i] * (s * (1.0 + x * (1.0 - s))));
            }
        };
    }
    return v;
}

Var Graph::tanh_act(Var a) {
    const Tensor& ta = val(a);
    Tensor out(ta.shape);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = static_cast<float>(std::tanh(static_cast<double>(ta.data[i])));
    Var v = make(std::move(out), wants_grad(a));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id;
        node(v).back = [this, self, ia] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            const Tensor& y = nodes_[static_cast<size_t>(self)].value;
            Tensor& d = gbuf(ia);
            for (size_t i = 0; i < g.data.size(); ++i) {
                double t = y.data[i];
                d.data[i] += static_cast<float>(g.data[i] * (1.0 - t * t));
            }
        };
    }
    return v;
}

Var Graph::softplus(Var a) {
    const Tensor& ta = val(a);
    Tensor out(ta.shape);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = static_cast<float>(softplus_d(ta.data[i]));
    Var v = make(std::move(out), wants_grad(a));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id;
        node(v).back = [this, self, ia] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            const Tensor& va = nodes_[static_cast<size_t>(ia)].value;
            Tensor& d = gbuf(ia);
            for (size_t i = 0; i < g.data.size(); ++i)
                d.data[i] += static_cast<float>(g.data[i] * sigmoid_d(va.data[i]));
        };
    }
    return v;
}

Var Graph::sigmoid(Var a) {
    const Tensor& ta = val(a);
    Tensor out(ta.shape);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = static_cast<float>(sigmoid_d(ta.data[i]));
    Var v = make(std::move(out), wants_grad(a));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id;
        node(v).back = [this, self, ia] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            const Tensor& y = nodes_[static_cast<size_t>(self)].value;
            Tensor& d = gbuf(ia);
            for (size_t i = 0; i < g.data.size(); ++i) {
                double s = y.data[i];
                d.data[i] += static_cast<float>(g.data[i] * s * (1.0 - s));
            }
        };
    }
    return v;
}

Var Graph::exp_act(Var a) {
    const Tensor& ta = val(a);
    Tensor out(ta.shape);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = static_cast<float>(std::exp(static_cast<double>(ta.data[i])));
    Var v = make(std::move(out), wants_grad(a));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id;
        node(v).back = [this, self, ia] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            const Tensor& y = nodes_[static_cast<size_t>(self)].value;
            Tensor& d = gbuf(ia);
            for (size_t i = 0; i < g.data.size(); ++i)
                d.data[i] += static_cast<float>(static_cast<double>(g.data[i]) * y.data[i]);
        };
    }
    return v;
}

Var Graph::log_act(Var a) {
    const Tensor& ta = val(a);
    Tensor out(ta.shape);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = static_cast<float>(std::log(static_cast<double>(ta.data[i])));
    Var v = make(std::move(out), wants_grad(a));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id;
        node(v).back = [this, self, ia] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            const Tensor& va = nodes_[static_cast<size_t>(ia)].value;
            Tensor& d = gbuf(ia);
            for (size_t i = 0; i < g.data.size(); ++i)
                d.data[i] += static_cast<float>(g.data[i] / static_cast<double>(va.data[i]));
        };
    }
    return v;
}

Var Graph::square(Var a) {
    const Tensor& ta = val(a);
    Tensor out(ta.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] * ta.data[i];
    Var v = make(std::move(out), wants_grad(a));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id;
        node(v).back = [this, self, ia] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            const Tensor& va = nodes_[static_cast<size_t>(ia)].value;
            Tensor& d = gbuf(ia);
            for (size_t i = 0; i < g.data.size(); ++i)
                d.data[i] += static_cast<float>(2.0 * g.data[i] * va.data[i]);
        };
    }
    return v;
}

Var Graph::rsqrt_eps(Var a, double eps) {
    const Tensor& ta = val(a);
    Tensor out(ta.shape);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = static_cast<float>(1.0 / std::sqrt(static_cast<double>(ta.data[i]) + eps));
    Var v = make(std::move(out), wants_grad(a));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id;
        node(v).back = [this, self, ia] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            const Tensor& y = nodes_[static_cast<size_t>(self)].value;
            Tensor& d = gbuf(ia);
            for (size_t i = 0; i < g.data.size(); ++i) {
                double yy = y.data[i];
                d.data[i] += static_cast<float>(-0.5 * g.data[i] * yy * yy * yy);
            }
        };
    }
    return v;
}

// ---- linear algebra ---------------------------------------------------------

namespace {

// C[m,n] = A[m,k] * B[k,n], double row accumulators, optionally parallel over m.
void matmul_fwd(const float* A, const float* B, float* C, int m, int k, int n) {
    auto body = [&](int64_t lo, int64_t hi) {
        std::vector<double> acc(static_cast<size_t>(n));
        for (int64_t i = lo; i < hi; ++i) {
            std::fill(acc.begin(), acc.end(), 0.0);
            const float* arow = A + i * k;
            for (int kk = 0; kk < k; ++kk) {
                double a = arow[kk];
                const float* brow = B + static_cast<int64_t>(kk) * n;
                for (int j = 0; j < n; ++j) acc[static_cast<size_t>(j)] += a * brow[j];
            }
            float* crow = C + i * n;
            for (int j = 0; j < n; ++j) crow[j] = static_cast<float>(acc[static_cast<size_t>(j)]);
        }
    };
    if (static_cast<int64_t>(m) * k * n >= kParallelCutoff)
        parallel_for(m, body);
    else
        body(0, m);
}

// D[m,k] += G[m,n] * B[k,n]^T  (i.e. dA for C = A*B)
void matmul_bwd_a(const float* G, const float* B, float* D, int m, int k, int n) {
    auto body = [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            const float* grow = G + i * n;
            float* drow = D + i * k;
            for (int kk = 0; kk < k; ++kk) {
                const float* brow = B + static_cast<int64_t>(kk) * n;
                double acc = 0.0;
                for (int j = 0; j < n; ++j) acc += static_cast<double>(grow[j]) * brow[j];
                drow[kk] += static_cast<float>(acc);
            }
        }
    };
    if (static_cast<int64_t>(m) * k * n >= kParallelCutoff)
        parallel_for(m, body);
    else
        body(0, m);
}

// D[k,n] += A[m,k]^T * G[m,n]  (i.e. dB for C = A*B)
void matmul_bwd_b(const float* A, const float* G, float* D, int m, int k, int n) {
    auto body = [&](int64_t lo, int64_t hi) {
        std::vector<double> acc(static_cast<size_t>(n));
        for (int64_t kk = lo; kk < hi; ++kk) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (int i = 0; i < m; ++i) {
                double a = A[static_cast<int64_t>(i) * k + kk];
                const float* grow = G + static_cast<int64_t>(i) * n;
                for (int j = 0; j < n; ++j) acc[static_cast<size_t>(j)] += a * grow[j];
            }
            float* drow = D + kk * n;
            for (int j = 0; j < n; ++j) drow[j] += static_cast<float>(acc[static_cast<size_t>(j)]);
        }
    };
    if (static_cast<int64_t>(m) * k * n >= kParallelCutoff)
        parallel_for(k, body);
    else
        body(0, k);
}

}  // namespace

Var Graph::matmul(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.ndim() != 2 || tb.ndim() != 2)
        throw DimensionError("matmul expects 2-D tensors, got " + shape_str(ta.shape) + " x " +
                             shape_str(tb.shape));
    if (ta.dim(1) != tb.dim(0))
        throw DimensionError("matmul inner dimensions disagree: " + shape_str(ta.shape) + " x " +
                             shape_str(tb.shape));
    int m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
    Tensor out({m, n});
    matmul_fwd(ta.data.data(), tb.data.data(), out.data.data(), m, k, n);
    Var v = make(std::move(out), wants_grad(a) || wants_grad(b));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id, ib = b.id;
        bool ga = wants_grad(a), gb = wants_grad(b);
        node(v).back = [this, self, ia, ib, ga, gb, m, k, n] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            const Tensor& va = nodes_[static_cast<size_t>(ia)].value;
            const Tensor& vb = nodes_[static_cast<size_t>(ib)].value;
            if (ga) matmul_bwd_a(g.data.data(), vb.data.data(), gbuf(ia).data.data(), m, k, n);
            if (gb) matmul_bwd_b(va.data.data(), g.data.data(), gbuf(ib).data.data(), m, k, n);
        };
    }
    return v;
}

Var Graph::bmm(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.ndim() != 3 || tb.ndim() != 3 || ta.dim(0) != tb.dim(0) || ta.dim(2) != tb.dim(1))
        throw DimensionError("bmm shape mismatch: " + shape_str(ta.shape) + " x " +
                             shape_str(tb.shape));
    int B = ta.dim(0), m = ta.dim(1), k = ta.dim(2), n = tb.dim(2);
    Tensor out({B, m, n});
    auto body = [&](int64_t lo, int64_t hi) {
        for (int64_t bi = lo; bi < hi; ++bi)
            matmul_fwd(ta.data.data() + bi * m * k, tb.data.data() + bi * k * n,
                       out.data.data() + bi * m * n, m, k, n);
    };
    body(0, B);
    Var v = make(std::move(out), wants_grad(a) || wants_grad(b));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id, ib = b.id;
        bool ga = wants_grad(a), gb = wants_grad(b);
        node(v).back = [this, self, ia, ib, ga, gb, B, m, k, n] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            const Tensor& va = nodes_[static_cast<size_t>(ia)].value;
            const Tensor& vb = nodes_[static_cast<size_t>(ib)].value;
            for (int64_t bi = 0; bi < B; ++bi) {
                if (ga)
                    matmul_bwd_a(g.data.data() + bi * m * n, vb.data.data() + bi * k * n,
                                 gbuf(ia).data.data() + bi * m * k, m, k, n);
                if (gb)
                    matmul_bwd_b(va.data.data() + bi * m * k, g.data.data() + bi * m * n,
                                 gbuf(ib).data.data() + bi * k * n, m, k, n);
            }
        };
    }
    return v;
}

Var Graph::transpose2d(Var a) {
    const Tensor& ta = val(a);
    if (ta.ndim() != 2) throw DimensionError("transpose2d expects a 2-D tensor");
    int m = ta.dim(0), n = ta.dim(1);
    Tensor out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out(j, i) = ta(i, j);
    Var v = make(std::move(out), wants_grad(a));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id;
        node(v).back = [this, self, ia, m, n] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            Tensor& d = gbuf(ia);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) d(i, j) += g(j, i);
        };
    }
    return v;
}

Var Graph::affine(Var x, Var w, Var b) {
    const Tensor& tx = val(x);
    const Tensor& tw = val(w);
    const Tensor& tb = val(b);
    if (tx.ndim() != 2 || tw.ndim() != 2 || tb.ndim() != 1)
        throw DimensionError("affine expects x[n,in], w[in,out], b[out]");
    if (tx.dim(1) != tw.dim(0) || tw.dim(1) != tb.dim(0))
        throw DimensionError("affine shape mismatch: x" + shape_str(tx.shape) + " w" +
                             shape_str(tw.shape) + " b" + shape_str(tb.shape));
    int m = tx.dim(0), k = tx.dim(1), n = tw.dim(1);
    Tensor out({m, n});
    matmul_fwd(tx.data.data(), tw.data.data(), out.data.data(), m, k, n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out(i, j) += tb(j);
    Var v = make(std::move(out), wants_grad(x) || wants_grad(w) || wants_grad(b));
    if (node(v).requires_grad) {
        int self = v.id, ix = x.id, iw = w.id, ib = b.id;
        bool gx = wants_grad(x), gw = wants_grad(w), gb = wants_grad(b);
        node(v).back = [this, self, ix, iw, ib, gx, gw, gb, m, k, n] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            const Tensor& vx = nodes_[static_cast<size_t>(ix)].value;
            const Tensor& vw = nodes_[static_cast<size_t>(iw)].value;
            if (gx) matmul_bwd_a(g.data.data(), vw.data.data(), gbuf(ix).data.data(), m, k, n);
            if (gw) matmul_bwd_b(vx.data.data(), g.data.data(), gbuf(iw).data.data(), m, k, n);
            if (gb) {
                Tensor& d = gbuf(ib);
                for (int j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < m; ++i) acc += g(i, j);
                    d(j) += static_cast<float>(acc);
                }
            }
        };
    }
    return v;
}

Var Graph::conv2d(Var x, Var w, Var b, int stride, int pad) {
    const Tensor& tx = val(x);
    const Tensor& tw = val(w);
    const Tensor& tb = val(b);
    if (tx.ndim() != 4 || tw.ndim() != 4 || tb.ndim() != 1)
        throw DimensionError("conv2d expects x[N,Ci,H,W], w[Co,Ci,kh,kw], b[Co]");
    if (tx.dim(1) != tw.dim(1) || tw.dim(0) != tb.dim(0))
        throw DimensionError("conv2d channel mismatch: x" + shape_str(tx.shape) + " w" +
                             shape_str(tw.shape));
    if (stride < 1) throw ConfigError("conv2d stride must be >= 1");
    int N = tx.dim(0), Ci = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
    int Co = tw.dim(0), kh = tw.dim(2), kw = tw.dim(3);
    int Ho = (H + 2 * pad - kh) / stride + 1;
    int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho < 1 || Wo < 1) throw DimensionError("conv2d output would be empty");
    Tensor out({N, Co, Ho, Wo});
    auto fwd = [&](int64_t lo, int64_t hi) {
        for (int64_t nc = lo; nc < hi; ++nc) {
            int ni = static_cast<int>(nc / Co);
            int co = static_cast<int>(nc % Co);
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    double acc = tb(co);
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int dy = 0; dy < kh; ++dy) {
                            int ih = oh * stride + dy - pad;
                            if (ih < 0 || ih >= H) continue;
                            for (int dx = 0; dx < kw; ++dx) {
                                int iw = ow * stride + dx - pad;
                                if (iw < 0 || iw >= W) continue;
                                acc += static_cast<double>(tx(ni, ci, ih, iw)) * tw(co, ci, dy, dx);
                            }
                        }
                    out(ni, co, oh, ow) = static_cast<float>(acc);
                }
        }
    };
    int64_t work = static_cast<int64_t>(N) * Co * Ho * Wo * Ci * kh * kw;
    if (work >= kParallelCutoff)
        parallel_for(static_cast<int64_t>(N) * Co, fwd);
    else
        fwd(0, static_cast<int64_t>(N) * Co);

    Var v = make(std::move(out), wants_grad(x) || wants_grad(w) || wants_grad(b));
    if (node(v).requires_grad) {
        int self = v.id, ix = x.id, iw_ = w.id, ib = b.id;
        bool gx = wants_grad(x), gw = wants_grad(w), gb = wants_grad(b);
        node(v).back = [this, self, ix, iw_, ib, gx, gw, gb, N, Ci, H, W, Co, kh, kw, Ho, Wo,
                        stride, pad] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            const Tensor& vx = nodes_[static_cast<size_t>(ix)].value;
            const Tensor& vw = nodes_[static_cast<size_t>(iw_)].value;
            if (gx) {
                Tensor& d = gbuf(ix);
                auto body = [&](int64_t lo, int64_t hi) {
                    for (int64_t nc = lo; nc < hi; ++nc) {
                        int ni = static_cast<int>(nc / Ci);
                        int ci = static_cast<int>(nc % Ci);
                        for (int ih = 0; ih < H; ++ih)
                            for (int iwp = 0; iwp < W; ++iwp) {
                                double acc = 0.0;
                                for (int co = 0; co < Co; ++co)
                                    for (int dy = 0; dy < kh; ++dy) {
                                        int num_h = ih + pad - dy;
                                        if (num_h < 0 || num_h % stride) continue;
                                        int oh = num_h / stride;
                                        if (oh >= Ho) continue;
                                        for (int dx = 0; dx < kw; ++dx) {
                                            int num_w = iwp + pad - dx;
                                            if (num_w < 0 || num_w % stride) continue;
                                            int ow = num_w / stride;
                                            if (ow >= Wo) continue;
                                            acc += static_cast<double>(g(ni, co, oh, ow)) *
                                                   vw(co, ci, dy, dx);
                                        }
                                    }
                                d(ni, ci, ih, iwp) += static_cast<float>(acc);
                            }
                    }
                };
                parallel_for(static_cast<int64_t>(N) * Ci, body);
            }
            if (gw) {
                Tensor& d = gbuf(iw_);
                auto body = [&](int64_t lo, int64_t hi) {
                    for (int64_t cc = lo; cc < hi; ++cc) {
                        int co = static_cast<int>(cc / Ci);
                        int ci = static_cast<int>(cc % Ci);
                        for (int dy = 0; dy < kh; ++dy)
                            for (int dx = 0; dx < kw; ++dx) {
                                double acc = 0.0;
                                for (int ni = 0; ni < N; ++ni)
                                    for (int oh = 0; oh < Ho; ++oh) {
                                        int ih = oh * stride + dy - pad;
                                        if (ih < 0 || ih >= H) continue;
                                        for (int ow = 0; ow < Wo; ++ow) {
                                            int iwp = ow * stride + dx - pad;
                                            if (iwp < 0 || iwp >= W) continue;
                                            acc += static_cast<double>(g(ni, co, oh, ow)) *
                                                   vx(ni, ci, ih, iwp);
                                        }
                                    }
                                d(co, ci, dy, dx) += static_cast<float>(acc);
                            }
                    }
                };
                parallel_for(static_cast<int64_t>(Co) * Ci, body);
            }
            if (gb) {
                Tensor& d = gbuf(ib);
                for (int co = 0; co < Co; ++co) {
                    double acc = 0.0;
                    for (int ni = 0; ni < N; ++ni)
                        for (int oh = 0; oh < Ho; ++oh)
                            for (int ow = 0; ow < Wo; ++ow) acc += g(ni, co, oh, ow);
                    d(co) += static_cast<float>(acc);
                }
            }
        };
    }
    return v;
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, double eps) {
    const Tensor& tx = val(x);
    const Tensor& tg = val(gamma);
    const Tensor& tb = val(beta);
    if (tx.ndim() < 1 || tg.ndim() != 1 || tb.ndim() != 1)
        throw DimensionError("layer_norm expects x[...,D], gamma[D], beta[D]");
    int D = tx.dim(tx.ndim() - 1);
    if (tg.dim(0) != D || tb.dim(0) != D)
        throw DimensionError("layer_norm parameter dim mismatch");
    int64_t rows = tx.numel() / D;
    Tensor out(tx.shape);
    std::vector<float> xhat(static_cast<size_t>(tx.numel()));
    std::vector<float> inv_std(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = tx.data.data() + r * D;
        double mean = 0.0;
        for (int j = 0; j < D; ++j) mean += xr[j];
        mean /= D;
        double var = 0.0;
        for (int j = 0; j < D; ++j) {
            double c = xr[j] - mean;
            var += c * c;
        }
        var /= D;
        double istd = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(r)] = static_cast<float>(istd);
        float* orow = out.data.data() + r * D;
        float* hrow = xhat.data() + r * D;
        for (int j = 0; j < D; ++j) {
            double h = (xr[j] - mean) * istd;
            hrow[j] = static_cast<float>(h);
            orow[j] = static_cast<float>(h * tg(j) + tb(j));
        }
    }
    Var v = make(std::move(out), wants_grad(x) || wants_grad(gamma) || wants_grad(beta));
    if (node(v).requires_grad) {
        int self = v.id, ix = x.id, ig = gamma.id, ib = beta.id;
        bool gx = wants_grad(x), gg = wants_grad(gamma), gb = wants_grad(beta);
        auto xhat_s = std::make_shared<std::vector<float>>(std::move(xhat));
        auto istd_s = std::make_shared<std::vector<float>>(std::move(inv_std));
        node(v).back = [this, self, ix, ig, ib, gx, gg, gb, D, rows, xhat_s, istd_s] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            const Tensor& vg = nodes_[static_cast<size_t>(ig)].value;
            if (gg) {
                Tensor& d = gbuf(ig);
                for (int j = 0; j < D; ++j) {
                    double acc = 0.0;
                    for (int64_t r = 0; r < rows; ++r)
                        acc += static_cast<double>(g.data[static_cast<size_t>(r * D + j)]) *
                               (*xhat_s)[static_cast<size_t>(r * D + j)];
                    d(j) += static_cast<float>(acc);
                }
            }
            if (gb) {
                Tensor& d = gbuf(ib);
                for (int j = 0; j < D; ++j) {
                    double acc = 0.0;
                    for (int64_t r = 0; r < rows; ++r)
                        acc += g.data[static_cast<size_t>(r * D + j)];
                    d(j) += static_cast<float>(acc);
                }
            }
            if (gx) {
                Tensor& d = gbuf(ix);
                for (int64_t r = 0; r < rows; ++r) {
                    const float* grow = g.data.data() + r * D;
                    const float* hrow = xhat_s->data() + r * D;
                    double istd = (*istd_s)[static_cast<size_t>(r)];
                    double sum_gy = 0.0, sum_gyh = 0.0;
                    for (int j = 0; j < D; ++j) {
                        double gy = static_cast<double>(grow[j]) * vg(j);
                        sum_gy += gy;
                        sum_gyh += gy * hrow[j];
                    }
                    double inv_d = 1.0 / D;
                    float* drow = d.data.data() + r * D;
                    for (int j = 0; j < D; ++j) {
                        double gy = static_cast<double>(grow[j]) * vg(j);
                        drow[j] += static_cast<float>(
                            istd * (gy - inv_d * sum_gy - hrow[j] * inv_d * sum_gyh));
                    }
                }
            }
        };
    }
    return v;
}

Var Graph::softmax_lastdim(Var x) {
    const Tensor& tx = val(x);
    if (tx.ndim() < 1) throw DimensionError("softmax needs at least 1-D");
    int D = tx.dim(tx.ndim() - 1);
    int64_t rows = tx.numel() / D;
    Tensor out(tx.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = tx.data.data() + r * D;
        float* orow = out.data.data() + r * D;
        double mx = xr[0];
        for (int j = 1; j < D; ++j) mx = std::max(mx, static_cast<double>(xr[j]));
        double z = 0.0;
        for (int j = 0; j < D; ++j) z += std::exp(static_cast<double>(xr[j]) - mx);
        for (int j = 0; j < D; ++j)
            orow[j] = static_cast<float>(std::exp(static_cast<double>(xr[j]) - mx) / z);
    }
    Var v = make(std::move(out), wants_grad(x));
    if (node(v).requires_grad) {
        int self = v.id, ix = x.id;
        node(v).back = [this, self, ix, D, rows] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            const Tensor& y = nodes_[static_cast<size_t>(self)].value;
            Tensor& d = gbuf(ix);
            for (int64_t r = 0; r < rows; ++r) {
                const float* grow = g.data.data() + r * D;
                const float* yrow = y.data.data() + r * D;
                float* drow = d.data.data() + r * D;
                double dot = 0.0;
                for (int j = 0; j < D; ++j) dot += static_cast<double>(grow[j]) * yrow[j];
                for (int j = 0; j < D; ++j)
                    drow[j] += static_cast<float>(yrow[j] * (grow[j] - dot));
            }
        };
    }
    return v;
}

// ---- shape and data movement ------------------------------------------------

Var Graph::reshape(Var a, std::vector<int> shape) {
    const Tensor& ta = val(a);
    if (shape_numel(shape) != ta.numel())
        throw DimensionError("reshape " + shape_str(ta.shape) + " -> " + shape_str(shape) +
                             " changes element count");
    Tensor out;
    out.shape = std::move(shape);
    out.data = ta.data;
    Var v = make(std::move(out), wants_grad(a));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id;
        node(v).back = [this, self, ia] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            Tensor& d = gbuf(ia);
            for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i];
        };
    }
    return v;
}

Var Graph::concat(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) throw DimensionError("concat of zero parts");
    const Tensor& first = val(parts[0]);
    int nd = first.ndim();
    if (axis < 0 || axis >= nd) throw DimensionError("concat axis out of range");
    std::vector<int> shape = first.shape;
    int total = 0;
    for (Var p : parts) {
        const Tensor& t = val(p);
        if (t.ndim() != nd) throw DimensionError("concat rank mismatch");
        for (int i = 0; i < nd; ++i)
            if (i != axis && t.dim(i) != shape[static_cast<size_t>(i)])
                throw DimensionError("concat shape mismatch on axis " + std::to_string(i));
        total += t.dim(axis);
    }
    shape[static_cast<size_t>(axis)] = total;
    Tensor out(shape);
    auto ost = strides_of(shape);
    int64_t outer = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
    int64_t inner = ost[static_cast<size_t>(axis)];
    bool rg = false;
    int64_t off = 0;
    for (Var p : parts) {
        const Tensor& t = val(p);
        int64_t span = t.dim(axis) * inner;
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data.data() + o * total * inner + off, t.data.data() + o * span,
                        static_cast<size_t>(span) * sizeof(float));
        off += span;
        rg = rg || wants_grad(p);
    }
    Var v = make(std::move(out), rg);
    if (node(v).requires_grad) {
        int self = v.id;
        std::vector<int> ids;
        std::vector<int64_t> spans;
        for (Var p : parts) {
            ids.push_back(p.id);
            spans.push_back(val(p).dim(axis) * inner);
        }
        node(v).back = [this, self, ids, spans, outer, total, inner] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            int64_t off2 = 0;
            for (size_t pi = 0; pi < ids.size(); ++pi) {
                if (this->nodes_[static_cast<size_t>(ids[pi])].requires_grad) {
                    Tensor& d = gbuf(ids[pi]);
                    for (int64_t o = 0; o < outer; ++o) {
                        const float* src = g.data.data() + o * total * inner + off2;
                        float* dst = d.data.data() + o * spans[pi];
                        for (int64_t i = 0; i < spans[pi]; ++i) dst[i] += src[i];
                    }
                }
                off2 += spans[pi];
            }
        };
    }
    return v;
}

Var Graph::slice(Var a, int axis, int start, int len) {
    const Tensor& ta = val(a);
    int nd = ta.ndim();
    if (axis < 0 || axis >= nd) throw DimensionError("slice axis out of range");
    if (start < 0 || len < 1 || start + len > ta.dim(axis))
        throw DimensionError("slice range out of bounds");
    std::vector<int> shape = ta.shape;
    shape[static_cast<size_t>(axis)] = len;
    auto ist = strides_of(ta.shape);
    int64_t inner = ist[static_cast<size_t>(axis)];
    int64_t outer = 1;
    for (int i = 0; i < axis; ++i) outer *= ta.dim(i);
    int64_t in_span = ta.dim(axis) * inner;
    int64_t out_span = static_cast<int64_t>(len) * inner;
    Tensor out(shape);
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(out.data.data() + o * out_span, ta.data.data() + o * in_span + start * inner,
                    static_cast<size_t>(out_span) * sizeof(float));
    Var v = make(std::move(out), wants_grad(a));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id;
        node(v).back = [this, self, ia, outer, in_span, out_span, inner, start] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            Tensor& d = gbuf(ia);
            for (int64_t o = 0; o < outer; ++o) {
                const float* src = g.data.data() + o * out_span;
                float* dst = d.data.data() + o * in_span + start * inner;
                for (int64_t i = 0; i < out_span; ++i) dst[i] += src[i];
            }
        };
    }
    return v;
}

Var Graph::permute(Var a, std::vector<int> axes) {
    const Tensor& ta = val(a);
    int nd = ta.ndim();
    if (static_cast<int>(axes.size()) != nd) throw DimensionError("permute axes rank mismatch");
    std::vector<int> seen(static_cast<size_t>(nd), 0);
    std::vector<int> shape(static_cast<size_t>(nd));
    for (int i = 0; i < nd; ++i) {
        int ax = axes[static_cast<size_t>(i)];
        if (ax < 0 || ax >= nd || seen[static_cast<size_t>(ax)]++)
            throw DimensionError("permute axes must be a permutation");
        shape[static_cast<size_t>(i)] = ta.dim(ax);
    }
    auto ist = strides_of(ta.shape);
    auto ost = strides_of(shape);
    Tensor out(shape);
    int64_t n = ta.numel();
    // source flat index for output flat index, owning copies of the layout
    auto map_index = [nd, ost, ist, axes](int64_t oi) {
        int64_t rem = oi, src = 0;
        for (int i = 0; i < nd; ++i) {
            int64_t c = rem / ost[static_cast<size_t>(i)];
            rem %= ost[static_cast<size_t>(i)];
            src += c * ist[static_cast<size_t>(axes[static_cast<size_t>(i)])];
        }
        return src;
    };
    for (int64_t oi = 0; oi < n; ++oi)
        out.data[static_cast<size_t>(oi)] = ta.data[static_cast<size_t>(map_index(oi))];
    Var v = make(std::move(out), wants_grad(a));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id;
        node(v).back = [this, self, ia, map_index, n] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            Tensor& d = gbuf(ia);
            for (int64_t oi = 0; oi < n; ++oi)
                d.data[static_cast<size_t>(map_index(oi))] += g.data[static_cast<size_t>(oi)];
        };
    }
    return v;
}

Var Graph::rows(Var table, std::vector<int> ids) {
    const Tensor& tt = val(table);
    if (tt.ndim() != 2) throw DimensionError("rows expects a 2-D table");
    int V = tt.dim(0), E = tt.dim(1);
    for (int id : ids)
        if (id < 0 || id >= V) throw DimensionError("rows index out of range");
    Tensor out({static_cast<int>(ids.size()), E});
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(out.data.data() + i * static_cast<size_t>(E),
                    tt.data.data() + static_cast<size_t>(ids[i]) * E,
                    static_cast<size_t>(E) * sizeof(float));
    Var v = make(std::move(out), wants_grad(table));
    if (node(v).requires_grad) {
        int self = v.id, it = table.id;
        node(v).back = [this, self, it, ids, E] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            Tensor& d = gbuf(it);
            for (size_t i = 0; i < ids.size(); ++i) {
                const float* src = g.data.data() + i * static_cast<size_t>(E);
                float* dst = d.data.data() + static_cast<size_t>(ids[i]) * E;
                for (int j = 0; j < E; ++j) dst[j] += src[j];
            }
        };
    }
    return v;
}

Var Graph::upsample2x(Var a) {
    const Tensor& ta = val(a);
    if (ta.ndim() != 4) throw DimensionError("upsample2x expects [N,C,H,W]");
    int N = ta.dim(0), C = ta.dim(1), H = ta.dim(2), W = ta.dim(3);
    Tensor out({N, C, 2 * H, 2 * W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < 2 * H; ++h)
                for (int w = 0; w < 2 * W; ++w) out(n, c, h, w) = ta(n, c, h / 2, w / 2);
    Var v = make(std::move(out), wants_grad(a));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id;
        node(v).back = [this, self, ia, N, C, H, W] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            Tensor& d = gbuf(ia);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c)
                    for (int h = 0; h < H; ++h)
                        for (int w = 0; w < W; ++w) {
                            double acc = 0.0;
                            for (int dy = 0; dy < 2; ++dy)
                                for (int dx = 0; dx < 2; ++dx)
                                    acc += g(n, c, 2 * h + dy, 2 * w + dx);
                            d(n, c, h, w) += static_cast<float>(acc);
                        }
        };
    }
    return v;
}

Var Graph::broadcast_row(Var a, int n) {
    const Tensor& ta = val(a);
    if (ta.ndim() != 1) throw DimensionError("broadcast_row expects a 1-D tensor");
    int D = ta.dim(0);
    Tensor out({n, D});
    for (int i = 0; i < n; ++i)
        std::memcpy(out.data.data() + static_cast<size_t>(i) * D, ta.data.data(),
                    static_cast<size_t>(D) * sizeof(float));
    Var v = make(std::move(out), wants_grad(a));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id;
        node(v).back = [this, self, ia, n, D] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            Tensor& d = gbuf(ia);
            for (int j = 0; j < D; ++j) {
                double acc = 0.0;
                for (int i = 0; i < n; ++i) acc += g(i, j);
                d(j) += static_cast<float>(acc);
            }
        };
    }
    return v;
}

Var Graph::add_channel_bias(Var x, Var b) {
    const Tensor& tx = val(x);
    const Tensor& tb = val(b);
    if (tx.ndim() != 4 || tb.ndim() != 2 || tb.dim(0) != tx.dim(0) || tb.dim(1) != tx.dim(1))
        throw DimensionError("add_channel_bias expects x[N,C,H,W], b[N,C]");
    int N = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
    Tensor out(tx.shape);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            float bias = tb(n, c);
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) out(n, c, h, w) = tx(n, c, h, w) + bias;
        }
    Var v = make(std::move(out), wants_grad(x) || wants_grad(b));
    if (node(v).requires_grad) {
        int self = v.id, ix = x.id, ib = b.id;
        bool gx = wants_grad(x), gb = wants_grad(b);
        node(v).back = [this, self, ix, ib, gx, gb, N, C, H, W] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            if (gx) {
                Tensor& d = gbuf(ix);
                for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i];
            }
            if (gb) {
                Tensor& d = gbuf(ib);
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        double acc = 0.0;
                        for (int h = 0; h < H; ++h)
                            for (int w = 0; w < W; ++w) acc += g(n, c, h, w);
                        d(n, c) += static_cast<float>(acc);
                    }
            }
        };
    }
    return v;
}

Var Graph::add_mid_broadcast(Var x, Var vvec, double sign) {
    const Tensor& tx = val(x);
    const Tensor& tv = val(vvec);
    if (tx.ndim() != 3 || tv.ndim() != 2 || tv.dim(0) != tx.dim(0) || tv.dim(1) != tx.dim(2))
        throw DimensionError("add_mid_broadcast expects x[B,P,D], v[B,D]");
    int B = tx.dim(0), P = tx.dim(1), D = tx.dim(2);
    Tensor out(tx.shape);
    for (int b = 0; b < B; ++b)
        for (int p = 0; p < P; ++p)
            for (int d0 = 0; d0 < D; ++d0)
                out(b, p, d0) = static_cast<float>(tx(b, p, d0) + sign * tv(b, d0));
    Var v = make(std::move(out), wants_grad(x) || wants_grad(vvec));
    if (node(v).requires_grad) {
        int self = v.id, ix = x.id, iv = vvec.id;
        bool gx = wants_grad(x), gv = wants_grad(vvec);
        node(v).back = [this, self, ix, iv, gx, gv, B, P, D, sign] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            if (gx) {
                Tensor& d = gbuf(ix);
                for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i];
            }
            if (gv) {
                Tensor& d = gbuf(iv);
                for (int b = 0; b < B; ++b)
                    for (int d0 = 0; d0 < D; ++d0) {
                        double acc = 0.0;
                        for (int p = 0; p < P; ++p) acc += g(b, p, d0);
                        d(b, d0) += static_cast<float>(sign * acc);
                    }
            }
        };
    }
    return v;
}

Var Graph::mul_mid_broadcast(Var x, Var vvec) {
    const Tensor& tx = val(x);
    const Tensor& tv = val(vvec);
    if (tx.ndim() != 3 || tv.ndim() != 2 || tv.dim(0) != tx.dim(0) || tv.dim(1) != tx.dim(2))
        throw DimensionError("mul_mid_broadcast expects x[B,P,D], v[B,D]");
    int B = tx.dim(0), P = tx.dim(1), D = tx.dim(2);
    Tensor out(tx.shape);
    for (int b = 0; b < B; ++b)
        for (int p = 0; p < P; ++p)
            for (int d0 = 0; d0 < D; ++d0) out(b, p, d0) = tx(b, p, d0) * tv(b, d0);
    Var v = make(std::move(out), wants_grad(x) || wants_grad(vvec));
    if (node(v).requires_grad) {
        int self = v.id, ix = x.id, iv = vvec.id;
        bool gx = wants_grad(x), gv = wants_grad(vvec);
        node(v).back = [this, self, ix, iv, gx, gv, B, P, D] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            const Tensor& vx = nodes_[static_cast<size_t>(ix)].value;
            const Tensor& vv = nodes_[static_cast<size_t>(iv)].value;
            if (gx) {
                Tensor& d = gbuf(ix);
                for (int b = 0; b < B; ++b)
                    for (int p = 0; p < P; ++p)
                        for (int d0 = 0; d0 < D; ++d0) d(b, p, d0) += g(b, p, d0) * vv(b, d0);
            }
            if (gv) {
                Tensor& d = gbuf(iv);
                for (int b = 0; b < B; ++b)
                    for (int d0 = 0; d0 < D; ++d0) {
                        double acc = 0.0;
                        for (int p = 0; p < P; ++p)
                            acc += static_cast<double>(g(b, p, d0)) * vx(b, p, d0);
                        d(b, d0) += static_cast<float>(acc);
                    }
            }
        };
    }
    return v;
}

// ---- reductions -------------------------------------------------------------

Var Graph::sum_all(Var a) {
    const Tensor& ta = val(a);
    Tensor out({1});
    out(0) = static_cast<float>(ta.sum());
    Var v = make(std::move(out), wants_grad(a));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id;
        node(v).back = [this, self, ia] {
            float g = nodes_[static_cast<size_t>(self)].grad(0);
            Tensor& d = gbuf(ia);
            for (float& x : d.data) x += g;
        };
    }
    return v;
}

Var Graph::mean_all(Var a) {
    const Tensor& ta = val(a);
    double inv = 1.0 / static_cast<double>(ta.numel());
    Tensor out({1});
    out(0) = static_cast<float>(ta.sum() * inv);
    Var v = make(std::move(out), wants_grad(a));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id;
        node(v).back = [this, self, ia, inv] {
            double g = nodes_[static_cast<size_t>(self)].grad(0) * inv;
            Tensor& d = gbuf(ia);
            for (float& x : d.data) x += static_cast<float>(g);
        };
    }
    return v;
}

Var Graph::mean_rows(Var a) {
    const Tensor& ta = val(a);
    if (ta.ndim() != 2) throw DimensionError("mean_rows expects a 2-D tensor");
    int N = ta.dim(0), D = ta.dim(1);
    Tensor out({D});
    for (int j = 0; j < D; ++j) {
        double acc = 0.0;
        for (int i = 0; i < N; ++i) acc += ta(i, j);
        out(j) = static_cast<float>(acc / N);
    }
    Var v = make(std::move(out), wants_grad(a));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id;
        node(v).back = [this, self, ia, N, D] {
            const Tensor& g = nodes_[static_cast<size_t>(self)].grad;
            Tensor& d = gbuf(ia);
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < D; ++j)
                    d(i, j) += static_cast<float>(g(j) / static_cast<double>(N));
        };
    }
    return v;
}

Var Graph::sum_sq(Var a) {
    const Tensor& ta = val(a);
    Tensor out({1});
    out(0) = static_cast<float>(ta.sq_norm());
    Var v = make(std::move(out), wants_grad(a));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id;
        node(v).back = [this, self, ia] {
            double g = nodes_[static_cast<size_t>(self)].grad(0);
            const Tensor& va = nodes_[static_cast<size_t>(ia)].value;
            Tensor& d = gbuf(ia);
            for (size_t i = 0; i < d.data.size(); ++i)
                d.data[i] += static_cast<float>(2.0 * g * va.data[i]);
        };
    }
    return v;
}

Var Graph::mse(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    check_same_shape(ta, tb, "mse");
    double acc = 0.0;
    for (size_t i = 0; i < ta.data.size(); ++i) {
        double dlt = static_cast<double>(ta.data[i]) - tb.data[i];
        acc += dlt * dlt;
    }
    double inv = 1.0 / static_cast<double>(ta.numel());
    Tensor out({1});
    out(0) = static_cast<float>(acc * inv);
    Var v = make(std::move(out), wants_grad(a) || wants_grad(b));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id, ib = b.id;
        bool ga = wants_grad(a), gb = wants_grad(b);
        node(v).back = [this, self, ia, ib, ga, gb, inv] {
            double g = nodes_[static_cast<size_t>(self)].grad(0);
            const Tensor& va = nodes_[static_cast<size_t>(ia)].value;
            const Tensor& vb = nodes_[static_cast<size_t>(ib)].value;
            double c = 2.0 * g * inv;
            if (ga) {
                Tensor& d = gbuf(ia);
                for (size_t i = 0; i < d.data.size(); ++i)
                    d.data[i] += static_cast<float>(c * (static_cast<double>(va.data[i]) - vb.data[i]));
            }
            if (gb) {
                Tensor& d = gbuf(ib);
                for (size_t i = 0; i < d.data.size(); ++i)
                    d.data[i] -= static_cast<float>(c * (static_cast<double>(va.data[i]) - vb.data[i]));
            }
        };
    }
    return v;
}

Var Graph::weighted_sum(Var a, Tensor w) {
    const Tensor& ta = val(a);
    check_same_shape(ta, w, "weighted_sum");
    double acc = 0.0;
    for (size_t i = 0; i < ta.data.size(); ++i)
        acc += static_cast<double>(ta.data[i]) * w.data[i];
    Tensor out({1});
    out(0) = static_cast<float>(acc);
    Var v = make(std::move(out), wants_grad(a));
    if (node(v).requires_grad) {
        int self = v.id, ia = a.id;
        auto ws = std::make_shared<Tensor>(std::move(w));
        node(v).back = [this, self, ia, ws] {
            double g = nodes_[static_cast<size_t>(self)].grad(0);
            Tensor& d = gbuf(ia);
            for (size_t i = 0; i < d.data.size(); ++i)
                d.data[i] += static_cast<float>(g * ws->data[i]);
        };
    }
    return v;
}

Var Graph::add_n(const std::vector<Var>& scalars) {
    if (scalars.empty()) throw DimensionError("add_n of zero terms");
    double acc = 0.0;
    bool rg = false;
    for (Var s : scalars) {
        if (val(s).numel() != 1) throw DimensionError("add_n expects scalar terms");
        acc += val(s)(0);
        rg = rg || wants_grad(s);
    }
    Tensor out({1});
    out(0) = static_cast<float>(acc);
    Var v = make(std::move(out), rg);
    if (node(v).requires_grad) {
        int self = v.id;
        std::vector<int> ids;
        for (Var s : scalars) ids.push_back(s.id);
        node(v).back = [this, self, ids] {
            float g = nodes_[static_cast<size_t>(self)].grad(0);
            for (int id : ids)
                if (nodes_[static_cast<size_t>(id)].requires_grad) gbuf(id)(0) += g;
        };
    }
    return v;
}

void Graph::backward(Var loss) {
    if (!grad_enabled_) throw ConfigError("backward() on a no-grad graph");
    if (ran_backward_) throw ConfigError("backward() may run only once per graph");
    if (val(loss).numel() != 1) throw DimensionError("backward() needs a scalar loss");
    ran_backward_ = true;
    gbuf(loss.id)(0) = 1.0f;
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.back && !n.grad.data.empty()) n.back();
    }
    for (Node& n : nodes_) {
        if (n.bound && !n.grad.data.empty()) {
            Tensor& pg = n.bound->grad;
            for (size_t i = 0; i < pg.data.size(); ++i) pg.data[i] += n.grad.data[i];
        }
    }
}

// ---- composite blocks -------------------------------------------------------

Var affine_lastdim(Graph& g, Var x, Var w, Var b) {
    const Tensor& tx = g.val(x);
    if (tx.ndim() != 3) throw DimensionError("affine_lastdim expects [N,L,D]");
    int N = tx.dim(0), L = tx.dim(1), D = tx.dim(2);
    Var flat = g.reshape(x, {N * L, D});
    Var y = g.affine(flat, w, b);
    return g.reshape(y, {N, L, g.val(w).dim(1)});
}

Var gru_cell(Graph& g, Var x, Var h, const GruVars& p) {
    Var r = g.sigmoid(g.add(g.affine(x, p.wxr, p.br), g.matmul(h, p.whr)));
    Var z = g.sigmoid(g.add(g.affine(x, p.wxz, p.bz), g.matmul(h, p.whz)));
    Var hn = g.affine(h, p.whn, p.bn_h);
    Var n = g.tanh_act(g.add(g.affine(x, p.wxn, p.bn_x), g.mul(r, hn)));
    // h' = (1-z) * n + z * h
    Var one_minus_z = g.add_scalar(g.scale(z, -1.0), 1.0);
    return g.add(g.mul(one_minus_z, n), g.mul(z, h));
}

Var multihead_attention(Graph& g, Var q_tokens, Var kv_tokens, const AttentionVars& p,
                        int heads) {
    const Tensor& tq = g.val(q_tokens);
    const Tensor& tkv = g.val(kv_tokens);
    if (tq.ndim() != 3 || tkv.ndim() != 3)
        throw DimensionError("attention expects token tensors [N,L,D]");
    int N = tq.dim(0), Lq = tq.dim(1), D = tq.dim(2);
    int Lk = tkv.dim(1);
    if (heads < 1 || D % heads)
        throw ConfigError("attention head count must divide the model dim");
    int dh = D / heads;

    Var q = affine_lastdim(g, q_tokens, p.wq, p.bq);
    Var k = affine_lastdim(g, kv_tokens, p.wk, p.bk);
    Var v = affine_lastdim(g, kv_tokens, p.wv, p.bv);

    auto split_heads = [&](Var t, int L) {
        Var r = g.reshape(t, {N, L, heads, dh});
        r = g.permute(r, {0, 2, 1, 3});
        return g.reshape(r, {N * heads, L, dh});
    };
    Var qh = split_heads(q, Lq);
    Var kh = split_heads(k, Lk);
    Var vh = split_heads(v, Lk);

    Var scores = g.bmm(qh, g.permute(kh, {0, 2, 1}));
    scores = g.scale(scores, 1.0 / std::sqrt(static_cast<double>(dh)));
    Var probs = g.softmax_lastdim(scores);
    Var ctx = g.bmm(probs, vh);  // [N*heads, Lq, dh]

    Var merged = g.reshape(ctx, {N, heads, Lq, dh});
    merged = g.permute(merged, {0, 2, 1, 3});
    merged = g.reshape(merged, {N, Lq, D});
    return affine_lastdim(g, merged, p.wo, p.bo);
}

}  // namespace qdpd

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "qdpd/tensor.hpp"

namespace qdpd {

// Named trainable tensor with a persistent gradient buffer.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;

    Param() = default;
    Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

    void zero_grad() { grad.fill(0.0f); }
};

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// One-shot reverse-mode tape. Build forward ops, call backward(loss) once,
// read grads, discard. Values are float32; every inner reduction (matmul
// rows, conv taps, norm moments) accumulates in double before rounding once.
//
// A graph constructed with grads disabled skips all closure bookkeeping and
// serves as the shared inference path.
class Graph {
  public:
    explicit Graph(bool enable_grad = true) : grad_enabled_(enable_grad) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // leaves
    Var input(Tensor t);            // constant
    Var input_grad(Tensor t);       // leaf that receives a gradient (tests, probes)
    Var param(Param& p);            // bound leaf; backward() accumulates into p.grad

    const Tensor& val(Var v) const;
    const Tensor& grad(Var v) const;

    // elementwise
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);
    Var add_scalar(Var a, double s);
    Var silu(Var a);
    Var tanh_act(Var a);
    Var softplus(Var a);
    Var sigmoid(Var a);
    Var exp_act(Var a);
    Var log_act(Var a);
    Var square(Var a);
    Var rsqrt_eps(Var a, double eps);

    // linear algebra
    Var matmul(Var a, Var b);                              // [m,k] x [k,n]
    Var bmm(Var a, Var b);                                 // [B,m,k] x [B,k,n]
    Var transpose2d(Var a);
    Var affine(Var x, Var w, Var b);                       // [n,in] x [in,out] + b[out]
    Var conv2d(Var x, Var w, Var b, int stride, int pad);  // x [N,Ci,H,W], w [Co,Ci,kh,kw]
    Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
    Var softmax_lastdim(Var x);

    // shape and data movement
    Var reshape(Var a, std::vector<int> shape);
    Var concat(const std::vector<Var>& parts, int axis);
    Var slice(Var a, int axis, int start, int len);
    Var permute(Var a, std::vector<int> axes);
    Var rows(Var table, std::vector<int> ids);  // [V,E] gather -> [n,E]
    Var upsample2x(Var a);                      // [N,C,H,W] nearest -> [N,C,2H,2W]
    Var broadcast_row(Var v, int n);            // [D] -> [n,D]
    Var add_channel_bias(Var x, Var b);         // x [N,C,H,W] + b [N,C]
    Var add_mid_broadcast(Var x, Var v, double sign = 1.0);  // x [B,P,D] + sign*v [B,D]
    Var mul_mid_broadcast(Var x, Var v);                     // x [B,P,D] * v [B,D]

    // reductions
    Var sum_all(Var a);
    Var mean_all(Var a);
    Var mean_rows(Var a);  // [N,D] -> [D]
    Var sum_sq(Var a);
    Var mse(Var a, Var b);
    Var weighted_sum(Var a, Tensor w);
    Var add_n(const std::vector<Var>& scalars);

    void backward(Var loss);

    size_t size() const { return nodes_.size(); }
    bool grad_enabled() const { return grad_enabled_; }

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        Param* bound = nullptr;
        std::function<void()> back;
    };

    Var make(Tensor value, bool requires_grad, std::function<void()> back = nullptr);
    Node& node(Var v);
    const Node& node(Var v) const;
    bool wants_grad(Var v) const { return grad_enabled_ && node(v).requires_grad; }

    // grad buffer of node i, allocated on first touch during backward
    Tensor& gbuf(int id);

    std::vector<Node> nodes_;
    bool grad_enabled_;
    bool ran_backward_ = false;

    friend struct GraphTestPeer;
};

// ---- composite blocks -------------------------------------------------------

struct GruVars {
    Var wxr, whr, br;
    Var wxz, whz, bz;
    Var wxn, whn, bn_x, bn_h;
};

// Gated recurrent cell: x [N,Din], h [N,D] -> [N,D].
Var gru_cell(Graph& g, Var x, Var h, const GruVars& p);

struct AttentionVars {
    Var wq, bq;  // [D,D],[D]
    Var wk, bk;  // [Dkv,D],[D]
    Var wv, bv;  // [Dkv,D],[D]
    Var wo, bo;  // [D,D],[D]
};

// Scaled dot-product multi-head attention. q [N,Lq,D] attends over
// kv [N,Lk,Dkv]; self-attention passes the same Var twice.
Var multihead_attention(Graph& g, Var q_tokens, Var kv_tokens, const AttentionVars& p, int heads);

// Affine over the last dim of a 3-D tensor: [N,L,Din] -> [N,L,Dout].
Var affine_lastdim(Graph& g, Var x, Var w, Var b);

}  // namespace qdpd

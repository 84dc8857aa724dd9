#include "rpnet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace rpnet {

namespace {

std::atomic<std::uint64_t> g_seq{0};

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= std::size_t(d);
    return n;
}

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
    throw std::invalid_argument(std::string(op) + ": " + detail);
}

void require(bool cond, const char* op, const std::string& detail) {
    if (!cond) shape_error(op, detail);
}

NodePtr make_leaf(std::vector<int> shape, std::vector<Real> data, bool requires_grad) {
    for (int d : shape) {
        if (d <= 0) shape_error("tensor", "non-positive extent in shape " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size())
        shape_error("tensor", "shape " + shape_str(shape) + " does not match data length " +
                                  std::to_string(data.size()));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    n->seq = ++g_seq;
    return n;
}

// Central builder for op results: assigns the tape sequence number, checks
// output finiteness, and records the backward closure only when some parent
// participates in gradients.
Tensor make_op(std::vector<int> shape, std::vector<Real> data, const char* op,
               std::vector<NodePtr> parents, std::function<void(TensorNode&)> fn) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = op;
    n->seq = ++g_seq;
    for (Real v : n->data) {
        if (!std::isfinite(v))
            throw std::runtime_error(std::string(op) + ": non-finite value in output");
    }
    bool needs = false;
    for (const NodePtr& p : parents)
        if (p->requires_grad) needs = true;
    if (needs) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->grad_fn = std::move(fn);
    }
    return Tensor(n);
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

void check_rank3(const Tensor& t, const char* op) {
    if (t.rank() != 3) shape_error(op, "expected rank-3 {X,Y,D} tensor, got " + shape_str(t.shape()));
}

// Symmetric reflection fold of index i into [0, n).
int reflect_index(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0)
            i = -i - 1;
        else
            i = 2 * n - 1 - i;
    }
    return i;
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '{';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << '}';
    return os.str();
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<Real>(n, Real(0)), requires_grad));
}

Tensor Tensor::full(std::vector<int> shape, Real value, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<Real>(n, value), requires_grad));
}

Tensor Tensor::from(std::vector<int> shape, std::vector<Real> data, bool requires_grad) {
    return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(Real value, bool requires_grad) {
    return Tensor(make_leaf({1}, {value}, requires_grad));
}

Real Tensor::value() const {
    if (numel() != 1) shape_error("value", "tensor " + shape_str(shape()) + " is not scalar");
    return node_->data[0];
}

const std::vector<Real>& Tensor::grad() const {
    if (node_->grad.empty())
        throw std::runtime_error("grad: no gradient present (run backward first)");
    return node_->grad;
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require(same_shape(a, b), "add",
            "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<Real> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    NodePtr an = a.node(), bn = b.node();
    return make_op(a.shape(), std::move(out), "add", {an, bn}, [an, bn](TensorNode& o) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require(same_shape(a, b), "sub",
            "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<Real> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    NodePtr an = a.node(), bn = b.node();
    return make_op(a.shape(), std::move(out), "sub", {an, bn}, [an, bn](TensorNode& o) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] -= o.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(same_shape(a, b), "mul",
            "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<Real> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    NodePtr an = a.node(), bn = b.node();
    return make_op(a.shape(), std::move(out), "mul", {an, bn}, [an, bn](TensorNode& o) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i] * an->data[i];
        }
    });
}

Tensor scale(const Tensor& a, Real k) {
    std::vector<Real> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * k;
    NodePtr an = a.node();
    return make_op(a.shape(), std::move(out), "scale", {an}, [an, k](TensorNode& o) {
        an->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * k;
    });
}

Tensor relu(const Tensor& a) {
    require(a.numel() > 0, "relu", "empty tensor");
    std::vector<Real> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > Real(0) ? av[i] : Real(0);
    NodePtr an = a.node();
    return make_op(a.shape(), std::move(out), "relu", {an}, [an](TensorNode& o) {
        an->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            if (an->data[i] > Real(0)) an->grad[i] += o.grad[i];
    });
}

Tensor sigmoid(const Tensor& a) {
    require(a.numel() > 0, "sigmoid", "empty tensor");
    std::vector<Real> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = Real(1) / (Real(1) + std::exp(-av[i]));
    NodePtr an = a.node();
    return make_op(a.shape(), std::move(out), "sigmoid", {an}, [an](TensorNode& o) {
        an->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            Real s = o.data[i];
            an->grad[i] += o.grad[i] * s * (Real(1) - s);
        }
    });
}

// ---- convolution ----------------------------------------------------------

namespace {

struct ConvDims {
    int X, Y, D, KH, KW, Cg, Cout, Coutg, OX, OY, P, K;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, int stride, int padding,
                   int groups) {
    check_rank3(input, "conv2d");
    require(kernel.rank() == 4, "conv2d",
            "expected rank-4 {KH,KW,Cin/groups,Cout} kernel, got " + shape_str(kernel.shape()));
    require(stride >= 1, "conv2d", "stride must be positive");
    require(padding >= 0, "conv2d", "padding must be non-negative");
    require(groups >= 1, "conv2d", "groups must be positive");
    ConvDims d;
    d.X = input.dim(0);
    d.Y = input.dim(1);
    d.D = input.dim(2);
    d.KH = kernel.dim(0);
    d.KW = kernel.dim(1);
    d.Cg = kernel.dim(2);
    d.Cout = kernel.dim(3);
    require(d.D % groups == 0, "conv2d",
            "input channels " + std::to_string(d.D) + " not divisible by groups " +
                std::to_string(groups));
    require(d.Cout % groups == 0, "conv2d",
            "output channels " + std::to_string(d.Cout) + " not divisible by groups " +
                std::to_string(groups));
    require(d.Cg == d.D / groups, "conv2d",
            "kernel input channels " + std::to_string(d.Cg) + " inconsistent with input " +
                std::to_string(d.D) + " / groups " + std::to_string(groups));
    require(d.X + 2 * padding >= d.KH && d.Y + 2 * padding >= d.KW, "conv2d",
            "input " + shape_str(input.shape()) + " too small for kernel " +
                shape_str(kernel.shape()) + " with padding " + std::to_string(padding));
    d.OX = (d.X + 2 * padding - d.KH) / stride + 1;
    d.OY = (d.Y + 2 * padding - d.KW) / stride + 1;
    d.Coutg = d.Cout / groups;
    d.P = d.OX * d.OY;
    d.K = d.KH * d.KW * d.Cg;
    return d;
}

// Patch matrix for one group: P x K, K = KH*KW*Cg, zero-filled padding taps.
void im2col_group(const std::vector<Real>& in, const ConvDims& d, int stride, int padding, int g,
                  std::vector<Real>& col) {
    col.assign(std::size_t(d.P) * std::size_t(d.K), Real(0));
    const int c0 = g * d.Cg;
    for (int ox = 0; ox < d.OX; ++ox) {
        for (int oy = 0; oy < d.OY; ++oy) {
            Real* row = col.data() + std::size_t(ox * d.OY + oy) * std::size_t(d.K);
            for (int ky = 0; ky < d.KH; ++ky) {
                const int ix = ox * stride + ky - padding;
                if (ix < 0 || ix >= d.X) continue;
                for (int kx = 0; kx < d.KW; ++kx) {
                    const int iy = oy * stride + kx - padding;
                    if (iy < 0 || iy >= d.Y) continue;
                    const Real* src = in.data() + std::size_t((ix * d.Y + iy) * d.D + c0);
                    Real* dst = row + std::size_t((ky * d.KW + kx) * d.Cg);
                    for (int ci = 0; ci < d.Cg; ++ci) dst[ci] = src[ci];
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding, int groups) {
    const ConvDims d = conv_dims(input, kernel, stride, padding, groups);
    std::vector<Real> out(std::size_t(d.P) * std::size_t(d.Cout), Real(0));
    const auto& in = input.values();
    const auto& w = kernel.values();
    std::vector<Real> col;
    for (int g = 0; g < groups; ++g) {
        im2col_group(in, d, stride, padding, g, col);
        const int co0 = g * d.Coutg;
        for (int p = 0; p < d.P; ++p) {
            const Real* a = col.data() + std::size_t(p) * std::size_t(d.K);
            Real* c = out.data() + std::size_t(p) * std::size_t(d.Cout) + co0;
            for (int k = 0; k < d.K; ++k) {
                const Real av = a[k];
                if (av == Real(0)) continue;
                const Real* b = w.data() + std::size_t(k) * std::size_t(d.Cout) + co0;
                for (int j = 0; j < d.Coutg; ++j) c[j] += av * b[j];
            }
        }
    }
    NodePtr in_n = input.node(), k_n = kernel.node();
    return make_op({d.OX, d.OY, d.Cout}, std::move(out), "conv2d", {in_n, k_n},
                   [in_n, k_n, d, stride, padding, groups](TensorNode& o) {
                       std::vector<Real> col;
                       std::vector<Real> bt;
                       const int Cout = d.Cout;
                       for (int g = 0; g < groups; ++g) {
                           const int co0 = g * d.Coutg;
                           if (k_n->requires_grad || in_n->requires_grad)
                               im2col_group(in_n->data, d, stride, padding, g, col);
                           if (k_n->requires_grad) {
                               k_n->ensure_grad();
                               for (int p = 0; p < d.P; ++p) {
                                   const Real* a = col.data() + std::size_t(p) * std::size_t(d.K);
                                   const Real* go =
                                       o.grad.data() + std::size_t(p) * std::size_t(Cout) + co0;
                                   for (int k = 0; k < d.K; ++k) {
                                       const Real av = a[k];
                                       if (av == Real(0)) continue;
                                       Real* dw =
                                           k_n->grad.data() + std::size_t(k) * std::size_t(Cout) + co0;
                                       for (int j = 0; j < d.Coutg; ++j) dw[j] += av * go[j];
                                   }
                               }
                           }
                           if (in_n->requires_grad) {
                               in_n->ensure_grad();
                               // kernel slice transposed to Coutg x K so the inner axpy is unit
                               // stride
                               bt.assign(std::size_t(d.Coutg) * std::size_t(d.K), Real(0));
                               for (int k = 0; k < d.K; ++k)
                                   for (int j = 0; j < d.Coutg; ++j)
                                       bt[std::size_t(j) * std::size_t(d.K) + std::size_t(k)] =
                                           k_n->data[std::size_t(k) * std::size_t(Cout) + co0 + j];
                               std::vector<Real> drow(std::size_t(d.K));
                               const int c0 = g * d.Cg;
                               for (int ox = 0; ox < d.OX; ++ox) {
                                   for (int oy = 0; oy < d.OY; ++oy) {
                                       const int p = ox * d.OY + oy;
                                       std::fill(drow.begin(), drow.end(), Real(0));
                                       const Real* go =
                                           o.grad.data() + std::size_t(p) * std::size_t(Cout) + co0;
                                       for (int j = 0; j < d.Coutg; ++j) {
                                           const Real gv = go[j];
                                           if (gv == Real(0)) continue;
                                           const Real* b = bt.data() + std::size_t(j) * std::size_t(d.K);
                                           for (int k = 0; k < d.K; ++k) drow[k] += gv * b[k];
                                       }
                                       for (int ky = 0; ky < d.KH; ++ky) {
                                           const int ix = ox * stride + ky - padding;
                                           if (ix < 0 || ix >= d.X) continue;
                                           for (int kx = 0; kx < d.KW; ++kx) {
                                               const int iy = oy * stride + kx - padding;
                                               if (iy < 0 || iy >= d.Y) continue;
                                               Real* dst = in_n->grad.data() +
                                                           std::size_t((ix * d.Y + iy) * d.D + c0);
                                               const Real* src =
                                                   drow.data() + std::size_t((ky * d.KW + kx) * d.Cg);
                                               for (int ci = 0; ci < d.Cg; ++ci) dst[ci] += src[ci];
                                           }
                                       }
                                   }
                               }
                           }
                       }
                   });
}

Tensor bias_add(const Tensor& input, const Tensor& bias) {
    require(input.rank() >= 1, "bias_add", "empty input");
    require(bias.rank() == 1, "bias_add", "bias must be rank-1, got " + shape_str(bias.shape()));
    const int D = input.dim(input.rank() - 1);
    require(bias.dim(0) == D, "bias_add",
            "bias length " + std::to_string(bias.dim(0)) + " vs channels " + std::to_string(D));
    std::vector<Real> out(input.numel());
    const auto& in = input.values();
    const auto& bv = bias.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] + bv[i % std::size_t(D)];
    NodePtr in_n = input.node(), b_n = bias.node();
    return make_op(input.shape(), std::move(out), "bias_add", {in_n, b_n},
                   [in_n, b_n, D](TensorNode& o) {
                       if (in_n->requires_grad) {
                           in_n->ensure_grad();
                           for (std::size_t i = 0; i < o.grad.size(); ++i)
                               in_n->grad[i] += o.grad[i];
                       }
                       if (b_n->requires_grad) {
                           b_n->ensure_grad();
                           for (std::size_t i = 0; i < o.grad.size(); ++i)
                               b_n->grad[i % std::size_t(D)] += o.grad[i];
                       }
                   });
}

// ---- reductions -----------------------------------------------------------

Tensor gap(const Tensor& a) {
    check_rank3(a, "gap");
    const int X = a.dim(0), Y = a.dim(1), D = a.dim(2);
    const Real inv = Real(1) / Real(X * Y);
    std::vector<Real> out(std::size_t(D), Real(0));
    const auto& av = a.values();
    for (int p = 0; p < X * Y; ++p)
        for (int d = 0; d < D; ++d) out[std::size_t(d)] += av[std::size_t(p * D + d)];
    for (auto& v : out) v *= inv;
    NodePtr an = a.node();
    return make_op({D}, std::move(out), "gap", {an}, [an, X, Y, D, inv](TensorNode& o) {
        an->ensure_grad();
        for (int p = 0; p < X * Y; ++p)
            for (int d = 0; d < D; ++d)
                an->grad[std::size_t(p * D + d)] += o.grad[std::size_t(d)] * inv;
    });
}

Tensor channel_max(const Tensor& a) {
    check_rank3(a, "channel_max");
    const int X = a.dim(0), Y = a.dim(1), D = a.dim(2);
    require(D >= 1, "channel_max", "needs at least one channel");
    std::vector<Real> out(std::size_t(X * Y));
    auto arg = std::make_shared<std::vector<int>>(std::size_t(X * Y));
    const auto& av = a.values();
    for (int p = 0; p < X * Y; ++p) {
        int best = 0;
        Real bv = av[std::size_t(p * D)];
        for (int d = 1; d < D; ++d) {
            const Real v = av[std::size_t(p * D + d)];
            if (v > bv) {  // ties keep the lowest channel index
                bv = v;
                best = d;
            }
        }
        out[std::size_t(p)] = bv;
        (*arg)[std::size_t(p)] = best;
    }
    NodePtr an = a.node();
    return make_op({X, Y, 1}, std::move(out), "channel_max", {an}, [an, arg, D](TensorNode& o) {
        an->ensure_grad();
        for (std::size_t p = 0; p < o.grad.size(); ++p)
            an->grad[p * std::size_t(D) + std::size_t((*arg)[p])] += o.grad[p];
    });
}

Tensor global_max(const Tensor& a) {
    require(a.numel() > 0, "global_max", "empty tensor");
    const auto& av = a.values();
    std::size_t best = 0;
    for (std::size_t i = 1; i < av.size(); ++i)
        if (av[i] > av[best]) best = i;
    NodePtr an = a.node();
    return make_op({1}, {av[best]}, "global_max", {an}, [an, best](TensorNode& o) {
        an->ensure_grad();
        an->grad[best] += o.grad[0];
    });
}

Tensor reduce_sum(const Tensor& a) {
    const auto& av = a.values();
    Real s = 0;
    for (Real v : av) s += v;
    NodePtr an = a.node();
    return make_op({1}, {s}, "reduce_sum", {an}, [an](TensorNode& o) {
        an->ensure_grad();
        for (auto& g : an->grad) g += o.grad[0];
    });
}

Tensor div_by_scalar(const Tensor& a, const Tensor& s) {
    require(s.numel() == 1, "div_by_scalar", "divisor must be scalar, got " + shape_str(s.shape()));
    const Real sv = s.values()[0];
    std::vector<Real> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / sv;
    NodePtr an = a.node(), sn = s.node();
    return make_op(a.shape(), std::move(out), "div_by_scalar", {an, sn},
                   [an, sn, sv](TensorNode& o) {
                       if (an->requires_grad) {
                           an->ensure_grad();
                           for (std::size_t i = 0; i < o.grad.size(); ++i)
                               an->grad[i] += o.grad[i] / sv;
                       }
                       if (sn->requires_grad) {
                           sn->ensure_grad();
                           Real acc = 0;
                           for (std::size_t i = 0; i < o.grad.size(); ++i)
                               acc -= o.grad[i] * o.data[i];
                           sn->grad[0] += acc / sv;
                       }
                   });
}

Tensor linear_vec(const Tensor& x, const Tensor& w) {
    require(x.rank() == 1, "linear_vec", "x must be rank-1, got " + shape_str(x.shape()));
    require(w.rank() == 2, "linear_vec", "w must be rank-2, got " + shape_str(w.shape()));
    const int D = x.dim(0), C = w.dim(1);
    require(w.dim(0) == D, "linear_vec",
            "channel mismatch: x has " + std::to_string(D) + ", w expects " +
                std::to_string(w.dim(0)));
    std::vector<Real> out(std::size_t(C), Real(0));
    const auto& xv = x.values();
    const auto& wv = w.values();
    for (int d = 0; d < D; ++d)
        for (int c = 0; c < C; ++c)
            out[std::size_t(c)] += xv[std::size_t(d)] * wv[std::size_t(d * C + c)];
    NodePtr xn = x.node(), wn = w.node();
    return make_op({C}, std::move(out), "linear_vec", {xn, wn}, [xn, wn, D, C](TensorNode& o) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (int d = 0; d < D; ++d) {
                Real acc = 0;
                for (int c = 0; c < C; ++c)
                    acc += o.grad[std::size_t(c)] * wn->data[std::size_t(d * C + c)];
                xn->grad[std::size_t(d)] += acc;
            }
        }
        if (wn->requires_grad) {
            wn->ensure_grad();
            for (int d = 0; d < D; ++d)
                for (int c = 0; c < C; ++c)
                    wn->grad[std::size_t(d * C + c)] += xn->data[std::size_t(d)] * o.grad[std::size_t(c)];
        }
    });
}

Tensor masked_spatial_mean(const Tensor& features, const Tensor& mask) {
    check_rank3(features, "masked_spatial_mean");
    const int X = features.dim(0), Y = features.dim(1), D = features.dim(2);
    require((mask.rank() == 3 && mask.dim(2) == 1) || mask.rank() == 2, "masked_spatial_mean",
            "mask must be {X,Y,1} or {X,Y}, got " + shape_str(mask.shape()));
    require(mask.dim(0) == X && mask.dim(1) == Y, "masked_spatial_mean",
            "extent mismatch " + shape_str(features.shape()) + " vs " + shape_str(mask.shape()));
    const auto& mv = mask.values();
    Real cnt = 0;
    for (Real m : mv) cnt += m;
    require(cnt > Real(0), "masked_spatial_mean", "mask selects no positions");
    std::vector<Real> out(std::size_t(D), Real(0));
    const auto& fv = features.values();
    for (int p = 0; p < X * Y; ++p) {
        const Real m = mv[std::size_t(p)];
        if (m == Real(0)) continue;
        for (int d = 0; d < D; ++d) out[std::size_t(d)] += fv[std::size_t(p * D + d)] * m;
    }
    const Real inv = Real(1) / cnt;
    for (auto& v : out) v *= inv;
    NodePtr fn = features.node(), mn = mask.node();
    return make_op({D}, std::move(out), "masked_spatial_mean", {fn, mn},
                   [fn, mn, X, Y, D, inv](TensorNode& o) {
                       if (!fn->requires_grad) return;  // mask is a constant selector
                       fn->ensure_grad();
                       for (int p = 0; p < X * Y; ++p) {
                           const Real m = mn->data[std::size_t(p)];
                           if (m == Real(0)) continue;
                           for (int d = 0; d < D; ++d)
                               fn->grad[std::size_t(p * D + d)] += o.grad[std::size_t(d)] * m * inv;
                       }
                   });
}

Tensor cosine_map(const Tensor& target, const Tensor& proto) {
    check_rank3(target, "cosine_map");
    require(proto.rank() == 1, "cosine_map", "prototype must be rank-1, got " + shape_str(proto.shape()));
    const int X = target.dim(0), Y = target.dim(1), D = target.dim(2);
    require(proto.dim(0) == D, "cosine_map",
            "width mismatch: target channels " + std::to_string(D) + " vs prototype " +
                std::to_string(proto.dim(0)));
    const auto& tv = target.values();
    const auto& pv = proto.values();
    Real pn2 = 0;
    for (Real v : pv) pn2 += v * v;
    const Real pnorm = std::sqrt(pn2);
    std::vector<Real> out(std::size_t(X * Y), Real(0));
    auto tnorms = std::make_shared<std::vector<Real>>(std::size_t(X * Y), Real(0));
    for (int p = 0; p < X * Y; ++p) {
        Real dot = 0, tn2 = 0;
        const Real* t = tv.data() + std::size_t(p * D);
        for (int d = 0; d < D; ++d) {
            dot += t[d] * pv[std::size_t(d)];
            tn2 += t[d] * t[d];
        }
        const Real tnorm = std::sqrt(tn2);
        (*tnorms)[std::size_t(p)] = tnorm;
        if (tnorm > Real(0) && pnorm > Real(0)) out[std::size_t(p)] = dot / (tnorm * pnorm);
    }
    NodePtr tn = target.node(), pn = proto.node();
    return make_op({X, Y, 1}, std::move(out), "cosine_map", {tn, pn},
                   [tn, pn, tnorms, pnorm, X, Y, D](TensorNode& o) {
                       if (pnorm == Real(0)) return;
                       for (int p = 0; p < X * Y; ++p) {
                           const Real g = o.grad[std::size_t(p)];
                           if (g == Real(0)) continue;
                           const Real tnorm = (*tnorms)[std::size_t(p)];
                           if (tnorm == Real(0)) continue;
                           const Real s = o.data[std::size_t(p)];
                           const Real inv_tp = Real(1) / (tnorm * pnorm);
                           const Real* t = tn->data.data() + std::size_t(p * D);
                           if (tn->requires_grad) {
                               tn->ensure_grad();
                               Real* gt = tn->grad.data() + std::size_t(p * D);
                               const Real inv_t2 = Real(1) / (tnorm * tnorm);
                               for (int d = 0; d < D; ++d)
                                   gt[d] += g * (pn->data[std::size_t(d)] * inv_tp - s * t[d] * inv_t2);
                           }
                           if (pn->requires_grad) {
                               pn->ensure_grad();
                               const Real inv_p2 = Real(1) / (pnorm * pnorm);
                               for (int d = 0; d < D; ++d)
                                   pn->grad[std::size_t(d)] +=
                                       g * (t[d] * inv_tp - s * pn->data[std::size_t(d)] * inv_p2);
                           }
                       }
                   });
}

Tensor pointwise_max(const std::vector<Tensor>& maps) {
    require(!maps.empty(), "pointwise_max", "empty map list");
    const auto& shape = maps[0].shape();
    for (const auto& m : maps)
        require(m.shape() == shape, "pointwise_max",
                "shape mismatch " + shape_str(shape) + " vs " + shape_str(m.shape()));
    const std::size_t n = maps[0].numel();
    std::vector<Real> out(n);
    auto winner = std::make_shared<std::vector<int>>(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        Real best = maps[0].values()[i];
        int bj = 0;
        for (std::size_t j = 1; j < maps.size(); ++j) {
            const Real v = maps[j].values()[i];
            if (v > best) {  // ties keep the lowest map index
                best = v;
                bj = int(j);
            }
        }
        out[i] = best;
        (*winner)[i] = bj;
    }
    std::vector<NodePtr> parents;
    parents.reserve(maps.size());
    for (const auto& m : maps) parents.push_back(m.node());
    auto pcopy = parents;
    return make_op(shape, std::move(out), "pointwise_max", std::move(parents),
                   [pcopy, winner](TensorNode& o) {
                       for (std::size_t i = 0; i < o.grad.size(); ++i) {
                           const NodePtr& w = pcopy[std::size_t((*winner)[i])];
                           if (!w->requires_grad) continue;
                           w->ensure_grad();
                           w->grad[i] += o.grad[i];
                       }
                   });
}

Tensor mul_by_map(const Tensor& f, const Tensor& m) {
    check_rank3(f, "mul_by_map");
    require((m.rank() == 3 && m.dim(2) == 1) || m.rank() == 2, "mul_by_map",
            "map must be {X,Y,1} or {X,Y}, got " + shape_str(m.shape()));
    const int X = f.dim(0), Y = f.dim(1), D = f.dim(2);
    require(m.dim(0) == X && m.dim(1) == Y, "mul_by_map",
            "extent mismatch " + shape_str(f.shape()) + " vs " + shape_str(m.shape()));
    std::vector<Real> out(f.numel());
    const auto& fv = f.values();
    const auto& mv = m.values();
    for (int p = 0; p < X * Y; ++p) {
        const Real w = mv[std::size_t(p)];
        for (int d = 0; d < D; ++d) out[std::size_t(p * D + d)] = fv[std::size_t(p * D + d)] * w;
    }
    NodePtr fn = f.node(), mn = m.node();
    return make_op(f.shape(), std::move(out), "mul_by_map", {fn, mn},
                   [fn, mn, X, Y, D](TensorNode& o) {
                       if (fn->requires_grad) {
                           fn->ensure_grad();
                           for (int p = 0; p < X * Y; ++p) {
                               const Real w = mn->data[std::size_t(p)];
                               if (w == Real(0)) continue;
                               for (int d = 0; d < D; ++d)
                                   fn->grad[std::size_t(p * D + d)] += o.grad[std::size_t(p * D + d)] * w;
                           }
                       }
                       if (mn->requires_grad) {
                           mn->ensure_grad();
                           for (int p = 0; p < X * Y; ++p) {
                               Real acc = 0;
                               for (int d = 0; d < D; ++d)
                                   acc += o.grad[std::size_t(p * D + d)] * fn->data[std::size_t(p * D + d)];
                               mn->grad[std::size_t(p)] += acc;
                           }
                       }
                   });
}

namespace {
Real softplus(Real x) {
    return std::max(x, Real(0)) + std::log1p(std::exp(-std::abs(x)));
}
}  // namespace

Tensor multilabel_bce(const Tensor& logits, const std::vector<Real>& labels) {
    require(logits.rank() == 1, "multilabel_bce",
            "logits must be rank-1, got " + shape_str(logits.shape()));
    const int C = logits.dim(0);
    require(int(labels.size()) == C, "multilabel_bce",
            "length mismatch: " + std::to_string(C) + " logits vs " +
                std::to_string(labels.size()) + " labels");
    const auto& v = logits.values();
    Real loss = 0;
    for (int i = 0; i < C; ++i)
        loss += labels[std::size_t(i)] * softplus(-v[std::size_t(i)]) +
                (Real(1) - labels[std::size_t(i)]) * softplus(v[std::size_t(i)]);
    loss /= Real(C);
    NodePtr ln = logits.node();
    return make_op({1}, {loss}, "multilabel_bce", {ln}, [ln, labels, C](TensorNode& o) {
        ln->ensure_grad();
        const Real g = o.grad[0] / Real(C);
        for (int i = 0; i < C; ++i) {
            const Real s = Real(1) / (Real(1) + std::exp(-ln->data[std::size_t(i)]));
            ln->grad[std::size_t(i)] += g * (s - labels[std::size_t(i)]);
        }
    });
}

Tensor smooth2d_reflect(const Tensor& map, const std::vector<Real>& profile) {
    require((map.rank() == 3 && map.dim(2) == 1) || map.rank() == 2, "smooth2d_reflect",
            "map must be {X,Y,1} or {X,Y}, got " + shape_str(map.shape()));
    require(profile.size() % 2 == 1, "smooth2d_reflect", "kernel profile length must be odd");
    const int X = map.dim(0), Y = map.dim(1);
    const int r = int(profile.size() / 2);
    const auto& in = map.values();
    // separable passes; reflection is applied per axis
    std::vector<Real> tmp(std::size_t(X * Y), Real(0));
    for (int x = 0; x < X; ++x)
        for (int y = 0; y < Y; ++y) {
            Real acc = 0;
            for (int k = -r; k <= r; ++k)
                acc += profile[std::size_t(k + r)] * in[std::size_t(reflect_index(x + k, X) * Y + y)];
            tmp[std::size_t(x * Y + y)] = acc;
        }
    std::vector<Real> out(std::size_t(X * Y), Real(0));
    for (int x = 0; x < X; ++x)
        for (int y = 0; y < Y; ++y) {
            Real acc = 0;
            for (int k = -r; k <= r; ++k)
                acc += profile[std::size_t(k + r)] * tmp[std::size_t(x * Y + reflect_index(y + k, Y))];
            out[std::size_t(x * Y + y)] = acc;
        }
    NodePtr mn = map.node();
    return make_op(map.shape(), std::move(out), "smooth2d_reflect", {mn},
                   [mn, profile, X, Y, r](TensorNode& o) {
                       mn->ensure_grad();
                       // exact adjoint: scatter through the same reflected taps, passes reversed
                       std::vector<Real> dtmp(std::size_t(X * Y), Real(0));
                       for (int x = 0; x < X; ++x)
                           for (int y = 0; y < Y; ++y) {
                               const Real g = o.grad[std::size_t(x * Y + y)];
                               if (g == Real(0)) continue;
                               for (int k = -r; k <= r; ++k)
                                   dtmp[std::size_t(x * Y + reflect_index(y + k, Y))] +=
                                       profile[std::size_t(k + r)] * g;
                           }
                       for (int x = 0; x < X; ++x)
                           for (int y = 0; y < Y; ++y) {
                               const Real g = dtmp[std::size_t(x * Y + y)];
                               if (g == Real(0)) continue;
                               for (int k = -r; k <= r; ++k)
                                   mn->grad[std::size_t(reflect_index(x + k, X) * Y + y)] +=
                                       profile[std::size_t(k + r)] * g;
                           }
                   });
}

Tensor normalize_channel_max(const Tensor& a, Real eps) {
    check_rank3(a, "normalize_channel_max");
    const int X = a.dim(0), Y = a.dim(1), C = a.dim(2);
    const auto& av = a.values();
    auto maxima = std::make_shared<std::vector<Real>>(std::size_t(C), Real(0));
    auto argmax = std::make_shared<std::vector<int>>(std::size_t(C), 0);
    for (int c = 0; c < C; ++c) {
        Real best = av[std::size_t(c)];
        int bp = 0;
        for (int p = 1; p < X * Y; ++p) {
            const Real v = av[std::size_t(p * C + c)];
            if (v > best) {
                best = v;
                bp = p;
            }
        }
        (*maxima)[std::size_t(c)] = best;
        (*argmax)[std::size_t(c)] = bp;
    }
    std::vector<Real> out(a.numel(), Real(0));
    for (int c = 0; c < C; ++c) {
        const Real m = (*maxima)[std::size_t(c)];
        if (m <= eps) continue;  // degenerate channel stays zero
        for (int p = 0; p < X * Y; ++p) out[std::size_t(p * C + c)] = av[std::size_t(p * C + c)] / m;
    }
    NodePtr an = a.node();
    return make_op(a.shape(), std::move(out), "normalize_channel_max", {an},
                   [an, maxima, argmax, eps, X, Y, C](TensorNode& o) {
                       an->ensure_grad();
                       for (int c = 0; c < C; ++c) {
                           const Real m = (*maxima)[std::size_t(c)];
                           if (m <= eps) continue;
                           Real dm = 0;
                           for (int p = 0; p < X * Y; ++p) {
                               const Real g = o.grad[std::size_t(p * C + c)];
                               if (g == Real(0)) continue;
                               an->grad[std::size_t(p * C + c)] += g / m;
                               dm -= g * o.data[std::size_t(p * C + c)] / m;
                           }
                           an->grad[std::size_t((*argmax)[std::size_t(c)] * C + c)] += dm;
                       }
                   });
}

Tensor mask_channels(const Tensor& a, const std::vector<Real>& keep) {
    check_rank3(a, "mask_channels");
    const int X = a.dim(0), Y = a.dim(1), C = a.dim(2);
    require(int(keep.size()) == C, "mask_channels",
            "length mismatch: " + std::to_string(C) + " channels vs " +
                std::to_string(keep.size()) + " label entries");
    std::vector<Real> out(a.numel());
    const auto& av = a.values();
    for (int p = 0; p < X * Y; ++p)
        for (int c = 0; c < C; ++c)
            out[std::size_t(p * C + c)] = av[std::size_t(p * C + c)] * keep[std::size_t(c)];
    NodePtr an = a.node();
    return make_op(a.shape(), std::move(out), "mask_channels", {an},
                   [an, keep, X, Y, C](TensorNode& o) {
                       an->ensure_grad();
                       for (int p = 0; p < X * Y; ++p)
                           for (int c = 0; c < C; ++c)
                               an->grad[std::size_t(p * C + c)] +=
                                   o.grad[std::size_t(p * C + c)] * keep[std::size_t(c)];
                   });
}

Tensor detach(const Tensor& a) {
    return Tensor(make_leaf(a.shape(), a.values(), false));
}

// ---- backward -------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined()) throw std::runtime_error("backward: undefined tensor");
    if (loss.numel() != 1)
        throw std::runtime_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
    NodePtr root = loss.node();
    if (!root->requires_grad)
        throw std::runtime_error("backward: loss is detached from every requires_grad leaf");
    if (root->consumed)
        throw std::runtime_error("backward: tape already consumed for this loss");

    // The tape: every reachable recorded operation, replayed in exact reverse
    // execution order (descending seq). Shared ownership keeps interior nodes
    // alive while their consumers are being torn down.
    std::vector<NodePtr> tape;
    std::unordered_set<TensorNode*> seen;
    std::vector<NodePtr> stack{root};
    seen.insert(root.get());
    while (!stack.empty()) {
        NodePtr n = stack.back();
        stack.pop_back();
        if (n->consumed)
            throw std::runtime_error("backward: graph overlaps an already-consumed tape");
        for (const NodePtr& p : n->parents)
            if (seen.insert(p.get()).second) stack.push_back(p);
        if (n->grad_fn) tape.push_back(std::move(n));
    }
    std::sort(tape.begin(), tape.end(),
              [](const NodePtr& a, const NodePtr& b) { return a->seq > b->seq; });

    root->ensure_grad();
    root->grad[0] += Real(1);
    for (const NodePtr& n : tape) {
        if (n->grad.empty()) continue;  // no gradient reached this value
        n->grad_fn(*n);
    }
    // consume the tape
    for (const NodePtr& n : tape) {
        n->grad_fn = nullptr;
        n->parents.clear();
        n->consumed = true;
    }
}

}  // namespace rpnet

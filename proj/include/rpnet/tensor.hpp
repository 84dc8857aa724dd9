#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace rpnet {

#ifdef RPNET_REAL_FLOAT
using Real = float;
#else
using Real = double;
#endif

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// One value in the autograd graph. The layout convention is
// height X x width Y x channels D (row-major, channels fastest); lower ranks
// are allowed where an operation says so. Interior nodes keep the closure
// that scatters their output gradient back to their parents; `seq` records
// execution order so backward can replay the tape in exact reverse.
struct TensorNode {
    std::vector<int> shape;
    std::vector<Real> data;
    std::vector<Real> grad;  // sized during backward, empty before
    bool requires_grad = false;
    bool consumed = false;  // set once backward has replayed this op
    std::uint64_t seq = 0;
    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> grad_fn;
    const char* op = "leaf";

    std::size_t numel() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
    }
};

std::string shape_str(const std::vector<int>& shape);

// Value-semantics handle onto a shared graph node.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, Real value, bool requires_grad = false);
    static Tensor from(std::vector<int> shape, std::vector<Real> data, bool requires_grad = false);
    static Tensor scalar(Real value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[std::size_t(i)]; }
    int rank() const { return int(node_->shape.size()); }
    std::size_t numel() const { return node_->data.size(); }

    const std::vector<Real>& values() const { return node_->data; }
    // Mutable access is for leaf updates (optimizer steps, tests); mutating an
    // interior node of a live graph is undefined.
    std::vector<Real>& values() { return node_->data; }

    Real value() const;  // scalar tensors only

    // rank-3 {X,Y,D} accessor
    Real at(int x, int y, int d) const {
        return node_->data[std::size_t((x * node_->shape[1] + y) * node_->shape[2] + d)];
    }
    Real& at(int x, int y, int d) {
        return node_->data[std::size_t((x * node_->shape[1] + y) * node_->shape[2] + d)];
    }
    // rank-2 {R,C} accessor
    Real at(int r, int c) const { return node_->data[std::size_t(r * node_->shape[1] + c)]; }
    Real& at(int r, int c) { return node_->data[std::size_t(r * node_->shape[1] + c)]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    const std::vector<Real>& grad() const;
    void clear_grad() { node_->grad.clear(); }

    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

// ---- differentiable operations -------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real k);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// Cross-correlation of an {X,Y,D} input with an {KH,KW,D/groups,Cout} kernel.
// Symmetric zero padding; differentiable w.r.t. input and kernel.
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding, int groups);

// out[x,y,d] = input[x,y,d] + bias[d]
Tensor bias_add(const Tensor& input, const Tensor& bias);

// Spatial mean per channel: {X,Y,D} -> {D}.
Tensor gap(const Tensor& a);

// Per-position max over channels: {X,Y,D} -> {X,Y,1}. Gradient is routed to
// the argmax channel; ties break toward the lowest channel index.
Tensor channel_max(const Tensor& a);

// Max over all entries -> scalar {1}. Gradient goes to the first argmax.
Tensor global_max(const Tensor& a);

// Sum of all entries -> scalar {1}.
Tensor reduce_sum(const Tensor& a);

// Elementwise division by a scalar tensor; gradient flows into both.
Tensor div_by_scalar(const Tensor& a, const Tensor& s);

// v[c] = sum_d x[d] * w[d,c] with x {D}, w {D,C}.
Tensor linear_vec(const Tensor& x, const Tensor& w);

// Masked spatial mean: {X,Y,D} features, {X,Y,1} 0/1 mask (treated as
// constant) -> {D}. Caller guarantees the mask has at least one 1-entry.
Tensor masked_spatial_mean(const Tensor& features, const Tensor& mask);

// s(x,y) = cos(proto, target(x,y)); zero-norm vectors on either side give 0.
// target {X,Y,D}, proto {D} -> {X,Y,1}.
Tensor cosine_map(const Tensor& target, const Tensor& proto);

// Pointwise max over equally-shaped maps; gradient routed to the winning map
// (lowest index on ties).
Tensor pointwise_max(const std::vector<Tensor>& maps);

// out[x,y,d] = f[x,y,d] * m[x,y]; the one broadcast form the library allows.
Tensor mul_by_map(const Tensor& f, const Tensor& m);

// Mean over classes of -[u log s(v) + (1-u) log(1-s(v))], u constant multi-hot.
Tensor multilabel_bce(const Tensor& logits, const std::vector<Real>& labels);

// 2-D convolution of an {X,Y,1} map with a constant separable kernel profile
// (odd length 2r+1), reflect padding at borders.
Tensor smooth2d_reflect(const Tensor& map, const std::vector<Real>& profile);

// Per-channel spatial max normalization with a zero guard: channels whose max
// is <= eps come out identically zero. {X,Y,C} -> {X,Y,C}.
Tensor normalize_channel_max(const Tensor& a, Real eps);

// Zeroes the channels whose keep flag is 0.
Tensor mask_channels(const Tensor& a, const std::vector<Real>& keep);

// Cuts the tensor out of the graph (shares no gradient path).
Tensor detach(const Tensor& a);

// Reverse-mode sweep from a scalar loss. Populates grad on every
// requires_grad leaf reachable from it and consumes the recorded tape.
void backward(const Tensor& loss);

}  // namespace rpnet

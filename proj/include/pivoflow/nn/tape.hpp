#pragma once
// Reverse-mode tape over small dense vectors. A forward pass appends nodes
// (ids are topologically ordered by construction); backward() seeds a scalar
// loss and sweeps the node list once in reverse. Leaf nodes reference
// external parameter memory and accumulate gradients straight into the
// owner's buffers; a null gradient target marks the leaf frozen.
//
// Directional derivatives needed inside differentiable losses (exact drift
// divergence, Jacobian columns) are recorded as first-order ops: the tangent
// of an affine layer is another matvec with the same weights, the tangent of
// an activation is an elementwise product with its derivative. Backward then
// differentiates through those, so no second-order machinery is needed.

#include <cstdint>
#include <span>
#include <vector>

#include "pivoflow/flow_field.hpp"
#include "pivoflow/vec2.hpp"

namespace pivoflow::nn {

using NodeId = std::int32_t;

enum class Op : std::uint8_t {
    Leaf,
    Concat2,
    Concat3,
    Affine,        // y = W x + b          a=W, b=x, c=bias (optional, -1)
    Matvec,        // y = W x              a=W, b=x
    Gelu,          // y = x Phi(x)
    GeluJvp,       // y = gelu'(s) ⊙ t     a=s, b=t
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Sqrt,
    Relu,
    Add,
    Sub,
    Mul,
    Div,
    ScalarAffine,  // y = p0 * x + p1, elementwise
    Dot,           // <a, b>, length 1
    MulScalarVec,  // y = s[0] * x         a=s (len 1), b=x
    Norm,          // |x|_2, length 1
    Index,         // y = x[int(p0)], length 1
    Slice,         // y = x[int(p0) .. int(p0)+len)
    Clamp,         // y = clamp(x, -p0, p0)
    ClampBox,      // y = clamp(x, p0, p1)
    FieldTemp,     // y = T(z + (p0, p1)), field thermal proxy; a=z (len 2)
    FieldVel,      // y = u(z); a=z (len 2)
};

struct Node {
    Op op = Op::Leaf;
    NodeId a = -1, b = -1, c = -1;
    std::int32_t len = 0;
    std::int32_t rows = 0, cols = 0;
    double p0 = 0.0, p1 = 0.0;
    const FlowFieldSpec* field = nullptr;
    bool external = false;
    const double* ext_val = nullptr;
    double* ext_grad = nullptr;  // null = frozen leaf
    std::size_t val_off = 0;
};

class Tape {
public:
    // External leaf; grad_accum may be null (frozen parameters, constants the
    // caller owns). The memory must outlive the tape pass.
    NodeId leaf(const double* data, int len, double* grad_accum);
    // Constant copied into the tape arena; no gradient.
    NodeId constant(std::span<const double> values);
    NodeId constant1(double v);
    NodeId constant2(Vec2 v);

    NodeId concat2(NodeId a, NodeId b);
    NodeId concat3(NodeId a, NodeId b, NodeId c);
    NodeId affine(NodeId w, NodeId x, NodeId bias, int rows, int cols);
    NodeId matvec(NodeId w, NodeId x, int rows, int cols);
    NodeId gelu(NodeId x);
    NodeId gelu_jvp(NodeId s, NodeId t);
    NodeId tanh_op(NodeId x);
    NodeId sigmoid(NodeId x);
    NodeId softplus(NodeId x);
    NodeId exp_op(NodeId x);
    NodeId log_op(NodeId x);
    NodeId sqrt_op(NodeId x);
    NodeId relu(NodeId x);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId div(NodeId a, NodeId b);
    NodeId scalar_affine(NodeId x, double scale, double shift);
    NodeId dot(NodeId a, NodeId b);
    NodeId mul_scalar_vec(NodeId s, NodeId x);
    NodeId norm(NodeId x);
    NodeId index(NodeId x, int i);
    NodeId slice(NodeId x, int offset, int len);
    NodeId clamp(NodeId x, double bound);
    NodeId clamp_box(NodeId x, double lo, double hi);
    NodeId field_temp(NodeId z, Vec2 offset, const FlowFieldSpec* field);
    NodeId field_vel(NodeId z, const FlowFieldSpec* field);

    const double* val(NodeId id) const;
    double scalar(NodeId id) const;
    int len(NodeId id) const { return nodes_[id].len; }
    Vec2 vec2(NodeId id) const;

    // Reverse sweep from a scalar loss node. External leaves accumulate into
    // their gradient targets (+=); call ParamStore::zero_grad between steps.
    void backward(NodeId loss);

    void clear();
    std::size_t node_count() const { return nodes_.size(); }

private:
    NodeId push(Node n, int len);
    double* out_ptr(NodeId id);
    const double* in_ptr(const Node& n) const;

    std::vector<Node> nodes_;
    std::vector<double> values_;
    std::vector<double> grads_;
};

// Scalar GELU helpers (exact, erf-based) shared by tape and inference paths.
double gelu_value(double x);
double gelu_derivative(double x);
double gelu_second_derivative(double x);
double softplus_value(double x);

}  // namespace pivoflow::nn

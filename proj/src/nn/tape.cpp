#include "pivoflow/nn/tape.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "pivoflow/errors.hpp"
#include "pivoflow/kernels.hpp"

namespace pivoflow::nn {

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }
inline double normal_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }
}  // namespace

double gelu_value(double x) { return x * normal_cdf(x); }
double gelu_derivative(double x) { return normal_cdf(x) + x * normal_pdf(x); }
double gelu_second_derivative(double x) { return normal_pdf(x) * (2.0 - x * x); }

double softplus_value(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

NodeId Tape::push(Node n, int len) {
    n.len = len;
    if (!n.external) {
        n.val_off = values_.size();
        values_.resize(values_.size() + static_cast<std::size_t>(len));
    }
    nodes_.push_back(n);
    return static_cast<NodeId>(nodes_.size()) - 1;
}

double* Tape::out_ptr(NodeId id) {
    Node& n = nodes_[id];
    return values_.data() + n.val_off;
}

const double* Tape::val(NodeId id) const {
    const Node& n = nodes_[id];
    return n.external ? n.ext_val : values_.data() + n.val_off;
}

double Tape::scalar(NodeId id) const { return val(id)[0]; }

Vec2 Tape::vec2(NodeId id) const {
    const double* v = val(id);
    return {v[0], v[1]};
}

NodeId Tape::leaf(const double* data, int len, double* grad_accum) {
    Node n;
    n.op = Op::Leaf;
    n.external = true;
    n.ext_val = data;
    n.ext_grad = grad_accum;
    return push(n, len);
}

NodeId Tape::constant(std::span<const double> v) {
    Node n;
    n.op = Op::Leaf;
    NodeId id = push(n, static_cast<int>(v.size()));
    std::memcpy(out_ptr(id), v.data(), v.size() * sizeof(double));
    return id;
}

NodeId Tape::constant1(double v) { return constant(std::span<const double>(&v, 1)); }

NodeId Tape::constant2(Vec2 v) {
    const double a[2] = {v.x, v.y};
    return constant(std::span<const double>(a, 2));
}

NodeId Tape::concat2(NodeId a, NodeId b) {
    Node n;
    n.op = Op::Concat2;
    n.a = a;
    n.b = b;
    NodeId id = push(n, len(a) + len(b));
    double* out = out_ptr(id);
    std::memcpy(out, val(a), len(a) * sizeof(double));
    std::memcpy(out + len(a), val(b), len(b) * sizeof(double));
    return id;
}

NodeId Tape::concat3(NodeId a, NodeId b, NodeId c) {
    Node n;
    n.op = Op::Concat3;
    n.a = a;
    n.b = b;
    n.c = c;
    NodeId id = push(n, len(a) + len(b) + len(c));
    double* out = out_ptr(id);
    std::memcpy(out, val(a), len(a) * sizeof(double));
    std::memcpy(out + len(a), val(b), len(b) * sizeof(double));
    std::memcpy(out + len(a) + len(b), val(c), len(c) * sizeof(double));
    return id;
}

NodeId Tape::affine(NodeId w, NodeId x, NodeId bias, int rows, int cols) {
    if (len(x) != cols || len(w) != rows * cols || (bias >= 0 && len(bias) != rows))
        throw std::invalid_argument("tape affine: shape mismatch");
    Node n;
    n.op = Op::Affine;
    n.a = w;
    n.b = x;
    n.c = bias;
    n.rows = rows;
    n.cols = cols;
    NodeId id = push(n, rows);
    kernels::active().matvec_bias(val(w), val(x), bias >= 0 ? val(bias) : nullptr, out_ptr(id),
                                  rows, cols);
    return id;
}

NodeId Tape::matvec(NodeId w, NodeId x, int rows, int cols) {
    if (len(x) != cols || len(w) != rows * cols)
        throw std::invalid_argument("tape matvec: shape mismatch");
    Node n;
    n.op = Op::Matvec;
    n.a = w;
    n.b = x;
    n.rows = rows;
    n.cols = cols;
    NodeId id = push(n, rows);
    kernels::active().matvec_bias(val(w), val(x), nullptr, out_ptr(id), rows, cols);
    return id;
}

NodeId Tape::gelu(NodeId x) {
    Node n;
    n.op = Op::Gelu;
    n.a = x;
    NodeId id = push(n, len(x));
    const double* in = val(x);
    double* out = out_ptr(id);
    for (int i = 0; i < len(x); ++i) out[i] = gelu_value(in[i]);
    return id;
}

NodeId Tape::gelu_jvp(NodeId s, NodeId t) {
    if (len(s) != len(t)) throw std::invalid_argument("tape gelu_jvp: length mismatch");
    Node n;
    n.op = Op::GeluJvp;
    n.a = s;
    n.b = t;
    NodeId id = push(n, len(s));
    const double* sv = val(s);
    const double* tv = val(t);
    double* out = out_ptr(id);
    for (int i = 0; i < len(s); ++i) out[i] = gelu_derivative(sv[i]) * tv[i];
    return id;
}

NodeId Tape::tanh_op(NodeId x) {
    Node n;
    n.op = Op::Tanh;
    n.a = x;
    NodeId id = push(n, len(x));
    const double* in = val(x);
    double* out = out_ptr(id);
    for (int i = 0; i < len(x); ++i) out[i] = std::tanh(in[i]);
    return id;
}

NodeId Tape::sigmoid(NodeId x) {
    Node n;
    n.op = Op::Sigmoid;
    n.a = x;
    NodeId id = push(n, len(x));
    const double* in = val(x);
    double* out = out_ptr(id);
    for (int i = 0; i < len(x); ++i) out[i] = 1.0 / (1.0 + std::exp(-in[i]));
    return id;
}

NodeId Tape::softplus(NodeId x) {
    Node n;
    n.op = Op::Softplus;
    n.a = x;
    NodeId id = push(n, len(x));
    const double* in = val(x);
    double* out = out_ptr(id);
    for (int i = 0; i < len(x); ++i) out[i] = softplus_value(in[i]);
    return id;
}

NodeId Tape::exp_op(NodeId x) {
    Node n;
    n.op = Op::Exp;
    n.a = x;
    NodeId id = push(n, len(x));
    const double* in = val(x);
    double* out = out_ptr(id);
    for (int i = 0; i < len(x); ++i) out[i] = std::exp(in[i]);
    return id;
}

NodeId Tape::log_op(NodeId x) {
    Node n;
    n.op = Op::Log;
    n.a = x;
    NodeId id = push(n, len(x));
    const double* in = val(x);
    double* out = out_ptr(id);
    for (int i = 0; i < len(x); ++i) out[i] = std::log(in[i]);
    return id;
}

NodeId Tape::sqrt_op(NodeId x) {
    Node n;
    n.op = Op::Sqrt;
    n.a = x;
    NodeId id = push(n, len(x));
    const double* in = val(x);
    double* out = out_ptr(id);
    for (int i = 0; i < len(x); ++i) out[i] = std::sqrt(in[i]);
    return id;
}

NodeId Tape::relu(NodeId x) {
    Node n;
    n.op = Op::Relu;
    n.a = x;
    NodeId id = push(n, len(x));
    const double* in = val(x);
    double* out = out_ptr(id);
    for (int i = 0; i < len(x); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
    return id;
}

NodeId Tape::add(NodeId a, NodeId b) {
    if (len(a) != len(b)) throw std::invalid_argument("tape add: length mismatch");
    Node n;
    n.op = Op::Add;
    n.a = a;
    n.b = b;
    NodeId id = push(n, len(a));
    kernels::active().add(val(a), val(b), out_ptr(id), len(a));
    return id;
}

NodeId Tape::sub(NodeId a, NodeId b) {
    if (len(a) != len(b)) throw std::invalid_argument("tape sub: length mismatch");
    Node n;
    n.op = Op::Sub;
    n.a = a;
    n.b = b;
    NodeId id = push(n, len(a));
    kernels::active().sub(val(a), val(b), out_ptr(id), len(a));
    return id;
}

NodeId Tape::mul(NodeId a, NodeId b) {
    if (len(a) != len(b)) throw std::invalid_argument("tape mul: length mismatch");
    Node n;
    n.op = Op::Mul;
    n.a = a;
    n.b = b;
    NodeId id = push(n, len(a));
    kernels::active().mul(val(a), val(b), out_ptr(id), len(a));
    return id;
}

NodeId Tape::div(NodeId a, NodeId b) {
    if (len(a) != len(b)) throw std::invalid_argument("tape div: length mismatch");
    Node n;
    n.op = Op::Div;
    n.a = a;
    n.b = b;
    NodeId id = push(n, len(a));
    const double* av = val(a);
    const double* bv = val(b);
    double* out = out_ptr(id);
    for (int i = 0; i < len(a); ++i) out[i] = av[i] / bv[i];
    return id;
}

NodeId Tape::scalar_affine(NodeId x, double scale, double shift) {
    Node n;
    n.op = Op::ScalarAffine;
    n.a = x;
    n.p0 = scale;
    n.p1 = shift;
    NodeId id = push(n, len(x));
    const double* in = val(x);
    double* out = out_ptr(id);
    for (int i = 0; i < len(x); ++i) out[i] = scale * in[i] + shift;
    return id;
}

NodeId Tape::dot(NodeId a, NodeId b) {
    if (len(a) != len(b)) throw std::invalid_argument("tape dot: length mismatch");
    Node n;
    n.op = Op::Dot;
    n.a = a;
    n.b = b;
    NodeId id = push(n, 1);
    out_ptr(id)[0] = kernels::active().dot(val(a), val(b), len(a));
    return id;
}

NodeId Tape::mul_scalar_vec(NodeId s, NodeId x) {
    if (len(s) != 1) throw std::invalid_argument("tape mul_scalar_vec: scalar operand len != 1");
    Node n;
    n.op = Op::MulScalarVec;
    n.a = s;
    n.b = x;
    NodeId id = push(n, len(x));
    const double sv = val(s)[0];
    const double* in = val(x);
    double* out = out_ptr(id);
    for (int i = 0; i < len(x); ++i) out[i] = sv * in[i];
    return id;
}

NodeId Tape::norm(NodeId x) {
    Node n;
    n.op = Op::Norm;
    n.a = x;
    NodeId id = push(n, 1);
    out_ptr(id)[0] = std::sqrt(kernels::active().dot(val(x), val(x), len(x)));
    return id;
}

NodeId Tape::index(NodeId x, int i) {
    Node n;
    n.op = Op::Index;
    n.a = x;
    n.p0 = i;
    NodeId id = push(n, 1);
    out_ptr(id)[0] = val(x)[i];
    return id;
}

NodeId Tape::slice(NodeId x, int offset, int length) {
    if (offset + length > len(x)) throw std::invalid_argument("tape slice: out of range");
    Node n;
    n.op = Op::Slice;
    n.a = x;
    n.p0 = offset;
    NodeId id = push(n, length);
    std::memcpy(out_ptr(id), val(x) + offset, length * sizeof(double));
    return id;
}

NodeId Tape::clamp(NodeId x, double bound) {
    Node n;
    n.op = Op::Clamp;
    n.a = x;
    n.p0 = bound;
    NodeId id = push(n, len(x));
    const double* in = val(x);
    double* out = out_ptr(id);
    for (int i = 0; i < len(x); ++i)
        out[i] = in[i] > bound ? bound : (in[i] < -bound ? -bound : in[i]);
    return id;
}

NodeId Tape::clamp_box(NodeId x, double lo, double hi) {
    Node n;
    n.op = Op::ClampBox;
    n.a = x;
    n.p0 = lo;
    n.p1 = hi;
    NodeId id = push(n, len(x));
    const double* in = val(x);
    double* out = out_ptr(id);
    for (int i = 0; i < len(x); ++i) out[i] = in[i] < lo ? lo : (in[i] > hi ? hi : in[i]);
    return id;
}

NodeId Tape::field_temp(NodeId z, Vec2 offset, const FlowFieldSpec* field) {
    Node n;
    n.op = Op::FieldTemp;
    n.a = z;
    n.p0 = offset.x;
    n.p1 = offset.y;
    n.field = field;
    NodeId id = push(n, 1);
    const Vec2 zp = {val(z)[0] + offset.x, val(z)[1] + offset.y};
    out_ptr(id)[0] = field_temperature(*field, zp);
    return id;
}

NodeId Tape::field_vel(NodeId z, const FlowFieldSpec* field) {
    Node n;
    n.op = Op::FieldVel;
    n.a = z;
    n.field = field;
    NodeId id = push(n, 2);
    const Vec2 u = velocity_at(*field, {val(z)[0], val(z)[1]});
    double* out = out_ptr(id);
    out[0] = u.x;
    out[1] = u.y;
    return id;
}

void Tape::backward(NodeId loss) {
    if (nodes_.empty()) throw std::logic_error("tape backward: no forward pass recorded");
    if (loss < 0 || loss >= static_cast<NodeId>(nodes_.size()) || nodes_[loss].len != 1)
        throw std::logic_error("tape backward: loss must be a recorded scalar node");

    grads_.assign(values_.size(), 0.0);
    // External leaves accumulate straight into their targets; arena nodes use
    // grads_ at the same offsets as values_.
    auto grad_ptr = [&](NodeId id) -> double* {
        Node& n = nodes_[id];
        if (n.external) return n.ext_grad;
        return grads_.data() + n.val_off;
    };

    {
        double* g = grad_ptr(loss);
        if (g) g[0] += 1.0;
        else return;  // loss is a frozen leaf: nothing to do
    }

    const auto& K = kernels::active();
    for (NodeId id = static_cast<NodeId>(nodes_.size()) - 1; id >= 0; --id) {
        Node& n = nodes_[id];
        if (n.op == Op::Leaf) continue;
        const double* g = n.external ? n.ext_grad : grads_.data() + n.val_off;
        if (!g) continue;
        const int m = n.len;
        double* ga = n.a >= 0 ? grad_ptr(n.a) : nullptr;
        double* gb = n.b >= 0 ? grad_ptr(n.b) : nullptr;
        double* gc = n.c >= 0 ? grad_ptr(n.c) : nullptr;

        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::Concat2: {
                const int la = len(n.a);
                if (ga) K.axpy(1.0, g, ga, la);
                if (gb) K.axpy(1.0, g + la, gb, len(n.b));
                break;
            }
            case Op::Concat3: {
                const int la = len(n.a), lb = len(n.b);
                if (ga) K.axpy(1.0, g, ga, la);
                if (gb) K.axpy(1.0, g + la, gb, lb);
                if (gc) K.axpy(1.0, g + la + lb, gc, len(n.c));
                break;
            }
            case Op::Affine:
            case Op::Matvec: {
                const double* w = val(n.a);
                const double* x = val(n.b);
                for (int i = 0; i < n.rows; ++i) {
                    const double gi = g[i];
                    if (gi == 0.0) continue;
                    if (ga) K.axpy(gi, x, ga + static_cast<std::size_t>(i) * n.cols, n.cols);
                    if (gb) K.axpy(gi, w + static_cast<std::size_t>(i) * n.cols, gb, n.cols);
                }
                if (n.op == Op::Affine && gc) K.axpy(1.0, g, gc, n.rows);
                break;
            }
            case Op::Gelu: {
                if (!ga) break;
                const double* x = val(n.a);
                for (int i = 0; i < m; ++i) ga[i] += g[i] * gelu_derivative(x[i]);
                break;
            }
            case Op::GeluJvp: {
                const double* s = val(n.a);
                const double* t = val(n.b);
                for (int i = 0; i < m; ++i) {
                    if (ga) ga[i] += g[i] * t[i] * gelu_second_derivative(s[i]);
                    if (gb) gb[i] += g[i] * gelu_derivative(s[i]);
                }
                break;
            }
            case Op::Tanh: {
                if (!ga) break;
                const double* y = val(id);
                for (int i = 0; i < m; ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
                break;
            }
            case Op::Sigmoid: {
                if (!ga) break;
                const double* y = val(id);
                for (int i = 0; i < m; ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
                break;
            }
            case Op::Softplus: {
                if (!ga) break;
                const double* x = val(n.a);
                for (int i = 0; i < m; ++i) ga[i] += g[i] / (1.0 + std::exp(-x[i]));
                break;
            }
            case Op::Exp: {
                if (!ga) break;
                const double* y = val(id);
                for (int i = 0; i < m; ++i) ga[i] += g[i] * y[i];
                break;
            }
            case Op::Log: {
                if (!ga) break;
                const double* x = val(n.a);
                for (int i = 0; i < m; ++i) ga[i] += g[i] / x[i];
                break;
            }
            case Op::Sqrt: {
                if (!ga) break;
                const double* y = val(id);
                for (int i = 0; i < m; ++i) ga[i] += g[i] * 0.5 / y[i];
                break;
            }
            case Op::Relu: {
                if (!ga) break;
                const double* x = val(n.a);
                for (int i = 0; i < m; ++i)
                    if (x[i] > 0.0) ga[i] += g[i];
                break;
            }
            case Op::Add: {
                if (ga) K.axpy(1.0, g, ga, m);
                if (gb) K.axpy(1.0, g, gb, m);
                break;
            }
            case Op::Sub: {
                if (ga) K.axpy(1.0, g, ga, m);
                if (gb) K.axpy(-1.0, g, gb, m);
                break;
            }
            case Op::Mul: {
                const double* av = val(n.a);
                const double* bv = val(n.b);
                for (int i = 0; i < m; ++i) {
                    if (ga) ga[i] += g[i] * bv[i];
                    if (gb) gb[i] += g[i] * av[i];
                }
                break;
            }
            case Op::Div: {
                const double* av = val(n.a);
                const double* bv = val(n.b);
                for (int i = 0; i < m; ++i) {
                    if (ga) ga[i] += g[i] / bv[i];
                    if (gb) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
                break;
            }
            case Op::ScalarAffine: {
                if (ga) K.axpy(n.p0, g, ga, m);
                break;
            }
            case Op::Dot: {
                if (ga) K.axpy(g[0], val(n.b), ga, len(n.a));
                if (gb) K.axpy(g[0], val(n.a), gb, len(n.a));
                break;
            }
            case Op::MulScalarVec: {
                const double sv = val(n.a)[0];
                if (gb) K.axpy(sv, g, gb, m);
                if (ga) ga[0] += K.dot(g, val(n.b), m);
                break;
            }
            case Op::Norm: {
                if (!ga) break;
                const double y = val(id)[0];
                if (y > 1e-300) K.axpy(g[0] / y, val(n.a), ga, len(n.a));
                break;
            }
            case Op::Index: {
                if (ga) ga[static_cast<int>(n.p0)] += g[0];
                break;
            }
            case Op::Slice: {
                if (ga) K.axpy(1.0, g, ga + static_cast<int>(n.p0), m);
                break;
            }
            case Op::Clamp: {
                if (!ga) break;
                const double* x = val(n.a);
                for (int i = 0; i < m; ++i)
                    if (std::abs(x[i]) <= n.p0) ga[i] += g[i];
                break;
            }
            case Op::ClampBox: {
                if (!ga) break;
                const double* x = val(n.a);
                for (int i = 0; i < m; ++i)
                    if (x[i] >= n.p0 && x[i] <= n.p1) ga[i] += g[i];
                break;
            }
            case Op::FieldTemp: {
                if (!ga) break;
                const double* z = val(n.a);
                const Vec2 gt =
                    field_temperature_grad(*n.field, {z[0] + n.p0, z[1] + n.p1});
                ga[0] += g[0] * gt.x;
                ga[1] += g[0] * gt.y;
                break;
            }
            case Op::FieldVel: {
                if (!ga) break;
                const double* z = val(n.a);
                const Mat2 j = velocity_jacobian(*n.field, {z[0], z[1]});
                ga[0] += j.a * g[0] + j.c * g[1];
                ga[1] += j.b * g[0] + j.d * g[1];
                break;
            }
        }
    }
}

void Tape::clear() {
    nodes_.clear();
    values_.clear();
    grads_.clear();
}

}  // namespace pivoflow::nn

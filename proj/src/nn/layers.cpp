#include "pivoflow/nn/layers.hpp"

#include <cmath>
#include <stdexcept>

#include "pivoflow/errors.hpp"
#include "pivoflow/kernels.hpp"

namespace pivoflow::nn {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

void fourier_embed(double t, int n_freqs, double* out) {
    double w = kPi * t;
    for (int k = 0; k < n_freqs; ++k) {
        out[2 * k] = std::sin(w);
        out[2 * k + 1] = std::cos(w);
        w *= 2.0;
    }
}

std::vector<double> fourier_embed(double t, int n_freqs) {
    std::vector<double> out(2 * n_freqs);
    fourier_embed(t, n_freqs, out.data());
    return out;
}

void init_glorot(Tensor& t, int fan_in, int fan_out, CounterStream& stream) {
    const double s = std::sqrt(6.0 / (fan_in + fan_out));
    for (double& v : t.value) v = stream.next_uniform(-s, s);
}

// ---------------------------------------------------------------------------
// LeafMap

LeafMap::LeafMap(Tape& tape, ParamStore& store)
    : tape_(&tape), store_(&store), mutable_store_(&store), cache_(store.count(), -1) {}

LeafMap::LeafMap(Tape& tape, const ParamStore& store, std::span<double> shadow)
    : tape_(&tape), store_(&store), shadow_(shadow.data()), cache_(store.count(), -1) {}

LeafMap::LeafMap(Tape& tape, const ParamStore& store, std::nullptr_t)
    : tape_(&tape), store_(&store), cache_(store.count(), -1) {}

NodeId LeafMap::get(int tensor_idx) {
    NodeId& cached = cache_[tensor_idx];
    if (cached >= 0) return cached;
    const Tensor& t = store_->at(tensor_idx);
    double* grad = nullptr;
    if (mutable_store_)
        grad = mutable_store_->at(tensor_idx).grad.data();
    else if (shadow_)
        grad = shadow_ + store_->flat_offset(tensor_idx);
    cached = tape_->leaf(t.value.data(), static_cast<int>(t.size()), grad);
    return cached;
}

// ---------------------------------------------------------------------------
// MlpNet

MlpNet::MlpNet(ParamStore& store, const std::string& prefix, MlpSpec spec) : spec_(spec) {
    int in = spec.in_dim;
    for (int l = 0; l < spec.depth; ++l) {
        w_idx_.push_back(store.add(prefix + ".w" + std::to_string(l), spec.hidden, in));
        b_idx_.push_back(store.add(prefix + ".b" + std::to_string(l), spec.hidden, 1));
        in = spec.hidden;
    }
    w_idx_.push_back(store.add(prefix + ".w_out", spec.out_dim, in));
    b_idx_.push_back(store.add(prefix + ".b_out", spec.out_dim, 1));
}

void MlpNet::init(ParamStore& store, CounterStream& stream) const {
    for (std::size_t l = 0; l < w_idx_.size(); ++l) {
        Tensor& w = store.at(w_idx_[l]);
        init_glorot(w, w.cols, w.rows, stream);
    }
}

namespace {
thread_local std::vector<double> tl_buf_a;
thread_local std::vector<double> tl_buf_b;
}  // namespace

void MlpNet::forward(const ParamStore& store, std::span<const double> in,
                     std::span<double> out) const {
    if (static_cast<int>(in.size()) != spec_.in_dim)
        throw std::invalid_argument("mlp forward: input length mismatch");
    const auto& K = kernels::active();
    tl_buf_a.assign(in.begin(), in.end());
    const int layers = static_cast<int>(w_idx_.size());
    for (int l = 0; l < layers; ++l) {
        const Tensor& w = store.at(w_idx_[l]);
        const Tensor& b = store.at(b_idx_[l]);
        tl_buf_b.resize(w.rows);
        K.matvec_bias(w.value.data(), tl_buf_a.data(), b.value.data(), tl_buf_b.data(), w.rows,
                      w.cols);
        if (l + 1 < layers)
            for (double& v : tl_buf_b) v = gelu_value(v);
        std::swap(tl_buf_a, tl_buf_b);
    }
    for (int i = 0; i < spec_.out_dim; ++i) out[i] = tl_buf_a[i];
}

void MlpNet::forward_jvp(const ParamStore& store, std::span<const double> in,
                         std::span<const double* const> tangents_in, std::span<double> out,
                         std::span<double* const> tangents_out) const {
    const auto& K = kernels::active();
    const int nt = static_cast<int>(tangents_in.size());
    const int layers = static_cast<int>(w_idx_.size());

    std::vector<double> cur(in.begin(), in.end());
    std::vector<std::vector<double>> tan(nt);
    for (int j = 0; j < nt; ++j) tan[j].assign(tangents_in[j], tangents_in[j] + spec_.in_dim);

    std::vector<double> pre;
    std::vector<double> tpre;
    for (int l = 0; l < layers; ++l) {
        const Tensor& w = store.at(w_idx_[l]);
        const Tensor& b = store.at(b_idx_[l]);
        pre.resize(w.rows);
        K.matvec_bias(w.value.data(), cur.data(), b.value.data(), pre.data(), w.rows, w.cols);
        for (int j = 0; j < nt; ++j) {
            tpre.resize(w.rows);
            K.matvec_bias(w.value.data(), tan[j].data(), nullptr, tpre.data(), w.rows, w.cols);
            if (l + 1 < layers)
                for (int i = 0; i < w.rows; ++i) tpre[i] *= gelu_derivative(pre[i]);
            tan[j] = tpre;
        }
        if (l + 1 < layers)
            for (double& v : pre) v = gelu_value(v);
        cur = pre;
    }
    for (int i = 0; i < spec_.out_dim; ++i) out[i] = cur[i];
    for (int j = 0; j < nt; ++j)
        for (int i = 0; i < spec_.out_dim; ++i) tangents_out[j][i] = tan[j][i];
}

NodeId MlpNet::forward_tape(Tape& tape, NodeId input, LeafMap& leaves) const {
    NodeId cur = input;
    const int layers = static_cast<int>(w_idx_.size());
    for (int l = 0; l < layers; ++l) {
        const int rows = (l + 1 < layers) ? spec_.hidden : spec_.out_dim;
        const int cols = (l == 0) ? spec_.in_dim : spec_.hidden;
        NodeId z = tape.affine(leaves.get(w_idx_[l]), cur, leaves.get(b_idx_[l]), rows, cols);
        cur = (l + 1 < layers) ? tape.gelu(z) : z;
    }
    return cur;
}

MlpNet::JvpNodes MlpNet::forward_jvp_tape(Tape& tape, NodeId input,
                                          std::span<const NodeId> tangents,
                                          LeafMap& leaves) const {
    JvpNodes result;
    NodeId cur = input;
    std::vector<NodeId> tan(tangents.begin(), tangents.end());
    const int layers = static_cast<int>(w_idx_.size());
    for (int l = 0; l < layers; ++l) {
        const int rows = (l + 1 < layers) ? spec_.hidden : spec_.out_dim;
        const int cols = (l == 0) ? spec_.in_dim : spec_.hidden;
        const NodeId w_node = leaves.get(w_idx_[l]);
        NodeId z = tape.affine(w_node, cur, leaves.get(b_idx_[l]), rows, cols);
        for (auto& t : tan) {
            t = tape.matvec(w_node, t, rows, cols);
            if (l + 1 < layers) t = tape.gelu_jvp(z, t);
        }
        cur = (l + 1 < layers) ? tape.gelu(z) : z;
    }
    result.value = cur;
    result.tangents = std::move(tan);
    return result;
}

// ---------------------------------------------------------------------------
// GruCell

GruCell::GruCell(ParamStore& store, const std::string& prefix, int input_dim, int hidden_dim)
    : input_(input_dim), hidden_(hidden_dim) {
    w_r_ = store.add(prefix + ".w_r", hidden_dim, input_dim);
    u_r_ = store.add(prefix + ".u_r", hidden_dim, hidden_dim);
    b_r_ = store.add(prefix + ".b_r", hidden_dim, 1);
    w_u_ = store.add(prefix + ".w_u", hidden_dim, input_dim);
    u_u_ = store.add(prefix + ".u_u", hidden_dim, hidden_dim);
    b_u_ = store.add(prefix + ".b_u", hidden_dim, 1);
    w_n_ = store.add(prefix + ".w_n", hidden_dim, input_dim);
    u_n_ = store.add(prefix + ".u_n", hidden_dim, hidden_dim);
    b_n_ = store.add(prefix + ".b_n", hidden_dim, 1);
    b_hn_ = store.add(prefix + ".b_hn", hidden_dim, 1);
}

void GruCell::init(ParamStore& store, CounterStream& stream) const {
    for (int idx : {w_r_, w_u_, w_n_}) init_glorot(store.at(idx), input_, hidden_, stream);
    for (int idx : {u_r_, u_u_, u_n_}) init_glorot(store.at(idx), hidden_, hidden_, stream);
}

void GruCell::forward(const ParamStore& store, std::span<const double> x,
                      std::span<const double> h, std::span<double> h_out) const {
    const auto& K = kernels::active();
    const int hd = hidden_;
    std::vector<double> r(hd), u(hd), n(hd), tmp(hd);

    auto gate = [&](int w, int u_idx, int b, std::vector<double>& out) {
        K.matvec_bias(store.at(w).value.data(), x.data(), store.at(b).value.data(), out.data(),
                      hd, input_);
        K.matvec_bias(store.at(u_idx).value.data(), h.data(), nullptr, tmp.data(), hd, hd);
        for (int i = 0; i < hd; ++i) out[i] = 1.0 / (1.0 + std::exp(-(out[i] + tmp[i])));
    };
    gate(w_r_, u_r_, b_r_, r);
    gate(w_u_, u_u_, b_u_, u);

    K.matvec_bias(store.at(u_n_).value.data(), h.data(), store.at(b_hn_).value.data(), tmp.data(),
                  hd, hd);
    K.matvec_bias(store.at(w_n_).value.data(), x.data(), store.at(b_n_).value.data(), n.data(),
                  hd, input_);
    for (int i = 0; i < hd; ++i) n[i] = std::tanh(n[i] + r[i] * tmp[i]);
    for (int i = 0; i < hd; ++i) h_out[i] = (1.0 - u[i]) * h[i] + u[i] * n[i];
}

NodeId GruCell::forward_tape(Tape& tape, NodeId x, NodeId h, LeafMap& leaves) const {
    const int hd = hidden_;
    auto gate_pre = [&](int w, int u_idx, int b) {
        NodeId wx = tape.affine(leaves.get(w), x, leaves.get(b), hd, input_);
        NodeId uh = tape.matvec(leaves.get(u_idx), h, hd, hd);
        return tape.add(wx, uh);
    };
    NodeId r = tape.sigmoid(gate_pre(w_r_, u_r_, b_r_));
    NodeId u = tape.sigmoid(gate_pre(w_u_, u_u_, b_u_));
    NodeId uh_n = tape.affine(leaves.get(u_n_), h, leaves.get(b_hn_), hd, hd);
    NodeId wx_n = tape.affine(leaves.get(w_n_), x, leaves.get(b_n_), hd, input_);
    NodeId n = tape.tanh_op(tape.add(wx_n, tape.mul(r, uh_n)));
    NodeId keep = tape.mul(tape.scalar_affine(u, -1.0, 1.0), h);
    return tape.add(keep, tape.mul(u, n));
}

// ---------------------------------------------------------------------------
// GruEncoder

std::vector<double> GruEncoder::encode(const ParamStore& store,
                                       std::span<const std::vector<double>> sequence) const {
    if (sequence.empty()) throw std::invalid_argument("gru encode: empty sequence");
    std::vector<double> h(cell_.hidden_dim(), 0.0);
    std::vector<double> h_next(cell_.hidden_dim());
    for (const auto& x : sequence) {
        cell_.forward(store, x, h, h_next);
        std::swap(h, h_next);
    }
    return h;
}

NodeId GruEncoder::encode_tape(Tape& tape, std::span<const NodeId> sequence,
                               LeafMap& leaves) const {
    if (sequence.empty()) throw std::invalid_argument("gru encode: empty sequence");
    std::vector<double> zeros(cell_.hidden_dim(), 0.0);
    NodeId h = tape.constant(zeros);
    for (NodeId x : sequence) h = cell_.forward_tape(tape, x, h, leaves);
    return h;
}

}  // namespace pivoflow::nn

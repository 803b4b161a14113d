#pragma once
// Network building blocks over ParamStore + Tape: dense GELU MLPs (with
// forward-mode tangent propagation for exact Jacobian traces), a GRU cell and
// sequence encoder, and Fourier time embeddings.

#include <span>
#include <string>
#include <vector>

#include "pivoflow/nn/param_store.hpp"
#include "pivoflow/nn/tape.hpp"
#include "pivoflow/rng.hpp"

namespace pivoflow::nn {

// [sin(2^k pi t), cos(2^k pi t)] for k = 0 .. n_freqs-1, interleaved.
void fourier_embed(double t, int n_freqs, double* out);
std::vector<double> fourier_embed(double t, int n_freqs);

// Glorot-uniform fill: uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)).
void init_glorot(Tensor& t, int fan_in, int fan_out, CounterStream& stream);

// Per-tape cache of parameter-tensor leaves. Grad mode is fixed at
// construction: tensor-owned buffers, a flat shadow buffer (registration
// -order layout), or frozen (no gradient accumulation).
class LeafMap {
public:
    LeafMap(Tape& tape, ParamStore& store);                              // own grads
    LeafMap(Tape& tape, const ParamStore& store, std::span<double> shadow);  // shadow grads
    LeafMap(Tape& tape, const ParamStore& store, std::nullptr_t);        // frozen

    NodeId get(int tensor_idx);

private:
    Tape* tape_;
    const ParamStore* store_;
    ParamStore* mutable_store_ = nullptr;
    double* shadow_ = nullptr;
    std::vector<NodeId> cache_;
};

struct MlpSpec {
    int in_dim = 1;
    int hidden = 64;
    int depth = 3;  // hidden layers; 0 = single affine
    int out_dim = 1;
};

// Affine -> GELU per hidden layer, final affine with no activation.
class MlpNet {
public:
    MlpNet() = default;
    MlpNet(ParamStore& store, const std::string& prefix, MlpSpec spec);
    void init(ParamStore& store, CounterStream& stream) const;

    const MlpSpec& spec() const { return spec_; }

    void forward(const ParamStore& store, std::span<const double> in,
                 std::span<double> out) const;
    // Values plus any number of directional derivatives in one pass.
    void forward_jvp(const ParamStore& store, std::span<const double> in,
                     std::span<const double* const> tangents_in, std::span<double> out,
                     std::span<double* const> tangents_out) const;

    NodeId forward_tape(Tape& tape, NodeId input, LeafMap& leaves) const;
    struct JvpNodes {
        NodeId value = -1;
        std::vector<NodeId> tangents;
    };
    JvpNodes forward_jvp_tape(Tape& tape, NodeId input, std::span<const NodeId> tangents,
                              LeafMap& leaves) const;

private:
    MlpSpec spec_;
    std::vector<int> w_idx_;
    std::vector<int> b_idx_;
};

// Single GRU cell, spec'd recurrence:
//   r = sigmoid(W_r x + b_r + U_r h)
//   u = sigmoid(W_u x + b_u + U_u h)
//   n = tanh(W_n x + b_n + r ⊙ (U_n h + b_hn))
//   h' = (1 - u) ⊙ h + u ⊙ n
class GruCell {
public:
    GruCell() = default;
    GruCell(ParamStore& store, const std::string& prefix, int input_dim, int hidden_dim);
    void init(ParamStore& store, CounterStream& stream) const;

    int hidden_dim() const { return hidden_; }
    int input_dim() const { return input_; }

    void forward(const ParamStore& store, std::span<const double> x,
                 std::span<const double> h, std::span<double> h_out) const;
    NodeId forward_tape(Tape& tape, NodeId x, NodeId h, LeafMap& leaves) const;

private:
    int input_ = 0, hidden_ = 0;
    int w_r_ = -1, u_r_ = -1, b_r_ = -1;
    int w_u_ = -1, u_u_ = -1, b_u_ = -1;
    int w_n_ = -1, u_n_ = -1, b_n_ = -1, b_hn_ = -1;
};

// Runs the cell over a sequence from h = 0 and returns the final hidden state.
class GruEncoder {
public:
    GruEncoder() = default;
    GruEncoder(ParamStore& store, const std::string& prefix, int input_dim, int hidden_dim)
        : cell_(store, prefix, input_dim, hidden_dim) {}
    void init(ParamStore& store, CounterStream& stream) const { cell_.init(store, stream); }

    const GruCell& cell() const { return cell_; }

    std::vector<double> encode(const ParamStore& store,
                               std::span<const std::vector<double>> sequence) const;
    NodeId encode_tape(Tape& tape, std::span<const NodeId> sequence, LeafMap& leaves) const;

private:
    GruCell cell_;
};

}  // namespace pivoflow::nn

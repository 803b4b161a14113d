#pragma once
// Conditional continuous normalizing flow: a time-conditioned MLP drift with
// exact divergence (two forward-mode directional derivatives, recorded on the
// tape during training so likelihood gradients flow through them), the
// bidirectional flow map with log-density accounting, and Stage-1 training.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pivoflow/flow_sim.hpp"
#include "pivoflow/integrators.hpp"
#include "pivoflow/nn/layers.hpp"
#include "pivoflow/nn/optim.hpp"

namespace pivoflow {

enum class ContextFeature { X0, Alpha, D };

std::vector<ContextFeature> parse_context_features(const std::string& tokens);
std::string context_features_to_string(std::span<const ContextFeature> features);
int context_dim_for(std::span<const ContextFeature> features);

struct CnfArch {
    int hidden = 64;
    int depth = 3;
    int embed_freqs = 4;
    std::vector<ContextFeature> features{ContextFeature::Alpha, ContextFeature::D};

    int context_dim() const { return context_dim_for(features); }
    int input_dim() const { return 2 + 2 * embed_freqs + context_dim(); }
};

struct CnfTrainConfig {
    int batch_size = 512;
    int epochs = 8;
    double lr = 0.002;
    double lr_min = 1e-5;
    double weight_decay = 1e-4;
    int warmup_steps = 1000;
    int limit = 1024;  // samples per epoch; 0 = all
    std::string objective = "mle";  // or "endpoint_mse"
    StepMethod int_method = StepMethod::RK4;
    int int_steps = 24;
    std::uint64_t seed = 7;
};

struct CnfTrainLog {
    std::vector<double> epoch_loss;
};

class CnfModel {
public:
    CnfModel() = default;
    static CnfModel create(const CnfArch& arch, std::uint64_t init_seed);

    const CnfArch& arch() const { return arch_; }
    int context_dim() const { return arch_.context_dim(); }
    bool frozen() const { return frozen_; }
    void freeze() { frozen_ = true; }

    // Conditioning vector for one trajectory, standardized with stats fitted
    // on the training bundle (constant features keep std 1).
    std::vector<double> raw_context(const TrajectoryBundle& bundle, int traj) const;
    std::vector<double> context_for(const TrajectoryBundle& bundle, int traj) const;
    void fit_context_stats(const TrajectoryBundle& bundle);

    Vec2 drift(Vec2 z, double t, std::span<const double> ctx) const;
    double divergence(Vec2 z, double t, std::span<const double> ctx) const;
    Mat2 drift_jacobian(Vec2 z, double t, std::span<const double> ctx) const;

    struct DriftDiv {
        Vec2 u;
        double div;
    };
    // Value and exact divergence from one pass (value + two tangents).
    DriftDiv drift_div(Vec2 z, double t, std::span<const double> ctx) const;

    struct MapResult {
        Vec2 point;
        double dlogp = 0.0;
    };
    // t: 0 -> 1; dlogp = integral of -div along the path.
    MapResult forward_map(Vec2 z0, std::span<const double> ctx, StepMethod method,
                          int n_steps) const;
    // t: 1 -> 0; dlogp is the raw reverse-time accumulation (equals minus the
    // forward dlogp along the same path).
    MapResult inverse_map(Vec2 x, std::span<const double> ctx, StepMethod method,
                          int n_steps) const;
    // Joint (z, logp) states for diagnostics; forward direction.
    std::vector<State<3>> forward_path(Vec2 z0, std::span<const double> ctx, StepMethod method,
                                       int n_steps) const;

    double log_prob(Vec2 x, std::span<const double> ctx, StepMethod method = StepMethod::RK4,
                    int n_steps = 100) const;
    Vec2 sample_one(std::span<const double> ctx, CounterStream& stream,
                    StepMethod method = StepMethod::RK4, int n_steps = 100) const;

    // Tape-recorded drift for the VSDE rollout (frozen or trainable leaves
    // depending on how `leaves` was built).
    nn::NodeId drift_tape(nn::Tape& tape, nn::NodeId z, double t, nn::NodeId ctx,
                          nn::LeafMap& leaves) const;

    nn::ParamStore& store() { return store_; }
    const nn::ParamStore& store() const { return store_; }
    const nn::MlpNet& net() const { return net_; }
    std::string checksum() const { return store_.checksum(); }

    void save(const std::filesystem::path& dir, const std::string& objective) const;
    static CnfModel load(const std::filesystem::path& dir);

private:
    CnfArch arch_;
    nn::ParamStore store_;
    nn::MlpNet net_;
    std::vector<double> ctx_mean_;
    std::vector<double> ctx_std_;
    bool frozen_ = false;

    void build_input(Vec2 z, double t, std::span<const double> ctx,
                     std::vector<double>& buf) const;
};

CnfModel train_cnf(const TrajectoryBundle& bundle, const CnfArch& arch,
                   const CnfTrainConfig& cfg, CnfTrainLog* log, int n_threads = 1);

// Tape-recorded training objectives, exposed for gradient checks.
nn::NodeId cnf_nll_tape(nn::Tape& tape, const CnfModel& model, nn::LeafMap& leaves, Vec2 x,
                        std::span<const double> ctx, StepMethod method, int n_steps);
nn::NodeId cnf_endpoint_mse_tape(nn::Tape& tape, const CnfModel& model, nn::LeafMap& leaves,
                                 Vec2 z0, Vec2 x_target, std::span<const double> ctx,
                                 StepMethod method, int n_steps);

}  // namespace pivoflow

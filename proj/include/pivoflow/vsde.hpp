#pragma once
// Variational SDE on a frozen CNF drift: GRU trajectory encoder with Gaussian
// posterior heads, a posterior drift net emitting control + diffusion
// correction, guard rails (soft validity weight, control clamp), the
// physics-informed ELBO, Stage-2 training (discretize-then-optimize through
// the fixed-grid rollout) and ensemble inference.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pivoflow/cnf.hpp"
#include "pivoflow/flow_sim.hpp"
#include "pivoflow/integrators.hpp"
#include "pivoflow/nn/layers.hpp"

namespace pivoflow {

struct GuardrailConfig {
    double radius = 1.0;  // R
    double alpha = 1.0;   // sharpness (named alpha_g elsewhere in configs)
    double u_max = 10.0;

    void validate() const;
};

// gamma(z) = exp(-alpha * max(|z| - R, 0)^2), in (0, 1].
double guardrail_weight(Vec2 z, const GuardrailConfig& cfg);

// Componentwise sign(u) * min(|u|, u_max).
Vec2 clamp_control(Vec2 u, double u_max);

// KL(N(mu, diag sigma^2) || N(0, I)) = 1/2 sum(mu^2 + sigma^2 - 1 - 2 log sigma).
double kl_gaussian(Vec2 mu, Vec2 sigma);

// z0 = mu + sigma ⊙ eps.
inline Vec2 reparameterize(Vec2 mu, Vec2 sigma, Vec2 eps) {
    return {mu.x + sigma.x * eps.x, mu.y + sigma.y * eps.y};
}

struct ElboWeights {
    double lambda_kl = 1.0;
    double lambda_u = 1.0;
    double lambda_phys = 0.1;
    double lambda_pde = 0.01;
    double sigma_obs = 0.05;
    double rho = 1.0;
    double c_p = 1.0;
    double k_thermal = 0.01;
    double phi_visc = 0.0;
    double stencil_h = 0.05;
};

// --- scalar loss pieces (tape-free reference forms, used by tests and eval) ---

// Mean over particles of sum_k |u_k|^2 dt.
double control_cost(std::span<const std::vector<Vec2>> controls, double dt);

// Per-step kinetic proxy E_k = 0.5 rho |z_{k+1} - z_k|^2; loss = mean over k
// of (E_{k+1} - E_k)^2, averaged over particles. Paths need >= 3 states.
double energy_loss(std::span<const std::vector<Vec2>> paths, double rho);

// Mean squared residual of rho c_p (dT/dt + u . grad T) = k lap T + phi along
// each path, with T the field's speed-energy proxy, backward differences in
// time and central differences (stencil width h) in space.
double pde_residual_loss(std::span<const std::vector<Vec2>> paths, const FlowFieldSpec& field,
                         const ElboWeights& w, double dt_phys, double h);

// Guardrail-weighted mean over particles of the Gaussian path log-likelihood.
// gamma_bar holds each particle's mean per-step validity weight.
double reconstruction_loglik(std::span<const std::vector<Vec2>> decoded,
                             std::span<const Vec2> observed, double sigma_obs,
                             std::span<const double> gamma_bar);

struct ElboComponents {
    double recon_loglik = 0.0;
    double kl = 0.0;
    double control = 0.0;
    double energy = 0.0;
    double pde = 0.0;
};

// Loss to minimize: -recon + l_kl*kl + l_u*control + l_phys*energy + l_pde*pde.
// Throws NumericError naming the first non-finite component.
double elbo_loss(const ElboComponents& c, const ElboWeights& w);

// ---------------------------------------------------------------------------

struct VsdeArch {
    int gru_hidden = 32;
    int ctx_dim = 16;
    int hidden = 64;
    int depth = 3;
    int embed_freqs = 4;

    int posterior_in_dim() const { return 2 + 2 * embed_freqs + ctx_dim; }
};

struct VsdeTrainConfig {
    VsdeArch arch;
    int batch_size = 2048;
    int epochs = 50;
    double lr = 0.01;
    double lr_min = 1e-5;
    double weight_decay = 1e-4;
    int warmup_steps = 1000;
    int particles = 64;  // latent samples per trajectory
    int steps = 120;     // rollout grid intervals
    int limit = 0;       // trajectories per epoch; 0 = all
    bool learnable_diffusion = true;
    double init_log_g0 = -4.6051701859880914;  // log(0.01)
    std::string encoder_input = "prefix";      // or "full"
    double prefix_fraction = 0.25;
    std::uint64_t seed = 11;
    ElboWeights weights;
    // Guardrail: radius <= 0 means fit from training states (1.1 x max norm).
    double guardrail_radius = 0.0;
    double guardrail_alpha = 1.0;
    double u_max = 10.0;
};

struct PosteriorOutput {
    Vec2 mu;
    Vec2 sigma;  // exp(logsig) clamped to [1e-4, 10]
    std::vector<double> ctx;
};

struct RolloutRecord {
    std::vector<Vec2> controls;      // clamped, one per interval
    std::vector<double> gammas;      // per state, length steps + 1
    std::vector<double> g_corrs;     // softplus outputs, one per interval
    double gamma_bar() const;
};

class VsdeModel {
public:
    VsdeModel() = default;
    static VsdeModel create(const VsdeArch& arch, const GuardrailConfig& guard,
                            double init_log_g0, std::uint64_t init_seed);

    const VsdeArch& arch() const { return arch_; }
    const GuardrailConfig& guardrail() const { return guard_; }
    GuardrailConfig& guardrail() { return guard_; }

    void set_backbone(const CnfModel* cnf) { backbone_ = cnf; }
    const CnfModel* backbone() const { return backbone_; }

    double log_g0() const;
    double diffusion_scale(double t, double span = 1.0) const;  // g(t)
    // Scale handed to the Euler-Maruyama attachment:
    // sqrt(2 g(t)) * (1 + 0.5 tanh(g_corr)).
    double noise_scale(double t, double g_corr, double span = 1.0) const;

    // Encoder over (x, y, t) features on the rollout grid.
    PosteriorOutput encode_posterior(std::span<const Vec2> observed,
                                     std::span<const double> times) const;

    struct DriftOut {
        Vec2 u_raw;     // before clamping
        double g_corr;  // softplus(raw)
    };
    DriftOut posterior_drift(Vec2 z, double t, std::span<const double> ctx) const;

    // Combined rollout drift f_theta + clamp(u_phi) as one callable.
    Vec2 combined_drift(Vec2 z, double t, std::span<const double> flow_ctx,
                        std::span<const double> post_ctx) const;
    // Exact Jacobian of the combined drift wrt z (two directional derivatives).
    Mat2 combined_jacobian(Vec2 z, double t, std::span<const double> flow_ctx,
                           std::span<const double> post_ctx) const;

    // Inference rollout on the fixed grid. stream supplies one Gaussian pair
    // per interval; pass diffusion_on = false to suppress noise entirely (no
    // draws are consumed then).
    PathResult rollout(Vec2 z0, std::span<const double> post_ctx,
                       std::span<const double> flow_ctx, const TimeGrid& grid, StepMethod method,
                       CounterStream* stream, bool diffusion_on, RolloutRecord* record) const;

    nn::ParamStore& store() { return store_; }
    const nn::ParamStore& store() const { return store_; }
    const nn::GruEncoder& encoder() const { return encoder_; }
    const nn::MlpNet& posterior_net() const { return post_net_; }

    void save(const std::filesystem::path& dir) const;
    // Loads and wires the backbone; throws IoError::ChecksumMismatch when the
    // stored CNF reference does not match `cnf`.
    static VsdeModel load(const std::filesystem::path& dir, const CnfModel* cnf);

    // Tape-side pieces (used by training and gradient tests).
    struct EncodeNodes {
        nn::NodeId mu, sigma, ctx;
    };
    EncodeNodes encode_tape(nn::Tape& tape, std::span<const Vec2> observed,
                            std::span<const double> times, nn::LeafMap& leaves) const;

    friend class VsdeTrainer;

private:
    VsdeArch arch_;
    GuardrailConfig guard_;
    nn::ParamStore store_;
    nn::GruEncoder encoder_;
    nn::MlpNet post_net_;
    int w_mu_ = -1, b_mu_ = -1, w_sig_ = -1, b_sig_ = -1, w_ctx_ = -1, b_ctx_ = -1;
    int log_g0_ = -1;
    const CnfModel* backbone_ = nullptr;
};

struct VsdeTrainLog {
    std::vector<double> epoch_loss;
    std::vector<ElboComponents> epoch_components;
    std::vector<double> epoch_max_jacobian_eig;
};

VsdeModel train_vsde(const TrajectoryBundle& bundle, const CnfModel& cnf,
                     const VsdeTrainConfig& cfg, VsdeTrainLog* log, int n_threads = 1);

// Full ELBO for a set of trajectories as a tape scalar; shared by training and
// the finite-difference gradient suite. Noise is drawn deterministically from
// (noise_seed, trajectory index, particle index). lambda_phys/lambda_pde are
// the ramped effective weights.
struct ElboTapeSpec {
    const TrajectoryBundle* bundle = nullptr;
    std::span<const int> traj_indices;
    int steps = 0;
    int particles = 0;
    int enc_points = 0;
    bool diffusion_on = true;
    std::uint64_t noise_seed = 0;
    ElboWeights weights;
    double lambda_phys_eff = 0.0;
    double lambda_pde_eff = 0.0;
};
nn::NodeId vsde_elbo_tape(nn::Tape& tape, const VsdeModel& model, const CnfModel& cnf,
                          nn::LeafMap& vsde_leaves, nn::LeafMap& cnf_leaves,
                          const ElboTapeSpec& spec, ElboComponents* components);

struct EnsembleResult {
    // [particle][step] decoded states
    std::vector<std::vector<Vec2>> paths;
    std::vector<double> gamma_bar;  // per surviving particle
    std::vector<int> particle_ids;  // original indices of survivors
    std::vector<Vec2> mean_path;
    std::vector<double> spread;     // per-step RMS distance from the mean
    int diverged = 0;
};

// n_particles rollouts from the encoded posterior of one observed trajectory.
EnsembleResult infer_ensemble(const VsdeModel& model, std::span<const Vec2> observed,
                              std::span<const double> times, std::span<const double> flow_ctx,
                              int n_particles, const TimeGrid& grid, StepMethod method,
                              std::uint64_t stream_seed, std::uint64_t stream_base,
                              bool diffusion_on = true);

}  // namespace pivoflow
